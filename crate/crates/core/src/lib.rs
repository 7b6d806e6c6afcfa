//! Stochastic discriminative EM (sdEM) for exponential-family generative classifiers.
//!
//! The [`engine`] runs the online natural-gradient update on any
//! [`expfam::ModelFamily`]. Specialized trainers exist for the Gaussian naive
//! Bayes toy model ([`gnb`]), multinomial naive Bayes ([`mnb`]) and the
//! per-class LDA classifier ([`lda`]).

// `!(x > 0.0)` is used on purpose so that NaN fails validity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod categorical;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod eval;
pub mod expfam;
pub mod gnb;
pub mod lda;
pub mod losses;
pub mod mnb;
pub mod multinomial;
pub mod persist;
pub mod rng;
pub mod synth;

pub use engine::{sdem_train, TrainConfig};
pub use error::{Error, Result};
pub use expfam::{ConjugatePrior, ExpectationState, LabeledInstance, ModelFamily};
pub use losses::Loss;
