//! Synthetic bag-of-words corpora drawn from multinomial naive Bayes models.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::corpus::{Corpus, Document, Vocabulary};
use crate::error::{Error, Result};
use crate::expfam::LabeledInstance;
use crate::rng::{self, tag, StreamRng};

/// A class-correlated word repeated many times in a document. Naive Bayes
/// counts every repetition as independent evidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Burst {
    /// Probability that a document carries its own class's burst word.
    pub agreement: f64,
    pub min_repeat: u32,
    pub max_repeat: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    /// Topical vocabulary, excluding burst words.
    pub vocab_size: usize,
    pub docs: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Weight of the class-specific component in each class's word distribution.
    pub separation: f64,
    /// Dirichlet concentration of the shared and class-specific components.
    pub concentration: f64,
    pub burst: Option<Burst>,
}

impl SynthConfig {
    /// 200 two-class documents over 20 words.
    pub fn fixed_point() -> Self {
        Self {
            num_classes: 2,
            vocab_size: 20,
            docs: 200,
            min_len: 30,
            max_len: 120,
            separation: 0.5,
            concentration: 1.0,
            burst: None,
        }
    }

    /// 500 three-class documents with overlapping classes.
    pub fn tradeoff() -> Self {
        Self {
            num_classes: 3,
            vocab_size: 500,
            docs: 500,
            min_len: 10,
            max_len: 40,
            separation: 0.25,
            concentration: 0.5,
            burst: None,
        }
    }

    /// Weakly informative words plus one repeated burst word per document.
    pub fn misspecified(docs: usize) -> Self {
        Self {
            num_classes: 3,
            vocab_size: 100,
            docs,
            min_len: 10,
            max_len: 30,
            separation: 0.3,
            concentration: 0.5,
            burst: Some(Burst {
                agreement: 0.55,
                min_repeat: 15,
                max_repeat: 30,
            }),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.vocab_size == 0 {
            return Err(Error::config("synthetic corpus needs classes and words"));
        }
        if self.min_len > self.max_len {
            return Err(Error::config("min_len exceeds max_len"));
        }
        if !(0.0..=1.0).contains(&self.separation) || !(self.concentration > 0.0) {
            return Err(Error::config("separation must lie in [0, 1] and concentration be positive"));
        }
        if let Some(b) = self.burst {
            if !(0.0..=1.0).contains(&b.agreement) || b.min_repeat == 0 || b.min_repeat > b.max_repeat {
                return Err(Error::config("invalid burst settings"));
            }
        }
        Ok(())
    }

    pub fn total_vocab(&self) -> usize {
        self.vocab_size + if self.burst.is_some() { self.num_classes } else { 0 }
    }
}

/// The generating model and its sample.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    /// `word_probs[k][w]` over the topical vocabulary.
    pub word_probs: Vec<Vec<f64>>,
}

fn dirichlet(dim: usize, concentration: f64, rng: &mut StreamRng) -> Vec<f64> {
    let g = Gamma::new(concentration, 1.0).expect("positive shape");
    let mut v: Vec<f64> = (0..dim).map(|_| g.sample(rng).max(1e-12)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn draw(probs: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws a labeled corpus. The model comes from `seed`; `sample` selects an
/// independent draw of documents from the same model.
pub fn generate(cfg: &SynthConfig, seed: u64, sample: u64) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut model_rng = rng::stream(seed, &[tag::SYNTH, 0]);
    let shared = dirichlet(cfg.vocab_size, cfg.concentration, &mut model_rng);
    let word_probs: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let own = dirichlet(cfg.vocab_size, cfg.concentration, &mut model_rng);
            shared
                .iter()
                .zip(&own)
                .map(|(s, o)| (1.0 - cfg.separation) * s + cfg.separation * o)
                .collect()
        })
        .collect();

    let mut rng = rng::stream(seed, &[tag::SYNTH, 1, sample]);
    let mut docs = Vec::with_capacity(cfg.docs);
    for _ in 0..cfg.docs {
        let y = rng.random_range(0..cfg.num_classes);
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut tokens: Vec<u32> = (0..len).map(|_| draw(&word_probs[y], &mut rng) as u32).collect();
        if let Some(b) = cfg.burst {
            let owner = if cfg.num_classes == 1 || rng.random_bool(b.agreement) {
                y
            } else {
                let other = rng.random_range(0..cfg.num_classes - 1);
                if other >= y { other + 1 } else { other }
            };
            let reps = rng.random_range(b.min_repeat..=b.max_repeat);
            tokens.extend(std::iter::repeat_n((cfg.vocab_size + owner) as u32, reps as usize));
        }
        docs.push(LabeledInstance::new(y, Document::from_tokens(tokens)));
    }

    let vocab = Vocabulary::from_words(
        (0..cfg.vocab_size)
            .map(|w| format!("w{w}"))
            .chain((0..if cfg.burst.is_some() { cfg.num_classes } else { 0 }).map(|k| format!("burst{k}"))),
    );
    let labels = Vocabulary::from_words((0..cfg.num_classes).map(|k| format!("c{k}")));
    Ok(SynthCorpus {
        corpus: Corpus {
            docs,
            vocab,
            labels,
            skipped_lines: 0,
        },
        word_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = SynthConfig::misspecified(50);
        let a = generate(&cfg, 3, 0).unwrap();
        let b = generate(&cfg, 3, 0).unwrap();
        assert_eq!(a.corpus.docs, b.corpus.docs);
        let c = generate(&cfg, 3, 1).unwrap();
        assert_ne!(a.corpus.docs, c.corpus.docs);
        assert_eq!(a.word_probs, c.word_probs);
        assert_eq!(a.corpus.vocab.len(), cfg.total_vocab());
        for d in &a.corpus.docs {
            assert!(d.label < 3);
            assert!(d.x.max_word().unwrap() < cfg.total_vocab() as u32);
            let burst: u32 = (0..3).map(|k| d.x.count(100 + k)).sum();
            assert!((15..=30).contains(&burst));
        }
        for p in &a.word_probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
