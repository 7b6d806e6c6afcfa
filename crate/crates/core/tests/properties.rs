use proptest::prelude::*;

use sdem_core::categorical::JointCategorical;
use sdem_core::corpus::{self, CorpusFormat, Document};
use sdem_core::engine::{epoch_order, LearningRateSchedule};
use sdem_core::eval::{read_metrics_csv, write_metrics_csv, EpochMetrics};
use sdem_core::expfam::{softmax, ModelFamily};
use sdem_core::gnb::{gnb_check, gnb_m_step, GaussianNb, GnbState};
use sdem_core::lda::{GibbsConfig, LdaState, StepStreams};
use sdem_core::mnb::MnbState;
use sdem_core::multinomial::MultinomialNb;
use sdem_core::Loss;

const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"];

fn loss_strategy() -> impl Strategy<Value = Loss> {
    prop_oneof![Just(Loss::Nll), Just(Loss::Ncll), Just(Loss::Hinge)]
}

fn doc_strategy(vocab: u32) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0..vocab, 0..12)
}

proptest! {
    #[test]
    fn schedule_is_positive_and_non_increasing(lambda in 1e-6f64..10.0, steps in 1usize..500) {
        let mut s = LearningRateSchedule::new(lambda).unwrap();
        let mut prev = s.rho();
        prop_assert_eq!(prev, 1.0);
        for _ in 0..steps {
            s.advance();
            prop_assert!(s.rho() > 0.0 && s.rho() <= prev);
            prev = s.rho();
        }
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 0usize..200, seed: u64, epoch in 0u64..50) {
        let mut order = epoch_order(n, seed, epoch);
        prop_assert_eq!(order.clone(), epoch_order(n, seed, epoch));
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn gnb_check_step_restores_feasibility(
        n in prop::array::uniform2(-5.0f64..5.0),
        s in prop::array::uniform2(-50.0f64..50.0),
        v in prop::array::uniform2(-50.0f64..50.0),
        floor in 1e-9f64..0.1,
    ) {
        let mut st = GnbState { n, s, v };
        gnb_check(&mut st, floor);
        prop_assert!(st.n.iter().all(|&x| x >= floor));
        prop_assert!(gnb_m_step(&st).is_ok());
        let mu = st.to_mu();
        prop_assert!(GaussianNb.is_feasible(&mu));

        // A feasible state is a fixed point of the projection.
        let mut again = st;
        gnb_check(&mut again, floor);
        prop_assert_eq!(again, st);
    }

    #[test]
    fn categorical_check_step_restores_feasibility(
        mu in prop::collection::vec(-1.0f64..1.5, 5),
        floor in 1e-9f64..0.5,
    ) {
        let model = JointCategorical::new(2, 3).unwrap();
        let mut mu = mu;
        model.check_step(&mut mu, floor);
        prop_assert!(model.is_feasible(&mu), "{:?}", mu);
    }

    #[test]
    fn multinomial_check_step_restores_feasibility(
        mu in prop::collection::vec(-3.0f64..3.0, 8),
        floor in 1e-9f64..0.1,
    ) {
        let model = MultinomialNb::new(2, 3).unwrap();
        let mut mu = mu;
        model.check_step(&mut mu, floor);
        prop_assert!(model.is_feasible(&mu));
    }

    #[test]
    fn mnb_updates_keep_state_coherent(
        steps in prop::collection::vec((loss_strategy(), 0usize..3, doc_strategy(6), 0.001f64..1.0), 1..60),
    ) {
        let mut state = MnbState::new(3, 6, 0.5).unwrap();
        for (loss, y, tokens, rho) in steps {
            let doc = Document::from_tokens(tokens);
            state.update(loss, y, &doc, rho, 20).unwrap();
            prop_assert!(state.coherence_error() < 1e-9);
            // Raw counts are clamped at zero; smoothing keeps the estimates positive.
            prop_assert!(state.gamma() > 0.0);
            prop_assert!(state.c().iter().all(|&c| c >= 0.0), "{:?}", state.c());
            for k in 0..3 {
                prop_assert!(state.n_row(k).iter().all(|&v| v >= 0.0));
            }
            let p = state.finalize().posterior(&doc).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lda_updates_keep_state_coherent(
        steps in prop::collection::vec((loss_strategy(), 0usize..2, doc_strategy(5), 0.01f64..1.0), 1..8),
        seed: u64,
    ) {
        let mut state = LdaState::new(2, 2, 5, 0.5).unwrap();
        let cfg = GibbsConfig::new(2, 3).unwrap();
        for (t, (loss, y, tokens, rho)) in steps.into_iter().enumerate() {
            let doc = Document::from_tokens(tokens);
            let streams = StepStreams { seed, t: t as u64, doc: 0, cfg };
            state.step(loss, y, &doc, rho, 10, &streams).unwrap();
            prop_assert!(state.coherence_error() < 1e-9);
            prop_assert!(state.gamma() > 0.0);
            prop_assert!(state.c().iter().all(|&c| c >= 0.0));
        }
    }

    #[test]
    fn softmax_is_a_distribution(scores in prop::collection::vec(-800.0f64..800.0, 1..10)) {
        let p = softmax(&scores).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn corpus_round_trips_through_counts_format(
        lines in prop::collection::vec((0usize..3, prop::collection::vec(0usize..WORDS.len(), 0..10)), 1..20),
    ) {
        let text: String = lines
            .iter()
            .map(|(label, words)| {
                let mut line = format!("class{label}");
                for &w in words {
                    line.push(' ');
                    line.push_str(WORDS[w]);
                }
                line + "\n"
            })
            .collect();
        let parsed = corpus::parse_str(&text, CorpusFormat::LabelTokens).unwrap();
        let mut out = Vec::new();
        corpus::write_corpus(&mut out, &parsed).unwrap();
        let reparsed = corpus::parse_str(std::str::from_utf8(&out).unwrap(), CorpusFormat::LabelCounts).unwrap();
        prop_assert_eq!(reparsed, parsed);
    }

    #[test]
    fn metrics_csv_round_trips(
        rows in prop::collection::vec(prop::array::uniform7(-1e6f64..1e6), 0..10),
    ) {
        let rows: Vec<EpochMetrics> = rows
            .iter()
            .enumerate()
            .map(|(i, v)| EpochMetrics {
                epoch: i + 1,
                train_ncll: v[0],
                train_hinge: v[1],
                norm_perplexity: v[2],
                train_perplexity: v[3],
                test_perplexity: v[4],
                heldout_accuracy: v[5],
                wall_seconds: v[6],
            })
            .collect();
        let mut buf = Vec::new();
        let meta = vec![("model".to_string(), "mnb".to_string())];
        write_metrics_csv(&mut buf, &meta, &rows).unwrap();
        prop_assert_eq!(read_metrics_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), rows);
    }
}
