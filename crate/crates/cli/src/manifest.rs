use std::path::PathBuf;

use sdem_core::corpus::CorpusFormat;
use sdem_core::gnb::SpreadReading;
use sdem_core::lda::GibbsConfig;
use sdem_core::persist::ModelKind;
use sdem_core::Loss;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    P1,
    P2,
    GnbDefault,
    /// Symmetric topic-word prior `eta` of the LDA classifier.
    TopicEta,
}

impl std::fmt::Display for PriorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorMode::P1 => "p1",
            PriorMode::P2 => "p2",
            PriorMode::GnbDefault => "gnb-default",
            PriorMode::TopicEta => "topic-eta",
        })
    }
}

/// Where the training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// Toy draws regenerated from the run seed.
    Toy { samples: usize },
    Files {
        train: PathBuf,
        test: Option<PathBuf>,
        /// Corpus format; absent for toy sample files.
        format: Option<CorpusFormat>,
    },
}

/// Fully resolved configuration of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub model: ModelKind,
    pub loss: Loss,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub prior: PriorMode,
    /// Resolved Dirichlet pseudo-count per word (mnb).
    pub alpha: Option<f64>,
    /// Topic-word prior (lda).
    #[serde(default)]
    pub eta: Option<f64>,
    pub topics: Option<usize>,
    pub gibbs_train: Option<GibbsConfig>,
    pub gibbs_eval: Option<GibbsConfig>,
    pub spread: Option<SpreadReading>,
    pub data: DataSource,
    pub record_time: bool,
    /// Summary of the finished run; ignored by `rerun`.
    #[serde(default)]
    pub outputs: Option<RunOutputs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub steps: u64,
    pub train_docs: usize,
    pub test_docs: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
}

impl RunManifest {
    fn prior_label(&self) -> String {
        match (self.prior, self.eta) {
            (PriorMode::TopicEta, Some(eta)) => format!("eta={eta}"),
            (mode, _) => mode.to_string(),
        }
    }

    /// `# key: value` lines for metrics.csv.
    pub fn csv_metadata(&self) -> Vec<(String, String)> {
        let mut meta = vec![
            ("model".to_string(), self.model.to_string()),
            ("loss".to_string(), self.loss.to_string()),
            ("lambda".to_string(), self.lambda.to_string()),
            ("epochs".to_string(), self.epochs.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("prior".to_string(), self.prior_label()),
            (
                "topics".to_string(),
                self.topics.map_or_else(|| "-".to_string(), |z| z.to_string()),
            ),
        ];
        if let Some(g) = self.gibbs_eval {
            meta.push((
                "gibbs_eval".to_string(),
                format!("burn_in={} samples={}", g.burn_in, g.samples),
            ));
        }
        if let Some(s) = self.spread {
            meta.push(("spread".to_string(), s.to_string()));
        }
        meta
    }
}
