//! Versioned model files.
//!
//! A model file is a JSON object with `format_version`, `model`, the training
//! vocabulary and label names, the training seed, and a model-specific `body`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnb::{GnbState, SpreadReading};
use crate::lda::{GibbsConfig, LdaDump, LdaState};
use crate::mnb::{MnbDump, MnbState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gnb,
    Mnb,
    Lda,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Gnb => "gnb",
            ModelKind::Mnb => "mnb",
            ModelKind::Lda => "lda",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gnb" => Ok(ModelKind::Gnb),
            "mnb" => Ok(ModelKind::Mnb),
            "lda" => Ok(ModelKind::Lda),
            other => Err(Error::config(format!("unknown model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnbBody {
    pub state: GnbState,
    pub spread: SpreadReading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaBody {
    pub state: LdaDump,
    pub eval_gibbs: GibbsConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelBody {
    Gnb(GnbBody),
    Mnb(MnbDump),
    Lda(LdaBody),
}

impl ModelBody {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelBody::Gnb(_) => ModelKind::Gnb,
            ModelBody::Mnb(_) => ModelKind::Mnb,
            ModelBody::Lda(_) => ModelKind::Lda,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub vocab: Vec<String>,
    pub labels: Vec<String>,
    pub seed: u64,
    pub body: ModelBody,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    model: ModelKind,
    vocab: Vec<String>,
    labels: Vec<String>,
    seed: u64,
    body: serde_json::Value,
}

impl ModelFile {
    pub fn mnb(state: &MnbState, vocab: Vec<String>, labels: Vec<String>, seed: u64) -> Self {
        Self {
            vocab,
            labels,
            seed,
            body: ModelBody::Mnb(state.to_dump()),
        }
    }

    pub fn lda(state: &LdaState, eval_gibbs: GibbsConfig, vocab: Vec<String>, labels: Vec<String>, seed: u64) -> Self {
        Self {
            vocab,
            labels,
            seed,
            body: ModelBody::Lda(LdaBody {
                state: state.to_dump(),
                eval_gibbs,
            }),
        }
    }

    pub fn gnb(state: GnbState, spread: SpreadReading, seed: u64) -> Self {
        Self {
            vocab: Vec::new(),
            labels: vec!["-1".into(), "1".into()],
            seed,
            body: ModelBody::Gnb(GnbBody { state, spread }),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.body.kind()
    }

    pub fn to_json(&self) -> Result<String> {
        let body = match &self.body {
            ModelBody::Gnb(b) => serde_json::to_value(b)?,
            ModelBody::Mnb(b) => serde_json::to_value(b)?,
            ModelBody::Lda(b) => serde_json::to_value(b)?,
        };
        let env = Envelope {
            format_version: FORMAT_VERSION,
            model: self.kind(),
            vocab: self.vocab.clone(),
            labels: self.labels.clone(),
            seed: self.seed,
            body,
        };
        Ok(serde_json::to_string_pretty(&env)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Format("model file has no format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::Version {
                found: found as u32,
                expected: FORMAT_VERSION,
            });
        }
        let env: Envelope = serde_json::from_value(value)?;
        let body = match env.model {
            ModelKind::Gnb => ModelBody::Gnb(serde_json::from_value(env.body)?),
            ModelKind::Mnb => ModelBody::Mnb(serde_json::from_value(env.body)?),
            ModelKind::Lda => ModelBody::Lda(serde_json::from_value(env.body)?),
        };
        Ok(Self {
            vocab: env.vocab,
            labels: env.labels,
            seed: env.seed,
            body,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_each_kind() {
        let mut mnb = MnbState::new(2, 3, 1.0).unwrap();
        let doc = crate::corpus::Document::from_pairs([(0, 2), (2, 1)]).unwrap();
        mnb.ncll_update(0, &doc, 0.7, 3).unwrap();
        let files = [
            ModelFile::mnb(&mnb, vec!["a".into(), "b".into(), "c".into()], vec!["x".into(), "y".into()], 9),
            ModelFile::lda(&LdaState::new(2, 2, 3, 0.1).unwrap(), GibbsConfig::EVAL, vec![], vec![], 1),
            ModelFile::gnb(GnbState::from_mu(&[1.0, 1.0, 0.1, -0.3, 1.7, 2.2]), SpreadReading::StdDev, 4),
        ];
        for f in files {
            let back = ModelFile::from_json(&f.to_json().unwrap()).unwrap();
            assert_eq!(back, f);
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let f = ModelFile::gnb(GnbState::from_mu(&[1.0; 6]), SpreadReading::Variance, 0);
        let text = f.to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        assert!(matches!(
            ModelFile::from_json(&text),
            Err(Error::Version { found: 7, expected: 1 })
        ));
        assert!(matches!(ModelFile::from_json("{}"), Err(Error::Format(_))));
    }
}
