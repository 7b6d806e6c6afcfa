//! Python bindings: fit and apply sdEM text classifiers and run the toy model.

use std::collections::HashMap;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use sdem_core::corpus::{Document, Vocabulary};
use sdem_core::eval::{self, EpochMetrics};
use sdem_core::expfam::{argmax, LabeledInstance};
use sdem_core::gnb::{self, SpreadReading};
use sdem_core::lda::{self, GibbsConfig, LdaState};
use sdem_core::mnb::{self, MnbPrior, MnbState};
use sdem_core::persist::{ModelBody, ModelFile};
use sdem_core::{Error, Loss, TrainConfig};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric { .. } | Error::Feasibility { .. } => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn metrics_dict(m: &EpochMetrics) -> HashMap<&'static str, f64> {
    HashMap::from([
        ("epoch", m.epoch as f64),
        ("train_ncll", m.train_ncll),
        ("train_hinge", m.train_hinge),
        ("norm_perplexity", m.norm_perplexity),
        ("train_perplexity", m.train_perplexity),
        ("test_perplexity", m.test_perplexity),
        ("heldout_accuracy", m.heldout_accuracy),
        ("wall_seconds", m.wall_seconds),
    ])
}

/// Multinomial naive Bayes (`model="mnb"`, prior `p1` or `p2`) or the LDA
/// classifier (`model="lda"`, topic-word prior `eta`) over token lists.
#[pyclass(module = "sdem", frozen)]
struct TextClassifier {
    file: ModelFile,
    vocab: Vocabulary,
    metrics: Vec<EpochMetrics>,
}

impl TextClassifier {
    fn from_file(file: ModelFile, metrics: Vec<EpochMetrics>) -> PyResult<Self> {
        if matches!(file.body, ModelBody::Gnb(_)) {
            return Err(PyValueError::new_err("not a text model"));
        }
        let vocab = Vocabulary::from_words(file.vocab.iter().cloned());
        Ok(Self { file, vocab, metrics })
    }

    /// Known tokens only; unseen ones are dropped as in held-out evaluation.
    fn encode(&self, tokens: &[String]) -> Document {
        Document::from_tokens(tokens.iter().filter_map(|t| self.vocab.id(&t.to_lowercase())))
    }

    fn posterior(&self, doc: &Document) -> PyResult<Vec<f64>> {
        match &self.file.body {
            ModelBody::Mnb(dump) => {
                let state = MnbState::from_dump(dump.clone()).map_err(py_err)?;
                mnb::mnb_posterior(doc, &state).map_err(py_err)
            }
            ModelBody::Lda(body) => {
                let state = LdaState::from_dump(body.state.clone()).map_err(py_err)?;
                lda::lda_posterior(doc, &state, &body.eval_gibbs, eval::eval_seed(self.file.seed)).map_err(py_err)
            }
            ModelBody::Gnb(_) => unreachable!("rejected in from_file"),
        }
    }
}

#[pymethods]
impl TextClassifier {
    #[staticmethod]
    #[pyo3(signature = (docs, labels, model = "mnb", loss = "ncll", lam = 1e-5, epochs = 10, seed = 0, prior = "p1", topics = 2, eta = lda::DEFAULT_ETA))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        py: Python<'_>,
        docs: Vec<Vec<String>>,
        labels: Vec<String>,
        model: &str,
        loss: &str,
        lam: f64,
        epochs: usize,
        seed: u64,
        prior: &str,
        topics: usize,
        eta: f64,
    ) -> PyResult<Self> {
        if docs.len() != labels.len() {
            return Err(PyValueError::new_err("docs and labels differ in length"));
        }
        if docs.is_empty() {
            return Err(PyValueError::new_err("no training documents"));
        }
        let loss: Loss = loss.parse().map_err(py_err)?;
        let prior: MnbPrior = prior.parse().map_err(py_err)?;
        let mut vocab = Vocabulary::new();
        let mut label_set = Vocabulary::new();
        let data: Vec<LabeledInstance<Document>> = docs
            .iter()
            .zip(&labels)
            .map(|(tokens, label)| {
                let ids: Vec<u32> = tokens.iter().map(|t| vocab.intern(&t.to_lowercase())).collect();
                LabeledInstance::new(label_set.intern(label) as usize, Document::from_tokens(ids))
            })
            .collect();
        let (k, w) = (label_set.len(), vocab.len());
        if w == 0 {
            return Err(PyValueError::new_err("training documents contain no tokens"));
        }
        let alpha = prior.alpha(w).map_err(py_err)?;
        let config = TrainConfig::new(loss, lam, epochs, seed);
        let names = |v: &Vocabulary| v.iter().map(str::to_string).collect::<Vec<_>>();

        let (file, metrics) = py
            .detach(|| -> sdem_core::Result<_> {
                match model {
                    "mnb" => {
                        let run = mnb::train(&data, MnbState::new(k, w, alpha)?, &config, None)?;
                        Ok((ModelFile::mnb(&run.state, names(&vocab), names(&label_set), seed), run.epochs))
                    }
                    "lda" => {
                        let state = LdaState::new(k, topics, w, eta)?;
                        let run = lda::train(&data, state, &config, GibbsConfig::TRAIN, GibbsConfig::EVAL, None)?;
                        let file = ModelFile::lda(&run.state, GibbsConfig::EVAL, names(&vocab), names(&label_set), seed);
                        Ok((file, run.epochs))
                    }
                    other => Err(Error::Config(format!("unknown text model '{other}'"))),
                }
            })
            .map_err(py_err)?;
        Self::from_file(file, metrics)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Self::from_file(ModelFile::from_json(text).map_err(py_err)?, Vec::new())
    }

    fn to_json(&self) -> PyResult<String> {
        self.file.to_json().map_err(py_err)
    }

    #[getter]
    fn model(&self) -> String {
        self.file.kind().to_string()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.file.labels.clone()
    }

    #[getter]
    fn vocabulary(&self) -> Vec<String> {
        self.file.vocab.clone()
    }

    /// Per-epoch training metrics; empty for a model loaded from JSON.
    #[getter]
    fn metrics(&self) -> Vec<HashMap<&'static str, f64>> {
        self.metrics.iter().map(metrics_dict).collect()
    }

    fn predict_proba(&self, docs: Vec<Vec<String>>) -> PyResult<Vec<Vec<f64>>> {
        docs.iter().map(|d| self.posterior(&self.encode(d))).collect()
    }

    fn predict(&self, docs: Vec<Vec<String>>) -> PyResult<Vec<String>> {
        docs.iter()
            .map(|d| {
                let p = self.posterior(&self.encode(d))?;
                Ok(self.file.labels[argmax(&p)].clone())
            })
            .collect()
    }
}

fn spread(reading: &str) -> PyResult<SpreadReading> {
    reading.parse().map_err(py_err)
}

/// Toy sample as `(labels, xs)` with labels in `{-1, 1}`.
#[pyfunction]
#[pyo3(signature = (n, seed = 0, reading = "stddev", test_draw = false))]
fn toy_sample(n: usize, seed: u64, reading: &str, test_draw: bool) -> PyResult<(Vec<i8>, Vec<f64>)> {
    let (train_seed, test_seed) = gnb::toy_seeds(seed);
    let sample = gnb::toy_generator(n, if test_draw { test_seed } else { train_seed }, spread(reading)?);
    Ok(sample.iter().map(|i| (gnb::label_of_class(i.label), i.x)).unzip())
}

/// Trains the Gaussian toy model on a fresh draw and returns the final-epoch
/// metrics together with the test accuracy.
#[pyfunction]
#[pyo3(signature = (loss, lam = 1e-3, epochs = 50, seed = 0, samples = 30_000, reading = "stddev"))]
fn toy_experiment(
    py: Python<'_>,
    loss: &str,
    lam: f64,
    epochs: usize,
    seed: u64,
    samples: usize,
    reading: &str,
) -> PyResult<HashMap<&'static str, f64>> {
    let loss: Loss = loss.parse().map_err(py_err)?;
    let reading = spread(reading)?;
    let (train_seed, test_seed) = gnb::toy_seeds(seed);
    let out = py
        .detach(|| {
            let train = gnb::toy_generator(samples, train_seed, reading);
            let test = gnb::toy_generator(samples, test_seed, reading);
            let config = TrainConfig::new(loss, lam, epochs, seed);
            gnb::train(&train, &config, Some(&test)).map(|run| {
                let acc = gnb::accuracy(&run.trace.params, &test);
                (run.trace.epochs, acc)
            })
        })
        .map_err(py_err)?;
    let mut result = out.0.last().map(metrics_dict).unwrap_or_default();
    result.insert("accuracy", out.1);
    Ok(result)
}

#[pymodule]
fn sdem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TextClassifier>()?;
    m.add_function(wrap_pyfunction!(toy_sample, m)?)?;
    m.add_function(wrap_pyfunction!(toy_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
