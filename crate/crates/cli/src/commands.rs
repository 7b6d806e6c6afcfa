use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use sdem_core::corpus::{self, Corpus, CorpusFormat, Document, Vocabulary};
use sdem_core::eval::{self, evaluate_epoch, EpochMetrics, FamilyView};
use sdem_core::expfam::LabeledInstance;
use sdem_core::gnb::{self, GaussianNb, GnbState, SpreadReading};
use sdem_core::lda::{self, GibbsConfig, LdaState, LdaView};
use sdem_core::mnb::{self, MnbPrior, MnbState};
use sdem_core::persist::{ModelBody, ModelFile, ModelKind};
use sdem_core::{Loss, TrainConfig};

use crate::manifest::{DataSource, PriorMode, RunManifest, RunOutputs};
use crate::{
    EvalArgs, Failure, FormatArg, LossArg, ModelArg, PriorArg, RerunArgs, SpreadArg, ToyGenArgs, TrainArgs,
};

pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

const TOY_LAMBDA: f64 = 1e-3;
const TEXT_LAMBDA: f64 = 1e-5;
const TOY_EPOCHS: usize = 50;
const TEXT_EPOCHS: usize = 10;
const DEFAULT_TOPICS: usize = 2;

type CmdResult<T = ()> = std::result::Result<T, Failure>;

fn model_kind(m: ModelArg) -> ModelKind {
    match m {
        ModelArg::Gnb => ModelKind::Gnb,
        ModelArg::Mnb => ModelKind::Mnb,
        ModelArg::Lda => ModelKind::Lda,
    }
}

fn corpus_format(f: FormatArg) -> CorpusFormat {
    match f {
        FormatArg::LabelTokens => CorpusFormat::LabelTokens,
        FormatArg::LabelCounts => CorpusFormat::LabelCounts,
    }
}

fn spread_reading(s: SpreadArg) -> SpreadReading {
    match s {
        SpreadArg::Stddev => SpreadReading::StdDev,
        SpreadArg::Variance => SpreadReading::Variance,
    }
}

/// Manifests record absolute paths so that `rerun` works from any directory.
fn absolute(path: &Path) -> CmdResult<PathBuf> {
    fs::canonicalize(path).map_err(|e| Failure {
        code: crate::EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })
}

/// Checks flag combinations and fills in model-dependent defaults.
pub fn resolve(args: &TrainArgs) -> CmdResult<RunManifest> {
    let kind = model_kind(args.model);
    let loss = match args.loss {
        LossArg::Nll => Loss::Nll,
        LossArg::Ncll => Loss::Ncll,
        LossArg::Hinge => Loss::Hinge,
    };
    if args.topics.is_some() && kind != ModelKind::Lda {
        return Err(Failure::usage("--topics applies to --model lda only"));
    }
    if args.eta.is_some() && kind != ModelKind::Lda {
        return Err(Failure::usage("--eta applies to --model lda only"));
    }
    let is_gnb = kind == ModelKind::Gnb;
    if !is_gnb && (args.toy || args.spread.is_some()) {
        return Err(Failure::usage("--toy and --spread apply to --model gnb only"));
    }

    let (prior, data, spread) = if is_gnb {
        let prior = match args.prior {
            None | Some(PriorArg::GnbDefault) => PriorMode::GnbDefault,
            Some(_) => return Err(Failure::usage("--model gnb takes --prior gnb-default")),
        };
        let data = match (args.toy, &args.train) {
            (true, None) => {
                if args.test.is_some() {
                    return Err(Failure::usage("--toy generates its own test draw; drop --test"));
                }
                if args.toy_samples == 0 {
                    return Err(Failure::usage("--toy-samples must be positive"));
                }
                DataSource::Toy {
                    samples: args.toy_samples,
                }
            }
            (false, Some(train)) => DataSource::Files {
                train: absolute(train)?,
                test: args.test.as_deref().map(absolute).transpose()?,
                format: None,
            },
            (true, Some(_)) => return Err(Failure::usage("--toy and --train are mutually exclusive")),
            (false, None) => return Err(Failure::usage("--model gnb needs --toy or --train")),
        };
        let spread = args.spread.map(spread_reading).unwrap_or_default();
        (prior, data, Some(spread))
    } else {
        let prior = match (kind, args.prior) {
            (ModelKind::Lda, None) => PriorMode::TopicEta,
            (ModelKind::Lda, Some(_)) => return Err(Failure::usage("--model lda sets its prior with --eta")),
            (_, None | Some(PriorArg::P1)) => PriorMode::P1,
            (_, Some(PriorArg::P2)) => PriorMode::P2,
            (_, Some(PriorArg::GnbDefault)) => {
                return Err(Failure::usage("--prior gnb-default applies to --model gnb only"))
            }
        };
        let Some(train) = &args.train else {
            return Err(Failure::usage(format!("--model {kind} needs --train")));
        };
        let data = DataSource::Files {
            train: absolute(train)?,
            test: args.test.as_deref().map(absolute).transpose()?,
            format: Some(corpus_format(args.format)),
        };
        (prior, data, None)
    };

    let topics = match kind {
        ModelKind::Lda => {
            let z = args.topics.unwrap_or(DEFAULT_TOPICS);
            if z == 0 {
                return Err(Failure::usage("--topics must be positive"));
            }
            Some(z)
        }
        _ => None,
    };
    let is_lda = kind == ModelKind::Lda;
    let eta = match (is_lda, args.eta) {
        (true, Some(eta)) if !(eta > 0.0 && eta.is_finite()) => {
            return Err(Failure::usage("--eta must be positive"))
        }
        (true, eta) => Some(eta.unwrap_or(lda::DEFAULT_ETA)),
        (false, _) => None,
    };
    Ok(RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        model: kind,
        loss,
        lambda: args
            .lambda
            .unwrap_or(if is_gnb { TOY_LAMBDA } else { TEXT_LAMBDA }),
        epochs: args
            .epochs
            .unwrap_or(if is_gnb { TOY_EPOCHS } else { TEXT_EPOCHS }),
        seed: args.seed,
        prior,
        alpha: None,
        eta,
        topics,
        gibbs_train: is_lda.then_some(GibbsConfig::TRAIN),
        gibbs_eval: is_lda.then_some(GibbsConfig::EVAL),
        spread,
        data,
        record_time: args.record_time,
        outputs: None,
    })
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let manifest = resolve(args)?;
    execute(manifest, &args.out_dir)
}

pub fn rerun(args: &RerunArgs) -> CmdResult {
    let text = fs::read_to_string(&args.manifest)?;
    let mut manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("cannot read manifest {}: {e}", args.manifest.display())))?;
    if manifest.code_version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest was written by version {}, running {}",
            manifest.code_version,
            env!("CARGO_PKG_VERSION")
        );
    }
    manifest.code_version = env!("CARGO_PKG_VERSION").to_string();
    manifest.alpha = None;
    manifest.outputs = None;
    execute(manifest, &args.out_dir)
}

struct Trained {
    file: ModelFile,
    metrics: Vec<EpochMetrics>,
    outputs: RunOutputs,
}

fn execute(mut manifest: RunManifest, out_dir: &Path) -> CmdResult {
    let config = TrainConfig::new(manifest.loss, manifest.lambda, manifest.epochs, manifest.seed);
    config.validate()?;
    let trained = match manifest.model {
        ModelKind::Gnb => train_gnb(&manifest, &config)?,
        ModelKind::Mnb | ModelKind::Lda => train_text(&mut manifest, &config)?,
    };
    let mut metrics = trained.metrics;
    if !manifest.record_time {
        // Keeps metrics.csv a pure function of the manifest.
        metrics.iter_mut().for_each(|m| m.wall_seconds = 0.0);
    }
    manifest.outputs = Some(trained.outputs);

    fs::create_dir_all(out_dir)?;
    trained.file.save(&out_dir.join(MODEL_FILE))?;
    let mut csv = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    eval::write_metrics_csv(&mut csv, &manifest.csv_metadata(), &metrics)?;
    csv.flush()?;
    let json = serde_json::to_string_pretty(&manifest).map_err(sdem_core::Error::from)?;
    fs::write(out_dir.join(MANIFEST_FILE), json + "\n")?;

    if let Some(last) = metrics.last() {
        log::info!(
            "epoch {}: accuracy {:.4}, ncll {:.6}, hinge {:.6}",
            last.epoch,
            last.heldout_accuracy,
            last.train_ncll,
            last.train_hinge
        );
    }
    Ok(())
}

fn read_toy_file(path: &Path) -> CmdResult<Vec<LabeledInstance<f64>>> {
    let data = gnb::read_toy_sample(BufReader::new(File::open(path)?))?;
    if data.is_empty() {
        return Err(Failure::usage(format!("{} holds no samples", path.display())));
    }
    Ok(data)
}

fn toy_draws(seed: u64, samples: usize, spread: SpreadReading) -> (Vec<LabeledInstance<f64>>, Vec<LabeledInstance<f64>>) {
    let (train_seed, test_seed) = gnb::toy_seeds(seed);
    (
        gnb::toy_generator(samples, train_seed, spread),
        gnb::toy_generator(samples, test_seed, spread),
    )
}

fn train_gnb(manifest: &RunManifest, config: &TrainConfig) -> CmdResult<Trained> {
    let spread = manifest.spread.unwrap_or_default();
    let (train, test) = match &manifest.data {
        DataSource::Toy { samples } => {
            let (train, test) = toy_draws(manifest.seed, *samples, spread);
            (train, Some(test))
        }
        DataSource::Files { train, test, .. } => {
            let test = test.as_deref().map(read_toy_file).transpose()?;
            (read_toy_file(train)?, test)
        }
    };
    let run = gnb::train(&train, config, test.as_deref())?;
    Ok(Trained {
        file: ModelFile::gnb(GnbState::from_mu(&run.state.mu), spread, manifest.seed),
        metrics: run.trace.epochs,
        outputs: RunOutputs {
            steps: run.trace.steps,
            train_docs: train.len(),
            test_docs: test.map_or(0, |t| t.len()),
            num_classes: 2,
            vocab_size: 0,
        },
    })
}

fn load_corpus(path: &Path, format: CorpusFormat) -> CmdResult<Corpus> {
    let corpus = corpus::parse_corpus(path, format)?;
    if corpus.is_empty() {
        return Err(Failure::usage(format!("{} holds no documents", path.display())));
    }
    Ok(corpus)
}

fn names(v: &Vocabulary) -> Vec<String> {
    v.iter().map(str::to_string).collect()
}

fn train_text(manifest: &mut RunManifest, config: &TrainConfig) -> CmdResult<Trained> {
    let DataSource::Files { train, test, format } = &manifest.data else {
        return Err(Failure::usage("text models read their data from --train"));
    };
    let format = format.unwrap_or(CorpusFormat::LabelTokens);
    let train = load_corpus(train, format)?;
    let test = match test {
        Some(p) => Some(corpus::apply_vocabulary(
            &load_corpus(p, format)?,
            &train.vocab,
            &train.labels,
        )?),
        None => None,
    };
    let (k, w) = (train.num_classes(), train.vocab_size());
    if w == 0 {
        return Err(Failure::usage("training corpus has an empty vocabulary"));
    }
    let mnb_prior = match manifest.prior {
        PriorMode::P1 => Some(MnbPrior::P1),
        PriorMode::P2 => Some(MnbPrior::P2),
        _ => None,
    };
    let heldout = test.as_ref().map(|t| t.docs.as_slice());
    let (vocab, labels) = (names(&train.vocab), names(&train.labels));

    let (file, metrics, steps) = match manifest.model {
        ModelKind::Mnb => {
            let prior = mnb_prior.ok_or_else(|| Failure::usage("--model mnb takes --prior p1 or p2"))?;
            let alpha = prior.alpha(w)?;
            manifest.alpha = Some(alpha);
            let run = mnb::train(&train.docs, MnbState::new(k, w, alpha)?, config, heldout)?;
            (ModelFile::mnb(&run.state, vocab, labels, manifest.seed), run.epochs, run.steps)
        }
        _ => {
            let topics = manifest.topics.unwrap_or(DEFAULT_TOPICS);
            let gibbs_train = manifest.gibbs_train.unwrap_or(GibbsConfig::TRAIN);
            let gibbs_eval = manifest.gibbs_eval.unwrap_or(GibbsConfig::EVAL);
            let eta = manifest.eta.unwrap_or(lda::DEFAULT_ETA);
            let state = LdaState::new(k, topics, w, eta)?;
            let run = lda::train(&train.docs, state, config, gibbs_train, gibbs_eval, heldout)?;
            (
                ModelFile::lda(&run.state, gibbs_eval, vocab, labels, manifest.seed),
                run.epochs,
                run.steps,
            )
        }
    };
    Ok(Trained {
        file,
        metrics,
        outputs: RunOutputs {
            steps,
            train_docs: train.len(),
            test_docs: test.map_or(0, |t| t.len()),
            num_classes: k,
            vocab_size: w,
        },
    })
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let file = ModelFile::load(&args.model_file)?;
    let kind = model_kind(args.model);
    if file.kind() != kind {
        return Err(Failure::usage(format!(
            "{} holds a {} model, not {kind}",
            args.model_file.display(),
            file.kind()
        )));
    }
    let seed = eval::eval_seed(file.seed);
    let metrics = match &file.body {
        ModelBody::Gnb(body) => {
            let data = match (&args.test, args.toy) {
                (Some(p), false) => read_toy_file(p)?,
                (None, true) => toy_draws(file.seed, args.toy_samples, body.spread).1,
                (Some(_), true) => return Err(Failure::usage("--toy and --test are mutually exclusive")),
                (None, false) => return Err(Failure::usage("eval needs --test or --toy")),
            };
            if data.is_empty() {
                return Err(Failure::usage("test sample is empty"));
            }
            let params = gnb::gnb_m_step(&body.state)?;
            let view = FamilyView::new(&GaussianNb, &params, seed);
            (data.len(), evaluate_epoch(0, &data, None, &view, 0.0))
        }
        ModelBody::Mnb(dump) => {
            let data = text_split(args, &file)?;
            let state = MnbState::from_dump(dump.clone())?;
            (data.len(), evaluate_epoch(0, &data, None, &state, 0.0))
        }
        ModelBody::Lda(body) => {
            let data = text_split(args, &file)?;
            let state = LdaState::from_dump(body.state.clone())?;
            let view = LdaView {
                state: &state,
                cfg: body.eval_gibbs,
                seed,
            };
            (data.len(), evaluate_epoch(0, &data, None, &view, 0.0))
        }
    };
    print_metrics(kind, metrics.0, &metrics.1)?;
    Ok(())
}

fn text_split(args: &EvalArgs, file: &ModelFile) -> CmdResult<Vec<LabeledInstance<Document>>> {
    if args.toy {
        return Err(Failure::usage("--toy applies to gnb models only"));
    }
    let Some(path) = &args.test else {
        return Err(Failure::usage("eval needs --test"));
    };
    let raw = corpus::parse_corpus(path, corpus_format(args.format))?;
    if raw.is_empty() {
        return Err(Failure::usage(format!("{} holds no documents", path.display())));
    }
    let vocab = Vocabulary::from_words(file.vocab.iter().cloned());
    let labels = Vocabulary::from_words(file.labels.iter().cloned());
    Ok(corpus::apply_vocabulary(&raw, &vocab, &labels)?.docs)
}

fn print_metrics(kind: ModelKind, docs: usize, m: &EpochMetrics) -> io::Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "model {kind}")?;
    writeln!(out, "documents {docs}")?;
    writeln!(out, "accuracy {}", m.heldout_accuracy)?;
    writeln!(out, "ncll {}", m.train_ncll)?;
    writeln!(out, "hinge {}", m.train_hinge)?;
    writeln!(out, "perplexity {}", m.train_perplexity)?;
    writeln!(out, "norm_perplexity {}", m.norm_perplexity)?;
    Ok(())
}

pub fn toy_gen(args: &ToyGenArgs) -> CmdResult {
    let (train_seed, test_seed) = gnb::toy_seeds(args.seed);
    let seed = if args.test_draw { test_seed } else { train_seed };
    let sample = gnb::toy_generator(args.n, seed, spread_reading(args.spread));
    match &args.out {
        Some(path) => {
            let mut out = BufWriter::new(File::create(path)?);
            gnb::write_toy_sample(&mut out, &sample)?;
            out.flush()?;
        }
        None => {
            let mut out = BufWriter::new(io::stdout().lock());
            gnb::write_toy_sample(&mut out, &sample)?;
            out.flush()?;
        }
    }
    Ok(())
}
