use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use complab::abtest;
use complab::model::load_model;
use complab::pipeline::{self, ExperimentConfig, BPE_TRANSFORMER, NGRAM, TRANSFORMER};
use complab::ranker::{self, AcceptanceLog, ServeOptions};

#[derive(Parser)]
#[command(name = "complab", version, about = "Code-completion experiments on synthetic corpora")]
struct Cli {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in settings used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Default)]
    profile: Profile,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Default,
    /// Test-size Transformer on full-size corpora.
    Test,
    Quick,
}

#[derive(Args)]
struct Out {
    /// Artifact directory; a manifest.json is written into it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Corpus {
    /// Dataset directory written by `build-corpus`.
    #[arg(long)]
    data: PathBuf,
    /// Training corpus: committed, completion, edit, union or recent.
    #[arg(long, default_value = "committed")]
    corpus: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate committed, completion and edit corpora.
    Datagen {
        #[command(flatten)]
        out: Out,
        /// Files per corpus.
        #[arg(long)]
        files: Option<usize>,
    },
    /// Split corpora and build budgeted training and evaluation sets.
    BuildCorpus {
        /// Directory written by `datagen`.
        #[arg(long)]
        corpora: PathBuf,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        eval_examples: Option<usize>,
    },
    /// Build a whole-token vocabulary.
    TrainVocab {
        #[command(flatten)]
        corpus: Corpus,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        max_size: Option<usize>,
    },
    /// Learn a BPE merge list.
    TrainBpe {
        #[command(flatten)]
        corpus: Corpus,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Train a Kneser-Ney n-gram model.
    TrainNgram {
        #[command(flatten)]
        corpus: Corpus,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        order: Option<usize>,
    },
    /// Train a Transformer on whole tokens or BPE subtokens.
    TrainTransformer {
        #[command(flatten)]
        corpus: Corpus,
        #[command(flatten)]
        out: Out,
        #[arg(long)]
        bpe: bool,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Evaluate every model × training corpus × evaluation set.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: Out,
        #[arg(long, value_delimiter = ',', default_value = "ngram,transformer")]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "committed,completion,edit,union")]
        train: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "committed,completion")]
        eval: Vec<String>,
        /// Where trained models are cached; defaults to <out>/models.
        #[arg(long)]
        models_dir: Option<PathBuf>,
    },
    /// Write OOV, length and token-kind tables.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `evaluate`.
        #[arg(long)]
        results: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Rank candidates over stdin/stdout or TCP, one JSON object per line.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = ranker::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = ranker::DEFAULT_MAX_PROMOTE)]
        max_promote: usize,
        /// Acceptance log (JSON lines), appended to.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Listen address such as 127.0.0.1:7070 instead of stdin.
        #[arg(long)]
        listen: Option<String>,
        #[arg(long, default_value = "ranking")]
        experiment: String,
    },
    /// Aggregate an acceptance log and compare groups.
    Abtest {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "committed")]
        control: String,
        #[command(flatten)]
        out: Out,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => match cli.profile {
            Profile::Default => ExperimentConfig::default(),
            Profile::Test => ExperimentConfig::test_profile(),
            Profile::Quick => ExperimentConfig::quick(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn finish(dir: &Path, stage: &str, cfg: &ExperimentConfig) -> Result<()> {
    let m = pipeline::write_manifest(dir, stage, cfg)?;
    log::info!("{stage}: {} artifacts in {}", m.artifacts.len(), dir.display());
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Datagen { out, files } => {
            if let Some(n) = files {
                for p in [&mut cfg.committed, &mut cfg.completion, &mut cfg.edit] {
                    p.files = n;
                }
            }
            mkdir(&out.out)?;
            let c = pipeline::generate_corpora(&cfg)?;
            pipeline::write_corpora(&out.out, &c)?;
            finish(&out.out, "datagen", &cfg)
        }
        Command::BuildCorpus { corpora, out, budget, eval_examples } => {
            if budget.is_some() {
                cfg.token_budget = budget;
            }
            if let Some(n) = eval_examples {
                cfg.eval_examples = n;
            }
            mkdir(&out.out)?;
            let c = pipeline::read_corpora(&corpora)?;
            let d = pipeline::build_datasets(&cfg, &c)?;
            pipeline::write_datasets(&out.out, &d)?;
            finish(&out.out, "build-corpus", &cfg)
        }
        Command::TrainVocab { corpus, out, max_size } => {
            let set = pipeline::read_training_set(&corpus.data, &corpus.corpus)?;
            mkdir(&out.out)?;
            let v = pipeline::build_vocab(&set, max_size.unwrap_or(cfg.ngram_vocab_size))?;
            v.save(&out.out.join(format!("{}.vocab.tsv", corpus.corpus)))?;
            finish(&out.out, "train-vocab", &cfg)
        }
        Command::TrainBpe { corpus, out, vocab_size } => {
            if let Some(n) = vocab_size {
                cfg.bpe_vocab_size = n;
            }
            let set = pipeline::read_training_set(&corpus.data, &corpus.corpus)?;
            mkdir(&out.out)?;
            pipeline::train_bpe_model(&cfg, &set)?.save(&out.out.join(format!("{}.bpe", corpus.corpus)))?;
            finish(&out.out, "train-bpe", &cfg)
        }
        Command::TrainNgram { corpus, out, order } => {
            if let Some(n) = order {
                cfg.ngram_order = n;
            }
            let set = pipeline::read_training_set(&corpus.data, &corpus.corpus)?;
            pipeline::train_and_save(&cfg, NGRAM, &set, &out.out)?;
            finish(&out.out, "train-ngram", &cfg)
        }
        Command::TrainTransformer { corpus, out, bpe, max_epochs } => {
            if let Some(n) = max_epochs {
                cfg.train.max_epochs = n;
            }
            let set = pipeline::read_training_set(&corpus.data, &corpus.corpus)?;
            let model = if bpe { BPE_TRANSFORMER } else { TRANSFORMER };
            pipeline::train_and_save(&cfg, model, &set, &out.out)?;
            finish(&out.out, "train-transformer", &cfg)
        }
        Command::Evaluate { data, out, models, train, eval, models_dir } => {
            let d = pipeline::read_datasets(&data)?;
            mkdir(&out.out)?;
            let models_dir = models_dir.unwrap_or_else(|| out.out.join("models"));
            let m = pipeline::evaluate_matrix(&cfg, &d, &models, &train, &eval, &models_dir)?;
            pipeline::write_matrix(&out.out, &m)?;
            for c in &m.cells {
                println!("{:<16} {:<11} {:<11} top1 {:.4}  mrr {:.4}  n {}", c.model, c.train, c.eval, c.top1, c.mrr, c.n);
            }
            finish(&out.out, "evaluate", &cfg)
        }
        Command::Analyze { data, results, out } => {
            let d = pipeline::read_datasets(&data)?;
            let m = results.as_deref().map(pipeline::read_matrix).transpose()?;
            mkdir(&out.out)?;
            pipeline::analyze(&cfg, &d, m.as_ref())?.write_dir(&out.out)?;
            finish(&out.out, "analyze", &cfg)
        }
        Command::Serve { model, threshold, max_promote, log, listen, experiment } => {
            if !model.exists() {
                bail!("model file not found: {}", model.display());
            }
            let m = load_model(&model).with_context(|| format!("loading model {}", model.display()))?;
            let mut opts = ServeOptions {
                experiment_id: experiment,
                ..ServeOptions::default()
            };
            opts.rank.threshold = threshold;
            opts.rank.max_promote = max_promote;
            let log = log.as_deref().map(AcceptanceLog::open).transpose()?;
            match listen {
                Some(addr) => {
                    let l = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                    eprintln!("listening on {}", l.local_addr()?);
                    ranker::serve_tcp(m.as_ref(), &opts, log.as_ref(), l, None)?;
                }
                None => {
                    let stdin = std::io::stdin();
                    let stats = ranker::serve(m.as_ref(), &opts, log.as_ref(), BufReader::new(stdin.lock()), std::io::stdout())?;
                    log::info!("{stats:?}");
                }
            }
            Ok(())
        }
        Command::Abtest { log, control, out } => {
            let agg = abtest::aggregate_file(&log)?;
            if agg.skipped > 0 {
                log::warn!("skipped {} malformed log records", agg.skipped);
            }
            let reports = abtest::compare_all(&agg.observations, &control)?;
            mkdir(&out.out)?;
            write_json(&out.out.join("abtest.json"), &reports)?;
            let f = std::fs::File::create(out.out.join("abtest.csv"))?;
            abtest::write_csv(&reports, f)?;
            let mut stdout = std::io::stdout().lock();
            for r in &reports {
                writeln!(
                    stdout,
                    "{} vs {}: improvement {:.3} p {:.3}",
                    r.experiment.group, r.control.group, r.improvement, r.p_value
                )?;
            }
            finish(&out.out, "abtest", &cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
