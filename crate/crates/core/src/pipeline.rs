//! End-to-end experiment stages shared by the command-line tool and the
//! acceptance tests: generate corpora, build datasets, train models,
//! evaluate the train × eval matrix and derive the analysis tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, AnalysisTables, CdfTableRow, KindRow, LengthBinRow, OovGroupRow};
use crate::bpe::{train_bpe, BpeModel};
use crate::corpus::{
    self, events_to_examples, filter_recent, read_events, read_file_corpus, sample_identifier_targets,
    split, write_events, write_file_corpus, CorpusKind, EvalExample, FileRecord, MAX_CONTEXT,
};
use crate::datagen::{self, default_profiles, derive_seed, edit_profile, DomainProfile, Generated};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, DEFAULT_CUTOFF};
use crate::lexer::{Token, TokenKind};
use crate::model::{load_model, BpeTransformerCompleter, CompletionModel, NgramCompleter, TransformerCompleter};
use crate::ngram::{NgramModel, DEFAULT_ORDER};
use crate::transformer::{train, TrainConfig, TrainLog, TransformerConfig};
use crate::vocab::Vocabulary;

pub const COMMITTED: &str = "committed";
pub const COMPLETION: &str = "completion";
pub const EDIT: &str = "edit";
pub const UNION: &str = "union";
pub const RECENT: &str = "recent";
pub const TRAIN_SETS: [&str; 5] = [COMMITTED, COMPLETION, EDIT, UNION, RECENT];
pub const EVAL_SETS: [&str; 2] = [COMMITTED, COMPLETION];

pub const NGRAM: &str = "ngram";
pub const TRANSFORMER: &str = "transformer";
pub const BPE_TRANSFORMER: &str = "bpe-transformer";
pub const MODELS: [&str; 3] = [NGRAM, TRANSFORMER, BPE_TRANSFORMER];

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub committed: DomainProfile,
    pub completion: DomainProfile,
    pub edit: DomainProfile,
    pub recent_days: i64,
    /// Training tokens per corpus; `None` uses the smallest corpus size.
    pub token_budget: Option<usize>,
    pub eval_examples: usize,
    pub ngram_vocab_size: usize,
    pub ngram_order: usize,
    pub transformer_vocab_size: usize,
    pub bpe_vocab_size: usize,
    pub context_len: usize,
    pub bpe_context_len: usize,
    pub beam_width: usize,
    /// Layer sizes and dropout; vocabulary size, context length and seed
    /// are filled in per training run.
    pub transformer: TransformerConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let (committed, completion) = default_profiles();
        ExperimentConfig {
            seed: 7,
            committed,
            completion,
            edit: edit_profile(),
            recent_days: datagen::RECENT_DAYS,
            token_budget: None,
            eval_examples: 1000,
            ngram_vocab_size: 100_000,
            ngram_order: DEFAULT_ORDER,
            transformer_vocab_size: 100_000,
            bpe_vocab_size: 10_000,
            context_len: MAX_CONTEXT,
            bpe_context_len: 300,
            beam_width: crate::model::DEFAULT_BEAM,
            transformer: TransformerConfig::desk(0, MAX_CONTEXT),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full-size corpora with the small Transformer. Its output layer is
    /// capped at 2000 tokens and it uses a higher learning rate, since a
    /// 16-wide model barely moves from the unigram at 6e-4 in 15 epochs.
    pub fn test_profile() -> Self {
        let mut c = ExperimentConfig::default();
        c.transformer = TransformerConfig::test_profile(0, MAX_CONTEXT);
        c.transformer_vocab_size = 2000;
        c.train.lr = 3e-3;
        c
    }

    /// Small settings that run the whole matrix in a minute or two.
    pub fn quick() -> Self {
        let mut c = ExperimentConfig::test_profile();
        for p in [&mut c.committed, &mut c.completion, &mut c.edit] {
            p.files = 400;
        }
        c.eval_examples = 300;
        c.transformer_vocab_size = 1000;
        c.bpe_vocab_size = 500;
        c.train.max_epochs = 2;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.committed.validate()?;
        self.completion.validate()?;
        self.edit.validate()?;
        if self.eval_examples == 0 {
            return Err(Error::Config("eval_examples must be positive".into()));
        }
        if self.context_len < 2 || self.bpe_context_len < 2 {
            return Err(Error::Config("context lengths must be at least 2".into()));
        }
        if self.token_budget == Some(0) {
            return Err(Error::Config("token_budget must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: ExperimentConfig = serde_json::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }
}

pub struct Corpora {
    pub committed: Generated,
    pub completion: Generated,
    pub edit: Generated,
}

pub fn generate_corpora(cfg: &ExperimentConfig) -> Result<Corpora> {
    cfg.validate()?;
    Ok(Corpora {
        committed: datagen::generate(&cfg.committed, derive_seed(cfg.seed, COMMITTED))?,
        completion: datagen::generate(&cfg.completion, derive_seed(cfg.seed, COMPLETION))?,
        edit: datagen::generate(&cfg.edit, derive_seed(cfg.seed, EDIT))?,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_corpora(dir: &Path, c: &Corpora) -> Result<()> {
    for (name, g) in [(COMMITTED, &c.committed), (COMPLETION, &c.completion), (EDIT, &c.edit)] {
        let d = dir.join(name);
        write_file_corpus(&d.join("files"), &g.files)?;
        write_events(&d.join("events.jsonl"), &g.events)?;
    }
    Ok(())
}

pub fn read_corpora(dir: &Path) -> Result<Corpora> {
    let read = |name: &str| -> Result<Generated> {
        let d = dir.join(name);
        Ok(Generated {
            files: read_file_corpus(&d.join("files"))?,
            events: read_events(&d.join("events.jsonl"))?,
        })
    };
    Ok(Corpora {
        committed: read(COMMITTED)?,
        completion: read(COMPLETION)?,
        edit: read(EDIT)?,
    })
}

/// Training and validation token-text sequences for one corpus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub name: String,
    pub train: Vec<Vec<String>>,
    pub valid: Vec<Vec<String>>,
}

impl TrainingSet {
    pub fn train_tokens(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Datasets {
    pub training: BTreeMap<String, TrainingSet>,
    pub eval: BTreeMap<String, Vec<EvalExample>>,
    pub budget: usize,
}

fn file_windows(files: &[FileRecord], window: usize) -> Vec<Vec<String>> {
    files
        .iter()
        .flat_map(|f| f.tokens.chunks(window).map(|c| c.iter().map(|t| t.text.clone()).collect()))
        .collect()
}

/// One sequence per event: the latest `window − 1` context tokens and the
/// accepted token.
fn event_windows(events: &[corpus::CompletionEvent], window: usize) -> Vec<Vec<String>> {
    events
        .iter()
        .map(|e| {
            let ctx = &e.context[e.context.len().saturating_sub(window - 1)..];
            ctx.iter().chain(std::iter::once(&e.accepted)).map(|t| t.text.clone()).collect()
        })
        .collect()
}

/// Keeps leading sequences until `budget` tokens; the last one is cut.
/// Pieces shorter than two tokens carry no prediction and are dropped.
pub fn truncate_to_budget(seqs: &[Vec<String>], budget: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut left = budget;
    for s in seqs {
        if left == 0 {
            break;
        }
        let take = s.len().min(left);
        if take >= 2 {
            out.push(s[..take].to_vec());
            left -= take;
        }
    }
    out
}

fn subsample(mut examples: Vec<EvalExample>, n: usize, seed: u64) -> Vec<EvalExample> {
    if examples.len() <= n {
        return examples;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = index::sample(&mut rng, examples.len(), n).into_vec();
    keep.sort_unstable();
    let keep: BTreeSet<usize> = keep.into_iter().collect();
    let mut i = 0;
    examples.retain(|_| {
        let k = keep.contains(&i);
        i += 1;
        k
    });
    examples
}

/// Splits every corpus 8:1:1, shuffles and cuts all training corpora to a
/// common token budget and samples the evaluation sets from the test splits.
pub fn build_datasets(cfg: &ExperimentConfig, c: &Corpora) -> Result<Datasets> {
    cfg.validate()?;
    let w = cfg.context_len;
    let committed = split(&c.committed.files, derive_seed(cfg.seed, "split-committed"));
    let events = split(&c.completion.events, derive_seed(cfg.seed, "split-completion"));
    let edit = split(&c.edit.files, derive_seed(cfg.seed, "split-edit"));
    let recent_train = filter_recent(&committed.train, cfg.recent_days, datagen::DATAGEN_NOW)?;
    let recent_valid = filter_recent(&committed.valid, cfg.recent_days, datagen::DATAGEN_NOW)?;

    let mut raw: BTreeMap<String, (Vec<Vec<String>>, Vec<Vec<String>>)> = BTreeMap::new();
    raw.insert(COMMITTED.into(), (file_windows(&committed.train, w), file_windows(&committed.valid, w)));
    raw.insert(COMPLETION.into(), (event_windows(&events.train, w), event_windows(&events.valid, w)));
    raw.insert(EDIT.into(), (file_windows(&edit.train, w), file_windows(&edit.valid, w)));
    raw.insert(RECENT.into(), (file_windows(&recent_train, w), file_windows(&recent_valid, w)));
    let size = |s: &[Vec<String>]| s.iter().map(Vec::len).filter(|&n| n >= 2).sum::<usize>();
    let smallest = [COMMITTED, COMPLETION, EDIT]
        .iter()
        .map(|n| size(&raw[*n].0))
        .min()
        .unwrap_or(0);
    let budget = cfg.token_budget.unwrap_or(smallest);
    let valid_budget = budget.div_ceil(8);
    let mut training: BTreeMap<String, TrainingSet> = BTreeMap::new();
    for (name, (mut tr, mut va)) in raw {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("budget-{name}")));
        tr.shuffle(&mut rng);
        va.shuffle(&mut rng);
        let train = truncate_to_budget(&tr, budget);
        let valid = truncate_to_budget(&va, valid_budget);
        training.insert(name.clone(), TrainingSet { name, train, valid });
    }
    // The union concatenates the two budgeted corpora, so it is twice as large.
    let union = TrainingSet {
        name: UNION.into(),
        train: corpus::union(&training[COMMITTED].train, &training[COMPLETION].train),
        valid: corpus::union(&training[COMMITTED].valid, &training[COMPLETION].valid),
    };
    training.insert(UNION.into(), union);
    for set in training.values() {
        if set.train.is_empty() || set.valid.is_empty() {
            log::warn!("training corpus {} is empty after budgeting", set.name);
        }
    }

    let n = cfg.eval_examples;
    let mut eval = BTreeMap::new();
    let sampled = sample_identifier_targets(&committed.test, n, derive_seed(cfg.seed, "eval-committed"), CorpusKind::Committed)?;
    eval.insert(COMMITTED.to_string(), sampled.examples);
    let (ex, skipped) = events_to_examples(&events.test);
    if skipped > 0 {
        log::info!("skipped {skipped} completion events without context");
    }
    eval.insert(COMPLETION.to_string(), subsample(ex, n, derive_seed(cfg.seed, "eval-completion")));
    Ok(Datasets { training, eval, budget })
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    context: Vec<String>,
    target: String,
    target_kind: TokenKind,
    source_kind: CorpusKind,
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for it in items {
        serde_json::to_writer(&mut w, &it)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path.display().to_string(), format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[EvalExample]) -> Result<()> {
    write_lines(
        path,
        examples.iter().map(|e| ExampleLine {
            context: e.context.iter().map(|t| t.text.clone()).collect(),
            target: e.target.text.clone(),
            target_kind: e.target.kind,
            source_kind: e.source_kind,
        }),
    )
}

pub fn read_examples(path: &Path) -> Result<Vec<EvalExample>> {
    Ok(read_lines::<ExampleLine>(path)?
        .into_iter()
        .map(|l| {
            let context = corpus::tokens_from_texts(&l.context);
            let offset = context.last().map_or(0, |t| t.byte_offset + t.text.len() + 1);
            EvalExample {
                context,
                target: Token::new(l.target, l.target_kind, offset),
                source_kind: l.source_kind,
            }
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct DatasetInfo {
    budget: usize,
    train_tokens: BTreeMap<String, usize>,
    eval_examples: BTreeMap<String, usize>,
}

pub fn write_datasets(dir: &Path, d: &Datasets) -> Result<()> {
    for (name, set) in &d.training {
        write_lines(&dir.join("train").join(format!("{name}.jsonl")), &set.train)?;
        write_lines(&dir.join("valid").join(format!("{name}.jsonl")), &set.valid)?;
    }
    for (name, ex) in &d.eval {
        write_examples(&dir.join("eval").join(format!("{name}.jsonl")), ex)?;
    }
    let info = DatasetInfo {
        budget: d.budget,
        train_tokens: d.training.iter().map(|(k, s)| (k.clone(), s.train_tokens())).collect(),
        eval_examples: d.eval.iter().map(|(k, e)| (k.clone(), e.len())).collect(),
    };
    let mut w = create(&dir.join("datasets.json"))?;
    serde_json::to_writer_pretty(&mut w, &info)?;
    w.write_all(b"\n").map_err(|e| Error::io(dir, e))?;
    w.flush().map_err(|e| Error::io(dir, e))
}

pub fn read_training_set(dir: &Path, name: &str) -> Result<TrainingSet> {
    Ok(TrainingSet {
        name: name.to_string(),
        train: read_lines(&dir.join("train").join(format!("{name}.jsonl")))?,
        valid: read_lines(&dir.join("valid").join(format!("{name}.jsonl")))?,
    })
}

pub fn read_eval_set(dir: &Path, name: &str) -> Result<Vec<EvalExample>> {
    read_examples(&dir.join("eval").join(format!("{name}.jsonl")))
}

pub fn read_datasets(dir: &Path) -> Result<Datasets> {
    let info: DatasetInfo = {
        let p = dir.join("datasets.json");
        serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?
    };
    let mut d = Datasets {
        budget: info.budget,
        ..Datasets::default()
    };
    for name in info.train_tokens.keys() {
        d.training.insert(name.clone(), read_training_set(dir, name)?);
    }
    for name in info.eval_examples.keys() {
        d.eval.insert(name.clone(), read_eval_set(dir, name)?);
    }
    Ok(d)
}

pub fn build_vocab(set: &TrainingSet, max_size: usize) -> Result<Vocabulary> {
    Vocabulary::build(set.train.iter().flatten().map(String::as_str), max_size)
}

fn encode_all(seqs: &[Vec<String>], vocab: &Vocabulary) -> Vec<Vec<u32>> {
    seqs.iter().map(|s| vocab.encode_texts(s.iter().map(String::as_str))).collect()
}

pub fn train_ngram(cfg: &ExperimentConfig, set: &TrainingSet) -> Result<NgramCompleter> {
    let vocab = build_vocab(set, cfg.ngram_vocab_size)?;
    let seqs = encode_all(&set.train, &vocab);
    Ok(NgramCompleter::new(NgramModel::train(&seqs, &vocab, cfg.ngram_order)?))
}

fn transformer_config(cfg: &ExperimentConfig, vocab_size: usize, context_len: usize, label: &str) -> TransformerConfig {
    TransformerConfig {
        vocab_size,
        context_len,
        seed: derive_seed(cfg.seed, label),
        ..cfg.transformer.clone()
    }
}

pub fn train_transformer(cfg: &ExperimentConfig, set: &TrainingSet) -> Result<(TransformerCompleter, TrainLog)> {
    let vocab = build_vocab(set, cfg.transformer_vocab_size)?;
    let train_ids = encode_all(&set.train, &vocab);
    let valid_ids = encode_all(&set.valid, &vocab);
    let tc = transformer_config(cfg, vocab.len(), cfg.context_len, &format!("transformer-{}", set.name));
    let (params, log) = train::<f32>(&tc, &cfg.train, &train_ids, &valid_ids)?;
    Ok((TransformerCompleter::new(params, vocab)?, log))
}

pub fn train_bpe_model(cfg: &ExperimentConfig, set: &TrainingSet) -> Result<BpeModel> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in set.train.iter().flatten() {
        *counts.entry(t.clone()).or_default() += 1;
    }
    train_bpe(&counts, cfg.bpe_vocab_size)
}

fn bpe_sequences(bpe: &BpeModel, seqs: &[Vec<String>], window: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for s in seqs {
        let ids: Vec<u32> = s.iter().flat_map(|t| bpe.encode_ids(t)).collect();
        out.extend(ids.chunks(window).filter(|c| c.len() >= 2).map(<[u32]>::to_vec));
    }
    out
}

pub fn train_bpe_transformer(
    cfg: &ExperimentConfig,
    set: &TrainingSet,
) -> Result<(BpeTransformerCompleter, TrainLog)> {
    let bpe = train_bpe_model(cfg, set)?;
    let w = cfg.bpe_context_len;
    let train_ids = bpe_sequences(&bpe, &set.train, w);
    let valid_ids = bpe_sequences(&bpe, &set.valid, w);
    let tc = transformer_config(cfg, bpe.num_symbols(), w, &format!("bpe-transformer-{}", set.name));
    let (params, log) = train::<f32>(&tc, &cfg.train, &train_ids, &valid_ids)?;
    Ok((BpeTransformerCompleter::new(params, bpe)?.with_beam(cfg.beam_width), log))
}

pub fn model_file(models_dir: &Path, model: &str, train: &str) -> PathBuf {
    let ext = if model == NGRAM { "json" } else { "bin" };
    models_dir.join(format!("{model}__{train}.{ext}"))
}

/// Trains `model` on `set` and saves it (plus a training log for
/// Transformers) under `models_dir`.
pub fn train_and_save(cfg: &ExperimentConfig, model: &str, set: &TrainingSet, models_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(models_dir).map_err(|e| Error::io(models_dir, e))?;
    let path = model_file(models_dir, model, &set.name);
    let log = match model {
        NGRAM => {
            train_ngram(cfg, set)?.model.save(&path)?;
            None
        }
        TRANSFORMER => {
            let (m, log) = train_transformer(cfg, set)?;
            m.save(&path)?;
            Some(log)
        }
        BPE_TRANSFORMER => {
            let (m, log) = train_bpe_transformer(cfg, set)?;
            m.save(&path)?;
            Some(log)
        }
        other => return Err(Error::InvalidArgument(format!("unknown model {other:?}"))),
    };
    if let Some(log) = log {
        let p = path.with_extension("log.json");
        let mut w = create(&p)?;
        serde_json::to_writer_pretty(&mut w, &log)?;
        w.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model: String,
    pub train: String,
    pub eval: String,
    pub top1: f64,
    pub mrr: f64,
    pub n: usize,
    #[serde(skip)]
    pub ranks: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub cells: Vec<Cell>,
}

impl ResultMatrix {
    pub fn get(&self, model: &str, train: &str, eval: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.train == train && c.eval == eval)
    }
}

fn check_names(names: &[String], allowed: &[&str], what: &str) -> Result<()> {
    for n in names {
        if !allowed.contains(&n.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown {what} {n:?}; expected one of {allowed:?}")));
        }
    }
    Ok(())
}

/// Evaluates each model trained on each training corpus against each
/// evaluation set. Models are loaded from `models_dir` when present and
/// trained (and saved there) otherwise.
pub fn evaluate_matrix(
    cfg: &ExperimentConfig,
    data: &Datasets,
    models: &[String],
    trains: &[String],
    evals: &[String],
    models_dir: &Path,
) -> Result<ResultMatrix> {
    check_names(models, &MODELS, "model")?;
    check_names(trains, &TRAIN_SETS, "training corpus")?;
    check_names(evals, &EVAL_SETS, "evaluation set")?;
    let mut out = ResultMatrix::default();
    for m in models {
        for t in trains {
            let set = data
                .training
                .get(t)
                .ok_or_else(|| Error::InvalidArgument(format!("no training corpus {t:?}")))?;
            let path = model_file(models_dir, m, t);
            if !path.exists() {
                log::info!("training {m} on {t}");
                train_and_save(cfg, m, set, models_dir)?;
            }
            let model: Box<dyn CompletionModel> = load_model(&path)?;
            for e in evals {
                let examples = data
                    .eval
                    .get(e)
                    .ok_or_else(|| Error::InvalidArgument(format!("no evaluation set {e:?}")))?;
                let r: EvalReport = evaluate(model.as_ref(), examples, DEFAULT_CUTOFF)?;
                log::info!("{m} {t} -> {e}: top1 {:.4} mrr {:.4}", r.top1, r.mrr);
                out.cells.push(Cell {
                    model: m.clone(),
                    train: t.clone(),
                    eval: e.clone(),
                    top1: r.top1,
                    mrr: r.mrr,
                    n: r.n,
                    ranks: r.per_example_ranks,
                });
            }
        }
    }
    Ok(out)
}

pub fn ranks_file(dir: &Path, c: &Cell) -> PathBuf {
    dir.join("ranks").join(format!("{}__{}__{}.csv", c.model, c.train, c.eval))
}

pub fn write_matrix(dir: &Path, m: &ResultMatrix) -> Result<()> {
    let p = dir.join("results.json");
    let mut w = create(&p)?;
    serde_json::to_writer_pretty(&mut w, m)?;
    w.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    let p = dir.join("results.csv");
    let mut w = csv::Writer::from_writer(create(&p)?);
    w.write_record(["model", "train", "eval", "top1", "mrr", "n"])?;
    for c in &m.cells {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    for c in &m.cells {
        let report = EvalReport {
            top1: c.top1,
            mrr: c.mrr,
            n: c.n,
            per_example_ranks: c.ranks.clone(),
        };
        let p = ranks_file(dir, c);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        report.save_ranks_csv(&p)?;
    }
    Ok(())
}

pub fn read_matrix(dir: &Path) -> Result<ResultMatrix> {
    let p = dir.join("results.json");
    let mut m: ResultMatrix = serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
    for c in &mut m.cells {
        let p = ranks_file(dir, c);
        let mut r = csv::Reader::from_path(&p).map_err(|e| Error::format(p.display().to_string(), e.to_string()))?;
        c.ranks = r
            .records()
            .map(|rec| {
                let rec = rec?;
                Ok(rec.get(1).filter(|s| !s.is_empty()).map(str::parse).transpose().map_err(|e| {
                    Error::format(p.display().to_string(), format!("bad rank: {e}"))
                })?)
            })
            .collect::<Result<_>>()?;
    }
    Ok(m)
}

/// Builds every analysis table from the datasets and (optionally) the
/// evaluation matrix.
pub fn analyze(cfg: &ExperimentConfig, data: &Datasets, matrix: Option<&ResultMatrix>) -> Result<AnalysisTables> {
    let mut t = AnalysisTables::default();
    let mut vocabs = BTreeMap::new();
    for (name, set) in &data.training {
        vocabs.insert(name.clone(), build_vocab(set, cfg.ngram_vocab_size)?);
    }
    for (eval, examples) in &data.eval {
        for row in analysis::length_cdf(examples) {
            t.length_cdf.push(CdfTableRow::new(eval, &row));
        }
        for (kind, fraction) in analysis::kind_distribution(examples) {
            t.kinds.push(KindRow {
                eval: eval.clone(),
                kind: kind.as_str().to_string(),
                fraction,
            });
        }
        for (train, vocab) in &vocabs {
            if examples.is_empty() {
                continue;
            }
            t.oov_rates.push(analysis::oov_row(train, eval, vocab, examples)?);
        }
    }
    if let Some(m) = matrix {
        for c in &m.cells {
            let examples = &data.eval[&c.eval];
            for b in analysis::accuracy_by_length(&c.ranks, examples, analysis::DEFAULT_BIN_WIDTH)? {
                t.accuracy_by_length.push(LengthBinRow::new(&c.model, &c.train, &c.eval, &b));
            }
            let vocab = &vocabs[&c.train];
            for g in analysis::accuracy_by_context_oov(&c.ranks, examples, vocab)? {
                t.accuracy_by_oov.push(OovGroupRow::new(&c.model, &c.train, &c.eval, &g));
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Relative path → sha256 of every artifact under the stage directory.
    pub artifacts: BTreeMap<String, String>,
}

fn walk(dir: &Path, base: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(&p, base, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST) {
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(base).expect("under base").to_string_lossy().replace('\\', "/");
            out.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(())
}

/// Writes `manifest.json` covering every file currently under `dir`.
pub fn write_manifest(dir: &Path, stage: &str, cfg: &ExperimentConfig) -> Result<Manifest> {
    let mut artifacts = BTreeMap::new();
    walk(dir, dir, &mut artifacts)?;
    let m = Manifest {
        stage: stage.to_string(),
        seed: cfg.seed,
        config_sha256: cfg.hash(),
        artifacts,
    };
    let p = dir.join(MANIFEST);
    let mut w = create(&p)?;
    serde_json::to_writer_pretty(&mut w, &m)?;
    w.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    Ok(m)
}
