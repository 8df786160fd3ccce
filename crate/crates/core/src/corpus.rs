//! Corpus records, splitting, evaluation-target extraction and the on-disk
//! corpus formats.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lexer::{self, Token, TokenKind};

/// Longest context kept in front of an evaluation target.
pub const MAX_CONTEXT: usize = 100;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Committed,
    CompletionEvents,
    EditSnapshots,
}

impl CorpusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusKind::Committed => "committed",
            CorpusKind::CompletionEvents => "completion_events",
            CorpusKind::EditSnapshots => "edit_snapshots",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileRecord {
    pub file_id: String,
    pub tokens: Vec<Token>,
    pub last_modified: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionEvent {
    /// Tokens before the cursor, oldest first.
    pub context: Vec<Token>,
    pub accepted: Token,
    pub developer_id: String,
    pub timestamp: i64,
    pub file_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalExample {
    pub context: Vec<Token>,
    pub target: Token,
    pub source_kind: CorpusKind,
}

/// Stable identity used to assign a record to a split bucket.
pub trait SplitKey {
    fn split_key(&self) -> String;
}

impl SplitKey for FileRecord {
    fn split_key(&self) -> String {
        self.file_id.clone()
    }
}

impl SplitKey for CompletionEvent {
    fn split_key(&self) -> String {
        format!("{}\u{1f}{}\u{1f}{}", self.developer_id, self.timestamp, self.accepted.text)
    }
}

impl SplitKey for String {
    fn split_key(&self) -> String {
        self.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Split<T> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

fn split_hash(seed: u64, key: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    h.finalize().into()
}

/// 8:1:1 split keyed on a seeded hash of each record's identity.
///
/// Records are ordered by hash and the first 80% (rounded) go to train, the
/// next 10% to valid and the rest to test, so bucket sizes are exact for any
/// seed. Within a bucket the input order is preserved.
pub fn split<T: SplitKey + Clone>(records: &[T], seed: u64) -> Split<T> {
    let mut order: Vec<([u8; 32], usize)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (split_hash(seed, &r.split_key()), i))
        .collect();
    order.sort_unstable();
    let n = records.len();
    let n_train = (0.8 * n as f64).round() as usize;
    let n_valid = ((0.1 * n as f64).round() as usize).min(n - n_train);
    let mut bucket = vec![0u8; n];
    for (rank, &(_, i)) in order.iter().enumerate() {
        bucket[i] = if rank < n_train {
            0
        } else if rank < n_train + n_valid {
            1
        } else {
            2
        };
    }
    let mut out = Split {
        train: Vec::with_capacity(n_train),
        valid: Vec::with_capacity(n_valid),
        test: Vec::with_capacity(n - n_train - n_valid),
    };
    for (r, b) in records.iter().zip(bucket) {
        match b {
            0 => out.train.push(r.clone()),
            1 => out.valid.push(r.clone()),
            _ => out.test.push(r.clone()),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sampled {
    pub examples: Vec<EvalExample>,
    /// Number of eligible positions before sampling.
    pub eligible: usize,
}

fn context_before(tokens: &[Token], pos: usize) -> Vec<Token> {
    tokens[pos.saturating_sub(MAX_CONTEXT)..pos].to_vec()
}

/// Uniformly samples up to `n` identifier-like positions that have at least
/// one preceding token. Examples come back in corpus order.
pub fn sample_identifier_targets(
    files: &[FileRecord],
    n: usize,
    seed: u64,
    kind: CorpusKind,
) -> Result<Sampled> {
    if n < 1 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let positions: Vec<(usize, usize)> = files
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| {
            f.tokens
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(_, t)| t.is_identifier_like())
                .map(move |(p, _)| (fi, p))
        })
        .collect();
    if positions.is_empty() {
        log::warn!("no eligible identifier positions to sample");
    }
    let take = n.min(positions.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, positions.len(), take).into_vec();
    picked.sort_unstable();
    let examples = picked
        .into_iter()
        .map(|i| {
            let (fi, p) = positions[i];
            let toks = &files[fi].tokens;
            EvalExample {
                context: context_before(toks, p),
                target: toks[p].clone(),
                source_kind: kind,
            }
        })
        .collect();
    Ok(Sampled {
        examples,
        eligible: positions.len(),
    })
}

/// One example per event; events without context are skipped and counted.
pub fn events_to_examples(events: &[CompletionEvent]) -> (Vec<EvalExample>, usize) {
    let mut skipped = 0;
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        if e.context.is_empty() {
            skipped += 1;
            continue;
        }
        out.push(EvalExample {
            context: context_before(&e.context, e.context.len()),
            target: e.accepted.clone(),
            source_kind: CorpusKind::CompletionEvents,
        });
    }
    (out, skipped)
}

pub fn filter_recent(files: &[FileRecord], cutoff_days: i64, now: i64) -> Result<Vec<FileRecord>> {
    if cutoff_days <= 0 {
        return Err(Error::InvalidArgument("cutoff_days must be positive".into()));
    }
    let limit = cutoff_days * SECONDS_PER_DAY;
    Ok(files
        .iter()
        .filter(|f| now - f.last_modified <= limit)
        .cloned()
        .collect())
}

/// Concatenation without dedup.
pub fn union<T: Clone>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    file_id: String,
    path: String,
    last_modified: i64,
}

#[derive(Serialize, Deserialize)]
struct EventLine {
    developer_id: String,
    timestamp: i64,
    #[serde(default)]
    file_id: String,
    context: Vec<String>,
    accepted: String,
    #[serde(default)]
    accepted_kind: Option<TokenKind>,
}

/// Builds tokens from texts with consecutive synthetic offsets.
pub fn tokens_from_texts<S: AsRef<str>>(texts: &[S]) -> Vec<Token> {
    let mut offset = 0;
    texts
        .iter()
        .map(|t| {
            let t = t.as_ref();
            let tok = Token::classified(t, offset);
            offset += t.len() + 1;
            tok
        })
        .collect()
}

fn source_path(file_id: &str) -> String {
    let safe: String = file_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("src/{safe}.php")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes one source file per record plus `manifest.jsonl`.
pub fn write_file_corpus(dir: &Path, files: &[FileRecord]) -> Result<()> {
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = create(&manifest_path)?;
    let mut seen = BTreeSet::new();
    for f in files {
        let rel = source_path(&f.file_id);
        if !seen.insert(rel.clone()) {
            return Err(Error::InvalidArgument(format!("file id collides on disk: {}", f.file_id)));
        }
        let path = dir.join(&rel);
        let mut w = create(&path)?;
        let mut text = lexer::join(&f.tokens);
        text.push('\n');
        w.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        let line = ManifestLine {
            file_id: f.file_id.clone(),
            path: rel,
            last_modified: f.last_modified,
        };
        serde_json::to_writer(&mut manifest, &line)?;
        manifest.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_file_corpus(dir: &Path) -> Result<Vec<FileRecord>> {
    let manifest_path = dir.join("manifest.jsonl");
    let reader = BufReader::new(File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)?;
        let path: PathBuf = dir.join(&m.path);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        out.push(FileRecord {
            file_id: m.file_id,
            tokens: lexer::tokenize(&text)?,
            last_modified: m.last_modified,
        });
    }
    Ok(out)
}

pub fn event_to_json(e: &CompletionEvent) -> serde_json::Value {
    serde_json::to_value(EventLine {
        developer_id: e.developer_id.clone(),
        timestamp: e.timestamp,
        file_id: e.file_id.clone(),
        context: e.context.iter().map(|t| t.text.clone()).collect(),
        accepted: e.accepted.text.clone(),
        accepted_kind: Some(e.accepted.kind),
    })
    .expect("event serializes")
}

/// Parses one `events.jsonl` line. Extra fields such as `group` are
/// ignored; a missing `accepted_kind` is derived from the text.
pub fn event_from_json(line: &str) -> Result<CompletionEvent> {
    event_from_value(serde_json::from_str(line)?)
}

pub fn event_from_value(v: serde_json::Value) -> Result<CompletionEvent> {
    let e: EventLine = serde_json::from_value(v)?;
    let context = tokens_from_texts(&e.context);
    let offset = context.last().map_or(0, |t| t.byte_offset + t.text.len() + 1);
    Ok(CompletionEvent {
        accepted: match e.accepted_kind {
            Some(kind) => Token::new(e.accepted, kind, offset),
            None => Token::classified(e.accepted, offset),
        },
        context,
        developer_id: e.developer_id,
        timestamp: e.timestamp,
        file_id: e.file_id,
    })
}

pub fn write_events(path: &Path, events: &[CompletionEvent]) -> Result<()> {
    let mut w = create(path)?;
    for e in events {
        serde_json::to_writer(&mut w, &event_to_json(e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<CompletionEvent>> {
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(event_from_json(&line).map_err(|e| {
            Error::format("event log", format!("{}: line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn file(id: &str, texts: &[&str], last_modified: i64) -> FileRecord {
        FileRecord {
            file_id: id.into(),
            tokens: tokens_from_texts(texts),
            last_modified,
        }
    }

    fn event(context: &[&str], accepted: &str) -> CompletionEvent {
        CompletionEvent {
            context: tokens_from_texts(context),
            accepted: Token::classified(accepted, 0),
            developer_id: "dev1".into(),
            timestamp: 1_000,
            file_id: "f".into(),
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<String> = (0..1000).map(|i| format!("r{i}")).collect();
        for seed in 0..20 {
            let s = split(&ids, seed);
            let (a, b, c) = s.sizes();
            assert!((760..=840).contains(&a) && (80..=120).contains(&b) && (80..=120).contains(&c));
            assert_eq!(s, split(&ids, seed));
        }
        assert_ne!(split(&ids, 1).test, split(&ids, 2).test);
        let empty: Split<String> = split(&[], 3);
        assert_eq!(empty.sizes(), (0, 0, 0));
    }

    #[test]
    fn eligibility_requires_a_predecessor() {
        let f = file("f", &["$a", "=", "f", "(", "1", ")"], 0);
        let s = sample_identifier_targets(&[f], 10, 1, CorpusKind::Committed).unwrap();
        assert_eq!(s.eligible, 1);
        assert_eq!(s.examples.len(), 1);
        assert_eq!(s.examples[0].target.text, "f");
        assert_eq!(s.examples[0].context.len(), 2);
    }

    #[test]
    fn oversampling_returns_each_position_once() {
        let f = file("f", &["x", "a", "b", "c", "d"], 0);
        let s = sample_identifier_targets(&[f], 99, 4, CorpusKind::EditSnapshots).unwrap();
        let targets: Vec<&str> = s.examples.iter().map(|e| e.target.text.as_str()).collect();
        assert_eq!(targets, ["a", "b", "c", "d"]);
        assert!(sample_identifier_targets(&[], 0, 4, CorpusKind::Committed).is_err());
        let none = sample_identifier_targets(&[], 3, 4, CorpusKind::Committed).unwrap();
        assert_eq!((none.eligible, none.examples.len()), (0, 0));
    }

    #[test]
    fn context_is_capped() {
        let texts: Vec<String> = (0..150).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let s = sample_identifier_targets(&[file("f", &refs, 0)], 200, 0, CorpusKind::Committed).unwrap();
        let last = s.examples.last().unwrap();
        assert_eq!(last.context.len(), MAX_CONTEXT);
        assert_eq!(last.context[0].text, "t49");
    }

    #[test]
    fn events_become_examples() {
        let (ex, skipped) = events_to_examples(&[event(&["$x", "="], "foo"), event(&[], "bar")]);
        assert_eq!(skipped, 1);
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].target.text, "foo");
        assert_eq!(ex[0].source_kind, CorpusKind::CompletionEvents);
        assert_eq!(events_to_examples(&[]), (vec![], 0));
    }

    #[test]
    fn recency_boundary() {
        let now = 100 * SECONDS_PER_DAY;
        let files = [
            file("a", &["x"], now - 10 * SECONDS_PER_DAY),
            file("b", &["x"], now - 91 * SECONDS_PER_DAY),
            file("c", &["x"], now - 90 * SECONDS_PER_DAY),
        ];
        let kept = filter_recent(&files, 90, now).unwrap();
        let ids: Vec<&str> = kept.iter().map(|f| f.file_id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        assert!(filter_recent(&files, 0, now).is_err());
    }

    #[test]
    fn union_keeps_duplicates() {
        let a = vec![1, 2];
        let b = vec![2, 3, 3];
        assert_eq!(union(&a, &b), [1, 2, 2, 3, 3]);
        assert_eq!(union(&a, &[]), a);
    }

    #[test]
    fn on_disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let files = vec![
            file("f/1", &["$a", "=", "\"x\\x20y\"", ";"], 5),
            file("f2", &["return", "$b", ";"], 6),
        ];
        write_file_corpus(dir.path(), &files).unwrap();
        let back = read_file_corpus(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in files.iter().zip(&back) {
            let at: Vec<_> = a.tokens.iter().map(|t| (&t.text, t.kind)).collect();
            let bt: Vec<_> = b.tokens.iter().map(|t| (&t.text, t.kind)).collect();
            assert_eq!(at, bt);
            assert_eq!(a.last_modified, b.last_modified);
        }
        let events = vec![event(&["$x", "="], "foo"), event(&["a"], "$y")];
        let p = dir.path().join("events.jsonl");
        write_events(&p, &events).unwrap();
        let back = read_events(&p).unwrap();
        assert_eq!(back, events.iter().map(|e| event_from_json(&event_to_json(e).to_string()).unwrap()).collect::<Vec<_>>());
        assert_eq!(back[1].accepted.kind, TokenKind::LocalVariable);
        assert_eq!(back[0].context[0].text, "$x");
    }

    proptest! {
        #[test]
        fn split_partitions(n in 0usize..400, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
            let s = split(&ids, seed);
            let mut all: Vec<String> = s.train.iter().chain(&s.valid).chain(&s.test).cloned().collect();
            all.sort();
            let mut want = ids.clone();
            want.sort();
            prop_assert_eq!(all, want);
        }
    }
}
