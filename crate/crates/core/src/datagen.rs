//! Synthetic corpora with controlled identifier statistics.
//!
//! Files are blocks of skeletal statements. Every identifier slot draws a
//! character length from a two-component shifted-geometric mixture, a
//! Zipf-distributed rank within its (pool, length) bucket, and a kind
//! (local variable or not). Slots inside one statement tend to share a
//! topic so that neighbouring names predict each other, which gives the
//! language models something to learn beyond unigram frequency.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Zipf};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CompletionEvent, FileRecord, MAX_CONTEXT, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::lexer::{is_keyword, Token, TokenKind};

/// Reference clock for generated timestamps, so output never depends on
/// the wall clock.
pub const DATAGEN_NOW: i64 = 1_700_000_000;

pub const SHORT_SHIFT: u64 = 2;
pub const SHORT_P: f64 = 0.4;
pub const LONG_SHIFT: u64 = 7;
/// Names per (pool, length) bucket.
pub const ZIPF_N: usize = 4000;
pub const ZIPF_S: f64 = 1.2;
/// Chance that a slot reuses its statement's topic.
pub const TOPIC_STICKINESS: f64 = 0.65;
pub const DEVELOPERS: usize = 200;
pub const RECENT_DAYS: i64 = 90;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub mean_token_len: f64,
    pub frac_len_le6: f64,
    pub frac_local_var: f64,
    pub vocab_pool_weights: BTreeMap<String, f64>,
    pub files: usize,
    pub tokens_per_file: usize,
    pub recency_modified_frac: f64,
    /// Probability that an eligible identifier occurrence is logged as an
    /// accepted completion. Zero for file-only corpora.
    #[serde(default)]
    pub event_rate: f64,
}

fn pools(items: &[(&str, f64)]) -> BTreeMap<String, f64> {
    items.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Committed-code and completion-log profiles.
pub fn default_profiles() -> (DomainProfile, DomainProfile) {
    let committed = DomainProfile {
        mean_token_len: 12.78,
        frac_len_le6: 0.2753,
        frac_local_var: 0.3534,
        vocab_pool_weights: pools(&[("core", 0.30), ("repo", 0.60), ("ide", 0.10)]),
        files: 2500,
        tokens_per_file: 150,
        recency_modified_frac: 0.2338,
        event_rate: 0.0,
    };
    let completion = DomainProfile {
        mean_token_len: 14.31,
        frac_len_le6: 0.1715,
        frac_local_var: 0.3013,
        vocab_pool_weights: pools(&[("core", 0.30), ("ide", 0.60), ("repo", 0.10)]),
        files: 2500,
        tokens_per_file: 150,
        recency_modified_frac: 1.0,
        event_rate: 0.05,
    };
    (committed, completion)
}

/// Save-time snapshots: committed-like names drifting toward in-IDE usage,
/// all recently touched.
pub fn edit_profile() -> DomainProfile {
    let (committed, _) = default_profiles();
    DomainProfile {
        vocab_pool_weights: pools(&[("core", 0.30), ("repo", 0.50), ("ide", 0.20)]),
        recency_modified_frac: 1.0,
        ..committed
    }
}

impl DomainProfile {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("frac_len_le6", self.frac_len_le6)?;
        unit("frac_local_var", self.frac_local_var)?;
        unit("recency_modified_frac", self.recency_modified_frac)?;
        unit("event_rate", self.event_rate)?;
        if self.vocab_pool_weights.is_empty() {
            return Err(Error::Config("vocab_pool_weights is empty".into()));
        }
        if self.vocab_pool_weights.values().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("pool weights must be non-negative".into()));
        }
        let total: f64 = self.vocab_pool_weights.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("pool weights sum to {total}, not 1")));
        }
        if self.tokens_per_file == 0 {
            return Err(Error::Config("tokens_per_file must be positive".into()));
        }
        LengthMixture::solve(self.mean_token_len, self.frac_len_le6)?;
        Ok(())
    }
}

/// `w · (2 + Geom(0.4)) + (1 − w) · (7 + Geom(p_long))`, geometric counted
/// from zero. The short component holds every length ≤ 6, so the two targets
/// pin down `w` and the long mean in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthMixture {
    pub short_weight: f64,
    pub long_p: f64,
}

impl LengthMixture {
    pub fn short_mean() -> f64 {
        SHORT_SHIFT as f64 + (1.0 - SHORT_P) / SHORT_P
    }

    /// P(short length ≤ 6).
    pub fn short_cdf6() -> f64 {
        1.0 - (1.0 - SHORT_P).powi((6 - SHORT_SHIFT + 1) as i32)
    }

    pub fn solve(mean: f64, frac_le6: f64) -> Result<Self> {
        let w = frac_le6 / Self::short_cdf6();
        if w > 1.0 {
            return Err(Error::Config(format!(
                "frac_len_le6 {frac_le6} exceeds the short component's P(len <= 6) = {:.5}",
                Self::short_cdf6()
            )));
        }
        let long_mean = if w < 1.0 {
            (mean - Self::short_mean() * w) / (1.0 - w)
        } else {
            LONG_SHIFT as f64
        };
        if long_mean < LONG_SHIFT as f64 {
            return Err(Error::Config(format!(
                "mean_token_len {mean} with frac_len_le6 {frac_le6} needs a long-component mean of {long_mean:.3}, below its minimum {LONG_SHIFT}"
            )));
        }
        if w == 1.0 && (mean - Self::short_mean()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "frac_len_le6 {frac_le6} leaves no long component, so mean_token_len must be {}",
                Self::short_mean()
            )));
        }
        Ok(LengthMixture {
            short_weight: w,
            long_p: 1.0 / (long_mean - LONG_SHIFT as f64 + 1.0),
        })
    }

    pub fn mean(&self) -> f64 {
        let long_mean = LONG_SHIFT as f64 + (1.0 - self.long_p) / self.long_p;
        self.short_weight * Self::short_mean() + (1.0 - self.short_weight) * long_mean
    }

    pub fn cdf6(&self) -> f64 {
        self.short_weight * Self::short_cdf6()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let draw = if rng.random::<f64>() < self.short_weight {
            SHORT_SHIFT + Geometric::new(SHORT_P).expect("valid p").sample(rng)
        } else {
            LONG_SHIFT + Geometric::new(self.long_p).expect("valid p").sample(rng)
        };
        draw as usize
    }
}

const CORE: &[&str] = &[
    "get", "set", "name", "value", "item", "list", "data", "key", "id", "count", "index", "size",
    "type", "user", "node", "path", "file", "text", "map", "info", "result", "config", "error",
    "time", "obj", "str", "num", "len", "arr", "val",
];
const REPO: &[&str] = &[
    "schema", "query", "shard", "tenant", "ledger", "policy", "entity", "cursor", "batch",
    "quota", "region", "replica", "audit", "fetcher", "loader", "mutation", "viewer", "privacy",
    "gate", "migrate", "async", "gen", "ent", "edge", "field",
];
const IDE: &[&str] = &[
    "draft", "tmp", "todo", "foo", "bar", "test", "debug", "dump", "local", "scratch", "wip",
    "quick", "hack", "fix", "log", "print", "check", "my", "temp", "alt", "copy", "old", "cur",
    "buf", "res",
];

fn syllables(pool: &str) -> Vec<&'static str> {
    match pool {
        "core" => CORE.to_vec(),
        "repo" => REPO.to_vec(),
        "ide" => IDE.to_vec(),
        _ => CORE.iter().chain(REPO).chain(IDE).copied().collect(),
    }
}

fn hash_seed(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Seed for a named sub-stream of a base seed.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let d = hash_seed(&[&base.to_le_bytes(), label.as_bytes()]);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Surface form of a name. A pure function of its coordinates, so the name
/// universe is shared by every corpus and seed.
pub fn name(pool: &str, len: usize, rank: usize, variant: usize, local: bool) -> String {
    let len = if local { len.max(2) } else { len.max(1) };
    let body_len = if local { len - 1 } else { len };
    let dict = syllables(pool);
    let mut salt = 0u64;
    loop {
        let seed = hash_seed(&[
            pool.as_bytes(),
            &(len as u64).to_le_bytes(),
            &(rank as u64).to_le_bytes(),
            &(variant as u64).to_le_bytes(),
            &salt.to_le_bytes(),
        ]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut body = String::new();
        while body.len() < body_len {
            let s = dict[rng.random_range(0..dict.len())];
            if body.is_empty() {
                body.push_str(s);
            } else {
                let mut cs = s.chars();
                let first = cs.next().expect("non-empty syllable");
                body.push(first.to_ascii_uppercase());
                body.push_str(cs.as_str());
            }
        }
        body.truncate(body_len);
        if local {
            return format!("${body}");
        }
        if !is_keyword(&body) {
            return body;
        }
        salt += 1;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Generated {
    pub files: Vec<FileRecord>,
    pub events: Vec<CompletionEvent>,
}

#[derive(Clone, Copy)]
enum Piece {
    Slot(usize),
    Lit(&'static str, TokenKind),
}

use Piece::{Lit, Slot};

const P: TokenKind = TokenKind::Punctuation;
const K: TokenKind = TokenKind::Keyword;

fn templates() -> Vec<Vec<Piece>> {
    vec![
        // I = I(I, I);
        vec![Slot(0), Lit("=", P), Slot(1), Lit("(", P), Slot(2), Lit(",", P), Slot(3), Lit(")", P), Lit(";", P)],
        // return I(I);
        vec![Lit("return", K), Slot(0), Lit("(", P), Slot(1), Lit(")", P), Lit(";", P)],
        // if (I == I) { I(I); }
        vec![
            Lit("if", K), Lit("(", P), Slot(0), Lit("==", P), Slot(1), Lit(")", P), Lit("{", P),
            Slot(2), Lit("(", P), Slot(3), Lit(")", P), Lit(";", P), Lit("}", P),
        ],
        // I->I(I);
        vec![Slot(0), Lit("->", P), Slot(1), Lit("(", P), Slot(2), Lit(")", P), Lit(";", P)],
        // foreach (I as I) { I(I); }
        vec![
            Lit("foreach", K), Lit("(", P), Slot(0), Lit("as", K), Slot(1), Lit(")", P), Lit("{", P),
            Slot(2), Lit("(", P), Slot(3), Lit(")", P), Lit(";", P), Lit("}", P),
        ],
        // I = 42;
        vec![Slot(0), Lit("=", P), Lit("42", TokenKind::NumberLiteral), Lit(";", P)],
        // echo "str";
        vec![Lit("echo", K), Lit("\"str\"", TokenKind::StringLiteral), Lit(";", P)],
    ]
}

fn function_header() -> Vec<Piece> {
    vec![Lit("function", K), Slot(0), Lit("(", P), Slot(1), Lit(",", P), Slot(2), Lit(")", P), Lit("{", P)]
}

struct Gen<'a> {
    profile: &'a DomainProfile,
    mixture: LengthMixture,
    pool_names: Vec<String>,
    pool_cdf: Vec<f64>,
    zipf: Zipf<f64>,
    names: HashMap<(usize, usize, usize, usize, bool), String>,
}

impl Gen<'_> {
    fn pool<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.pool_cdf
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.pool_cdf.len() - 1)
    }

    fn rank<R: Rng>(&self, rng: &mut R) -> usize {
        self.zipf.sample(rng) as usize
    }

    fn name(&mut self, pool: usize, len: usize, rank: usize, variant: usize, local: bool) -> String {
        let key = (pool, len, rank, variant, local);
        if let Some(n) = self.names.get(&key) {
            return n.clone();
        }
        let n = name(&self.pool_names[pool], len, rank, variant, local);
        self.names.insert(key, n.clone());
        n
    }

    fn statement<R: Rng>(&mut self, rng: &mut R, pieces: &[Piece], out: &mut Vec<Token>) {
        let topic_pool = self.pool(rng);
        let topic_len = self.mixture.sample(rng);
        let topic_rank = self.rank(rng);
        for piece in pieces {
            match *piece {
                Lit(text, kind) => out.push(Token::new(text, kind, 0)),
                Slot(i) => {
                    let (pool, len, rank, variant) = if rng.random::<f64>() < TOPIC_STICKINESS {
                        (topic_pool, topic_len, topic_rank, i)
                    } else {
                        (self.pool(rng), self.mixture.sample(rng), self.rank(rng), 0)
                    };
                    let local = rng.random::<f64>() < self.profile.frac_local_var;
                    let kind = if local { TokenKind::LocalVariable } else { TokenKind::Identifier };
                    let text = self.name(pool, len.max(if local { 2 } else { 1 }), rank, variant, local);
                    out.push(Token::new(text, kind, 0));
                }
            }
        }
    }

    fn file_tokens<R: Rng>(&mut self, rng: &mut R, templates: &[Vec<Piece>], header: &[Piece]) -> Vec<Token> {
        let mut toks = Vec::with_capacity(self.profile.tokens_per_file + 32);
        while toks.len() < self.profile.tokens_per_file {
            self.statement(rng, header, &mut toks);
            let n = rng.random_range(2..=5);
            for _ in 0..n {
                let t = &templates[rng.random_range(0..templates.len())];
                self.statement(rng, t, &mut toks);
            }
            toks.push(Token::new("}", P, 0));
        }
        let mut offset = 0;
        for t in &mut toks {
            t.byte_offset = offset;
            offset += t.text.len() + 1;
        }
        toks
    }
}

/// Generates files (and completion events when `event_rate > 0`).
/// Byte-identical for identical `(profile, seed)`.
pub fn generate(profile: &DomainProfile, seed: u64) -> Result<Generated> {
    profile.validate()?;
    let mixture = LengthMixture::solve(profile.mean_token_len, profile.frac_len_le6)?;
    let pool_names: Vec<String> = profile.vocab_pool_weights.keys().cloned().collect();
    let mut acc = 0.0;
    let pool_cdf = profile
        .vocab_pool_weights
        .values()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    let mut g = Gen {
        profile,
        mixture,
        pool_names,
        pool_cdf,
        zipf: Zipf::new(ZIPF_N as f64, ZIPF_S).expect("valid zipf"),
        names: HashMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "tokens"));
    let mut time_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "recency"));
    let mut event_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "events"));
    let templates = templates();
    let header = function_header();

    let n_recent = (profile.recency_modified_frac * profile.files as f64).round() as usize;
    let mut recent = vec![false; profile.files];
    recent[..n_recent.min(profile.files)].fill(true);
    recent.shuffle(&mut time_rng);

    let mut out = Generated::default();
    for (i, &is_recent) in recent.iter().enumerate() {
        let tokens = g.file_tokens(&mut rng, &templates, &header);
        let age = if is_recent {
            time_rng.random_range(0..RECENT_DAYS * SECONDS_PER_DAY)
        } else {
            time_rng.random_range((RECENT_DAYS + 1) * SECONDS_PER_DAY..3 * 365 * SECONDS_PER_DAY)
        };
        let last_modified = DATAGEN_NOW - age;
        let file_id = format!("f{i:06}");
        if profile.event_rate > 0.0 {
            let developer_id = format!("dev{:03}", event_rng.random_range(0..DEVELOPERS));
            let n = tokens.len() as i64;
            for (p, t) in tokens.iter().enumerate().skip(1) {
                if t.is_identifier_like() && event_rng.random::<f64>() < profile.event_rate {
                    out.events.push(CompletionEvent {
                        context: tokens[p.saturating_sub(MAX_CONTEXT)..p].to_vec(),
                        accepted: t.clone(),
                        developer_id: developer_id.clone(),
                        timestamp: last_modified - (n - p as i64) * 5,
                        file_id: file_id.clone(),
                    });
                }
            }
        }
        out.files.push(FileRecord {
            file_id,
            tokens,
            last_modified,
        });
    }
    Ok(out)
}
