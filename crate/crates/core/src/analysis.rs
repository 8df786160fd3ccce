//! Corpus drift measurements: OOV rates, target length distributions,
//! token-kind shares and accuracy conditioned on length and context OOV.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::corpus::EvalExample;
use crate::error::{Error, Result};
use crate::lexer::TokenKind;
use crate::vocab::Vocabulary;

pub const CDF_MAX_LEN: usize = 40;
pub const DEFAULT_BIN_WIDTH: usize = 4;
/// Width of the OOV-fraction buckets.
pub const OOV_FRACTION_STEP: f64 = 0.1;

pub const FIG4_FILE: &str = "fig4_accuracy_by_length.csv";
pub const FIG5_FILE: &str = "fig5_length_cdf.csv";
pub const FIG6_FILE: &str = "fig6_accuracy_by_oov.csv";
pub const KIND_FILE: &str = "kind_distribution.csv";
pub const OOV_FILE: &str = "oov_rates.csv";

fn in_vocab(vocab: &Vocabulary, text: &str) -> bool {
    vocab.get(text).is_some_and(|id| !Vocabulary::is_special(id))
}

/// Fraction of targets outside `vocab`.
pub fn oov_rate_targets(vocab: &Vocabulary, examples: &[EvalExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::UndefinedMetric("no examples".into()));
    }
    let oov = examples.iter().filter(|e| !in_vocab(vocab, &e.target.text)).count();
    Ok(oov as f64 / examples.len() as f64)
}

/// Fraction of context token occurrences outside `vocab`.
pub fn oov_rate_context(vocab: &Vocabulary, examples: &[EvalExample]) -> Result<f64> {
    let (mut oov, mut total) = (0usize, 0usize);
    for e in examples {
        total += e.context.len();
        oov += e.context.iter().filter(|t| !in_vocab(vocab, &t.text)).count();
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("no context tokens".into()));
    }
    Ok(oov as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfRow {
    pub length: usize,
    /// Targets of exactly this length; the last row pools all longer ones.
    pub count: usize,
    /// Fraction of targets with length ≤ `length`.
    pub cdf: f64,
}

pub fn length_cdf(examples: &[EvalExample]) -> Vec<CdfRow> {
    let mut counts = vec![0usize; CDF_MAX_LEN + 1];
    let mut le = vec![0usize; CDF_MAX_LEN + 1];
    for e in examples {
        let l = e.target.char_len();
        counts[l.clamp(1, CDF_MAX_LEN)] += 1;
        if l <= CDF_MAX_LEN {
            le[l.max(1)] += 1;
        }
    }
    let n = examples.len().max(1) as f64;
    let mut acc = 0;
    (1..=CDF_MAX_LEN)
        .map(|l| {
            acc += le[l];
            CdfRow {
                length: l,
                count: counts[l],
                cdf: acc as f64 / n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthBin {
    pub min_len: usize,
    pub max_len: usize,
    pub top1: f64,
    pub count: usize,
}

fn aligned(ranks: &[Option<usize>], examples: &[EvalExample]) -> Result<()> {
    if ranks.len() != examples.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ranks for {} examples",
            ranks.len(),
            examples.len()
        )));
    }
    Ok(())
}

/// Top-1 accuracy per target-length bin `[1..w], [w+1..2w], ...`; empty
/// bins are omitted.
pub fn accuracy_by_length(
    ranks: &[Option<usize>],
    examples: &[EvalExample],
    bin_width: usize,
) -> Result<Vec<LengthBin>> {
    aligned(ranks, examples)?;
    if bin_width == 0 {
        return Err(Error::InvalidArgument("bin width must be positive".into()));
    }
    let mut bins: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (r, e) in ranks.iter().zip(examples) {
        let b = (e.target.char_len().max(1) - 1) / bin_width;
        let slot = bins.entry(b).or_default();
        slot.1 += 1;
        if *r == Some(1) {
            slot.0 += 1;
        }
    }
    Ok(bins
        .into_iter()
        .map(|(b, (hits, count))| LengthBin {
            min_len: b * bin_width + 1,
            max_len: (b + 1) * bin_width,
            top1: hits as f64 / count as f64,
            count,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OovGroup {
    /// `"count"` or `"fraction"`.
    pub grouping: &'static str,
    /// OOV token count, or the lower edge of the fraction bucket.
    pub key: f64,
    pub top1: f64,
    pub count: usize,
}

fn context_oov(vocab: &Vocabulary, e: &EvalExample) -> (usize, f64) {
    let oov = e.context.iter().filter(|t| !in_vocab(vocab, &t.text)).count();
    let frac = if e.context.is_empty() {
        0.0
    } else {
        oov as f64 / e.context.len() as f64
    };
    (oov, frac)
}

fn fraction_bucket(frac: f64) -> usize {
    let last = (1.0 / OOV_FRACTION_STEP).round() as usize - 1;
    ((frac / OOV_FRACTION_STEP + 1e-9).floor() as usize).min(last)
}

/// Top-1 accuracy grouped by the number of OOV context tokens and by the
/// OOV fraction of the context (10% buckets, the last one closed).
pub fn accuracy_by_context_oov(
    ranks: &[Option<usize>],
    examples: &[EvalExample],
    vocab: &Vocabulary,
) -> Result<Vec<OovGroup>> {
    aligned(ranks, examples)?;
    let mut by_count: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut by_frac: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (r, e) in ranks.iter().zip(examples) {
        let (n, f) = context_oov(vocab, e);
        let hit = usize::from(*r == Some(1));
        for (map, key) in [(&mut by_count, n), (&mut by_frac, fraction_bucket(f))] {
            let slot = map.entry(key).or_default();
            slot.0 += hit;
            slot.1 += 1;
        }
    }
    let rows = |grouping, map: BTreeMap<usize, (usize, usize)>, scale: f64| {
        map.into_iter().map(move |(k, (h, c))| OovGroup {
            grouping,
            key: k as f64 * scale,
            top1: h as f64 / c as f64,
            count: c,
        })
    };
    Ok(rows("count", by_count, 1.0)
        .chain(rows("fraction", by_frac, OOV_FRACTION_STEP))
        .collect())
}

/// Spearman correlation between per-example context OOV fraction and
/// top-1 correctness. `None` if either side is constant.
pub fn oov_accuracy_correlation(
    ranks: &[Option<usize>],
    examples: &[EvalExample],
    vocab: &Vocabulary,
) -> Result<Option<f64>> {
    aligned(ranks, examples)?;
    let x: Vec<f64> = examples.iter().map(|e| context_oov(vocab, e).1).collect();
    let y: Vec<f64> = ranks.iter().map(|r| f64::from(u8::from(*r == Some(1)))).collect();
    Ok(spearman(&x, &y))
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Shares of token kinds among identifier-like targets.
pub fn kind_distribution(examples: &[EvalExample]) -> BTreeMap<TokenKind, f64> {
    let mut counts: BTreeMap<TokenKind, usize> = BTreeMap::new();
    for e in examples.iter().filter(|e| e.target.is_identifier_like()) {
        *counts.entry(e.target.kind).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / total as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OovRow {
    pub train: String,
    pub eval: String,
    pub target_oov: f64,
    pub context_oov: f64,
}

pub fn oov_row(train: &str, eval: &str, vocab: &Vocabulary, examples: &[EvalExample]) -> Result<OovRow> {
    Ok(OovRow {
        train: train.into(),
        eval: eval.into(),
        target_oov: oov_rate_targets(vocab, examples)?,
        context_oov: oov_rate_context(vocab, examples)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindRow {
    pub eval: String,
    pub kind: String,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthBinRow {
    pub model: String,
    pub train: String,
    pub eval: String,
    pub min_len: usize,
    pub max_len: usize,
    pub top1: f64,
    pub count: usize,
}

impl LengthBinRow {
    pub fn new(model: &str, train: &str, eval: &str, b: &LengthBin) -> Self {
        LengthBinRow {
            model: model.into(),
            train: train.into(),
            eval: eval.into(),
            min_len: b.min_len,
            max_len: b.max_len,
            top1: b.top1,
            count: b.count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfTableRow {
    pub eval: String,
    pub length: usize,
    pub count: usize,
    pub cdf: f64,
}

impl CdfTableRow {
    pub fn new(eval: &str, r: &CdfRow) -> Self {
        CdfTableRow {
            eval: eval.into(),
            length: r.length,
            count: r.count,
            cdf: r.cdf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OovGroupRow {
    pub model: String,
    pub train: String,
    pub eval: String,
    pub grouping: &'static str,
    pub key: f64,
    pub top1: f64,
    pub count: usize,
}

impl OovGroupRow {
    pub fn new(model: &str, train: &str, eval: &str, g: &OovGroup) -> Self {
        OovGroupRow {
            model: model.into(),
            train: train.into(),
            eval: eval.into(),
            grouping: g.grouping,
            key: g.key,
            top1: g.top1,
            count: g.count,
        }
    }
}

/// Every analysis table, ready to be written as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalysisTables {
    pub accuracy_by_length: Vec<LengthBinRow>,
    pub length_cdf: Vec<CdfTableRow>,
    pub accuracy_by_oov: Vec<OovGroupRow>,
    pub kinds: Vec<KindRow>,
    pub oov_rates: Vec<OovRow>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(rows.is_empty()).from_writer(f);
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl AnalysisTables {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(
            &dir.join(FIG4_FILE),
            &self.accuracy_by_length,
            &["model", "train", "eval", "min_len", "max_len", "top1", "count"],
        )?;
        write_csv(&dir.join(FIG5_FILE), &self.length_cdf, &["eval", "length", "count", "cdf"])?;
        write_csv(
            &dir.join(FIG6_FILE),
            &self.accuracy_by_oov,
            &["model", "train", "eval", "grouping", "key", "top1", "count"],
        )?;
        write_csv(&dir.join(KIND_FILE), &self.kinds, &["eval", "kind", "fraction"])?;
        write_csv(&dir.join(OOV_FILE), &self.oov_rates, &["train", "eval", "target_oov", "context_oov"])
    }
}
