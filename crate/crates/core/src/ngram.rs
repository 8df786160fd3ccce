//! Interpolated modified Kneser-Ney n-gram model.
//!
//! The highest order keeps raw counts. Every lower order keeps continuation
//! counts: the number of distinct tokens seen immediately to the left of the
//! n-gram. Each order gets three discounts estimated from its own
//! count-of-counts, and the unigram level is interpolated with a uniform
//! distribution over the model's support.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, PAD_ID, UNK_ID};

pub const DEFAULT_ORDER: usize = 4;
pub const FALLBACK_DISCOUNT: f64 = 0.75;

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextStats {
    total: u64,
    /// Distinct continuations with count 1, 2 and ≥ 3.
    n: [u64; 3],
    next: HashMap<u32, u64>,
}

impl ContextStats {
    fn gamma(&self, d: &[f64; 3]) -> f64 {
        d[0] * self.n[0] as f64 + d[1] * self.n[1] as f64 + d[2] * self.n[2] as f64
    }
}

fn discount(d: &[f64; 3], c: u64) -> f64 {
    match c {
        0 => 0.0,
        1 => d[0],
        2 => d[1],
        _ => d[2],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    vocab: Vocabulary,
    /// `levels[k]` holds contexts of length `k`, i.e. order `k + 1`.
    levels: Vec<HashMap<Vec<u32>, ContextStats>>,
    discounts: Vec<[f64; 3]>,
    in_support: Vec<bool>,
    support_size: usize,
}

/// Chen–Goodman estimates from count-of-counts `n1..n4`. `None` when any of
/// `n1`, `n2`, `n3` is zero and the estimate is undefined.
pub fn estimate_discounts(n: [u64; 4]) -> Option<[f64; 3]> {
    if n[0] == 0 || n[1] == 0 || n[2] == 0 {
        return None;
    }
    let [n1, n2, n3, n4] = n.map(|v| v as f64);
    let y = n1 / (n1 + 2.0 * n2);
    let clamp = |v: f64, k: f64| v.clamp(0.0, k);
    Some([
        clamp(1.0 - 2.0 * y * n2 / n1, 1.0),
        clamp(2.0 - 3.0 * y * n3 / n2, 2.0),
        clamp(3.0 - 4.0 * y * n4 / n3, 3.0),
    ])
}

/// Maximal pad-free runs of each sequence.
fn runs(sequences: &[Vec<u32>]) -> impl Iterator<Item = &[u32]> {
    sequences
        .iter()
        .flat_map(|s| s.split(|&t| t == PAD_ID))
        .filter(|r| !r.is_empty())
}

impl NgramModel {
    pub fn train(sequences: &[Vec<u32>], vocab: &Vocabulary, order: usize) -> Result<Self> {
        if order < 2 {
            return Err(Error::InvalidArgument("order must be at least 2".into()));
        }
        let v = vocab.len() as u32;
        if let Some(&bad) = sequences.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {v}")));
        }
        // Raw counts at the top.
        let mut raw: HashMap<Vec<u32>, u64> = HashMap::new();
        let mut unk_seen = false;
        for run in runs(sequences) {
            unk_seen |= run.contains(&UNK_ID);
            for g in run.windows(order) {
                *raw.entry(g.to_vec()).or_default() += 1;
            }
        }
        let mut grams_by_level: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
        grams_by_level[order - 1] = raw;
        for len in (1..order).rev() {
            // Continuation count of g = |{v : v·g has positive count one level up}|.
            let mut cont: HashMap<Vec<u32>, u64> = HashMap::new();
            for g in grams_by_level[len].keys() {
                *cont.entry(g[1..].to_vec()).or_default() += 1;
            }
            grams_by_level[len - 1] = cont;
        }

        let mut levels = Vec::with_capacity(order);
        let mut discounts = Vec::with_capacity(order);
        for (k, grams) in grams_by_level.into_iter().enumerate() {
            let mut coc = [0u64; 4];
            for &c in grams.values() {
                if (1..=4).contains(&c) {
                    coc[c as usize - 1] += 1;
                }
            }
            let d = estimate_discounts(coc).unwrap_or_else(|| {
                log::warn!(
                    "order {}: count-of-counts {:?} too sparse, using fixed discount {FALLBACK_DISCOUNT}",
                    k + 1,
                    &coc[..3]
                );
                [FALLBACK_DISCOUNT; 3]
            });
            discounts.push(d);
            let mut ctxs: HashMap<Vec<u32>, ContextStats> = HashMap::new();
            for (g, c) in grams {
                let (h, w) = g.split_at(k);
                let st = ctxs.entry(h.to_vec()).or_default();
                st.total += c;
                st.n[(c.min(3) - 1) as usize] += 1;
                st.next.insert(w[0], c);
            }
            levels.push(ctxs);
        }
        Ok(Self::assemble(order, vocab.clone(), levels, discounts, unk_seen))
    }

    fn assemble(
        order: usize,
        vocab: Vocabulary,
        levels: Vec<HashMap<Vec<u32>, ContextStats>>,
        discounts: Vec<[f64; 3]>,
        unk_seen: bool,
    ) -> Self {
        let in_support: Vec<bool> = (0..vocab.len() as u32)
            .map(|id| id != PAD_ID && (id != UNK_ID || unk_seen))
            .collect();
        let support_size = in_support.iter().filter(|&&b| b).count();
        NgramModel {
            order,
            vocab,
            levels,
            discounts,
            in_support,
            support_size,
        }
    }

    /// Replaces the estimated discounts, lowest order first.
    pub fn with_discounts(mut self, discounts: Vec<[f64; 3]>) -> Result<Self> {
        if discounts.len() != self.order {
            return Err(Error::InvalidArgument("one discount triple per order".into()));
        }
        for d in &discounts {
            if !(0.0..=1.0).contains(&d[0]) || !(0.0..=2.0).contains(&d[1]) || !(0.0..=3.0).contains(&d[2]) {
                return Err(Error::InvalidArgument(format!("discounts out of range: {d:?}")));
            }
        }
        self.discounts = discounts;
        Ok(self)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Per-order `(D1, D2, D3+)`, lowest order first.
    pub fn discounts(&self) -> &[[f64; 3]] {
        &self.discounts
    }

    /// Number of ids that can receive probability mass.
    pub fn support_size(&self) -> usize {
        self.support_size
    }

    pub fn in_support(&self, id: u32) -> bool {
        self.in_support.get(id as usize).copied().unwrap_or(false)
    }

    fn tail<'c>(&self, context: &'c [u32]) -> &'c [u32] {
        let ctx = match context.iter().rposition(|&t| t == PAD_ID) {
            Some(p) => &context[p + 1..],
            None => context,
        };
        &ctx[ctx.len().saturating_sub(self.order - 1)..]
    }

    /// `p(token | context)`; only the last `order - 1` ids of the context
    /// matter.
    pub fn prob(&self, context: &[u32], token: u32) -> f64 {
        if !self.in_support(token) {
            return 0.0;
        }
        let ctx = self.tail(context);
        let uniform = 1.0 / self.support_size as f64;
        let mut p = uniform;
        for k in 0..=ctx.len() {
            let h = &ctx[ctx.len() - k..];
            let Some(st) = self.levels[k].get(h) else {
                // Longer contexts contain this one, so none of them is seen.
                break;
            };
            let d = &self.discounts[k];
            let c = st.next.get(&token).copied().unwrap_or(0);
            p = ((c as f64 - discount(d, c)).max(0.0) + st.gamma(d) * p) / st.total as f64;
        }
        p
    }

    /// Full next-token distribution, indexed by id.
    pub fn distribution(&self, context: &[u32]) -> Vec<f64> {
        let ctx = self.tail(context);
        let uniform = 1.0 / self.support_size as f64;
        let mut p: Vec<f64> = self
            .in_support
            .iter()
            .map(|&s| if s { uniform } else { 0.0 })
            .collect();
        for k in 0..=ctx.len() {
            let h = &ctx[ctx.len() - k..];
            let Some(st) = self.levels[k].get(h) else {
                break;
            };
            let d = &self.discounts[k];
            let scale = st.gamma(d) / st.total as f64;
            for x in p.iter_mut() {
                *x *= scale;
            }
            for (&w, &c) in &st.next {
                p[w as usize] += (c as f64 - discount(d, c)).max(0.0) / st.total as f64;
            }
        }
        p
    }

    /// Highest-probability regular tokens, ties by token text.
    pub fn topk(&self, context: &[u32], k: usize) -> Vec<(u32, f64)> {
        rank_distribution(&self.distribution(context), &self.vocab, k)
    }

    pub fn to_json(&self) -> Result<String> {
        let levels = self
            .levels
            .iter()
            .map(|lvl| {
                let sorted: BTreeMap<&Vec<u32>, BTreeMap<u32, u64>> = lvl
                    .iter()
                    .map(|(h, st)| (h, st.next.iter().map(|(&w, &c)| (w, c)).collect()))
                    .collect();
                sorted
                    .into_iter()
                    .map(|(h, next)| SavedContext {
                        context: h.clone(),
                        next: next.into_iter().collect(),
                    })
                    .collect()
            })
            .collect();
        let saved = SavedModel {
            format: "complab-ngram".into(),
            version: 1,
            order: self.order,
            vocab: self.vocab.tokens().to_vec(),
            vocab_max_size: self.vocab.max_size(),
            unk_in_support: self.in_support(UNK_ID),
            discounts: self.discounts.clone(),
            levels,
        };
        Ok(serde_json::to_string(&saved)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SavedModel = serde_json::from_str(text)?;
        if s.format != "complab-ngram" || s.version != 1 {
            return Err(Error::format("n-gram model", format!("unsupported format {} v{}", s.format, s.version)));
        }
        if s.levels.len() != s.order || s.discounts.len() != s.order || s.order < 2 {
            return Err(Error::format("n-gram model", "level count does not match order"));
        }
        let vocab = Vocabulary::from_parts(&s.vocab, s.vocab_max_size)?;
        let mut levels = Vec::with_capacity(s.order);
        for (k, lvl) in s.levels.into_iter().enumerate() {
            let mut map = HashMap::with_capacity(lvl.len());
            for sc in lvl {
                if sc.context.len() != k {
                    return Err(Error::format("n-gram model", format!("context of wrong length at level {k}")));
                }
                let mut st = ContextStats::default();
                for (w, c) in sc.next {
                    if c == 0 || w as usize >= vocab.len() {
                        return Err(Error::format("n-gram model", "bad count entry"));
                    }
                    st.total += c;
                    st.n[(c.min(3) - 1) as usize] += 1;
                    st.next.insert(w, c);
                }
                map.insert(sc.context, st);
            }
            levels.push(map);
        }
        Ok(Self::assemble(s.order, vocab, levels, s.discounts, s.unk_in_support))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Sorts regular ids by descending probability, ties by token text, and
/// keeps the first `k`.
pub fn rank_distribution(dist: &[f64], vocab: &Vocabulary, k: usize) -> Vec<(u32, f64)> {
    let mut ids: Vec<u32> = (0..dist.len() as u32)
        .filter(|&id| !Vocabulary::is_special(id))
        .collect();
    let cmp = |a: &u32, b: &u32| {
        dist[*b as usize]
            .total_cmp(&dist[*a as usize])
            .then_with(|| vocab.text(*a).cmp(vocab.text(*b)))
    };
    if k < ids.len() {
        ids.select_nth_unstable_by(k, cmp);
        ids.truncate(k);
    }
    ids.sort_by(cmp);
    ids.into_iter().map(|id| (id, dist[id as usize])).collect()
}

#[derive(Serialize, Deserialize)]
struct SavedContext {
    context: Vec<u32>,
    next: Vec<(u32, u64)>,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    format: String,
    version: u32,
    order: usize,
    vocab: Vec<String>,
    vocab_max_size: usize,
    unk_in_support: bool,
    discounts: Vec<[f64; 3]>,
    levels: Vec<Vec<SavedContext>>,
}

/// Distinct n-gram types in the data, useful for sizing.
pub fn distinct_ngrams(sequences: &[Vec<u32>], n: usize) -> usize {
    let mut seen = HashSet::new();
    for run in runs(sequences) {
        for g in run.windows(n) {
            seen.insert(g.to_vec());
        }
    }
    seen.len()
}
