// Brute-force interpolated modified Kneser-Ney, evaluated top-down from
// explicit count tables.

use std::collections::{BTreeMap, BTreeSet};

pub struct KnOracle {
    order: usize,
    pad: u32,
    support: BTreeSet<u32>,
    /// counts[m] maps m-grams to raw (m = order) or continuation counts.
    counts: Vec<BTreeMap<Vec<u32>, u64>>,
    discounts: Vec<[f64; 3]>,
}

impl KnOracle {
    pub fn new(sequences: &[Vec<u32>], vocab_len: u32, order: usize, unk: u32, pad: u32) -> Self {
        let mut runs: Vec<Vec<u32>> = Vec::new();
        for s in sequences {
            let mut cur = Vec::new();
            for &t in s {
                if t == pad {
                    if !cur.is_empty() {
                        runs.push(std::mem::take(&mut cur));
                    }
                } else {
                    cur.push(t);
                }
            }
            if !cur.is_empty() {
                runs.push(cur);
            }
        }
        let mut counts = vec![BTreeMap::new(); order + 1];
        for r in &runs {
            if r.len() >= order {
                for i in 0..=r.len() - order {
                    *counts[order].entry(r[i..i + order].to_vec()).or_insert(0u64) += 1;
                }
            }
        }
        for m in (1..order).rev() {
            let higher: Vec<Vec<u32>> = counts[m + 1].keys().cloned().collect();
            let mut lefts: BTreeMap<Vec<u32>, BTreeSet<u32>> = BTreeMap::new();
            for g in higher {
                lefts.entry(g[1..].to_vec()).or_default().insert(g[0]);
            }
            counts[m] = lefts.into_iter().map(|(g, s)| (g, s.len() as u64)).collect();
        }
        let mut discounts = vec![[0.0; 3]; order + 1];
        for m in 1..=order {
            let nk = |k: u64| counts[m].values().filter(|&&c| c == k).count() as f64;
            let (n1, n2, n3, n4) = (nk(1), nk(2), nk(3), nk(4));
            discounts[m] = if n1 == 0.0 || n2 == 0.0 || n3 == 0.0 {
                [0.75; 3]
            } else {
                let y = n1 / (n1 + 2.0 * n2);
                [
                    (1.0 - 2.0 * y * n2 / n1).clamp(0.0, 1.0),
                    (2.0 - 3.0 * y * n3 / n2).clamp(0.0, 2.0),
                    (3.0 - 4.0 * y * n4 / n3).clamp(0.0, 3.0),
                ]
            };
        }
        let unk_seen = runs.iter().any(|r| r.contains(&unk));
        let support = (0..vocab_len)
            .filter(|&t| t != pad && (t != unk || unk_seen))
            .collect();
        KnOracle {
            order,
            pad,
            support,
            counts,
            discounts,
        }
    }

    pub fn discounts(&self, m: usize) -> [f64; 3] {
        self.discounts[m]
    }

    fn level(&self, m: usize, h: &[u32], w: u32) -> f64 {
        if m == 0 {
            return 1.0 / self.support.len() as f64;
        }
        let lower = self.level(m - 1, &h[1.min(h.len())..], w);
        let mut total = 0u64;
        let mut nk = [0u64; 3];
        let mut c = 0u64;
        for (g, &cnt) in &self.counts[m] {
            if &g[..m - 1] == h {
                total += cnt;
                nk[(cnt.min(3) - 1) as usize] += 1;
                if g[m - 1] == w {
                    c = cnt;
                }
            }
        }
        if total == 0 {
            return lower;
        }
        let d = self.discounts[m];
        let dc = match c {
            0 => 0.0,
            1 => d[0],
            2 => d[1],
            _ => d[2],
        };
        let gamma = d[0] * nk[0] as f64 + d[1] * nk[1] as f64 + d[2] * nk[2] as f64;
        ((c as f64 - dc).max(0.0) + gamma * lower) / total as f64
    }

    pub fn prob(&self, context: &[u32], w: u32) -> f64 {
        if !self.support.contains(&w) {
            return 0.0;
        }
        let start = context.iter().rposition(|&t| t == self.pad).map_or(0, |p| p + 1);
        let ctx = &context[start..];
        let ctx = &ctx[ctx.len().saturating_sub(self.order - 1)..];
        self.level(ctx.len() + 1, ctx, w)
    }
}
