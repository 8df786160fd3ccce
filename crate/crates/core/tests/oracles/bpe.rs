// Naive BPE trainer: recount every pair from scratch before each merge.

use std::collections::BTreeMap;

pub const END: &str = "</w>";

pub fn merges(words: &BTreeMap<String, u64>, max_merges: usize) -> Vec<(String, String)> {
    let mut segs: Vec<(Vec<String>, u64)> = words
        .iter()
        .filter(|(w, &f)| f > 0 && !w.is_empty())
        .map(|(w, &f)| {
            let mut s: Vec<String> = w.chars().map(|c| c.to_string()).collect();
            s.push(END.to_string());
            (s, f)
        })
        .collect();
    let mut out = Vec::new();
    while out.len() < max_merges {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (s, f) in &segs {
            for w in s.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += f;
            }
        }
        let mut best: Option<(&(String, String), u64)> = None;
        for (p, &c) in &counts {
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((p, c));
            }
        }
        let Some((pair, c)) = best else { break };
        if c < 2 {
            break;
        }
        let (l, r) = pair.clone();
        for (s, _) in &mut segs {
            let mut next = Vec::with_capacity(s.len());
            let mut i = 0;
            while i < s.len() {
                if i + 1 < s.len() && s[i] == l && s[i + 1] == r {
                    next.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    next.push(s[i].clone());
                    i += 1;
                }
            }
            *s = next;
        }
        out.push((l, r));
    }
    out
}
