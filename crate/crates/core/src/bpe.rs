//! Byte-pair-encoding subtoken vocabularies.
//!
//! Training is the classic greedy loop: every word is split into characters
//! plus an end-of-word marker, and the most frequent adjacent symbol pair
//! (weighted by word frequency, ties to the lexicographically smallest pair)
//! is merged until the symbol budget is spent or no pair occurs twice.
//! Encoding replays the learned merges in order.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const END_MARKER: &str = "</w>";
pub const UNK_SUBTOKEN: &str = "<unk>";
pub const PAD_SUBTOKEN: &str = "<pad>";

pub const UNK_SUB_ID: u32 = 0;
pub const PAD_SUB_ID: u32 = 1;
pub const END_SUB_ID: u32 = 2;
/// `<unk>`, `<pad>` and the end marker.
pub const SPECIAL_SUBTOKENS: usize = 3;

/// Serializable part of a model; everything else is derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeSpec {
    pub merges: Vec<(String, String)>,
    pub alphabet: BTreeSet<char>,
    pub vocab_size: usize,
    pub end_marker: String,
}

#[derive(Debug, Clone)]
pub struct BpeModel {
    spec: BpeSpec,
    symbols: Vec<String>,
    symbol_id: HashMap<String, u32>,
    /// (left, right) → ascending (rank, merged id).
    pair_ranks: HashMap<(u32, u32), Vec<(usize, u32)>>,
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl BpeModel {
    pub fn from_spec(spec: BpeSpec) -> Result<Self> {
        let mut symbols = vec![
            UNK_SUBTOKEN.to_string(),
            PAD_SUBTOKEN.to_string(),
            spec.end_marker.clone(),
        ];
        symbols.extend(spec.alphabet.iter().map(|c| c.to_string()));
        let mut symbol_id: HashMap<String, u32> = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            symbol_id.entry(s.clone()).or_insert(i as u32);
        }
        let mut pair_ranks: HashMap<(u32, u32), Vec<(usize, u32)>> = HashMap::new();
        for (rank, (l, r)) in spec.merges.iter().enumerate() {
            let (Some(&li), Some(&ri)) = (symbol_id.get(l), symbol_id.get(r)) else {
                return Err(Error::format(
                    "merge list",
                    format!("merge {rank} uses a symbol that does not exist yet: {l} {r}"),
                ));
            };
            let merged = format!("{l}{r}");
            let next = symbols.len() as u32;
            let mid = *symbol_id.entry(merged.clone()).or_insert_with(|| {
                symbols.push(merged);
                next
            });
            pair_ranks.entry((li, ri)).or_default().push((rank, mid));
        }
        Ok(BpeModel {
            spec,
            symbols,
            symbol_id,
            pair_ranks,
        })
    }

    pub fn spec(&self) -> &BpeSpec {
        &self.spec
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.spec.merges
    }

    pub fn alphabet(&self) -> &BTreeSet<char> {
        &self.spec.alphabet
    }

    pub fn end_marker(&self) -> &str {
        &self.spec.end_marker
    }

    /// Size of the subtoken id space (specials, characters, merged symbols).
    pub fn num_symbols(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: u32) -> &str {
        &self.symbols[id as usize]
    }

    pub fn symbol_id(&self, s: &str) -> Option<u32> {
        self.symbol_id.get(s).copied()
    }

    pub fn ends_word(&self, id: u32) -> bool {
        id != UNK_SUB_ID && id != PAD_SUB_ID && self.symbols[id as usize].ends_with(&self.spec.end_marker)
    }

    /// Subtoken ids for one whole token, including its end-of-word symbol.
    pub fn encode_ids(&self, token: &str) -> Vec<u32> {
        let mut syms: Vec<u32> = token
            .chars()
            .map(|c| {
                if self.spec.alphabet.contains(&c) {
                    self.symbol_id[c.to_string().as_str()]
                } else {
                    UNK_SUB_ID
                }
            })
            .collect();
        syms.push(END_SUB_ID);
        let mut cursor: Option<usize> = None;
        loop {
            let mut best: Option<(usize, u32, u32, u32)> = None;
            for w in syms.windows(2) {
                let Some(ranks) = self.pair_ranks.get(&(w[0], w[1])) else {
                    continue;
                };
                let at = match cursor {
                    None => 0,
                    Some(c) => ranks.partition_point(|&(r, _)| r <= c),
                };
                if let Some(&(rank, mid)) = ranks.get(at) {
                    if best.is_none_or(|b| rank < b.0) {
                        best = Some((rank, mid, w[0], w[1]));
                    }
                }
            }
            let Some((rank, mid, l, r)) = best else {
                break;
            };
            syms = merge_pair(&syms, l, r, mid);
            cursor = Some(rank);
        }
        syms
    }

    pub fn encode(&self, token: &str) -> Vec<String> {
        self.encode_ids(token)
            .into_iter()
            .map(|id| self.symbols[id as usize].clone())
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let merges_path = dir.join("merges.txt");
        std::fs::write(&merges_path, merges_to_text(&self.spec.merges))
            .map_err(|e| Error::io(&merges_path, e))?;
        let meta = BpeMeta {
            alphabet: self.spec.alphabet.iter().collect(),
            vocab_size: self.spec.vocab_size,
            end_marker: self.spec.end_marker.clone(),
        };
        let meta_path = dir.join("bpe.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let merges_path = dir.join("merges.txt");
        let text = std::fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        let meta_path = dir.join("bpe.json");
        let meta: BpeMeta = serde_json::from_str(
            &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        Self::from_spec(BpeSpec {
            merges: merges_from_text(&text)?,
            alphabet: meta.alphabet.chars().collect(),
            vocab_size: meta.vocab_size,
            end_marker: meta.end_marker,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BpeMeta {
    alphabet: String,
    vocab_size: usize,
    end_marker: String,
}

/// One `left right` pair per line, in merge order.
pub fn merges_to_text(merges: &[(String, String)]) -> String {
    let mut out = String::new();
    for (l, r) in merges {
        out.push_str(l);
        out.push(' ');
        out.push_str(r);
        out.push('\n');
    }
    out
}

pub fn merges_from_text(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_once(' ')
                .filter(|(l, r)| !l.is_empty() && !r.is_empty() && !r.contains(' '))
                .map(|(l, r)| (l.to_string(), r.to_string()))
                .ok_or_else(|| Error::format("merge list", format!("line {}: expected `left right`", i + 1)))
        })
        .collect()
}

/// Replaces non-overlapping occurrences of `(l, r)`, scanning left to right.
pub(crate) fn merge_pair<S: Copy + PartialEq>(syms: &[S], l: S, r: S, merged: S) -> Vec<S> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
            out.push(merged);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Decoded {
    pub words: Vec<String>,
    /// Trailing subtokens that never reached an end-of-word marker.
    pub partial: Option<String>,
}

impl Decoded {
    pub fn is_partial(&self) -> bool {
        self.partial.is_some()
    }
}

/// Concatenates subtokens back into whole tokens.
pub fn decode<S: AsRef<str>>(subtokens: &[S], end_marker: &str) -> Decoded {
    let mut out = Decoded::default();
    let mut cur = String::new();
    for s in subtokens {
        let s = s.as_ref();
        match s.strip_suffix(end_marker) {
            Some(stem) => {
                cur.push_str(stem);
                out.words.push(std::mem::take(&mut cur));
            }
            None => cur.push_str(s),
        }
    }
    if !cur.is_empty() {
        out.partial = Some(cur);
    }
    out
}

/// Heap entry: highest count first, then the lexicographically smallest pair.
#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| Reverse((&self.left, &self.right)).cmp(&Reverse((&other.left, &other.right))))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Trainer {
    table: Vec<String>,
    ids: HashMap<String, u32>,
    words: Vec<Vec<u32>>,
    freqs: Vec<u64>,
    pair_counts: HashMap<(u32, u32), u64>,
    pair_words: HashMap<(u32, u32), HashSet<usize>>,
    heap: BinaryHeap<Candidate>,
}

impl Trainer {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.table.len() as u32;
        self.table.push(s.to_string());
        self.ids.insert(s.to_string(), id);
        id
    }

    fn candidate(&self, pair: (u32, u32)) -> Candidate {
        Candidate {
            count: self.pair_counts[&pair],
            left: self.table[pair.0 as usize].clone(),
            right: self.table[pair.1 as usize].clone(),
            pair,
        }
    }

    fn add_word_pairs(&mut self, w: usize, touched: &mut BTreeSet<(u32, u32)>) {
        let f = self.freqs[w];
        for i in 1..self.words[w].len() {
            let p = (self.words[w][i - 1], self.words[w][i]);
            *self.pair_counts.entry(p).or_default() += f;
            self.pair_words.entry(p).or_default().insert(w);
            touched.insert(p);
        }
    }

    fn remove_word_pairs(&mut self, w: usize) {
        let f = self.freqs[w];
        for i in 1..self.words[w].len() {
            let p = (self.words[w][i - 1], self.words[w][i]);
            if let Some(c) = self.pair_counts.get_mut(&p) {
                *c -= f;
                if *c == 0 {
                    self.pair_counts.remove(&p);
                }
            }
            if let Some(set) = self.pair_words.get_mut(&p) {
                set.remove(&w);
            }
        }
    }

    fn pop_best(&mut self) -> Option<Candidate> {
        while let Some(top) = self.heap.pop() {
            match self.pair_counts.get(&top.pair) {
                Some(&c) if c == top.count => return Some(top),
                Some(_) => {
                    let fresh = self.candidate(top.pair);
                    self.heap.push(fresh);
                }
                None => {}
            }
        }
        None
    }
}

/// Learns merges from `(word, frequency)` pairs.
///
/// At most `vocab_size - |alphabet| - 3` merges are learned, so the
/// alphabet, the merge list and the three special symbols together never
/// exceed `vocab_size`.
pub fn train_bpe(word_counts: &BTreeMap<String, u64>, vocab_size: usize) -> Result<BpeModel> {
    let alphabet: BTreeSet<char> = word_counts
        .iter()
        .filter(|(_, &f)| f > 0)
        .flat_map(|(w, _)| w.chars())
        .collect();
    if vocab_size < alphabet.len() + SPECIAL_SUBTOKENS {
        return Err(Error::InvalidArgument(format!(
            "vocab_size {vocab_size} must exceed alphabet size {} + 2",
            alphabet.len()
        )));
    }
    let budget = vocab_size - alphabet.len() - SPECIAL_SUBTOKENS;

    let mut tr = Trainer {
        table: Vec::new(),
        ids: HashMap::new(),
        words: Vec::new(),
        freqs: Vec::new(),
        pair_counts: HashMap::new(),
        pair_words: HashMap::new(),
        heap: BinaryHeap::new(),
    };
    let end = tr.intern(END_MARKER);
    for (word, &f) in word_counts {
        if f == 0 || word.is_empty() {
            continue;
        }
        let mut syms: Vec<u32> = word.chars().map(|c| tr.intern(&c.to_string())).collect();
        syms.push(end);
        tr.words.push(syms);
        tr.freqs.push(f);
    }
    let mut touched = BTreeSet::new();
    for w in 0..tr.words.len() {
        tr.add_word_pairs(w, &mut touched);
    }
    for p in touched {
        let c = tr.candidate(p);
        tr.heap.push(c);
    }

    let mut merges = Vec::new();
    while merges.len() < budget {
        let Some(best) = tr.pop_best() else { break };
        if best.count < 2 {
            break;
        }
        let merged = format!("{}{}", best.left, best.right);
        let mid = tr.intern(&merged);
        let (l, r) = best.pair;
        let mut affected: Vec<usize> = tr
            .pair_words
            .get(&best.pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        let mut touched = BTreeSet::new();
        for w in affected {
            tr.remove_word_pairs(w);
            tr.words[w] = merge_pair(&tr.words[w], l, r, mid);
            tr.add_word_pairs(w, &mut touched);
        }
        for p in touched {
            if tr.pair_counts.contains_key(&p) {
                let c = tr.candidate(p);
                tr.heap.push(c);
            }
        }
        merges.push((best.left, best.right));
    }

    BpeModel::from_spec(BpeSpec {
        merges,
        alphabet,
        vocab_size,
        end_marker: END_MARKER.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(items: &[(&str, u64)]) -> BTreeMap<String, u64> {
        items.iter().map(|(w, f)| (w.to_string(), *f)).collect()
    }

    fn pair(l: &str, r: &str) -> (String, String) {
        (l.to_string(), r.to_string())
    }

    #[test]
    fn first_merges_follow_pair_counts_and_tie_break() {
        // a a a b </w>, weight 2: (a,a)=4, (a,b)=2, (b,</w>)=2.
        let m = train_bpe(&corpus(&[("aaab", 2)]), 5 + 3).unwrap();
        assert_eq!(m.merges()[0], pair("a", "a"));
        // aa a b </w>: three-way tie at 2, smallest pair is (a,b).
        assert_eq!(m.merges()[1], pair("a", "b"));
    }

    #[test]
    fn single_char_word_stops_after_marker_merge() {
        let m = train_bpe(&corpus(&[("x", 5)]), 100).unwrap();
        assert_eq!(m.merges(), [pair("x", "</w>")]);
    }

    #[test]
    fn budget_caps_merge_count() {
        let m = train_bpe(&corpus(&[("abcabc", 10)]), 3 + 3 + 2).unwrap();
        assert_eq!(m.merges().len(), 2);
        assert!(m.alphabet().len() + m.merges().len() + SPECIAL_SUBTOKENS <= 8);
        assert!(train_bpe(&corpus(&[("abc", 1)]), 5).is_err());
    }

    #[test]
    fn empty_corpus_learns_nothing() {
        let m = train_bpe(&BTreeMap::new(), 3).unwrap();
        assert!(m.merges().is_empty());
    }

    #[test]
    fn encode_replays_merges_in_order() {
        let spec = BpeSpec {
            merges: vec![pair("a", "a"), pair("a", "b"), pair("aa", "ab")],
            alphabet: ['a', 'b'].into_iter().collect(),
            vocab_size: 10,
            end_marker: END_MARKER.into(),
        };
        let m = BpeModel::from_spec(spec).unwrap();
        assert_eq!(m.encode("aaab"), ["aaab", "</w>"]);
    }

    #[test]
    fn identity_segmentation_without_merges() {
        let m = BpeModel::from_spec(BpeSpec {
            merges: vec![],
            alphabet: ['a', 'b'].into_iter().collect(),
            vocab_size: 10,
            end_marker: END_MARKER.into(),
        })
        .unwrap();
        assert_eq!(m.encode("ab"), ["a", "b", "</w>"]);
        let enc = m.encode("aµb");
        assert!(enc.contains(&"<unk>".to_string()));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&["fo", "o", "</w>"], END_MARKER).words, ["foo"]);
        assert_eq!(decode::<&str>(&[], END_MARKER), Decoded::default());
        let d = decode(&["fo"], END_MARKER);
        assert!(d.is_partial());
        assert_eq!(d.partial.as_deref(), Some("fo"));
        assert_eq!(decode(&["a", "b</w>", "c</w>"], END_MARKER).words, ["ab", "c"]);
    }

    #[test]
    fn merge_file_roundtrip() {
        let m = train_bpe(&corpus(&[("getName", 4), ("getValue", 3), ("$name", 2)]), 40).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = BpeModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let text = std::fs::read_to_string(dir.path().join("merges.txt")).unwrap();
        assert_eq!(text.lines().count(), m.merges().len());
        assert!(merges_from_text("justone\n").is_err());
    }


    /// Recounts every pair from scratch each round.
    fn naive_train(words: &BTreeMap<String, u64>, vocab_size: usize) -> Vec<(String, String)> {
        let alphabet: BTreeSet<char> = words.keys().flat_map(|w| w.chars()).collect();
        let budget = vocab_size - alphabet.len() - SPECIAL_SUBTOKENS;
        let mut segs: Vec<(Vec<String>, u64)> = words
            .iter()
            .map(|(w, &f)| {
                let mut s: Vec<String> = w.chars().map(String::from).collect();
                s.push(END_MARKER.into());
                (s, f)
            })
            .collect();
        let mut merges = Vec::new();
        while merges.len() < budget {
            let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (s, f) in &segs {
                for w in s.windows(2) {
                    *counts.entry((w[0].clone(), w[1].clone())).or_default() += f;
                }
            }
            let Some(best) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0))) else {
                break;
            };
            if *best.1 < 2 {
                break;
            }
            let (l, r) = best.0.clone();
            for (s, _) in segs.iter_mut() {
                *s = naive_apply(s, &l, &r);
            }
            merges.push((l, r));
        }
        merges
    }

    fn naive_apply(s: &[String], l: &str, r: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < s.len() {
            if i + 1 < s.len() && s[i] == l && s[i + 1] == r {
                out.push(format!("{l}{r}"));
                i += 2;
            } else {
                out.push(s[i].clone());
                i += 1;
            }
        }
        out
    }

    fn naive_encode(m: &BpeModel, word: &str) -> Vec<String> {
        let mut s: Vec<String> = word
            .chars()
            .map(|c| if m.alphabet().contains(&c) { c.to_string() } else { UNK_SUBTOKEN.to_string() })
            .collect();
        s.push(END_MARKER.into());
        for (l, r) in m.merges() {
            s = naive_apply(&s, l, r);
        }
        s
    }

    proptest! {
        #[test]
        fn heap_training_matches_naive_recount(words in prop::collection::btree_map("[a-c]{1,7}", 1u64..5, 1..25), extra in 0usize..30) {
            let alphabet: BTreeSet<char> = words.keys().flat_map(|w| w.chars()).collect();
            let vs = alphabet.len() + 3 + extra;
            let m = train_bpe(&words, vs).unwrap();
            prop_assert_eq!(m.merges().to_vec(), naive_train(&words, vs));
        }

        #[test]
        fn cursor_encoding_matches_sequential_replay(words in prop::collection::btree_map("[a-c]{1,7}", 1u64..5, 1..25), probe in "[a-dx]{0,10}") {
            let m = train_bpe(&words, 60).unwrap();
            prop_assert_eq!(m.encode(&probe), naive_encode(&m, &probe));
        }

        #[test]
        fn cursor_handles_arbitrary_merge_lists(raw in prop::collection::vec((0usize..8, 0usize..8), 0..12), probe in "[ab]{0,10}") {
            // Random but well-formed lists, possibly with repeated pairs.
            let mut known: Vec<String> = vec!["a".into(), "b".into(), END_MARKER.into()];
            let mut merges = Vec::new();
            for (i, j) in raw {
                let (l, r) = (known[i % known.len()].clone(), known[j % known.len()].clone());
                if l.contains(END_MARKER) {
                    continue;
                }
                known.push(format!("{l}{r}"));
                merges.push((l, r));
            }
            let m = BpeModel::from_spec(BpeSpec {
                merges,
                alphabet: ['a', 'b'].into_iter().collect(),
                vocab_size: 100,
                end_marker: END_MARKER.into(),
            }).unwrap();
            prop_assert_eq!(m.encode(&probe), naive_encode(&m, &probe));
        }
    }

    proptest! {
        #[test]
        fn training_words_reproduce_and_roundtrip(words in prop::collection::btree_map("[a-d$_]{1,8}", 1u64..6, 1..30), extra in 0usize..40) {
            let alphabet: BTreeSet<char> = words.keys().flat_map(|w| w.chars()).collect();
            let m = train_bpe(&words, alphabet.len() + 3 + extra).unwrap();
            prop_assert!(m.alphabet().len() + m.merges().len() + SPECIAL_SUBTOKENS <= m.spec().vocab_size);
            for w in words.keys() {
                let enc = m.encode(w);
                prop_assert_eq!(enc.last().map(|s| s.ends_with(END_MARKER)), Some(true));
                prop_assert_eq!(decode(&enc, END_MARKER).words, vec![w.clone()]);
            }
        }
    }
}
