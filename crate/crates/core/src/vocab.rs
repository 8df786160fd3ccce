//! Whole-token vocabularies and fixed-window id encoding.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lexer::Token;

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const UNK_ID: u32 = 0;
pub const PAD_ID: u32 = 1;

/// Token-text ↔ id map. Ids are dense; `<unk>` is 0 and `<pad>` is 1, and
/// regular entries follow in descending corpus frequency with ties broken
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    max_size: usize,
}

impl Vocabulary {
    /// Keeps the `max_size` most frequent texts.
    pub fn build<'a, I>(texts: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < 1 {
            return Err(Error::InvalidArgument("max_size must be at least 1".into()));
        }
        let mut counts: HashMap<&'a str, u64> = HashMap::new();
        for t in texts {
            if t != UNK && t != PAD {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size);
        Ok(Self::from_ordered(
            ranked.into_iter().map(|(t, _)| t.to_string()),
            max_size,
        ))
    }

    /// Builds from a set of token streams.
    pub fn from_streams<S: AsRef<[Token]>>(streams: &[S], max_size: usize) -> Result<Self> {
        Self::build(
            streams
                .iter()
                .flat_map(|s| s.as_ref().iter().map(|t| t.text.as_str())),
            max_size,
        )
    }

    fn from_ordered(regular: impl Iterator<Item = String>, max_size: usize) -> Self {
        let mut tokens = vec![UNK.to_string(), PAD.to_string()];
        tokens.extend(regular);
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            id_of,
            max_size,
        }
    }

    /// Number of ids, specials included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when only the two specials are present.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() == 2
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    /// Id of `text`, or `<unk>` for anything outside the vocabulary.
    pub fn id(&self, text: &str) -> u32 {
        self.id_of.get(text).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, text: &str) -> Option<u32> {
        self.id_of.get(text).copied()
    }

    pub fn text(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        id == UNK_ID || id == PAD_ID
    }

    /// Membership for a regular token; the specials never count as known.
    pub fn contains(&self, text: &str) -> bool {
        self.get(text).is_some_and(|id| !Self::is_special(id))
    }

    pub fn encode_texts<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Vec<u32> {
        texts.into_iter().map(|t| self.id(t)).collect()
    }

    /// Share of token occurrences that map to a regular id.
    pub fn coverage<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> f64 {
        let (mut hit, mut n) = (0usize, 0usize);
        for t in texts {
            n += 1;
            if self.contains(t) {
                hit += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            hit as f64 / n as f64
        }
    }

    /// `token<TAB>id` per line, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    /// Rebuilds from the full id-ordered token list, specials first.
    pub fn from_parts(tokens: &[String], max_size: usize) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != UNK || tokens[1] != PAD {
            return Err(Error::format("vocabulary", "ids 0 and 1 must be <unk> and <pad>"));
        }
        let v = Self::from_ordered(tokens[2..].iter().cloned(), max_size);
        if v.id_of.len() != v.tokens.len() {
            return Err(Error::format("vocabulary", "duplicate token"));
        }
        Ok(v)
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut regular = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::format("vocabulary", format!("line {}: missing tab", lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::format("vocabulary", format!("line {}: bad id", lineno + 1)))?;
            if id != lineno {
                return Err(Error::format(
                    "vocabulary",
                    format!("line {}: ids must be dense and sorted", lineno + 1),
                ));
            }
            match lineno {
                0 if tok != UNK => return Err(Error::format("vocabulary", "id 0 must be <unk>")),
                1 if tok != PAD => return Err(Error::format("vocabulary", "id 1 must be <pad>")),
                0 | 1 => {}
                _ => regular.push(tok.to_string()),
            }
        }
        if text.lines().count() < 2 {
            return Err(Error::format("vocabulary", "missing specials"));
        }
        let n = regular.len();
        Ok(Self::from_ordered(regular.into_iter(), n.max(1)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Splits a stream into consecutive non-overlapping windows of `window`
/// ids. Out-of-vocabulary texts become `<unk>`; the final short window is
/// right-padded with `<pad>`.
pub fn encode(tokens: &[Token], vocab: &Vocabulary, window: usize) -> Result<Vec<Vec<u32>>> {
    encode_texts(tokens.iter().map(|t| t.text.as_str()), vocab, window)
}

pub fn encode_texts<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    vocab: &Vocabulary,
    window: usize,
) -> Result<Vec<Vec<u32>>> {
    if window < 2 {
        return Err(Error::InvalidArgument("window must be at least 2".into()));
    }
    let ids = vocab.encode_texts(texts);
    Ok(ids
        .chunks(window)
        .map(|chunk| {
            let mut w = chunk.to_vec();
            w.resize(window, PAD_ID);
            w
        })
        .collect())
}
