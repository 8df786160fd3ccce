//! Common completion interface over the n-gram, whole-token Transformer and
//! BPE Transformer models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bpe::{decode, BpeModel, BpeSpec, PAD_SUB_ID, UNK_SUB_ID};
use crate::error::{Error, Result};
use crate::ngram::{rank_distribution, NgramModel};
use crate::transformer::{load_params, save_params};
use crate::vocab::{Vocabulary, PAD_ID};
use crate::Transformer32;

/// Default beam width for whole-token search over subtokens.
pub const DEFAULT_BEAM: usize = 8;
/// Longest subtoken expansion considered for one whole token.
pub const MAX_SUBTOKENS: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub text: String,
    pub probability: f64,
}

pub trait CompletionModel: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Up to `k` whole-token predictions, most probable first.
    fn top_k(&self, context: &[&str], k: usize) -> Result<Vec<Scored>>;

    /// Raw model probability of each candidate as the next token. Candidates
    /// the model cannot produce score 0.
    fn probabilities(&self, context: &[&str], candidates: &[&str]) -> Result<Vec<f64>>;

    fn probability(&self, context: &[&str], candidate: &str) -> Result<f64> {
        Ok(self.probabilities(context, &[candidate])?[0])
    }

    /// Whether `text` can be emitted at all.
    fn knows(&self, text: &str) -> bool;
}

fn regular_id(vocab: &Vocabulary, text: &str) -> Option<u32> {
    vocab.get(text).filter(|&id| !Vocabulary::is_special(id))
}

fn scored(vocab: &Vocabulary, ranked: Vec<(u32, f64)>) -> Vec<Scored> {
    ranked
        .into_iter()
        .map(|(id, p)| Scored {
            text: vocab.text(id).to_string(),
            probability: p,
        })
        .collect()
}

pub struct NgramCompleter {
    pub model: NgramModel,
}

impl NgramCompleter {
    pub fn new(model: NgramModel) -> Self {
        NgramCompleter { model }
    }

    fn ids(&self, context: &[&str]) -> Vec<u32> {
        let keep = self.model.order().saturating_sub(1);
        let tail = &context[context.len().saturating_sub(keep)..];
        tail.iter().map(|t| self.model.vocab().id(t)).collect()
    }
}

impl CompletionModel for NgramCompleter {
    fn kind(&self) -> &'static str {
        "ngram"
    }

    fn top_k(&self, context: &[&str], k: usize) -> Result<Vec<Scored>> {
        Ok(scored(self.model.vocab(), self.model.topk(&self.ids(context), k)))
    }

    fn probabilities(&self, context: &[&str], candidates: &[&str]) -> Result<Vec<f64>> {
        let ids = self.ids(context);
        Ok(candidates
            .iter()
            .map(|c| regular_id(self.model.vocab(), c).map_or(0.0, |id| self.model.prob(&ids, id)))
            .collect())
    }

    fn knows(&self, text: &str) -> bool {
        regular_id(self.model.vocab(), text).is_some()
    }
}

/// Whole-token Transformer over a fixed vocabulary.
pub struct TransformerCompleter {
    pub params: Transformer32,
    pub vocab: Vocabulary,
}

impl TransformerCompleter {
    pub fn new(params: Transformer32, vocab: Vocabulary) -> Result<Self> {
        if params.config().vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocabulary size {} does not match vocabulary of {}",
                params.config().vocab_size,
                vocab.len()
            )));
        }
        Ok(TransformerCompleter { params, vocab })
    }

    /// Next-token distribution; an empty context is read as a single pad.
    pub fn distribution(&self, context: &[&str]) -> Result<Vec<f64>> {
        let mut ids: Vec<u32> = context.iter().map(|t| self.vocab.id(t)).collect();
        if ids.is_empty() {
            ids.push(PAD_ID);
        }
        Ok(self.params.next_distribution(&ids)?.into_iter().map(f64::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::to_value(SavedWhole {
            model: "transformer".into(),
            vocab: self.vocab.tokens().to_vec(),
            vocab_max_size: self.vocab.max_size(),
        })?;
        save_params(&self.params, &extra, path)
    }
}

impl CompletionModel for TransformerCompleter {
    fn kind(&self) -> &'static str {
        "transformer"
    }

    fn top_k(&self, context: &[&str], k: usize) -> Result<Vec<Scored>> {
        let dist = self.distribution(context)?;
        Ok(scored(&self.vocab, rank_distribution(&dist, &self.vocab, k)))
    }

    fn probabilities(&self, context: &[&str], candidates: &[&str]) -> Result<Vec<f64>> {
        let dist = self.distribution(context)?;
        Ok(candidates
            .iter()
            .map(|c| regular_id(&self.vocab, c).map_or(0.0, |id| dist[id as usize]))
            .collect())
    }

    fn knows(&self, text: &str) -> bool {
        regular_id(&self.vocab, text).is_some()
    }
}

/// Transformer over BPE subtokens, scored at the whole-token level.
pub struct BpeTransformerCompleter {
    pub params: Transformer32,
    pub bpe: BpeModel,
    pub beam: usize,
}

#[derive(Clone)]
struct Beam {
    ids: Vec<u32>,
    logp: f64,
}

impl BpeTransformerCompleter {
    pub fn new(params: Transformer32, bpe: BpeModel) -> Result<Self> {
        if params.config().vocab_size != bpe.num_symbols() {
            return Err(Error::Config(format!(
                "model vocabulary size {} does not match {} subtokens",
                params.config().vocab_size,
                bpe.num_symbols()
            )));
        }
        Ok(BpeTransformerCompleter {
            params,
            bpe,
            beam: DEFAULT_BEAM,
        })
    }

    pub fn with_beam(mut self, beam: usize) -> Self {
        self.beam = beam.max(1);
        self
    }

    fn context_ids(&self, context: &[&str], reserve: usize) -> Vec<u32> {
        let budget = self.params.config().context_len.saturating_sub(reserve);
        let mut ids = Vec::new();
        // Encode from the right until the budget is filled.
        for t in context.iter().rev() {
            if ids.len() >= budget {
                break;
            }
            let mut enc = self.bpe.encode_ids(t);
            enc.reverse();
            ids.extend(enc);
        }
        ids.truncate(budget);
        ids.reverse();
        if ids.is_empty() {
            ids.push(PAD_SUB_ID);
        }
        ids
    }

    fn text_of(&self, ids: &[u32]) -> Option<String> {
        let syms: Vec<&str> = ids.iter().map(|&i| self.bpe.symbol(i)).collect();
        let d = decode(&syms, self.bpe.end_marker());
        match (d.words.as_slice(), d.is_partial()) {
            ([w], false) if !w.is_empty() => Some(w.clone()),
            _ => None,
        }
    }

    /// Whole-token candidates with their unnormalized subtoken-product
    /// probabilities, best first.
    pub fn beam_candidates(&self, context: &[&str], k: usize) -> Result<Vec<Scored>> {
        let width = self.beam.max(k);
        let ctx = self.context_ids(context, 1);
        let mut beams = vec![Beam { ids: Vec::new(), logp: 0.0 }];
        let mut done: Vec<Scored> = Vec::new();
        for _ in 0..MAX_SUBTOKENS {
            let mut next: Vec<Beam> = Vec::new();
            for b in &beams {
                let mut input = ctx.clone();
                input.extend(&b.ids);
                let dist = self.params.next_distribution(&input)?;
                let mut ranked: Vec<u32> = (0..dist.len() as u32)
                    .filter(|&i| i != UNK_SUB_ID && i != PAD_SUB_ID)
                    .collect();
                ranked.sort_by(|&x, &y| dist[y as usize].total_cmp(&dist[x as usize]).then(x.cmp(&y)));
                for &id in ranked.iter().take(width) {
                    let p = f64::from(dist[id as usize]);
                    if p <= 0.0 {
                        continue;
                    }
                    let mut ids = b.ids.clone();
                    ids.push(id);
                    let logp = b.logp + p.ln();
                    if self.bpe.ends_word(id) {
                        if let Some(text) = self.text_of(&ids) {
                            done.push(Scored { text, probability: logp.exp() });
                        }
                    } else {
                        next.push(Beam { ids, logp });
                    }
                }
            }
            next.sort_by(|a, b| b.logp.total_cmp(&a.logp).then_with(|| a.ids.cmp(&b.ids)));
            next.truncate(width);
            done.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.text.cmp(&b.text)));
            done.dedup_by(|a, b| a.text == b.text);
            let kth = if done.len() >= k { done[k - 1].probability } else { 0.0 };
            if next.is_empty() || next[0].logp.exp() <= kth {
                break;
            }
            beams = next;
        }
        done.truncate(k);
        Ok(done)
    }

    /// Probability of each subtoken of `candidate` under teacher forcing,
    /// multiplied together.
    fn candidate_probability(&self, context: &[&str], candidate: &str) -> Result<f64> {
        let sub = self.bpe.encode_ids(candidate);
        if sub.contains(&UNK_SUB_ID) {
            return Ok(0.0);
        }
        let limit = self.params.config().context_len;
        if sub.len() >= limit {
            return Ok(0.0);
        }
        let ctx = self.context_ids(context, sub.len());
        let start = ctx.len();
        let mut ids = ctx;
        ids.extend(&sub[..sub.len() - 1]);
        let probs = self.params.forward(&ids)?;
        Ok(sub
            .iter()
            .enumerate()
            .map(|(i, &s)| f64::from(probs.get(start - 1 + i, s as usize)))
            .product())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::to_value(SavedBpe {
            model: "bpe-transformer".into(),
            bpe: self.bpe.spec().clone(),
            beam: self.beam,
        })?;
        save_params(&self.params, &extra, path)
    }
}

impl CompletionModel for BpeTransformerCompleter {
    fn kind(&self) -> &'static str {
        "bpe-transformer"
    }

    fn top_k(&self, context: &[&str], k: usize) -> Result<Vec<Scored>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut c = self.beam_candidates(context, k)?;
        let total: f64 = c.iter().map(|s| s.probability).sum();
        if total > 0.0 {
            for s in &mut c {
                s.probability /= total;
            }
        }
        Ok(c)
    }

    fn probabilities(&self, context: &[&str], candidates: &[&str]) -> Result<Vec<f64>> {
        candidates.iter().map(|c| self.candidate_probability(context, c)).collect()
    }

    fn knows(&self, text: &str) -> bool {
        !text.is_empty() && !self.bpe.encode_ids(text).contains(&UNK_SUB_ID)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedWhole {
    model: String,
    vocab: Vec<String>,
    vocab_max_size: usize,
}

#[derive(Serialize, Deserialize)]
struct SavedBpe {
    model: String,
    bpe: BpeSpec,
    beam: usize,
}

/// Loads any saved model: JSON n-gram files or binary Transformer files.
pub fn load_model(path: &Path) -> Result<Box<dyn CompletionModel>> {
    let head = {
        use std::io::Read;
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = [0u8; 8];
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        buf[..n].to_vec()
    };
    if head.as_slice() != crate::transformer::PARAM_MAGIC {
        return Ok(Box::new(NgramCompleter::new(NgramModel::load(path)?)));
    }
    let (params, extra) = load_params::<f32>(path)?;
    match extra.get("model").and_then(|m| m.as_str()) {
        Some("transformer") => {
            let s: SavedWhole = serde_json::from_value(extra)?;
            let vocab = Vocabulary::from_parts(&s.vocab, s.vocab_max_size)?;
            Ok(Box::new(TransformerCompleter::new(params, vocab)?))
        }
        Some("bpe-transformer") => {
            let s: SavedBpe = serde_json::from_value(extra)?;
            Ok(Box::new(BpeTransformerCompleter::new(params, BpeModel::from_spec(s.bpe)?)?.with_beam(s.beam)))
        }
        other => Err(Error::format(
            "model file",
            format!("unknown model type {other:?} in {}", path.display()),
        )),
    }
}
