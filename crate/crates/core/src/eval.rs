//! Top-1 accuracy and mean reciprocal rank with a top-k cutoff.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::EvalExample;
use crate::error::{Error, Result};
use crate::model::CompletionModel;

pub const DEFAULT_CUTOFF: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub mrr: f64,
    pub n: usize,
    /// 1-based rank of the target, `None` when it is not among the results.
    #[serde(skip)]
    pub per_example_ranks: Vec<Option<usize>>,
}

impl EvalReport {
    /// Ranks beyond `cutoff` contribute zero reciprocal rank.
    pub fn from_ranks(ranks: Vec<Option<usize>>, cutoff: usize) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::UndefinedMetric("no examples to evaluate".into()));
        }
        if ranks.contains(&Some(0)) {
            return Err(Error::InvalidArgument("ranks are 1-based".into()));
        }
        let n = ranks.len();
        let hits = ranks.iter().filter(|r| **r == Some(1)).count();
        let rr: f64 = ranks
            .iter()
            .map(|r| match *r {
                Some(k) if k <= cutoff => 1.0 / k as f64,
                _ => 0.0,
            })
            .sum();
        Ok(EvalReport {
            top1: hits as f64 / n as f64,
            mrr: rr / n as f64,
            n,
            per_example_ranks: ranks,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `(example_id, rank)` rows; misses are written as an empty rank.
    pub fn write_ranks_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["example_id", "rank"])?;
        for (i, r) in self.per_example_ranks.iter().enumerate() {
            w.write_record([i.to_string(), r.map(|k| k.to_string()).unwrap_or_default()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save_ranks_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_ranks_csv(f)
    }
}

/// Rank of `target` in a prediction list, compared by exact text.
pub fn rank_of<S: AsRef<str>>(predictions: &[S], target: &str) -> Option<usize> {
    predictions.iter().position(|p| p.as_ref() == target).map(|i| i + 1)
}

/// Scores `model` on `examples`. Targets the model cannot emit are misses.
pub fn evaluate(model: &dyn CompletionModel, examples: &[EvalExample], cutoff: usize) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::UndefinedMetric("no examples to evaluate".into()));
    }
    if cutoff == 0 {
        return Err(Error::InvalidArgument("cutoff must be positive".into()));
    }
    let mut ranks = Vec::with_capacity(examples.len());
    for ex in examples {
        if !model.knows(&ex.target.text) {
            ranks.push(None);
            continue;
        }
        let ctx: Vec<&str> = ex.context.iter().map(|t| t.text.as_str()).collect();
        let top = model.top_k(&ctx, cutoff)?;
        let texts: Vec<&str> = top.iter().map(|s| s.text.as_str()).collect();
        ranks.push(rank_of(&texts, &ex.target.text));
    }
    EvalReport::from_ranks(ranks, cutoff)
}
