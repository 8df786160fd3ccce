//! Completion candidate ranking and the line-delimited JSON service.
//!
//! Candidates whose model probability exceeds a threshold are promoted to
//! the top (at most `max_promote`, highest first); everything else follows
//! in alphabetical order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::abtest::assign_group;
use crate::corpus::{event_from_value, event_to_json, CompletionEvent, MAX_CONTEXT};
use crate::error::{Error, Result};
use crate::model::CompletionModel;

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_MAX_PROMOTE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRequest {
    pub request_id: String,
    #[serde(default)]
    pub developer_id: String,
    pub context: Vec<String>,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResponse {
    pub request_id: String,
    pub ranked: Vec<String>,
    pub promoted_count: usize,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOptions {
    pub threshold: f64,
    pub max_promote: usize,
}

impl Default for RankOptions {
    fn default() -> Self {
        RankOptions {
            threshold: DEFAULT_THRESHOLD,
            max_promote: DEFAULT_MAX_PROMOTE,
        }
    }
}

impl RankOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Orders candidates given their scores; returns the ordering and the size
/// of the promoted block.
pub fn order_candidates<S: AsRef<str>>(
    candidates: &[S],
    scores: &[f64],
    opts: &RankOptions,
) -> Result<(Vec<String>, usize)> {
    opts.validate()?;
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    if candidates.len() != scores.len() {
        return Err(Error::InvalidArgument("one score per candidate required".into()));
    }
    let mut seen = BTreeSet::new();
    for c in candidates {
        if !seen.insert(c.as_ref()) {
            return Err(Error::InvalidArgument(format!("duplicate candidate {:?}", c.as_ref())));
        }
    }
    let mut above: Vec<(usize, f64)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, s)| *s > opts.threshold)
        .collect();
    above.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| candidates[a.0].as_ref().cmp(candidates[b.0].as_ref()))
    });
    above.truncate(opts.max_promote);
    let promoted: BTreeSet<usize> = above.iter().map(|(i, _)| *i).collect();
    let mut rest: Vec<&str> = (0..candidates.len())
        .filter(|i| !promoted.contains(i))
        .map(|i| candidates[i].as_ref())
        .collect();
    rest.sort_unstable();
    let mut ranked: Vec<String> = above.iter().map(|(i, _)| candidates[*i].as_ref().to_string()).collect();
    ranked.extend(rest.into_iter().map(String::from));
    Ok((ranked, above.len()))
}

/// Scores each candidate by its raw next-token probability and orders them.
pub fn rank(model: &dyn CompletionModel, req: &RankRequest, opts: &RankOptions) -> Result<RankResponse> {
    let ctx: Vec<&str> = req.context[req.context.len().saturating_sub(MAX_CONTEXT)..]
        .iter()
        .map(String::as_str)
        .collect();
    let cands: Vec<&str> = req.candidates.iter().map(String::as_str).collect();
    if cands.is_empty() {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    let scores: Vec<f64> = model
        .probabilities(&ctx, &cands)?
        .into_iter()
        .map(|p| if p.is_finite() { p } else { 0.0 })
        .collect();
    let (ranked, promoted_count) = order_candidates(&cands, &scores, opts)?;
    Ok(RankResponse {
        request_id: req.request_id.clone(),
        ranked,
        promoted_count,
        scores: cands.iter().map(|c| c.to_string()).zip(scores).collect(),
    })
}

/// Append-only acceptance log: one JSON object per line, flushed per record.
pub struct AcceptanceLog {
    path: PathBuf,
    file: Mutex<File>,
}

pub fn acceptance_record(event: &CompletionEvent, group: &str) -> Value {
    let mut v = event_to_json(event);
    v["group"] = Value::String(group.to_string());
    v
}

impl AcceptanceLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(AcceptanceLog {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log(&self, event: &CompletionEvent, group: &str) -> Result<()> {
        let mut line = serde_json::to_vec(&acceptance_record(event, group))?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        f.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeOptions {
    pub rank: RankOptions,
    pub experiment_id: String,
    /// Groups used when an acceptance message carries no `group`.
    pub groups: Vec<String>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            rank: RankOptions::default(),
            experiment_id: "ranking".into(),
            groups: vec!["committed".into(), "completion".into(), "edit".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub lines: usize,
    pub responses: usize,
    pub errors: usize,
    pub accepted: usize,
}

fn handle_accept(v: Value, n: usize, opts: &ServeOptions, log: Option<&AcceptanceLog>) -> (Value, bool) {
    let request_id = v.get("request_id").cloned();
    let group = v.get("group").and_then(Value::as_str).map(String::from);
    let event = match event_from_value(v) {
        Ok(e) => e,
        Err(e) => return (json!({"error": "request", "line": n, "message": e.to_string()}), false),
    };
    let group = match group {
        Some(g) => g,
        None => match assign_group(&opts.experiment_id, &event.developer_id, &opts.groups) {
            Ok(g) => g.to_string(),
            Err(e) => return (json!({"error": "request", "line": n, "message": e.to_string()}), false),
        },
    };
    let mut resp = json!({"logged": false, "group": group});
    if let Some(id) = request_id {
        resp["request_id"] = id;
    }
    match log {
        Some(l) => match l.log(&event, &group) {
            Ok(()) => resp["logged"] = Value::Bool(true),
            Err(e) => {
                log::error!("acceptance log: {e}");
                resp["error"] = json!("log");
                resp["message"] = json!(e.to_string());
            }
        },
        None => resp["message"] = json!("no acceptance log configured"),
    }
    (resp, true)
}

/// Handles one protocol line. `None` for blank lines.
pub fn handle_line(
    model: &dyn CompletionModel,
    line: &str,
    n: usize,
    opts: &ServeOptions,
    log: Option<&AcceptanceLog>,
) -> Option<(Value, bool)> {
    if line.trim().is_empty() {
        return None;
    }
    let v: Value = match serde_json::from_str(line) {
        Ok(v @ Value::Object(_)) => v,
        _ => return Some((json!({"error": "parse", "line": n}), false)),
    };
    if v.get("accepted").is_some() {
        return Some(handle_accept(v, n, opts, log));
    }
    let req: RankRequest = match serde_json::from_value(v.clone()) {
        Ok(r) => r,
        Err(e) => return Some((json!({"error": "request", "line": n, "message": e.to_string()}), false)),
    };
    Some(match rank(model, &req, &opts.rank) {
        Ok(resp) => (serde_json::to_value(resp).expect("response serializes"), true),
        Err(e) => (
            json!({"error": "request", "line": n, "request_id": req.request_id, "message": e.to_string()}),
            false,
        ),
    })
}

/// Request loop over any line stream; one response line per request line,
/// in order.
pub fn serve(
    model: &dyn CompletionModel,
    opts: &ServeOptions,
    log: Option<&AcceptanceLog>,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<ServeStats> {
    opts.rank.validate()?;
    let mut stats = ServeStats::default();
    let io = |e| Error::io("<serve stream>", e);
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(io)?;
        stats.lines += 1;
        let Some((resp, ok)) = handle_line(model, &line, i + 1, opts, log) else {
            continue;
        };
        if !ok {
            stats.errors += 1;
        } else if resp.get("group").is_some() {
            stats.accepted += 1;
        }
        let mut buf = serde_json::to_vec(&resp)?;
        buf.push(b'\n');
        output.write_all(&buf).map_err(io)?;
        output.flush().map_err(io)?;
        stats.responses += 1;
    }
    Ok(stats)
}

fn serve_connection(
    model: &dyn CompletionModel,
    opts: &ServeOptions,
    log: Option<&AcceptanceLog>,
    stream: TcpStream,
) -> Result<ServeStats> {
    let reader = BufReader::new(stream.try_clone().map_err(|e| Error::io("<tcp>", e))?);
    serve(model, opts, log, reader, stream)
}

/// Accepts TCP connections and serves each on its own thread. Stops after
/// `max_connections` connections when given.
pub fn serve_tcp(
    model: &dyn CompletionModel,
    opts: &ServeOptions,
    log: Option<&AcceptanceLog>,
    listener: TcpListener,
    max_connections: Option<usize>,
) -> Result<()> {
    opts.rank.validate()?;
    std::thread::scope(|s| {
        for (i, conn) in listener.incoming().enumerate() {
            match conn {
                Ok(stream) => {
                    s.spawn(move || {
                        if let Err(e) = serve_connection(model, opts, log, stream) {
                            log::warn!("connection closed: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
            if max_connections.is_some_and(|m| i + 1 >= m) {
                break;
            }
        }
    });
    Ok(())
}
