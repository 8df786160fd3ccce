//! Decoder-only Transformer language model.
//!
//! Pre-norm residual blocks (LN → multi-head causal attention → add,
//! LN → GELU feed-forward → add), learned positional embeddings and an
//! untied output projection. Training uses Adam with linear warmup,
//! global-norm gradient clipping and patience-based early stopping.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor::{softmax_in_place, Matrix};
use crate::vocab::PAD_ID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl TransformerConfig {
    /// Desk-scale default: 6 blocks of width 128.
    pub fn desk(vocab_size: usize, context_len: usize) -> Self {
        TransformerConfig {
            vocab_size,
            context_len,
            d_model: 128,
            n_layers: 6,
            n_heads: 4,
            d_ff: 512,
            dropout: 0.1,
            seed: 0,
        }
    }

    /// Small profile for tests and quick experiments.
    pub fn test_profile(vocab_size: usize, context_len: usize) -> Self {
        TransformerConfig {
            vocab_size,
            context_len,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context_len must be at least 2".into()));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("n_layers and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

const TOK: usize = 0;
const POS: usize = 1;
const PER_LAYER: usize = 16;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;
const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gamma", "ln2.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<T: Scalar> {
    config: TransformerConfig,
    tensors: Vec<Matrix<T>>,
}

fn layer_base(l: usize) -> usize {
    2 + l * PER_LAYER
}

fn shapes(c: &TransformerConfig) -> Vec<(usize, usize)> {
    let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff);
    let mut s = vec![(v, d), (c.context_len, d)];
    for _ in 0..c.n_layers {
        s.extend([
            (1, d), (1, d), (d, d), (1, d), (d, d), (1, d), (d, d), (1, d), (d, d), (1, d),
            (1, d), (1, d), (d, f), (1, f), (f, d), (1, d),
        ]);
    }
    s.extend([(1, d), (1, d), (d, v)]);
    s
}

/// Dropout masks drawn from a seeded stream.
pub struct Dropper {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl Dropper {
    pub fn new(p: f64, seed: u64) -> Self {
        Dropper {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        if self.p <= 0.0 {
            return x;
        }
        let n = g.value(x).len();
        let keep: Vec<bool> = (0..n).map(|_| self.rng.random::<f64>() >= self.p).collect();
        g.dropout(x, &keep, T::lit(self.p))
    }
}

/// Inputs and next-token targets for one training sequence; trailing pads
/// are dropped and pad targets are skipped.
pub fn inputs_and_targets(seq: &[u32]) -> (&[u32], Vec<Option<usize>>) {
    let end = seq.iter().rposition(|&t| t != PAD_ID).map_or(0, |p| p + 1);
    let seq = &seq[..end];
    if seq.len() < 2 {
        return (&seq[..0], Vec::new());
    }
    let inputs = &seq[..seq.len() - 1];
    let targets = seq[1..]
        .iter()
        .map(|&t| if t == PAD_ID { None } else { Some(t as usize) })
        .collect();
    (inputs, targets)
}

impl<T: Scalar> TransformerParams<T> {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual output
    /// projections scaled by 1/sqrt(2·layers), zero biases, unit LN gains.
    pub fn init(config: &TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, resid_std).expect("valid std");
        let shapes = shapes(config);
        let n_final = shapes.len() - 3;
        let mut tensors = Vec::with_capacity(shapes.len());
        for (i, &(r, c)) in shapes.iter().enumerate() {
            let role = if i >= 2 && i < n_final { Some((i - 2) % PER_LAYER) } else { None };
            let m = match (i, role) {
                (_, Some(LN1_G | LN2_G)) => Matrix::filled(r, c, T::one()),
                (_, Some(LN1_B | LN2_B | BQ | BK | BV | BO | B1 | B2)) => Matrix::zeros(r, c),
                (_, Some(WO | W2)) => Matrix::from_fn(r, c, |_, _| T::lit(resid.sample(&mut rng))),
                (i, None) if i == n_final => Matrix::filled(r, c, T::one()),
                (i, None) if i == n_final + 1 => Matrix::zeros(r, c),
                _ => Matrix::from_fn(r, c, |_, _| T::lit(normal.sample(&mut rng))),
            };
            tensors.push(m);
        }
        Ok(TransformerParams {
            config: config.clone(),
            tensors,
        })
    }

    /// All-zero parameters: every prediction is uniform.
    pub fn zeroed(config: &TransformerConfig) -> Result<Self> {
        config.validate()?;
        Ok(TransformerParams {
            config: config.clone(),
            tensors: shapes(config).into_iter().map(|(r, c)| Matrix::zeros(r, c)).collect(),
        })
    }

    pub fn from_tensors(config: TransformerConfig, tensors: Vec<Matrix<T>>) -> Result<Self> {
        config.validate()?;
        let want = shapes(&config);
        if want.len() != tensors.len() || want.iter().zip(&tensors).any(|(s, t)| *s != t.shape()) {
            return Err(Error::format("transformer parameters", "tensor shapes do not match the config"));
        }
        Ok(TransformerParams { config, tensors })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn param_name(&self, i: usize) -> String {
        let n = self.tensors.len();
        match i {
            TOK => "tok_emb".into(),
            POS => "pos_emb".into(),
            _ if i == n - 3 => "ln_f.gamma".into(),
            _ if i == n - 2 => "ln_f.beta".into(),
            _ if i == n - 1 => "w_out".into(),
            _ => format!("layer{}.{}", (i - 2) / PER_LAYER, LAYER_NAMES[(i - 2) % PER_LAYER]),
        }
    }

    pub fn cast<U: Scalar>(&self) -> TransformerParams<U> {
        TransformerParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::all_finite)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.context_len {
            return Err(Error::InputTooLong {
                len: ids.len(),
                max: self.config.context_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the network on `g` and returns logits for `rows` (all rows
    /// when `None`).
    pub fn build_graph(
        &self,
        g: &mut Graph<'_, T>,
        ids: &[u32],
        rows: Option<&[usize]>,
        mut dropper: Option<&mut Dropper>,
    ) -> Var {
        let c = &self.config;
        let n = ids.len();
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let key_mask: Vec<bool> = ids.iter().map(|&t| t == PAD_ID).collect();
        let tok = g.gather_rows(Var::Param(TOK), &idx);
        let pos = g.gather_rows(Var::Param(POS), &positions);
        let mut x = g.add(tok, pos);
        if let Some(d) = dropper.as_deref_mut() {
            x = d.apply(g, x);
        }
        let dh = c.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let final_base = self.tensors.len() - 3;
        for l in 0..c.n_layers {
            let b = layer_base(l);
            let p = |k: usize| Var::Param(b + k);
            let h = g.layer_norm(x, p(LN1_G), p(LN1_B));
            let q = g.matmul(h, p(WQ));
            let q = g.add_row(q, p(BQ));
            let k = g.matmul(h, p(WK));
            let k = g.add_row(k, p(BK));
            let v = g.matmul(h, p(WV));
            let v = g.add_row(v, p(BV));
            let mut heads = Vec::with_capacity(c.n_heads);
            for hd in 0..c.n_heads {
                let qh = g.slice_cols(q, hd * dh, dh);
                let kh = g.slice_cols(k, hd * dh, dh);
                let vh = g.slice_cols(v, hd * dh, dh);
                let s = g.matmul_nt(qh, kh);
                let s = g.scale(s, scale);
                let a = g.causal_softmax(s, &key_mask);
                heads.push(g.matmul(a, vh));
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
            let o = g.matmul(cat, p(WO));
            let mut o = g.add_row(o, p(BO));
            if let Some(d) = dropper.as_deref_mut() {
                o = d.apply(g, o);
            }
            x = g.add(x, o);
            let h = g.layer_norm(x, p(LN2_G), p(LN2_B));
            let f = g.matmul(h, p(W1));
            let f = g.add_row(f, p(B1));
            let f = g.gelu(f);
            let f = g.matmul(f, p(W2));
            let mut f = g.add_row(f, p(B2));
            if let Some(d) = dropper.as_deref_mut() {
                f = d.apply(g, f);
            }
            x = g.add(x, f);
        }
        let mut h = g.layer_norm(x, Var::Param(final_base), Var::Param(final_base + 1));
        if let Some(rows) = rows {
            h = g.gather_rows(h, rows);
        }
        g.matmul(h, Var::Param(final_base + 2))
    }

    pub fn logits(&self, ids: &[u32]) -> Result<Matrix<T>> {
        self.check_ids(ids)?;
        let mut g = Graph::new(&self.tensors);
        let out = self.build_graph(&mut g, ids, None, None);
        Ok(g.value(out).clone())
    }

    /// Next-token distributions for every position (`L × vocab_size`).
    pub fn forward(&self, ids: &[u32]) -> Result<Matrix<T>> {
        let mut m = self.logits(ids)?;
        for i in 0..m.rows() {
            softmax_in_place(m.row_mut(i));
        }
        Ok(m)
    }

    /// Distribution after the last id. Only the most recent
    /// `context_len − 1` ids are used, matching training windows.
    pub fn next_distribution(&self, context: &[u32]) -> Result<Vec<T>> {
        let ctx = &context[context.len().saturating_sub(self.config.context_len - 1)..];
        if ctx.is_empty() {
            return Err(Error::InvalidArgument("empty context".into()));
        }
        self.check_ids(ctx)?;
        let mut g = Graph::new(&self.tensors);
        let out = self.build_graph(&mut g, ctx, Some(&[ctx.len() - 1]), None);
        let mut row = g.value(out).row(0).to_vec();
        softmax_in_place(&mut row);
        Ok(row)
    }

    fn prepared<'s>(&self, batch: &'s [Vec<u32>]) -> Result<(Vec<(&'s [u32], Vec<Option<usize>>)>, usize)> {
        let mut out = Vec::with_capacity(batch.len());
        let mut total = 0;
        for s in batch {
            let (inputs, targets) = inputs_and_targets(s);
            self.check_ids(inputs)?;
            total += targets.iter().filter(|t| t.is_some()).count();
            if !inputs.is_empty() {
                out.push((inputs, targets));
            }
        }
        if total == 0 {
            return Err(Error::UndefinedMetric("batch has no non-pad targets".into()));
        }
        Ok((out, total))
    }

    /// Mean next-token cross-entropy over non-pad targets.
    pub fn loss(&self, batch: &[Vec<u32>]) -> Result<f64> {
        let (prepared, total) = self.prepared(batch)?;
        let mut sum = 0.0;
        for (inputs, targets) in &prepared {
            let mut g = Graph::new(&self.tensors);
            let logits = self.build_graph(&mut g, inputs, None, None);
            let ce = g.cross_entropy(logits, targets);
            sum += g.value(ce).get(0, 0).as_f64();
        }
        Ok(sum / total as f64)
    }

    pub fn zero_grads(&self) -> Vec<Matrix<T>> {
        self.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
    }

    /// Mean loss and its gradient, accumulated into `grads`.
    pub fn loss_and_grad(
        &self,
        batch: &[Vec<u32>],
        grads: &mut [Matrix<T>],
        mut dropper: Option<&mut Dropper>,
    ) -> Result<f64> {
        let (prepared, total) = self.prepared(batch)?;
        let inv = T::one() / T::lit(total as f64);
        let mut sum = 0.0;
        for (inputs, targets) in &prepared {
            let mut g = Graph::new(&self.tensors);
            let logits = self.build_graph(&mut g, inputs, None, dropper.as_deref_mut());
            let ce = g.cross_entropy(logits, targets);
            sum += g.value(ce).get(0, 0).as_f64();
            let out = g.scale(ce, inv);
            g.backward(out, grads);
        }
        Ok(sum / total as f64)
    }

    /// sha256 over the little-endian tensor payload.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for t in &self.tensors {
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}

pub const PARAM_MAGIC: &[u8; 8] = b"CLTFPARM";
pub const PARAM_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamHeader {
    config: TransformerConfig,
    dtype: String,
    extra: serde_json::Value,
}

/// Binary layout: magic, version (u32), header length (u64), JSON header,
/// then per tensor rows (u64), cols (u64) and the little-endian payload.
pub fn write_params<T: Scalar>(
    params: &TransformerParams<T>,
    extra: &serde_json::Value,
    mut out: impl Write,
) -> Result<()> {
    let io = |e| Error::io("<parameter stream>", e);
    let header = serde_json::to_vec(&ParamHeader {
        config: params.config.clone(),
        dtype: T::DTYPE.to_string(),
        extra: extra.clone(),
    })?;
    out.write_all(PARAM_MAGIC).map_err(io)?;
    out.write_all(&PARAM_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    let mut buf = Vec::new();
    for t in &params.tensors {
        buf.clear();
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        out.write_all(&buf).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_params<T: Scalar>(mut input: impl Read) -> Result<(TransformerParams<T>, serde_json::Value)> {
    let bad = |m: &str| Error::format("parameter file", m.to_string());
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<parameter stream>", e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != PARAM_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != PARAM_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let header: ParamHeader = serde_json::from_slice(take(hlen)?)?;
    if header.dtype != T::DTYPE {
        return Err(bad(&format!("stored dtype {} but {} requested", header.dtype, T::DTYPE)));
    }
    let mut tensors = Vec::new();
    for _ in shapes(&header.config) {
        let r = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let c = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = take(r.checked_mul(c).and_then(|n| n.checked_mul(T::BYTES)).ok_or_else(|| bad("overflow"))?)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.push(Matrix::from_vec(r, c, data));
    }
    if take(1).is_ok() {
        return Err(bad("trailing bytes"));
    }
    Ok((TransformerParams::from_tensors(header.config, tensors)?, header.extra))
}

pub fn save_params<T: Scalar>(params: &TransformerParams<T>, extra: &serde_json::Value, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_params(params, extra, std::io::BufWriter::new(f))
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<(TransformerParams<T>, serde_json::Value)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 6e-4,
            warmup_steps: 100,
            clip_norm: 1.0,
            batch_size: 32,
            max_epochs: 15,
            patience: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Patience-based early stopping on a validation loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    max_epochs: usize,
    best: f64,
    best_epoch: usize,
    epochs: usize,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        EarlyStopping {
            patience,
            max_epochs,
            best: f64::INFINITY,
            best_epoch: 0,
            epochs: 0,
            bad: 0,
        }
    }

    /// Records one epoch; returns true when training should stop.
    pub fn observe(&mut self, valid_loss: f64) -> bool {
        self.epochs += 1;
        if valid_loss < self.best {
            self.best = valid_loss;
            self.best_epoch = self.epochs;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.should_stop()
    }

    pub fn should_stop(&self) -> bool {
        self.bad >= self.patience || self.epochs >= self.max_epochs
    }

    pub fn improved_last(&self) -> bool {
        self.epochs > 0 && self.best_epoch == self.epochs
    }

    /// 1-based epoch with the lowest loss.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Runs a loss trace through [`EarlyStopping`]; returns (stopped, best).
pub fn simulate_early_stopping(trace: &[f64], patience: usize, max_epochs: usize) -> (usize, usize) {
    let mut es = EarlyStopping::new(patience, max_epochs);
    for &l in trace {
        if es.observe(l) {
            break;
        }
    }
    (es.epochs(), es.best_epoch())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub steps: usize,
    pub checksum: String,
}

pub struct Adam<T: Scalar> {
    cfg: TrainConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: usize,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &TransformerParams<T>, cfg: TrainConfig) -> Self {
        Adam {
            cfg,
            m: params.zero_grads(),
            v: params.zero_grads(),
            step: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Clips `grads` to the configured global norm and applies one update.
    /// Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut TransformerParams<T>, grads: &mut [Matrix<T>]) -> Result<f64> {
        for (i, g) in grads.iter().enumerate() {
            if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: params.param_name(i),
                    index: j,
                });
            }
        }
        let norm = grads.iter().map(|g| g.sum_sq().as_f64()).sum::<f64>().sqrt();
        if norm > self.cfg.clip_norm && norm > 0.0 {
            let s = T::lit(self.cfg.clip_norm / norm);
            for g in grads.iter_mut() {
                g.scale_assign(s);
            }
        }
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step_size = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.cfg.eps * c2.sqrt());
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::one() - b1t, T::one() - b2t);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1t * *mv + ob1 * gv;
                *vv = b2t * *vv + ob2 * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

/// Trains from `TransformerParams::init(config)` with early stopping on
/// the validation loss and returns the best epoch's parameters.
pub fn train<T: Scalar>(
    config: &TransformerConfig,
    tc: &TrainConfig,
    train_seqs: &[Vec<u32>],
    valid_seqs: &[Vec<u32>],
) -> Result<(TransformerParams<T>, TrainLog)> {
    if train_seqs.is_empty() || valid_seqs.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    if tc.batch_size == 0 || tc.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }
    let mut params = TransformerParams::<T>::init(config)?;
    let mut adam = Adam::new(&params, tc.clone());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut dropper = Dropper::new(config.dropout, config.seed ^ 0x5eed_0002);
    let mut es = EarlyStopping::new(tc.patience, tc.max_epochs);
    let mut best = params.clone();
    let mut log = TrainLog {
        epochs: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        steps: 0,
        checksum: String::new(),
    };
    let mut last_finite = f64::NAN;
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    loop {
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| train_seqs[i].clone()).collect();
            let mut grads = params.zero_grads();
            let loss = match params.loss_and_grad(&batch, &mut grads, Some(&mut dropper)) {
                Ok(l) => l,
                Err(Error::UndefinedMetric(_)) => continue,
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: es.epochs() + 1,
                    step: adam.steps(),
                    last_finite_loss: last_finite,
                });
            }
            last_finite = loss;
            adam.update(&mut params, &mut grads)?;
            sum += loss;
            batches += 1;
        }
        let valid_loss = params.loss(valid_seqs)?;
        if !valid_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: es.epochs() + 1,
                step: adam.steps(),
                last_finite_loss: last_finite,
            });
        }
        let train_loss = if batches > 0 { sum / batches as f64 } else { f64::NAN };
        log::info!("epoch {}: train {train_loss:.4} valid {valid_loss:.4}", es.epochs() + 1);
        log.epochs.push(EpochLog { train_loss, valid_loss });
        let stop = es.observe(valid_loss);
        if es.improved_last() {
            best = params.clone();
        }
        if stop {
            break;
        }
    }
    log.stopped_epoch = es.epochs();
    log.best_epoch = es.best_epoch();
    log.steps = adam.steps();
    log.checksum = best.checksum();
    Ok((best, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Below this magnitude the absolute difference is reported instead of the
/// relative one. Central-difference roundoff at h = 1e-5 is about
/// `eps · loss / h ≈ 1e-10`, which swamps relative error for gradients
/// much smaller than this.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central differences on `n_coords`
/// coordinates sampled uniformly over all parameters.
pub fn grad_check(
    params: &TransformerParams<f64>,
    batch: &[Vec<u32>],
    h: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let sizes: Vec<usize> = params.tensors.iter().map(Matrix::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(usize, usize)> = (0..n_coords)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            let mut ti = 0;
            while flat >= sizes[ti] {
                flat -= sizes[ti];
                ti += 1;
            }
            (ti, flat)
        })
        .collect();
    grad_check_coords(params, batch, h, &coords)
}

/// [`grad_check`] on explicit `(tensor, flat index)` coordinates.
pub fn grad_check_coords(
    params: &TransformerParams<f64>,
    batch: &[Vec<u32>],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport> {
    let mut grads = params.zero_grads();
    params.loss_and_grad(batch, &mut grads, None)?;
    for (i, g) in grads.iter().enumerate() {
        if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: params.param_name(i),
                index: j,
            });
        }
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut p = params.clone();
    for &(ti, flat) in coords {
        if ti >= p.tensors.len() || flat >= p.tensors[ti].len() {
            return Err(Error::InvalidArgument(format!("coordinate ({ti}, {flat}) out of range")));
        }
        let orig = p.tensors[ti].data()[flat];
        p.tensors[ti].data_mut()[flat] = orig + h;
        let up = p.loss(batch)?;
        p.tensors[ti].data_mut()[flat] = orig - h;
        let down = p.loss(batch)?;
        p.tensors[ti].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[ti].data()[flat];
        if !numeric.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: params.param_name(ti),
                index: flat,
            });
        }
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < GRAD_CHECK_FLOOR {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / scale
        };
        if report.checked == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = params.param_name(ti);
            report.worst_index = flat;
        }
        report.checked += 1;
    }
    Ok(report)
}
