//! Temporal encoders turning a window of recent observations into an embedding.
//!
//! Three interchangeable variants share one contract: a batch of windows in,
//! one embedding row per window out.
//!
//! * `passthrough` returns the newest observation unchanged;
//! * `recurrent` runs a single-layer LSTM over the window (padded rows carry
//!   the state through unchanged) and returns the final hidden state;
//! * `attention` projects each row, adds sinusoidal positions, applies
//!   post-norm self-attention layers and returns the newest token.
//!
//! In the attention variant the final layer only evaluates the newest
//! query, since that is the only token pooled.

use crate::diffcore::{AttentionSpec, DiffError, Graph, Linear, ParamId, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("empty observation history")]
    EmptyHistory,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl From<EncoderError> for DiffError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Diff(d) => d,
            other => DiffError::Shape(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Passthrough,
    Recurrent,
    Attention,
}

impl std::str::FromStr for EncoderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "passthrough" => Ok(Self::Passthrough),
            "recurrent" => Ok(Self::Recurrent),
            "attention" => Ok(Self::Attention),
            other => Err(format!("unknown encoder {other:?} (passthrough, recurrent, attention)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub window: usize,
    pub positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// 6 layers, width 256, 4 heads, dropout 0.1.
    pub fn paper() -> Self {
        Self {
            kind: EncoderKind::Attention,
            layers: 6,
            model_dim: 256,
            heads: 4,
            ffn_dim: 1024,
            dropout: 0.1,
            window: 12,
            positional: true,
        }
    }

    /// 2 layers, width 64, 4 heads, no dropout.
    pub fn desk() -> Self {
        Self {
            kind: EncoderKind::Attention,
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 128,
            dropout: 0.0,
            window: 12,
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.kind != EncoderKind::Passthrough && self.model_dim == 0 {
            return bad("model_dim must be positive".into());
        }
        if self.kind == EncoderKind::Attention {
            if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
                return bad(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads));
            }
            if self.ffn_dim == 0 {
                return bad("ffn_dim must be positive".into());
            }
        }
        Ok(())
    }

    pub fn output_dim(&self, obs_dim: usize) -> usize {
        match self.kind {
            EncoderKind::Passthrough => obs_dim,
            _ => self.model_dim,
        }
    }
}

/// `w` consecutive observations, oldest first, with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    pub rows: Vec<Vec<f64>>,
    pub pad_mask: Vec<bool>,
}

/// The window ending at step `t`, left-padded with zero rows while `t + 1 < w`.
pub fn build_window(history: &[Vec<f64>], t: usize, w: usize) -> Result<ObservationWindow, EncoderError> {
    if history.is_empty() {
        return Err(EncoderError::EmptyHistory);
    }
    if t >= history.len() {
        return Err(EncoderError::Shape(format!("step {t} beyond history of {}", history.len())));
    }
    let dim = history[0].len();
    let real = (t + 1).min(w);
    let mut rows = vec![vec![0.0; dim]; w - real];
    rows.extend(history[t + 1 - real..=t].iter().cloned());
    let mut pad_mask = vec![false; w - real];
    pad_mask.extend(std::iter::repeat_n(true, real));
    Ok(ObservationWindow { rows, pad_mask })
}

/// Many windows stacked row-wise for one batched encoder call.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub window: usize,
    pub obs_dim: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl WindowBatch {
    pub fn new(window: usize, obs_dim: usize) -> Self {
        Self { window, obs_dim, data: Vec::new(), mask: Vec::new() }
    }

    pub fn with_capacity(window: usize, obs_dim: usize, windows: usize) -> Self {
        Self {
            window,
            obs_dim,
            data: Vec::with_capacity(windows * window * obs_dim),
            mask: Vec::with_capacity(windows * window),
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len() / self.window
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn push(&mut self, w: &ObservationWindow) -> Result<(), EncoderError> {
        if w.rows.len() != self.window || w.pad_mask.len() != self.window {
            return Err(EncoderError::Shape(format!("window of {} rows, expected {}", w.rows.len(), self.window)));
        }
        for (row, &valid) in w.rows.iter().zip(&w.pad_mask) {
            if row.len() != self.obs_dim {
                return Err(EncoderError::Shape(format!("row of {} values, expected {}", row.len(), self.obs_dim)));
            }
            if valid {
                self.data.extend_from_slice(row);
            } else {
                self.data.extend(std::iter::repeat_n(0.0, self.obs_dim));
            }
            self.mask.push(valid);
        }
        Ok(())
    }

    /// Appends the window ending at `t` without building it separately.
    pub fn push_history(&mut self, history: &[Vec<f64>], t: usize) -> Result<(), EncoderError> {
        if history.is_empty() {
            return Err(EncoderError::EmptyHistory);
        }
        let real = (t + 1).min(self.window);
        self.data.extend(std::iter::repeat_n(0.0, (self.window - real) * self.obs_dim));
        self.mask.extend(std::iter::repeat_n(false, self.window - real));
        for row in &history[t + 1 - real..=t] {
            if row.len() != self.obs_dim {
                return Err(EncoderError::Shape(format!("row of {} values, expected {}", row.len(), self.obs_dim)));
            }
            self.data.extend_from_slice(row);
            self.mask.push(true);
        }
        Ok(())
    }

    /// Copies window `i` of `other` onto the end of this batch.
    pub fn push_from(&mut self, other: &WindowBatch, i: usize) {
        let (w, d) = (self.window, self.obs_dim);
        self.data.extend_from_slice(&other.data[i * w * d..(i + 1) * w * d]);
        self.mask.extend_from_slice(&other.mask[i * w..(i + 1) * w]);
    }

    fn tensor(&self) -> Tensor {
        Tensor { rows: self.mask.len(), cols: self.obs_dim, data: self.data.clone() }
    }

    fn last_rows(&self) -> Arc<Vec<usize>> {
        Arc::new((0..self.len()).map(|n| n * self.window + self.window - 1).collect())
    }
}

/// Sinusoidal position table, `window x dim`.
pub fn positional_table(window: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(window, dim);
    for pos in 0..window {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            t.data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

#[derive(Debug, Clone)]
struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormParams {
    fn new(params: &mut ParamSet, prefix: &str, dim: usize) -> Result<Self, DiffError> {
        Ok(Self {
            gamma: params.add(format!("{prefix}.gamma"), Tensor::filled(1, dim, 1.0))?,
            beta: params.add(format!("{prefix}.beta"), Tensor::zeros(1, dim))?,
        })
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
struct AttentionLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln1: LayerNormParams,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNormParams,
}

#[derive(Debug, Clone)]
enum Body {
    Passthrough,
    Recurrent { input: Linear, hidden: ParamId },
    Attention { input: Linear, positions: Tensor, layers: Vec<AttentionLayer> },
}

/// Parameter handles and shape of one encoder instance.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub obs_dim: usize,
    body: Body,
}

impl Encoder {
    /// Registers parameters under `prefix` in `params`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        obs_dim: usize,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.model_dim;
        let body = match config.kind {
            EncoderKind::Passthrough => Body::Passthrough,
            EncoderKind::Recurrent => {
                let input = params.linear(&format!("{prefix}.lstm.input"), obs_dim, 4 * d, rng)?;
                let bound = 1.0 / (d as f64).sqrt();
                let hidden = params.add(format!("{prefix}.lstm.hidden"), Tensor::uniform(d, 4 * d, bound, rng))?;
                Body::Recurrent { input, hidden }
            }
            EncoderKind::Attention => {
                let input = params.linear(&format!("{prefix}.input"), obs_dim, d, rng)?;
                let mut layers = Vec::with_capacity(config.layers);
                for l in 0..config.layers {
                    let p = format!("{prefix}.layer{l}");
                    layers.push(AttentionLayer {
                        q: params.linear(&format!("{p}.q"), d, d, rng)?,
                        k: params.linear(&format!("{p}.k"), d, d, rng)?,
                        v: params.linear(&format!("{p}.v"), d, d, rng)?,
                        out: params.linear(&format!("{p}.out"), d, d, rng)?,
                        ln1: LayerNormParams::new(params, &format!("{p}.ln1"), d)?,
                        ff1: params.linear(&format!("{p}.ff1"), d, config.ffn_dim, rng)?,
                        ff2: params.linear(&format!("{p}.ff2"), config.ffn_dim, d, rng)?,
                        ln2: LayerNormParams::new(params, &format!("{p}.ln2"), d)?,
                    });
                }
                Body::Attention { input, positions: positional_table(config.window, d), layers }
            }
        };
        Ok(Self { config, obs_dim, body })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim(self.obs_dim)
    }

    /// Embeds every window of `batch`: returns an `N x output_dim` node.
    pub fn forward(&self, g: &mut Graph<'_>, batch: &WindowBatch) -> Result<Var, EncoderError> {
        if batch.window != self.config.window || batch.obs_dim != self.obs_dim {
            return Err(EncoderError::Shape(format!(
                "batch of {}x{} windows, encoder expects {}x{}",
                batch.window, batch.obs_dim, self.config.window, self.obs_dim
            )));
        }
        if batch.is_empty() {
            return Err(EncoderError::Shape("empty batch".into()));
        }
        let w = batch.window;
        let n = batch.len();
        for i in 0..n {
            if !batch.mask[i * w + w - 1] {
                return Err(EncoderError::Shape(format!("window {i}: newest row is padding")));
            }
        }
        let x = g.input(batch.tensor());
        match &self.body {
            Body::Passthrough => Ok(g.gather_rows(x, batch.last_rows())),
            Body::Recurrent { input, hidden } => Ok(self.recurrent(g, batch, x, input, *hidden)),
            Body::Attention { input, positions, layers } => self.attention(g, batch, x, input, positions, layers),
        }
    }

    fn recurrent(&self, g: &mut Graph<'_>, batch: &WindowBatch, x: Var, input: &Linear, hidden: ParamId) -> Var {
        let (w, n, d) = (batch.window, batch.len(), self.config.model_dim);
        let xp = g.linear(x, input);
        let wh = g.param(hidden);
        let mut h = g.input(Tensor::zeros(n, d));
        let mut c = g.input(Tensor::zeros(n, d));
        for tau in 0..w {
            let rows = Arc::new((0..n).map(|i| i * w + tau).collect::<Vec<_>>());
            let xt = g.gather_rows(xp, rows);
            let hh = g.matmul(h, wh);
            let gates = g.add(xt, hh);
            let i_g = g.slice_cols(gates, 0, d);
            let i_g = g.sigmoid(i_g);
            let f_g = g.slice_cols(gates, d, d);
            let f_g = g.sigmoid(f_g);
            let c_g = g.slice_cols(gates, 2 * d, d);
            let c_g = g.tanh(c_g);
            let o_g = g.slice_cols(gates, 3 * d, d);
            let o_g = g.sigmoid(o_g);
            let keep = g.mul(f_g, c);
            let write = g.mul(i_g, c_g);
            let c_new = g.add(keep, write);
            let c_act = g.tanh(c_new);
            let h_new = g.mul(o_g, c_act);
            let valid: Vec<bool> = (0..n).map(|i| batch.mask[i * w + tau]).collect();
            if valid.iter().all(|&v| v) {
                h = h_new;
                c = c_new;
            } else {
                let on = Arc::new(mask_rows(&valid, d, true));
                let off = Arc::new(mask_rows(&valid, d, false));
                h = blend(g, h_new, h, &on, &off);
                c = blend(g, c_new, c, &on, &off);
            }
        }
        h
    }

    fn attention(
        &self,
        g: &mut Graph<'_>,
        batch: &WindowBatch,
        x: Var,
        input: &Linear,
        positions: &Tensor,
        layers: &[AttentionLayer],
    ) -> Result<Var, EncoderError> {
        let cfg = &self.config;
        let n = batch.len();
        let mut x = g.linear(x, input);
        if cfg.positional {
            let mut tiled = Tensor::zeros(n * cfg.window, cfg.model_dim);
            for chunk in tiled.data.chunks_mut(positions.len()) {
                chunk.copy_from_slice(&positions.data);
            }
            let pe = g.input(tiled);
            x = g.add(x, pe);
        }
        x = g.dropout(x, cfg.dropout);
        if layers.is_empty() {
            return Ok(g.gather_rows(x, batch.last_rows()));
        }
        for (l, layer) in layers.iter().enumerate() {
            let last = l + 1 == layers.len();
            let q_src = if last { g.gather_rows(x, batch.last_rows()) } else { x };
            let q = g.linear(q_src, &layer.q);
            let k = g.linear(x, &layer.k);
            let v = g.linear(x, &layer.v);
            let spec = AttentionSpec { heads: cfg.heads, window: cfg.window, last_only: last };
            let att = g.attention(q, k, v, &batch.mask, spec)?;
            let att = g.linear(att, &layer.out);
            let att = g.dropout(att, cfg.dropout);
            let res = g.add(q_src, att);
            let h = layer.ln1.apply(g, res);
            let f = g.linear(h, &layer.ff1);
            let f = g.gelu(f);
            let f = g.linear(f, &layer.ff2);
            let f = g.dropout(f, cfg.dropout);
            let res = g.add(h, f);
            x = layer.ln2.apply(g, res);
        }
        Ok(x)
    }

    /// Embeds a single window in evaluation mode.
    pub fn encode(&self, params: &ParamSet, window: &ObservationWindow) -> Result<Vec<f64>, EncoderError> {
        let mut batch = WindowBatch::new(self.config.window, self.obs_dim);
        batch.push(window)?;
        let mut g = Graph::new(params);
        let out = self.forward(&mut g, &batch)?;
        Ok(g.value(out).data.clone())
    }
}

fn mask_rows(valid: &[bool], d: usize, on: bool) -> Tensor {
    let data = valid.iter().flat_map(|&v| std::iter::repeat_n(if v == on { 1.0 } else { 0.0 }, d)).collect();
    Tensor { rows: valid.len(), cols: d, data }
}

fn blend(g: &mut Graph<'_>, new: Var, old: Var, on: &Arc<Tensor>, off: &Arc<Tensor>) -> Var {
    let a = g.mul_const(new, on.clone());
    let b = g.mul_const(old, off.clone());
    g.add(a, b)
}
