//! Recurrent sequence classifier: one LSTM layer read statefully over
//! fixed-size chunks, then dense(ReLU) -> dense(ReLU) -> sigmoid.
//!
//! Everything is `f64`. Gradients are exact backpropagation through every
//! timestep. Training is mini-batch Adam with a seeded per-epoch shuffle;
//! per-video work inside a batch may run on the rayon pool, but gradients are
//! summed in batch order so results do not depend on the thread count.

use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::clipped_bce;

pub const MODEL_FORMAT: &str = "fsv1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model format `{found}` is not {MODEL_FORMAT}")]
    VersionMismatch { found: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {0} is not 0 or 1")]
    BadLabel(f64),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub lstm_units: usize,
    pub dense1_units: usize,
    pub dense2_units: usize,
    pub chunk_len: usize,
    pub chunks_per_video: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// 256-bin histograms, 64 LSTM units, dense 128 then 64, 30 chunks of 10.
    fn default() -> Self {
        ModelConfig {
            input_dim: 256,
            lstm_units: 64,
            dense1_units: 128,
            dense2_units: 64,
            chunk_len: 10,
            chunks_per_video: 30,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn seq_len(&self) -> usize {
        self.chunk_len * self.chunks_per_video
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input_dim", self.input_dim),
            ("lstm_units", self.lstm_units),
            ("dense1_units", self.dense1_units),
            ("dense2_units", self.dense2_units),
            ("chunk_len", self.chunk_len),
            ("chunks_per_video", self.chunks_per_video),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(NetError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// `(name, rows, cols)` for each tensor, in serialization order.
    pub fn tensor_shapes(&self) -> [(&'static str, usize, usize); 9] {
        let g = 4 * self.lstm_units;
        [
            ("lstm.w", g, self.input_dim),
            ("lstm.u", g, self.lstm_units),
            ("lstm.b", g, 1),
            ("dense1.w", self.dense1_units, self.lstm_units),
            ("dense1.b", self.dense1_units, 1),
            ("dense2.w", self.dense2_units, self.dense1_units),
            ("dense2.b", self.dense2_units, 1),
            ("out.w", 1, self.dense2_units),
            ("out.b", 1, 1),
        ]
    }
}

/// Network weights. LSTM gate rows are stacked input, forget, candidate,
/// output, each block `lstm_units` rows. Matrices are row-major with one row
/// per output unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub lstm_w: Vec<f64>,
    pub lstm_u: Vec<f64>,
    pub lstm_b: Vec<f64>,
    pub dense1_w: Vec<f64>,
    pub dense1_b: Vec<f64>,
    pub dense2_w: Vec<f64>,
    pub dense2_b: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let t = cfg.tensor_shapes().map(|(_, r, c)| vec![0.0; r * c]);
        let [lstm_w, lstm_u, lstm_b, dense1_w, dense1_b, dense2_w, dense2_b, out_w, out_b] = t;
        ModelParams {
            lstm_w,
            lstm_u,
            lstm_b,
            dense1_w,
            dense1_b,
            dense2_w,
            dense2_b,
            out_w,
            out_b,
        }
    }

    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            &self.lstm_w,
            &self.lstm_u,
            &self.lstm_b,
            &self.dense1_w,
            &self.dense1_b,
            &self.dense2_w,
            &self.dense2_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
        [
            &mut self.lstm_w,
            &mut self.lstm_u,
            &mut self.lstm_b,
            &mut self.dense1_w,
            &mut self.dense1_b,
            &mut self.dense2_w,
            &mut self.dense2_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        for ((name, r, c), t) in cfg.tensor_shapes().iter().zip(self.tensors()) {
            if t.len() != r * c {
                return Err(NetError::ShapeMismatch(format!(
                    "{name} has {} values, config wants {r}x{c}",
                    t.len()
                )));
            }
        }
        Ok(())
    }

    fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Glorot-uniform weights from a seeded ChaCha stream, zero biases except
/// the LSTM forget gate at 1.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ModelParams::zeros(cfg);
    let h = cfg.lstm_units;
    let g = 4 * h;
    let mut fill = |t: &mut [f64], fan_in: usize, fan_out: usize| {
        let limit = glorot_limit(fan_in, fan_out);
        t.iter_mut().for_each(|x| *x = rng.gen_range(-limit..=limit));
    };
    fill(&mut p.lstm_w, cfg.input_dim, g);
    fill(&mut p.lstm_u, h, g);
    fill(&mut p.dense1_w, h, cfg.dense1_units);
    fill(&mut p.dense2_w, cfg.dense1_units, cfg.dense2_units);
    fill(&mut p.out_w, cfg.dense2_units, 1);
    p.lstm_b[h..2 * h].fill(1.0);
    Ok(p)
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// The summation order is fixed, which keeps every caller bit-reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = m * v + b` for a row-major `m` with `out.len()` rows.
fn affine(m: &[f64], v: &[f64], b: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for ((o, row), bias) in out.iter_mut().zip(m.chunks_exact(cols)).zip(b) {
        *o = dot(row, v) + bias;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(units: usize) -> Self {
        LstmState {
            h: vec![0.0; units],
            c: vec![0.0; units],
        }
    }
}

/// One LSTM cell update. `gates` receives the activated i, f, g, o blocks.
fn cell_step(
    p: &ModelParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    c_out: &mut [f64],
    h_out: &mut [f64],
) {
    let units = h_prev.len();
    let cols = x.len();
    for (r, z) in gates.iter_mut().enumerate() {
        let wx = dot(&p.lstm_w[r * cols..(r + 1) * cols], x);
        let uh = dot(&p.lstm_u[r * units..(r + 1) * units], h_prev);
        *z = wx + uh + p.lstm_b[r];
    }
    let (i, rest) = gates.split_at_mut(units);
    let (f, rest) = rest.split_at_mut(units);
    let (g, o) = rest.split_at_mut(units);
    for k in 0..units {
        i[k] = sigmoid(i[k]);
        f[k] = sigmoid(f[k]);
        g[k] = g[k].tanh();
        o[k] = sigmoid(o[k]);
        c_out[k] = f[k] * c_prev[k] + i[k] * g[k];
        h_out[k] = o[k] * c_out[k].tanh();
    }
}

/// Advance the LSTM by one input vector.
pub fn lstm_step(p: &ModelParams, state: &LstmState, x: &[f64]) -> LstmState {
    let units = state.h.len();
    let mut gates = vec![0.0; 4 * units];
    let mut next = LstmState::zeros(units);
    cell_step(p, x, &state.h, &state.c, &mut gates, &mut next.c, &mut next.h);
    next
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<'a> {
    input: &'a [f64],
    steps: usize,
    /// Activated gates per step, `steps * 4H`.
    gates: Vec<f64>,
    /// Cell states `c_0..=c_T`, `(steps + 1) * H`.
    c: Vec<f64>,
    /// Hidden states `h_0..=h_T`.
    h: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    pub logit: f64,
    pub p_fake: f64,
}

fn check_input(cfg: &ModelConfig, p: &ModelParams, input: &[f64]) -> Result<()> {
    p.check_shapes(cfg)?;
    let want = cfg.seq_len() * cfg.input_dim;
    if input.len() != want {
        return Err(NetError::ShapeMismatch(format!(
            "input has {} values, expected {} rows of {}",
            input.len(),
            cfg.seq_len(),
            cfg.input_dim
        )));
    }
    Ok(())
}

/// Classify one sequence (`seq_len` rows of `input_dim`, row-major).
///
/// The sequence is consumed chunk by chunk with hidden and cell state carried
/// across chunk boundaries; state starts at zero for each video. Only the
/// final hidden state reaches the dense head.
pub fn forward_video<'a>(
    cfg: &ModelConfig,
    p: &ModelParams,
    input: &'a [f64],
) -> Result<ForwardCache<'a>> {
    check_input(cfg, p, input)?;
    let units = cfg.lstm_units;
    let dim = cfg.input_dim;
    let steps = cfg.seq_len();
    let mut cache = ForwardCache {
        input,
        steps,
        gates: vec![0.0; steps * 4 * units],
        c: vec![0.0; (steps + 1) * units],
        h: vec![0.0; (steps + 1) * units],
        a1: vec![0.0; cfg.dense1_units],
        a2: vec![0.0; cfg.dense2_units],
        logit: 0.0,
        p_fake: 0.0,
    };

    let chunk_rows = cfg.chunk_len * dim;
    for (k, chunk) in input.chunks_exact(chunk_rows).enumerate() {
        for (j, x) in chunk.chunks_exact(dim).enumerate() {
            let t = k * cfg.chunk_len + j;
            let (h_prev, h_next) = cache.h.split_at_mut((t + 1) * units);
            let (c_prev, c_next) = cache.c.split_at_mut((t + 1) * units);
            cell_step(
                p,
                x,
                &h_prev[t * units..],
                &c_prev[t * units..],
                &mut cache.gates[t * 4 * units..(t + 1) * 4 * units],
                &mut c_next[..units],
                &mut h_next[..units],
            );
        }
    }

    let h_last = &cache.h[steps * units..];
    affine(&p.dense1_w, h_last, &p.dense1_b, &mut cache.a1);
    cache.a1.iter_mut().for_each(|v| *v = v.max(0.0));
    affine(&p.dense2_w, &cache.a1, &p.dense2_b, &mut cache.a2);
    cache.a2.iter_mut().for_each(|v| *v = v.max(0.0));
    cache.logit = dot(&p.out_w, &cache.a2) + p.out_b[0];
    cache.p_fake = sigmoid(cache.logit);
    Ok(cache)
}

/// Final hidden state from one uninterrupted pass over all rows with
/// [`lstm_step`]. Used to cross-check the chunked path.
pub fn final_hidden_unchunked(cfg: &ModelConfig, p: &ModelParams, input: &[f64]) -> Result<Vec<f64>> {
    check_input(cfg, p, input)?;
    let mut state = LstmState::zeros(cfg.lstm_units);
    for x in input.chunks_exact(cfg.input_dim) {
        state = lstm_step(p, &state, x);
    }
    Ok(state.h)
}

impl ForwardCache<'_> {
    pub fn final_hidden(&self) -> &[f64] {
        let units = self.h.len() / (self.steps + 1);
        &self.h[self.steps * units..]
    }
}

pub fn predict(cfg: &ModelConfig, p: &ModelParams, input: &[f64]) -> Result<f64> {
    Ok(forward_video(cfg, p, input)?.p_fake)
}

/// Binary cross-entropy with the same clipping as the evaluation metric.
pub fn loss(p_fake: f64, target: f64) -> f64 {
    clipped_bce(p_fake, target)
}

/// Exact gradients of the (unclipped) cross-entropy loss for one video.
pub fn backward_video(
    cfg: &ModelConfig,
    p: &ModelParams,
    cache: &ForwardCache<'_>,
    target: f64,
) -> Gradients {
    let units = cfg.lstm_units;
    let dim = cfg.input_dim;
    let n1 = cfg.dense1_units;
    let n2 = cfg.dense2_units;
    let mut g = ModelParams::zeros(cfg);

    // Sigmoid + cross-entropy collapse to p - y at the logit.
    let dlogit = cache.p_fake - target;
    g.out_b[0] = dlogit;
    axpy(&mut g.out_w, dlogit, &cache.a2);

    let mut dz2 = vec![0.0; n2];
    for k in 0..n2 {
        if cache.a2[k] > 0.0 {
            dz2[k] = dlogit * p.out_w[k];
        }
    }
    let mut dz1 = vec![0.0; n1];
    for (k, row) in p.dense2_w.chunks_exact(n1).enumerate() {
        g.dense2_b[k] = dz2[k];
        axpy(&mut g.dense2_w[k * n1..(k + 1) * n1], dz2[k], &cache.a1);
        axpy(&mut dz1, dz2[k], row);
    }
    for k in 0..n1 {
        if cache.a1[k] <= 0.0 {
            dz1[k] = 0.0;
        }
    }
    let h_last = cache.final_hidden();
    let mut dh = vec![0.0; units];
    for (k, row) in p.dense1_w.chunks_exact(units).enumerate() {
        g.dense1_b[k] = dz1[k];
        axpy(&mut g.dense1_w[k * units..(k + 1) * units], dz1[k], h_last);
        axpy(&mut dh, dz1[k], row);
    }

    let mut dc = vec![0.0; units];
    let mut dz = vec![0.0; 4 * units];
    let mut dh_prev = vec![0.0; units];
    for t in (0..cache.steps).rev() {
        let gates = &cache.gates[t * 4 * units..(t + 1) * 4 * units];
        let (i, rest) = gates.split_at(units);
        let (f, rest) = rest.split_at(units);
        let (gg, o) = rest.split_at(units);
        let c_prev = &cache.c[t * units..(t + 1) * units];
        let c_t = &cache.c[(t + 1) * units..(t + 2) * units];
        let h_prev = &cache.h[t * units..(t + 1) * units];
        let x = &cache.input[t * dim..(t + 1) * dim];

        for k in 0..units {
            let tc = c_t[k].tanh();
            let d_o = dh[k] * tc;
            dc[k] += dh[k] * o[k] * (1.0 - tc * tc);
            let d_i = dc[k] * gg[k];
            let d_g = dc[k] * i[k];
            let d_f = dc[k] * c_prev[k];
            dz[k] = d_i * i[k] * (1.0 - i[k]);
            dz[units + k] = d_f * f[k] * (1.0 - f[k]);
            dz[2 * units + k] = d_g * (1.0 - gg[k] * gg[k]);
            dz[3 * units + k] = d_o * o[k] * (1.0 - o[k]);
            dc[k] *= f[k];
        }

        dh_prev.fill(0.0);
        for (r, &d) in dz.iter().enumerate() {
            g.lstm_b[r] += d;
            axpy(&mut g.lstm_w[r * dim..(r + 1) * dim], d, x);
            axpy(&mut g.lstm_u[r * units..(r + 1) * units], d, h_prev);
            axpy(&mut dh_prev, d, &p.lstm_u[r * units..(r + 1) * units]);
        }
        std::mem::swap(&mut dh, &mut dh_prev);
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamConfig,
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig, hyper: AdamConfig) -> Self {
        AdamState {
            hyper,
            step: 0,
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One labeled training sequence; `target` is 1 for FAKE, 0 for REAL.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Rescale each averaged batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    /// Return the parameters of the epoch with the lowest validation loss
    /// instead of the last epoch. Ignored without a validation set.
    pub restore_best: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            batch_size: 10,
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            restore_best: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Absent when no validation set was supplied.
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochMetrics>,
    /// Epoch whose parameters were returned (1-based).
    pub best_epoch: usize,
}

fn check_samples(cfg: &ModelConfig, samples: &[Sample<'_>]) -> Result<()> {
    let want = cfg.seq_len() * cfg.input_dim;
    for s in samples {
        if s.target != 0.0 && s.target != 1.0 {
            return Err(NetError::BadLabel(s.target));
        }
        if s.input.len() != want {
            return Err(NetError::ShapeMismatch(format!(
                "sample has {} values, expected {want}",
                s.input.len()
            )));
        }
    }
    Ok(())
}

/// Mean clipped loss and accuracy (p >= 0.5 is a FAKE call) over `samples`.
pub fn evaluate_samples(
    cfg: &ModelConfig,
    p: &ModelParams,
    samples: &[Sample<'_>],
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let probs = samples
        .par_iter()
        .map(|s| predict(cfg, p, s.input))
        .collect::<Result<Vec<f64>>>()?;
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for (prob, s) in probs.iter().zip(samples) {
        total_loss += loss(*prob, s.target);
        correct += usize::from((*prob >= 0.5) == (s.target == 1.0));
    }
    let n = samples.len() as f64;
    Ok((total_loss / n, correct as f64 / n))
}

/// Mini-batch Adam training from a fresh [`init_params`] initialization.
///
/// Train loss and accuracy for an epoch are accumulated from the forward
/// passes made while training (before each batch's update). Validation
/// metrics are computed after the epoch's last update.
pub fn train(
    cfg: &ModelConfig,
    opts: &TrainOptions,
    train_set: &[Sample<'_>],
    val_set: &[Sample<'_>],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    if opts.batch_size == 0 {
        return Err(NetError::InvalidConfig("batch_size must be >= 1".into()));
    }
    check_samples(cfg, train_set)?;
    check_samples(cfg, val_set)?;

    let mut params = init_params(cfg)?;
    let mut adam = AdamState::new(cfg, opts.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Keep the shuffle stream independent of the initialization stream.
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let cache = forward_video(cfg, &params, s.input)?;
                    let grads = backward_video(cfg, &params, &cache, s.target);
                    Ok((cache.p_fake, grads))
                })
                .collect::<Result<Vec<_>>>()?;

            let mut sum = ModelParams::zeros(cfg);
            for ((prob, grads), &i) in results.iter().zip(batch) {
                let target = train_set[i].target;
                loss_sum += loss(*prob, target);
                correct += usize::from((*prob >= 0.5) == (target == 1.0));
                sum.add_assign(grads);
            }
            sum.scale(1.0 / batch.len() as f64);
            if let Some(max) = opts.clip_norm {
                let norm = sum.l2_norm();
                if norm > max {
                    sum.scale(max / norm);
                }
            }
            adam.update(&mut params, &sum);
        }

        let n = train_set.len() as f64;
        let (val_loss, val_accuracy) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_samples(cfg, &params, val_set)?;
            (Some(l), Some(a))
        };
        if let (true, Some(l)) = (opts.restore_best, val_loss) {
            if best.as_ref().is_none_or(|(bl, _, _)| l < *bl) {
                best = Some((l, epoch, params.clone()));
            }
        }
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        });
    }
    Ok(match best {
        Some((_, epoch, params)) => TrainOutcome {
            params,
            history,
            best_epoch: epoch,
        },
        None => TrainOutcome {
            params,
            best_epoch: history.len(),
            history,
        },
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorBlock {
    name: String,
    shape: [usize; 2],
    /// Base64 of little-endian f64 values.
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

/// A loaded model file.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Free-form provenance (run configuration, metrics) stored alongside.
    pub meta: Option<serde_json::Value>,
}

/// Write the `fsv1` model document: JSON header with config, then one base64
/// block per tensor in [`ModelConfig::tensor_shapes`] order.
pub fn save_model<W: Write>(
    w: W,
    cfg: &ModelConfig,
    p: &ModelParams,
    meta: Option<serde_json::Value>,
) -> Result<()> {
    p.check_shapes(cfg)?;
    let tensors = cfg
        .tensor_shapes()
        .iter()
        .zip(p.tensors())
        .map(|(&(name, r, c), t)| {
            let mut bytes = Vec::with_capacity(t.len() * 8);
            t.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
            TensorBlock {
                name: name.to_string(),
                shape: [r, c],
                data: B64.encode(bytes),
            }
        })
        .collect();
    let doc = ModelFile {
        format: MODEL_FORMAT.to_string(),
        config: *cfg,
        tensors,
        meta,
    };
    serde_json::to_writer_pretty(w, &doc)?;
    Ok(())
}

pub fn load_model<R: Read>(r: R) -> Result<SavedModel> {
    let doc: ModelFile = serde_json::from_reader(r)?;
    if doc.format != MODEL_FORMAT {
        return Err(NetError::VersionMismatch { found: doc.format });
    }
    let cfg = doc.config;
    cfg.validate()?;
    let shapes = cfg.tensor_shapes();
    if doc.tensors.len() != shapes.len() {
        return Err(NetError::ShapeMismatch(format!(
            "{} tensors, expected {}",
            doc.tensors.len(),
            shapes.len()
        )));
    }
    let mut params = ModelParams::zeros(&cfg);
    for ((block, (name, r, c)), dst) in doc
        .tensors
        .iter()
        .zip(shapes)
        .zip(params.tensors_mut())
    {
        if block.name != name || block.shape != [r, c] {
            return Err(NetError::ShapeMismatch(format!(
                "tensor {} {:?} where config expects {name} [{r}, {c}]",
                block.name, block.shape
            )));
        }
        let bytes = B64
            .decode(&block.data)
            .map_err(|e| NetError::Malformed(format!("{name}: {e}")))?;
        if bytes.len() != dst.len() * 8 {
            return Err(NetError::ShapeMismatch(format!(
                "{name} holds {} bytes, expected {}",
                bytes.len(),
                dst.len() * 8
            )));
        }
        for (v, b) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
        if dst.iter().any(|v| !v.is_finite()) {
            return Err(NetError::Malformed(format!("{name} has non-finite values")));
        }
    }
    Ok(SavedModel {
        config: cfg,
        params,
        meta: doc.meta,
    })
}

/// Load and insist on a specific architecture.
pub fn load_model_expecting<R: Read>(r: R, expected: &ModelConfig) -> Result<SavedModel> {
    let m = load_model(r)?;
    if m.config != *expected {
        return Err(NetError::ShapeMismatch(format!(
            "file config {:?} differs from expected {:?}",
            m.config, expected
        )));
    }
    Ok(m)
}
