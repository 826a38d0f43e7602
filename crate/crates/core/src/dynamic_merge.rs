//! Dynamic merging of encoder frames into a fixed number of tokens.
//!
//! Frame weights `alpha_t = relu(sigmoid(conv(H)_t . w + b) * smoothing - noise)`
//! are rescaled so they sum to exactly `N = max(1, round(T / R))` thresholds,
//! then integrated left to right. Each time the running sum crosses a multiple
//! of the threshold a token is emitted; the crossing frame's weight is split at
//! the boundary, so a frame can feed several consecutive tokens. Every token is
//! a weighted sum of frames whose weights add up to the threshold.
//!
//! Token `j` (0-based) owns the interval `[j * theta, (j + 1) * theta)` of the
//! cumulative weight axis, and frame `t` covers `[S_{t-1}, S_t]`. The allocation
//! weight `W[t, j]` is the length of their overlap.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config, input, Result};
use crate::nn::{Conv1d, Linear};
use crate::params::ParamStore;
use crate::tensor::Mat;

/// Raw weight sums below this use the uniform fallback.
pub const ZERO_SUM_EPS: f64 = 1e-8;

/// Slack when deciding which token a cumulative weight lands in.
const TIE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    /// Global compression ratio `R`.
    pub ratio: f64,
    /// Firing threshold.
    pub theta: f64,
    pub smoothing: f64,
    pub noise_threshold: f64,
    pub predictor_kernel: usize,
    pub predictor_channels: usize,
    pub bias_init: f64,
    /// Apply the fixed-ratio rescaling while training (always applied at inference).
    pub scale_in_training: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            ratio: 10.0,
            theta: 1.0,
            smoothing: 1.0,
            noise_threshold: 0.0,
            predictor_kernel: 3,
            predictor_channels: 32,
            bias_init: -1.5,
            scale_in_training: true,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio >= 1.0) {
            return Err(config(format!("compression ratio must be >= 1, got {}", self.ratio)));
        }
        if !(self.theta > 0.0) {
            return Err(config("threshold must be positive"));
        }
        if !(self.smoothing > 0.0) || !(self.noise_threshold >= 0.0) {
            return Err(config("smoothing must be positive and noise threshold nonnegative"));
        }
        if self.predictor_kernel == 0 || self.predictor_kernel % 2 == 0 || self.predictor_channels == 0 {
            return Err(config("predictor kernel must be odd and channels nonzero"));
        }
        Ok(())
    }
}

/// `N = max(1, round_half_up(T / R))`.
pub fn target_length(frames: usize, ratio: f64) -> usize {
    let n = (frames as f64 / ratio + 0.5).floor();
    (n as usize).max(1)
}

/// One nonzero entry of the frame-to-token allocation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocEntry {
    pub frame: usize,
    pub token: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameWeightTrace {
    pub alpha: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedSequence {
    /// `N x D` merged tokens.
    pub c: Mat,
    pub allocation: Vec<AllocEntry>,
    /// For each token, the (0-based) frame in which it completes.
    pub boundaries: Vec<usize>,
    pub s_hat: Vec<f64>,
}

impl MergedSequence {
    pub fn n_tokens(&self) -> usize {
        self.c.rows()
    }

    /// Dense `T x N` allocation matrix.
    pub fn allocation_matrix(&self, frames: usize) -> Mat {
        let mut w = Mat::zeros(frames, self.n_tokens());
        for e in &self.allocation {
            w.set(e.frame, e.token, w.get(e.frame, e.token) + e.weight);
        }
        w
    }
}

/// `alpha * target / sum(alpha)`, or `target / T` everywhere when the sum is
/// below [`ZERO_SUM_EPS`].
pub fn scale_to_target(alpha: &[f64], target: f64) -> Vec<f64> {
    let total: f64 = alpha.iter().sum();
    if total < ZERO_SUM_EPS {
        vec![target / alpha.len() as f64; alpha.len()]
    } else {
        let k = target / total;
        alpha.iter().map(|a| a * k).collect()
    }
}

/// Rescales raw weights so they sum to `n`.
pub fn scale_weights(alpha: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(input("target length must be at least 1"));
    }
    if alpha.is_empty() {
        return Err(input("no frames to scale"));
    }
    if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(input("weights must be finite and nonnegative"));
    }
    Ok(scale_to_target(alpha, n as f64))
}

pub fn prefix_sums(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// Allocation entries for cumulative weights `s` over `n` tokens of width `theta`.
pub fn allocation_from_prefix(s: &[f64], theta: f64, n: usize) -> Vec<AllocEntry> {
    let mut out = Vec::with_capacity(s.len() + n);
    let mut lo = 0.0f64;
    for (t, &hi) in s.iter().enumerate() {
        if hi > lo {
            let first = ((lo / theta).floor().max(0.0) as usize).min(n - 1);
            let last = (((hi / theta).ceil() as usize).max(1) - 1).min(n - 1);
            for j in first..=last {
                let w = hi.min((j + 1) as f64 * theta) - lo.max(j as f64 * theta);
                if w > 0.0 {
                    out.push(AllocEntry { frame: t, token: j, weight: w });
                }
            }
        }
        lo = lo.max(hi);
    }
    out
}

/// Integrate-and-fire over `h` with scaled weights `alpha_hat` summing to `N * theta`.
pub fn integrate_and_fire(h: &Mat, alpha_hat: &[f64], theta: f64) -> Result<MergedSequence> {
    if h.rows() != alpha_hat.len() {
        return Err(input(format!("{} frames but {} weights", h.rows(), alpha_hat.len())));
    }
    if h.rows() == 0 {
        return Err(input("no frames to merge"));
    }
    let total: f64 = alpha_hat.iter().sum();
    let n = ((total / theta).round() as usize).max(1);
    let s_hat = prefix_sums(alpha_hat);
    let allocation = allocation_from_prefix(&s_hat, theta, n);
    let mut c = Mat::zeros(n, h.cols());
    let mut boundaries = vec![0; n];
    for e in &allocation {
        for (o, a) in c.row_mut(e.token).iter_mut().zip(h.row(e.frame)) {
            *o += e.weight * a;
        }
        boundaries[e.token] = boundaries[e.token].max(e.frame);
    }
    Ok(MergedSequence { c, allocation, boundaries, s_hat })
}

/// 0-based token index for every frame: `clamp(ceil(S_t / theta), 1, N) - 1`.
/// A frame whose cumulative weight lands exactly on a boundary belongs to the
/// token it closes.
pub fn upsample_indices(s_hat: &[f64], n: usize, theta: f64) -> Vec<usize> {
    s_hat
        .iter()
        .map(|&s| {
            let k = (s / theta - TIE_EPS).ceil();
            (k.max(1.0) as usize).min(n) - 1
        })
        .collect()
}

/// Maps `N` tokens back onto the `T` frame grid using the cumulative weights.
pub fn oracle_upsample<T: Clone>(tokens: &[T], s_hat: &[f64], theta: f64) -> Result<Vec<T>> {
    if tokens.is_empty() {
        return Err(input("no tokens to upsample"));
    }
    Ok(upsample_indices(s_hat, tokens.len(), theta).into_iter().map(|i| tokens[i].clone()).collect())
}

/// Row-wise version of [`oracle_upsample`] for `N x D` token matrices.
pub fn oracle_upsample_rows(tokens: &Mat, s_hat: &[f64], theta: f64) -> Result<Mat> {
    if tokens.rows() == 0 {
        return Err(input("no tokens to upsample"));
    }
    Ok(tokens.select_rows(&upsample_indices(s_hat, tokens.rows(), theta)))
}

/// `sum_u |sum_t alpha_ut - N_u| / sum_u N_u`.
pub fn loss_quantity(raw_sums: &[f64], targets: &[usize]) -> Result<f64> {
    if raw_sums.is_empty() || raw_sums.len() != targets.len() {
        return Err(input("quantity loss needs one target per utterance"));
    }
    let total_n: usize = targets.iter().sum();
    if total_n == 0 {
        return Err(input("targets must be at least 1"));
    }
    Ok(raw_sums.iter().zip(targets).map(|(s, &n)| (s - n as f64).abs()).sum::<f64>() / total_n as f64)
}

/// One utterance's contribution to the quantity loss, as a graph node.
pub fn quantity_term(g: &mut Graph, alpha: Var, n: usize, batch_total_n: usize) -> Var {
    let s = g.sum_all(alpha);
    let d = g.offset(s, -(n as f64));
    let a = g.abs(d);
    g.scale(a, 1.0 / batch_total_n as f64)
}

/// The frame-weight predictor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightPredictor {
    pub conv: Conv1d,
    pub proj: Linear,
}

impl WeightPredictor {
    pub fn new(store: &mut ParamStore, d_model: usize, cfg: &MergeConfig, rng: &mut ChaCha8Rng) -> Self {
        let conv = Conv1d::new(store, "merge.conv", d_model, cfg.predictor_channels, cfg.predictor_kernel, 1, rng);
        let proj = Linear::new(store, "merge.proj", cfg.predictor_channels, 1, rng);
        store.get_mut(proj.b).data_mut()[0] = cfg.bias_init;
        Self { conv, proj }
    }

    /// Pre-activation logits `conv(H) . w + b`, one per frame (`T x 1`).
    pub fn logits(&self, g: &mut Graph, h: Var) -> Var {
        let c = self.conv.forward(g, h);
        self.proj.forward(g, c)
    }

    pub fn forward(&self, g: &mut Graph, h: Var, cfg: &MergeConfig) -> Var {
        let z = self.logits(g, h);
        weights_from_logits(g, z, cfg)
    }
}

/// `relu(sigmoid(z) * smoothing - noise)`.
pub fn weights_from_logits(g: &mut Graph, logits: Var, cfg: &MergeConfig) -> Var {
    let s = g.sigmoid(logits);
    let s = g.scale(s, cfg.smoothing);
    let s = g.offset(s, -cfg.noise_threshold);
    g.relu(s)
}

/// Plain-value version of [`weights_from_logits`].
pub fn predict_weights_from_logits(logits: &[f64], cfg: &MergeConfig) -> Vec<f64> {
    logits
        .iter()
        .map(|&z| (crate::autograd::sigmoid(z) * cfg.smoothing - cfg.noise_threshold).max(0.0))
        .collect()
}

/// Graph outputs of one merge.
pub struct MergeOutput {
    pub c: Var,
    pub alpha: Var,
    pub n: usize,
    pub trace: FrameWeightTrace,
}

/// Predicts weights for `h` (`T x D`), rescales them to the target length and
/// integrates. When `training` is set and `scale_in_training` is off, raw
/// weights are integrated and only complete firings become tokens.
pub fn merge(g: &mut Graph, predictor: &WeightPredictor, h: Var, cfg: &MergeConfig, training: bool) -> MergeOutput {
    let frames = g.value(h).rows();
    let alpha = predictor.forward(g, h, cfg);
    let (alpha_hat, n) = if training && !cfg.scale_in_training {
        let total = g.value(alpha).sum();
        (alpha, ((total / cfg.theta).floor() as usize).max(1))
    } else {
        let n = target_length(frames, cfg.ratio);
        (g.scale_to_sum(alpha, n as f64 * cfg.theta), n)
    };
    let s_hat = g.cumsum_col(alpha_hat);
    let c = g.integrate_fire(h, s_hat, cfg.theta, n);
    let trace = FrameWeightTrace {
        alpha: g.value(alpha).data().to_vec(),
        alpha_hat: g.value(alpha_hat).data().to_vec(),
        s_hat: g.value(s_hat).data().to_vec(),
        n,
    };
    MergeOutput { c, alpha, n, trace }
}
