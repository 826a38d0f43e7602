//! Mel-to-feature encoder and the fixed-stride pooling baseline.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::MelSpectrogram;
use crate::dynamic_merge::{target_length, AllocEntry};
use crate::error::{config, input, Result};
use crate::nn::{Conv1d, FeedForward, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    /// `T x D`.
    pub frames: Mat,
    pub frame_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingKind {
    Convolutional,
    SelfAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_downsample: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub mixing: MixingKind,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { input_downsample: 2, n_layers: 2, hidden_dim: 64, mixing: MixingKind::Convolutional, heads: 2 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_downsample < 1 {
            return Err(config("input_downsample must be >= 1"));
        }
        if self.n_layers < 1 || self.hidden_dim == 0 {
            return Err(config("encoder needs at least one layer and a nonzero width"));
        }
        if self.mixing == MixingKind::SelfAttention && (self.heads == 0 || self.hidden_dim % self.heads != 0) {
            return Err(config("hidden_dim must divide into heads"));
        }
        Ok(())
    }

    /// `ceil(T_mel / input_downsample)`.
    pub fn output_len(&self, mel_frames: usize) -> usize {
        mel_frames.div_ceil(self.input_downsample)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum MixLayer {
    Conv(Conv1d),
    Attention { attn: MultiHeadAttention, ff: FeedForward },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    input: Conv1d,
    layers: Vec<MixLayer>,
    out: Linear,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, n_mels: usize, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden_dim;
        let ds = cfg.input_downsample;
        let input = Conv1d::new(store, "enc.in", n_mels, d, 2 * ds + 1, ds, rng);
        let layers = (0..cfg.n_layers)
            .map(|i| match cfg.mixing {
                MixingKind::Convolutional => MixLayer::Conv(Conv1d::new(store, &format!("enc.mix{i}"), d, d, 3, 1, rng)),
                MixingKind::SelfAttention => MixLayer::Attention {
                    attn: MultiHeadAttention::new(store, &format!("enc.attn{i}"), d, d, cfg.heads, rng),
                    ff: FeedForward::new(store, &format!("enc.ff{i}"), d, 2 * d, rng),
                },
            })
            .collect();
        let out = Linear::new(store, "enc.out", d, d, rng);
        Self { cfg: cfg.clone(), input, layers, out }
    }

    /// Zeroes the final projection so the encoder outputs all-zero features.
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        *store.get_mut(self.out.w) = Mat::zeros(self.out.d_in, self.out.d_out);
        *store.get_mut(self.out.b) = Mat::zeros(1, self.out.d_out);
    }

    pub fn forward(&self, g: &mut Graph, mel: Var) -> Var {
        let x = self.input.forward(g, mel);
        let mut x = g.silu(x);
        for layer in &self.layers {
            x = match layer {
                MixLayer::Conv(conv) => {
                    let y = conv.forward(g, x);
                    let y = g.silu(y);
                    g.add(x, y)
                }
                MixLayer::Attention { attn, ff } => {
                    let n = g.layer_norm(x);
                    let a = attn.forward(g, n, n, false);
                    let x1 = g.add(x, a);
                    let n = g.layer_norm(x1);
                    let f = ff.forward(g, n);
                    g.add(x1, f)
                }
            };
        }
        let y = self.out.forward(g, x);
        g.layer_norm(y)
    }

    pub fn encode(&self, store: &ParamStore, mel: &MelSpectrogram) -> Result<FeatureSequence> {
        if mel.n_frames() == 0 {
            return Err(input("mel spectrogram has no frames"));
        }
        if mel.n_mels() != self.input.d_in {
            return Err(config(format!("encoder expects {} mel bins, got {}", self.input.d_in, mel.n_mels())));
        }
        let mut g = Graph::with_params(store);
        let m = g.constant(mel.frames.clone());
        let h = self.forward(&mut g, m);
        Ok(FeatureSequence {
            frames: g.value(h).clone(),
            frame_rate: mel.frame_rate / self.cfg.input_downsample as f64,
        })
    }
}

/// Window `j` of `N` over `T` frames is `[floor(jT/N), floor((j+1)T/N))`.
pub fn fixed_stride_windows(frames: usize, ratio: f64) -> Vec<(usize, usize)> {
    let n = target_length(frames, ratio);
    (0..n).map(|j| (j * frames / n, (j + 1) * frames / n)).collect()
}

/// Mean-pooling weights for the fixed-stride baseline.
pub fn fixed_stride_entries(frames: usize, ratio: f64) -> Vec<AllocEntry> {
    let mut out = Vec::with_capacity(frames);
    for (j, (s, e)) in fixed_stride_windows(frames, ratio).into_iter().enumerate() {
        let w = 1.0 / (e - s) as f64;
        out.extend((s..e).map(|frame| AllocEntry { frame, token: j, weight: w }));
    }
    out
}

/// Cumulative trace whose oracle upsampling reproduces window membership:
/// the 1-based index of the window containing each frame.
pub fn fixed_stride_trace(frames: usize, ratio: f64) -> Vec<f64> {
    let mut trace = vec![0.0; frames];
    for (j, (s, e)) in fixed_stride_windows(frames, ratio).into_iter().enumerate() {
        for v in &mut trace[s..e] {
            *v = (j + 1) as f64;
        }
    }
    trace
}

pub fn fixed_stride_pool(h: &FeatureSequence, ratio: f64) -> Result<FeatureSequence> {
    if !(ratio >= 1.0) {
        return Err(config(format!("compression ratio must be >= 1, got {ratio}")));
    }
    let t = h.frames.rows();
    if t == 0 {
        return Err(input("no frames to pool"));
    }
    let windows = fixed_stride_windows(t, ratio);
    let mut out = Mat::zeros(windows.len(), h.frames.cols());
    for (j, (s, e)) in windows.iter().enumerate() {
        let w = 1.0 / (e - s) as f64;
        for r in *s..*e {
            for (o, a) in out.row_mut(j).iter_mut().zip(h.frames.row(r)) {
                *o += w * a;
            }
        }
    }
    let n = windows.len() as f64;
    Ok(FeatureSequence { frames: out, frame_rate: h.frame_rate * n / t as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{max_rel_error_with, param_max_rel_error};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn feats(rows: &[Vec<f64>]) -> FeatureSequence {
        FeatureSequence { frames: Mat::from_rows(rows), frame_rate: 50.0 }
    }

    #[test]
    fn output_lengths() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, 8, &cfg, &mut rng);
        for (t, expect) in [(100, 50), (1, 1), (7, 4)] {
            let mel = MelSpectrogram::new(Mat::filled(t, 8, 0.3), 100.0);
            let f = enc.encode(&store, &mel).unwrap();
            assert_eq!(f.frames.rows(), expect);
            assert_eq!(f.frame_rate, 50.0);
        }
        assert!(enc.encode(&store, &MelSpectrogram::new(Mat::zeros(0, 8), 100.0)).is_err());
    }

    #[test]
    fn zero_output_layer_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, 8, &EncoderConfig::default(), &mut rng);
        enc.zero_output_layer(&mut store);
        let f = enc.encode(&store, &MelSpectrogram::new(Mat::zeros(12, 8), 100.0)).unwrap();
        assert!(f.frames.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for mixing in [MixingKind::Convolutional, MixingKind::SelfAttention] {
            let cfg = EncoderConfig { hidden_dim: 6, n_layers: 1, mixing, ..EncoderConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, 4, &cfg, &mut rng);
            let mel = crate::params::init_uniform(9, 4, 1.0, &mut rng);
            let ids: Vec<_> = store.ids().collect();
            // Key biases have an exactly zero gradient, so the floor must sit above finite-difference noise.
            // sum(h^2) is nearly constant under the output layer norm; a fixed projection is not.
            let proj = crate::params::init_uniform(5, 6, 1.0, &mut rng);
            let err = param_max_rel_error(&store, &ids, 1e-5, 1e-5, |g| {
                let m = g.constant(mel.clone());
                let h = enc.forward(g, m);
                let w = g.constant(proj.clone());
                let sq = g.mul(h, w);
                g.sum_all(sq)
            });
            assert!(err < 1e-4, "{mixing:?} param rel err {err}");
            let err = max_rel_error_with(&store, &mel, 1e-6, 1e-7, |g, m| {
                let h = enc.forward(g, m);
                let w = g.constant(proj.clone());
                let sq = g.mul(h, w);
                g.sum_all(sq)
            });
            assert!(err < 1e-4, "{mixing:?} input rel err {err}");
        }
    }

    #[test]
    fn fixed_stride_examples() {
        let h = feats(&[vec![1.0], vec![3.0], vec![5.0], vec![9.0]]);
        let p = fixed_stride_pool(&h, 2.0).unwrap();
        assert_eq!(p.frames.data(), &[2.0, 7.0]);
        assert_eq!(fixed_stride_pool(&h, 1.0).unwrap().frames, h.frames);
        let h3 = feats(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![3.0, 6.0]]);
        assert_eq!(fixed_stride_pool(&h3, 10.0).unwrap().frames.data(), &[2.0, 3.0]);
        assert!(fixed_stride_pool(&h3, 0.5).is_err());
    }

    #[test]
    fn fixed_stride_trace_matches_windows() {
        for t in 1..80 {
            for r in [1.0, 2.0, 4.0, 8.0, 10.0] {
                let trace = fixed_stride_trace(t, r);
                let n = target_length(t, r);
                let idx = crate::dynamic_merge::upsample_indices(&trace, n, 1.0);
                for (j, (s, e)) in fixed_stride_windows(t, r).into_iter().enumerate() {
                    assert!(idx[s..e].iter().all(|&i| i == j));
                }
                assert_eq!(*trace.last().unwrap(), n as f64);
            }
        }
    }

    proptest! {
        #[test]
        fn pooling_is_rate_matched_and_mean_preserving(t in 1usize..300, r in prop::sample::select(vec![1.0, 2.0, 3.0, 4.0, 8.0, 10.0, 16.0]), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = FeatureSequence { frames: crate::params::init_uniform(t, 3, 1.0, &mut rng), frame_rate: 50.0 };
            let p = fixed_stride_pool(&h, r).unwrap();
            prop_assert_eq!(p.frames.rows(), target_length(t, r));
            let windows = fixed_stride_windows(t, r);
            let sizes: Vec<usize> = windows.iter().map(|(s, e)| e - s).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            if sizes.iter().all(|&s| s == sizes[0]) {
                for c in 0..3 {
                    let m_in: f64 = (0..t).map(|i| h.frames.get(i, c)).sum::<f64>() / t as f64;
                    let m_out: f64 = (0..p.frames.rows()).map(|i| p.frames.get(i, c)).sum::<f64>() / p.frames.rows() as f64;
                    prop_assert!((m_in - m_out).abs() < 1e-12);
                }
            }
        }
    }
}
