//! Convolutional decoder from frame-rate token sequences back to mel frames.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config, Result};
use crate::nn::{Conv1d, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub n_blocks: usize,
    /// Transposed-convolution strides; their product is the upsampling factor.
    pub upsample_strides: Vec<usize>,
    pub channels: usize,
    pub kernel: usize,
    /// Start with an all-zero output convolution.
    pub zero_init_output: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self { n_blocks: 3, upsample_strides: vec![2], channels: 64, kernel: 3, zero_init_output: false }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.upsample_strides.contains(&0) || self.channels == 0 || self.kernel % 2 == 0 {
            return Err(config("recon decoder needs nonzero strides and channels and an odd kernel"));
        }
        Ok(())
    }

    pub fn upsample_factor(&self) -> usize {
        self.upsample_strides.iter().product()
    }
}

/// Snake activation `x + sin^2(a x) / a` with a trainable per-channel `a`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Snake {
    alpha: ParamId,
}

impl Snake {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self { alpha: store.add(format!("{name}.alpha"), Mat::filled(1, channels, 1.0)) }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let a = g.param(self.alpha);
        g.snake(x, a)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResBlock {
    act1: Snake,
    conv1: Conv1d,
    act2: Snake,
    conv2: Conv1d,
}

/// Transposed convolution with kernel equal to stride: one linear map per input frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Upsample {
    act: Snake,
    proj: Linear,
    stride: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconDecoder {
    pub cfg: ReconConfig,
    input: Conv1d,
    blocks: Vec<ResBlock>,
    ups: Vec<Upsample>,
    out_act: Snake,
    pub out: Conv1d,
}

impl ReconDecoder {
    pub fn new(store: &mut ParamStore, d_model: usize, n_mels: usize, cfg: &ReconConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let k = cfg.kernel;
        let input = Conv1d::new(store, "recon.in", d_model, c, k, 1, rng);
        let blocks = (0..cfg.n_blocks)
            .map(|i| ResBlock {
                act1: Snake::new(store, &format!("recon.b{i}.act1"), c),
                conv1: Conv1d::new(store, &format!("recon.b{i}.conv1"), c, c, k, 1, rng),
                act2: Snake::new(store, &format!("recon.b{i}.act2"), c),
                conv2: Conv1d::new(store, &format!("recon.b{i}.conv2"), c, c, k, 1, rng),
            })
            .collect();
        let ups = cfg
            .upsample_strides
            .iter()
            .enumerate()
            .map(|(i, &s)| Upsample {
                act: Snake::new(store, &format!("recon.up{i}.act"), c),
                proj: Linear::new(store, &format!("recon.up{i}"), c, s * c, rng),
                stride: s,
            })
            .collect();
        let out_act = Snake::new(store, "recon.out_act", c);
        let out = if cfg.zero_init_output {
            Conv1d::zeroed(store, "recon.out", c, n_mels, k)
        } else {
            Conv1d::new(store, "recon.out", c, n_mels, k, 1, rng)
        };
        Self { cfg: cfg.clone(), input, blocks, ups, out_act, out }
    }

    /// `T x D` in, `T * upsample_factor x n_mels` out.
    pub fn forward(&self, g: &mut Graph, u: Var) -> Var {
        let mut x = self.input.forward(g, u);
        for b in &self.blocks {
            let y = b.act1.forward(g, x);
            let y = b.conv1.forward(g, y);
            let y = b.act2.forward(g, y);
            let y = b.conv2.forward(g, y);
            x = g.add(x, y);
        }
        for up in &self.ups {
            let y = up.act.forward(g, x);
            let y = up.proj.forward(g, y);
            let (t, c) = g.value(y).shape();
            x = g.reshape(y, t * up.stride, c / up.stride);
        }
        let x = self.out_act.forward(g, x);
        self.out.forward(g, x)
    }

    /// Output rows trimmed to `mel_frames`; a surplus of a whole upsampling step or a shortfall is a rate mismatch.
    pub fn forward_trimmed(&self, g: &mut Graph, u: Var, mel_frames: usize) -> Result<Var> {
        let produced = g.value(u).rows() * self.cfg.upsample_factor();
        check_rates(produced, mel_frames, self.cfg.upsample_factor())?;
        let y = self.forward(g, u);
        Ok(if produced == mel_frames { y } else { g.gather_rows(y, (0..mel_frames).collect()) })
    }

    pub fn decode(&self, store: &ParamStore, u: &Mat, mel_frames: usize) -> Result<Mat> {
        let mut g = Graph::with_params(store);
        let uv = g.constant(u.clone());
        let y = self.forward_trimmed(&mut g, uv, mel_frames)?;
        Ok(g.value(y).clone())
    }
}

pub fn check_rates(produced: usize, mel_frames: usize, factor: usize) -> Result<()> {
    if produced < mel_frames || produced - mel_frames >= factor {
        return Err(config(format!(
            "recon decoder produces {produced} frames for a {mel_frames}-frame target (upsampling x{factor})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error_with;
    use crate::params::init_uniform;
    use rand::SeedableRng;

    fn small(zero: bool) -> (ParamStore, ReconDecoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = ReconConfig { n_blocks: 2, upsample_strides: vec![2], channels: 5, kernel: 3, zero_init_output: zero };
        let dec = ReconDecoder::new(&mut store, 4, 3, &cfg, &mut rng);
        (store, dec)
    }

    #[test]
    fn output_length_contract() {
        let (store, dec) = small(false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in [1, 2, 7, 50] {
            let u = init_uniform(t, 4, 1.0, &mut rng);
            let mut g = Graph::with_params(&store);
            let uv = g.constant(u.clone());
            let y = dec.forward(&mut g, uv);
            assert_eq!(g.value(y).shape(), (2 * t, 3));
            assert_eq!(dec.decode(&store, &u, 2 * t - 1).unwrap().rows(), 2 * t - 1);
            assert!(dec.decode(&store, &u, 2 * t + 1).is_err());
            assert!(dec.decode(&store, &u, (2 * t).saturating_sub(2)).is_err() || t == 1);
        }
    }

    #[test]
    fn zero_output_layer_gives_bias() {
        let (mut store, dec) = small(true);
        *store.get_mut(dec.out.b) = Mat::row_vector(vec![0.5, -1.0, 2.0]);
        let u = init_uniform(6, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = dec.decode(&store, &u, 12).unwrap();
        for r in 0..12 {
            assert_eq!(y.row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn input_gradient() {
        let (store, dec) = small(false);
        let u = init_uniform(5, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let target = init_uniform(10, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let err = max_rel_error_with(&store, &u, 1e-6, 1e-7, |g, x| {
            let y = dec.forward(g, x);
            let t = g.constant(target.clone());
            g.mse(y, t)
        });
        assert!(err < 1e-4, "{err}");
    }
}
