//! Layer building blocks shared by the encoder, decoders and probes.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{init_normal, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.w"), init_normal(d_in, d_out, d_in, 1.0, rng));
        let b = store.add(format!("{name}.b"), Mat::zeros(1, d_out));
        Self { w, b, d_in, d_out }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Mat::zeros(d_in, d_out));
        let b = store.add(format!("{name}.b"), Mat::zeros(1, d_out));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// 1-D convolution over the frame axis, implemented as unfold + matmul.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Conv1d {
    /// "Same" padding for odd kernels.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = d_in * kernel;
        let w = store.add(format!("{name}.w"), init_normal(fan_in, d_out, fan_in, 1.0, rng));
        let b = store.add(format!("{name}.b"), Mat::zeros(1, d_out));
        Self { w, b, kernel, stride, pad: (kernel - 1) / 2, d_in, d_out }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, kernel: usize) -> Self {
        let w = store.add(format!("{name}.w"), Mat::zeros(d_in * kernel, d_out));
        let b = store.add(format!("{name}.b"), Mat::zeros(1, d_out));
        Self { w, b, kernel, stride: 1, pad: (kernel - 1) / 2, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = if self.kernel == 1 && self.stride == 1 { x } else { g.unfold(x, self.kernel, self.stride, self.pad) };
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(cols, w);
        g.add_row(y, b)
    }
}

/// Multi-head scaled dot-product attention with separate query/key/value/output projections.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_kv: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(d_model % heads, 0, "width must divide into heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, d_model, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
        }
    }

    /// `x` attends over `memory`. With `causal`, position `i` sees memory rows `0..=i`.
    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, causal: bool) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let d_model = self.q.d_out;
        let dh = d_model / self.heads;
        let (tq, tk) = (g.value(x).rows(), g.value(memory).rows());
        let mask = causal.then(|| {
            let mut m = Mat::zeros(tq, tk);
            for i in 0..tq {
                for j in (i + 1)..tk {
                    m.set(i, j, -1e30);
                }
            }
            g.constant(m)
        });
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_nt(qh, kh);
            let mut s = g.scale(s, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                s = g.add(s, m);
            }
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, cat)
    }
}

/// Two-layer feed-forward block with SiLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.silu(h);
        self.down.forward(g, h)
    }
}

/// Fixed sinusoidal embedding of integer positions `0..n`, width `d`, scaled by `amplitude`.
pub fn sinusoidal_positions(n: usize, d: usize, amplitude: f64) -> Mat {
    let mut m = Mat::zeros(n, d);
    for p in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            m.set(p, i, amplitude * if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// Sinusoidal embedding of continuous times in `[0, 1]`, one row per time.
pub fn time_embedding(times: &[f64], d: usize) -> Mat {
    let mut m = Mat::zeros(times.len(), d);
    let half = d / 2;
    for (r, &t) in times.iter().enumerate() {
        for i in 0..half {
            let freq = (i as f64 * 100f64.ln() / half.max(1) as f64).exp();
            let angle = t * freq;
            m.set(r, 2 * i, angle.sin());
            m.set(r, 2 * i + 1, angle.cos());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error_with;
    use rand::SeedableRng;

    #[test]
    fn causal_attention_ignores_future_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 8, 8, 2, &mut rng);
        let x = crate::params::init_uniform(5, 8, 1.0, &mut rng);
        let run = |m: &Mat| {
            let mut g = Graph::with_params(&store);
            let xv = g.constant(m.clone());
            let y = attn.forward(&mut g, xv, xv, true);
            g.value(y).clone()
        };
        let full = run(&x);
        let mut changed = x.clone();
        for c in 0..8 {
            changed.set(4, c, 9.0);
        }
        let other = run(&changed);
        for r in 0..4 {
            assert_eq!(full.row(r), other.row(r));
        }
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 4, 6, 2, &mut rng);
        let mem = crate::params::init_uniform(3, 6, 1.0, &mut rng);
        let x0 = crate::params::init_uniform(4, 4, 1.0, &mut rng);
        let err = max_rel_error_with(&store, &x0, 1e-6, 1e-8, |g, x| {
            let m = g.constant(mem.clone());
            let y = attn.forward(g, x, m, false);
            let sq = g.mul(y, y);
            g.sum_all(sq)
        });
        assert!(err < 1e-6, "{err}");
    }
}
