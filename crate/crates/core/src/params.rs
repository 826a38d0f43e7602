//! Named trainable parameters, seeded initialisers and the optimiser.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    /// Frozen parameters enter graphs as constants and never receive gradients.
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.params.push(Param { name: name.into(), value, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names and the exact bit patterns of the selected parameters.
    pub fn checksum_of(&self, ids: &[ParamId]) -> String {
        let mut hasher = Sha256::new();
        for id in ids {
            let p = &self.params[id.0];
            hasher.update(p.name.as_bytes());
            hasher.update((p.value.rows() as u64).to_le_bytes());
            hasher.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn checksum(&self) -> String {
        let ids: Vec<_> = self.ids().collect();
        self.checksum_of(&ids)
    }
}

/// Gaussian init with standard deviation `gain / sqrt(fan_in)`.
pub fn init_normal(rows: usize, cols: usize, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Mat {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

pub fn init_uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect())
}

/// Linear warmup to `peak` over `warmup` steps, constant afterwards. Steps are 1-based.
pub fn warmup_lr(step: usize, peak: f64, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        peak
    } else {
        peak * step as f64 / warmup as f64
    }
}

pub fn global_norm(grads: &[Option<Mat>]) -> f64 {
    grads.iter().flatten().map(Mat::sq_norm).sum::<f64>().sqrt()
}

/// Rescales gradients in place so that their global norm does not exceed
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let mut scale = max_norm / norm;
        loop {
            let clipped = norm_after_scale(grads, scale);
            if clipped <= max_norm {
                break;
            }
            scale = scale.next_down();
        }
        for g in grads.iter_mut().flatten() {
            g.scale_assign(scale);
        }
    }
    norm
}

fn norm_after_scale(grads: &[Option<Mat>], scale: f64) -> f64 {
    grads.iter().flatten().map(|g| g.map(|x| x * scale).sq_norm()).sum::<f64>().sqrt()
}

/// `acc += scale * grads`, growing `acc` as needed.
pub fn accumulate(acc: &mut Vec<Option<Mat>>, grads: Vec<Option<Mat>>, scale: f64) {
    if acc.len() < grads.len() {
        acc.resize(grads.len(), None);
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(mut g) = g {
            g.scale_assign(scale);
            match a {
                Some(a) => a.add_assign(&g),
                None => *a = Some(g),
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], lr: f64) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if store.params[i].frozen {
                continue;
            }
            let value = &mut store.params[i].value;
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(value.rows(), value.cols()));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(value.rows(), value.cols()));
            for (((w, g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn warmup_is_linear_then_flat() {
        for s in 1..=200 {
            assert_eq!(warmup_lr(s, 1e-3, 200), 1e-3 * s as f64 / 200.0);
        }
        assert_eq!(warmup_lr(500, 1e-3, 200), 1e-3);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut grads = vec![Some(init_normal(7, 3, 1, 10.0, &mut rng)), None, Some(init_normal(1, 5, 1, 3.0, &mut rng))];
            let pre = clip_global_norm(&mut grads, 5.0);
            assert!(pre > 5.0);
            assert!(global_norm(&grads) <= 5.0);
        }
        let mut small = vec![Some(Mat::scalar(0.5))];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0].as_ref().unwrap().item(), 0.5);
    }

    #[test]
    fn adam_skips_frozen() {
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::scalar(1.0));
        let b = store.add("b", Mat::scalar(1.0));
        store.set_frozen(b, true);
        let mut adam = Adam::default();
        adam.step(&mut store, &[Some(Mat::scalar(1.0)), Some(Mat::scalar(1.0))], 0.1);
        assert!(store.get(a).item() < 1.0);
        assert_eq!(store.get(b).item(), 1.0);
    }
}
