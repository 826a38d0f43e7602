//! Finite scalar quantization: per-dimension bounding and rounding onto a
//! product grid, with little-endian mixed-radix code ids.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{round_half_up, Graph, Var};
use crate::dynamic_merge::target_length;
use crate::error::{config, input, Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsqConfig {
    /// Level count per quantized dimension.
    pub levels: Vec<usize>,
}

impl Default for FsqConfig {
    fn default() -> Self {
        Self { levels: vec![4; 7] }
    }
}

impl FsqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(config("fsq needs at least one dimension"));
        }
        if let Some(l) = self.levels.iter().find(|&&l| l < 2) {
            return Err(config(format!("every fsq level count must be >= 2, got {l}")));
        }
        self.levels
            .iter()
            .try_fold(1usize, |acc, &l| acc.checked_mul(l))
            .ok_or_else(|| config("fsq codebook size overflows"))?;
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.levels.len()
    }

    /// Product of the level counts.
    pub fn codebook_size(&self) -> usize {
        self.levels.iter().product()
    }

    /// `(L_i - 1) / 2` per dimension: maps `tanh + 1` onto `[0, L_i - 1]`.
    fn half_spans(&self) -> Mat {
        Mat::row_vector(self.levels.iter().map(|&l| (l - 1) as f64 / 2.0).collect())
    }

    /// `2 / (L_i - 1)` per dimension: maps digits onto `[0, 2]`.
    fn grid_scales(&self) -> Mat {
        Mat::row_vector(self.levels.iter().map(|&l| 2.0 / (l - 1) as f64).collect())
    }
}

/// Dimension 0 is the least significant digit.
pub fn digits_to_id(digits: &[usize], cfg: &FsqConfig) -> Result<usize> {
    if digits.len() != cfg.dims() {
        return Err(input(format!("expected {} digits, got {}", cfg.dims(), digits.len())));
    }
    let mut id = 0;
    for (&d, &l) in digits.iter().zip(&cfg.levels).rev() {
        if d >= l {
            return Err(input(format!("digit {d} out of range for {l} levels")));
        }
        id = id * l + d;
    }
    Ok(id)
}

pub fn id_to_digits(id: usize, cfg: &FsqConfig) -> Result<Vec<usize>> {
    check_id(id, cfg)?;
    let mut rest = id;
    Ok(cfg
        .levels
        .iter()
        .map(|&l| {
            let d = rest % l;
            rest /= l;
            d
        })
        .collect())
}

fn check_id(id: usize, cfg: &FsqConfig) -> Result<()> {
    let size = cfg.codebook_size();
    if id >= size {
        return Err(input(format!("token id {id} outside codebook of size {size}")));
    }
    Ok(())
}

/// `((tanh(x) + 1) / 2) * (L - 1)`, in `[0, L - 1]`.
pub fn bound(x: f64, levels: usize) -> f64 {
    (x.tanh() + 1.0) / 2.0 * (levels - 1) as f64
}

/// Round half up, clamped to the valid digit range.
pub fn digit_of(bounded: f64, levels: usize) -> usize {
    (round_half_up(bounded).max(0.0) as usize).min(levels - 1)
}

/// Grid coordinate of a digit, in `[-1, 1]`.
pub fn grid_point(digit: usize, levels: usize) -> f64 {
    digit as f64 * 2.0 / (levels - 1) as f64 - 1.0
}

/// Digits of a projected (pre-bound) vector.
pub fn digits_of(projected: &[f64], cfg: &FsqConfig) -> Vec<usize> {
    projected.iter().zip(&cfg.levels).map(|(&x, &l)| digit_of(bound(x, l), l)).collect()
}

pub fn grid_of(digits: &[usize], cfg: &FsqConfig) -> Vec<f64> {
    digits.iter().zip(&cfg.levels).map(|(&d, &l)| grid_point(d, l)).collect()
}

/// Grid rows for a list of ids.
pub fn grid_matrix(ids: &[usize], cfg: &FsqConfig) -> Result<Mat> {
    let mut m = Mat::zeros(ids.len(), cfg.dims());
    for (r, &id) in ids.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&grid_of(&id_to_digits(id, cfg)?, cfg));
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantized {
    pub digits: Vec<usize>,
    /// Output-projected grid point.
    pub code_vector: Vec<f64>,
    pub id: usize,
}

/// Code ids of one utterance together with the rate metadata they were produced under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub utterance_id: String,
    pub ids: Vec<usize>,
    pub ratio: f64,
    /// Source feature frame count.
    pub frames: usize,
}

impl TokenSequence {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn validate(&self, cfg: &FsqConfig) -> Result<()> {
        let expect = target_length(self.frames, self.ratio);
        if self.ids.len() != expect {
            return Err(Error::InvalidRecord {
                id: self.utterance_id.clone(),
                reason: format!("{} tokens, expected {expect}", self.ids.len()),
            });
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id >= cfg.codebook_size()) {
            return Err(Error::InvalidRecord { id: self.utterance_id.clone(), reason: format!("id {bad} out of range") });
        }
        Ok(())
    }
}

/// Projection `D -> dims`, quantizer, projection `dims -> D`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Fsq {
    pub cfg: FsqConfig,
    pub proj_in: Linear,
    pub proj_out: Linear,
}

/// Graph outputs of one quantization pass.
pub struct FsqForward {
    /// `N x dims` grid points.
    pub grid: Var,
    /// `N x D` dequantized vectors.
    pub out: Var,
    pub ids: Vec<usize>,
}

impl Fsq {
    pub fn new(store: &mut ParamStore, d_model: usize, cfg: &FsqConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cfg: cfg.clone(),
            proj_in: Linear::new(store, "fsq.in", d_model, cfg.dims(), rng),
            proj_out: Linear::new(store, "fsq.out", cfg.dims(), d_model, rng),
        }
    }

    /// Straight-through quantization of `c` (`N x D`).
    pub fn forward(&self, g: &mut Graph, c: Var) -> FsqForward {
        self.forward_path(g, c, true)
    }

    /// The same computation with rounding replaced by the identity on the bounded values.
    pub fn forward_unquantized(&self, g: &mut Graph, c: Var) -> Var {
        self.forward_path(g, c, false).out
    }

    fn forward_path(&self, g: &mut Graph, c: Var, quantize: bool) -> FsqForward {
        let z = self.proj_in.forward(g, c);
        let ids = (0..g.value(z).rows()).map(|r| self.id_of_projected(g.value(z).row(r))).collect();
        let t = g.tanh(z);
        let t = g.offset(t, 1.0);
        let spans = g.constant(self.cfg.half_spans());
        let b = g.mul_row(t, spans);
        let d = if quantize { g.st_round(b) } else { b };
        let scales = g.constant(self.cfg.grid_scales());
        let grid = g.mul_row(d, scales);
        let grid = g.offset(grid, -1.0);
        let out = self.proj_out.forward(g, grid);
        FsqForward { grid, out, ids }
    }

    fn id_of_projected(&self, z: &[f64]) -> usize {
        digits_to_id(&digits_of(z, &self.cfg), &self.cfg).expect("digits are clamped into range")
    }

    /// Quantizes each row of `c`.
    pub fn quantize(&self, store: &ParamStore, c: &Mat) -> Vec<Quantized> {
        let mut g = Graph::with_params(store);
        let cv = g.constant(c.clone());
        let z = self.proj_in.forward(&mut g, cv);
        let zv = g.value(z).clone();
        (0..zv.rows())
            .map(|r| {
                let digits = digits_of(zv.row(r), &self.cfg);
                let id = digits_to_id(&digits, &self.cfg).expect("digits are clamped into range");
                let code_vector = self.project_grid(store, &Mat::row_vector(grid_of(&digits, &self.cfg))).row(0).to_vec();
                Quantized { digits, code_vector, id }
            })
            .collect()
    }

    /// `N x D` vectors for a list of ids.
    pub fn dequantize(&self, store: &ParamStore, ids: &[usize]) -> Result<Mat> {
        Ok(self.project_grid(store, &grid_matrix(ids, &self.cfg)?))
    }

    /// Dequantization inside a graph; gradients reach the output projection only.
    pub fn dequantize_graph(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let grid = g.constant(grid_matrix(ids, &self.cfg)?);
        Ok(self.proj_out.forward(g, grid))
    }

    fn project_grid(&self, store: &ParamStore, grid: &Mat) -> Mat {
        let mut g = Graph::with_params(store);
        let gv = g.constant(grid.clone());
        let out = self.proj_out.forward(&mut g, gv);
        g.value(out).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn id_examples() {
        let cfg = FsqConfig::default();
        assert_eq!(cfg.codebook_size(), 16384);
        assert_eq!(digits_to_id(&[2; 7], &cfg).unwrap(), 10922);
        assert_eq!(digits_to_id(&[0; 7], &cfg).unwrap(), 0);
        assert_eq!(digits_to_id(&[3; 7], &cfg).unwrap(), 16383);
        assert_eq!(id_to_digits(0, &cfg).unwrap(), vec![0; 7]);
        assert_eq!(id_to_digits(1, &cfg).unwrap(), vec![1, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(id_to_digits(16384, &cfg), Err(Error::Input(_))));
        assert!(digits_to_id(&[4, 0, 0, 0, 0, 0, 0], &cfg).is_err());
    }

    #[test]
    fn zero_input_quantizes_to_middle_digit() {
        let cfg = FsqConfig::default();
        assert_eq!(bound(0.0, 4), 1.5);
        let digits = digits_of(&[0.0; 7], &cfg);
        assert_eq!(digits, vec![2; 7]);
        assert_eq!(digits_to_id(&digits, &cfg).unwrap(), 10922);
    }

    #[test]
    fn config_validation() {
        assert!(FsqConfig { levels: vec![4, 1] }.validate().is_err());
        assert!(FsqConfig { levels: vec![] }.validate().is_err());
        assert!(FsqConfig { levels: vec![5, 3, 2] }.validate().is_ok());
    }

    #[test]
    fn mixed_levels_roundtrip() {
        let cfg = FsqConfig { levels: vec![5, 3, 2] };
        for id in 0..cfg.codebook_size() {
            assert_eq!(digits_to_id(&id_to_digits(id, &cfg).unwrap(), &cfg).unwrap(), id);
        }
    }

    fn identity_fsq(store: &mut ParamStore) -> Fsq {
        let cfg = FsqConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fsq = Fsq::new(store, 7, &cfg, &mut rng);
        let mut eye = Mat::zeros(7, 7);
        for i in 0..7 {
            eye.set(i, i, 1.0);
        }
        *store.get_mut(fsq.proj_out.w) = eye;
        fsq
    }

    #[test]
    fn dequantize_with_identity_projection() {
        let mut store = ParamStore::new();
        let fsq = identity_fsq(&mut store);
        let zero = fsq.dequantize(&store, &[0]).unwrap();
        assert_eq!(zero.row(0), &[-1.0; 7]);
        let both = fsq.dequantize(&store, &[5, 6]).unwrap();
        assert_ne!(both.row(0), both.row(1));
        assert!(fsq.dequantize(&store, &[16384]).is_err());
    }

    #[test]
    fn dequantize_matches_forward_code_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let fsq = Fsq::new(&mut store, 12, &FsqConfig::default(), &mut rng);
        let c = crate::params::init_uniform(9, 12, 2.0, &mut rng);
        let q = fsq.quantize(&store, &c);
        let ids: Vec<usize> = q.iter().map(|t| t.id).collect();
        let deq = fsq.dequantize(&store, &ids).unwrap();
        let mut g = Graph::with_params(&store);
        let cv = g.constant(c.clone());
        let fwd = fsq.forward(&mut g, cv);
        assert_eq!(fwd.ids, ids);
        for (r, t) in q.iter().enumerate() {
            assert_eq!(deq.row(r), t.code_vector.as_slice());
            assert_eq!(g.value(fwd.out).row(r), t.code_vector.as_slice());
        }
    }

    #[test]
    fn straight_through_equals_identity_path_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let fsq = Fsq::new(&mut store, 6, &FsqConfig::default(), &mut rng);
        let c = crate::params::init_uniform(4, 6, 1.5, &mut rng);
        let weights = crate::params::init_uniform(4, 6, 1.0, &mut rng);
        let grad = |quantize: bool| {
            let mut g = Graph::with_params(&store);
            let cv = g.input(c.clone());
            let out = if quantize { fsq.forward(&mut g, cv).out } else { fsq.forward_unquantized(&mut g, cv) };
            let w = g.constant(weights.clone());
            let y = g.mul(out, w);
            let loss = g.sum_all(y);
            g.backward(loss).wrt(cv).unwrap().clone()
        };
        let (st, id) = (grad(true), grad(false));
        assert!(st.max_abs_diff(&id) < 1e-12, "{}", st.max_abs_diff(&id));
    }

    proptest! {
        #[test]
        fn error_within_half_spacing(xs in prop::collection::vec(-4.0f64..4.0, 7)) {
            let cfg = FsqConfig::default();
            let digits = digits_of(&xs, &cfg);
            for ((&x, &d), &l) in xs.iter().zip(&digits).zip(&cfg.levels) {
                prop_assert!((bound(x, l) - d as f64).abs() <= 0.5 + 1e-12);
            }
        }

        #[test]
        fn grid_points_are_fixed_points(id in 0usize..16384) {
            let cfg = FsqConfig::default();
            let digits = id_to_digits(id, &cfg).unwrap();
            // atanh of the grid point bounds back to exactly the digit
            let pre: Vec<f64> = grid_of(&digits, &cfg).iter().map(|&p| p.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh()).collect();
            prop_assert_eq!(digits_of(&pre, &cfg), digits);
        }
    }
}
