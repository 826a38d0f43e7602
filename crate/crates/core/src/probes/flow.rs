//! Conditional flow matching on the linear path `x_t = (1 - t) x0 + t x1`,
//! target velocity `x1 - x0`, sampled with fixed-step Euler integration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config, input, Result};
use crate::nn::{time_embedding, Conv1d, Linear};
use crate::params::{clip_global_norm, Adam, ParamStore};
use crate::tensor::Mat;

/// A time-dependent vector field conditioned on a frame-aligned sequence.
pub trait VelocityField {
    fn velocity(&self, x: &Mat, t: f64, cond: &Mat) -> Mat;
}

/// The exact displacement field `x1 - x0` of one flow state.
pub struct OracleField {
    pub x0: Mat,
    pub x1: Mat,
}

impl VelocityField for OracleField {
    fn velocity(&self, _x: &Mat, _t: f64, _cond: &Mat) -> Mat {
        self.x1.zip_map(&self.x0, |a, b| a - b)
    }
}

pub struct ZeroField;

impl VelocityField for ZeroField {
    fn velocity(&self, x: &Mat, _t: f64, _cond: &Mat) -> Mat {
        Mat::zeros(x.rows(), x.cols())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub x0: Mat,
    pub x1: Mat,
    pub t: f64,
    pub xt: Mat,
}

pub fn prior_sample(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

pub fn interpolate(x0: &Mat, x1: &Mat, t: f64) -> Mat {
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

/// Draws `x0` then `t` from a generator seeded with `seed`; `x0` equals the prior draw of [`fm_sample`].
pub fn sample_flow_state(x1: &Mat, seed: u64) -> FlowState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = prior_sample(x1.rows(), x1.cols(), &mut rng);
    let t: f64 = rng.random();
    let xt = interpolate(&x0, x1, t);
    FlowState { x0, x1: x1.clone(), t, xt }
}

fn check_aligned(cond: &Mat, x1: &Mat) -> Result<()> {
    if cond.rows() != x1.rows() {
        return Err(input(format!("condition has {} frames, target has {}", cond.rows(), x1.rows())));
    }
    Ok(())
}

/// Mean squared velocity error over all bins at one sampled `(x0, t)`.
pub fn fm_loss_value(field: &impl VelocityField, cond: &Mat, x1: &Mat, seed: u64) -> Result<f64> {
    check_aligned(cond, x1)?;
    let s = sample_flow_state(x1, seed);
    let v = field.velocity(&s.xt, s.t, cond);
    let n = x1.len() as f64;
    Ok(v.data().iter().zip(x1.data()).zip(s.x0.data()).map(|((v, a), b)| (v - (a - b)).powi(2)).sum::<f64>() / n)
}

/// Euler integration of `dx/dt = v(x, t, cond)` from a seeded prior draw over `steps` uniform steps.
pub fn fm_sample(
    field: &impl VelocityField,
    cond: &Mat,
    rows: usize,
    cols: usize,
    steps: usize,
    seed: u64,
) -> Result<Mat> {
    if steps == 0 {
        return Err(config("flow sampling needs at least one step"));
    }
    if cond.rows() != rows {
        return Err(input(format!("condition has {} frames, sample has {rows}", cond.rows())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = prior_sample(rows, cols, &mut rng);
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let v = field.velocity(&x, k as f64 * dt, cond);
        x = x.zip_map(&v, |a, b| a + dt * b);
    }
    Ok(x)
}

/// Repeats each condition row so the sequence covers `rows` frames; the surplus must be under one repeat.
pub fn repeat_to_grid(u: &Mat, rows: usize) -> Result<Mat> {
    if u.rows() == 0 || rows == 0 {
        return Err(input("cannot align an empty sequence"));
    }
    let factor = rows.div_ceil(u.rows());
    if u.rows() * factor - rows >= factor {
        return Err(input(format!("{} condition frames cannot cover {rows} target frames", u.rows())));
    }
    Ok(u.select_rows(&(0..rows).map(|r| r / factor).collect::<Vec<_>>()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub hidden: usize,
    /// Width the condition is projected to before concatenation.
    pub cond_proj: usize,
    pub time_dim: usize,
    /// Frame-axis kernel; 1 treats rows independently.
    pub kernel: usize,
    pub steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { hidden: 48, cond_proj: 16, time_dim: 16, kernel: 3, steps: 32 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.time_dim % 2 != 0 || self.kernel % 2 == 0 || self.steps == 0 {
            return Err(config("flow probe needs nonzero width, even time_dim, odd kernel and >= 1 step"));
        }
        Ok(())
    }
}

/// `v(x_t, t, U)`: per-frame concatenation of `x_t`, projected `U` and a time embedding,
/// followed by two convolutions and a linear read-out.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowProbe {
    pub cfg: FlowConfig,
    pub dim: usize,
    pub cond_dim: usize,
    cond: Option<Linear>,
    inp: Conv1d,
    mid: Conv1d,
    out: Linear,
}

impl FlowProbe {
    pub fn new(store: &mut ParamStore, dim: usize, cond_dim: usize, cfg: &FlowConfig, rng: &mut ChaCha8Rng) -> Self {
        let cond = (cond_dim > 0).then(|| Linear::new(store, "flow.cond", cond_dim, cfg.cond_proj, rng));
        let width_in = dim + if cond_dim > 0 { cfg.cond_proj } else { 0 } + cfg.time_dim;
        Self {
            cfg: cfg.clone(),
            dim,
            cond_dim,
            cond,
            inp: Conv1d::new(store, "flow.in", width_in, cfg.hidden, cfg.kernel, 1, rng),
            mid: Conv1d::new(store, "flow.mid", cfg.hidden, cfg.hidden, cfg.kernel, 1, rng),
            out: Linear::new(store, "flow.out", cfg.hidden, dim, rng),
        }
    }

    /// `times` holds one time for every row, or a single time shared by all rows.
    pub fn forward(&self, g: &mut Graph, xt: Var, times: &[f64], cond: Var) -> Var {
        let rows = g.value(xt).rows();
        let per_row: Vec<f64> = if times.len() == 1 { vec![times[0]; rows] } else { times.to_vec() };
        let temb = g.constant(time_embedding(&per_row, self.cfg.time_dim));
        let mut parts = vec![xt];
        if let Some(proj) = &self.cond {
            parts.push(proj.forward(g, cond));
        }
        parts.push(temb);
        let x = g.concat_cols(&parts);
        let h = self.inp.forward(g, x);
        let h = g.silu(h);
        let h2 = self.mid.forward(g, h);
        let h2 = g.silu(h2);
        let h = g.add(h, h2);
        self.out.forward(g, h)
    }

    /// Loss at a fixed `(x0, times)`; differentiable with respect to the field parameters.
    pub fn loss_at(&self, g: &mut Graph, cond: Var, x1: &Mat, x0: &Mat, times: &[f64]) -> Result<Var> {
        check_aligned(g.value(cond), x1)?;
        if x0.shape() != x1.shape() || (times.len() != 1 && times.len() != x1.rows()) {
            return Err(input("prior sample or times do not match the target"));
        }
        let mut xt = x0.clone();
        for r in 0..xt.rows() {
            let t = if times.len() == 1 { times[0] } else { times[r] };
            for (o, &b) in xt.row_mut(r).iter_mut().zip(x1.row(r)) {
                *o = (1.0 - t) * *o + t * b;
            }
        }
        let xt = g.constant(xt);
        let v = self.forward(g, xt, times, cond);
        let target = g.constant(x1.zip_map(x0, |a, b| a - b));
        Ok(g.mse(v, target))
    }

    /// Loss at the flow state drawn from `seed`.
    pub fn loss(&self, g: &mut Graph, cond: Var, x1: &Mat, seed: u64) -> Result<Var> {
        let s = sample_flow_state(x1, seed);
        self.loss_at(g, cond, x1, &s.x0, &[s.t])
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundField<'a> {
        BoundField { probe: self, store }
    }
}

/// A [`FlowProbe`] evaluated with fixed parameters.
pub struct BoundField<'a> {
    probe: &'a FlowProbe,
    store: &'a ParamStore,
}

impl VelocityField for BoundField<'_> {
    fn velocity(&self, x: &Mat, t: f64, cond: &Mat) -> Mat {
        let mut g = Graph::with_params(self.store);
        let xv = g.constant(x.clone());
        let cv = g.constant(cond.clone());
        let v = self.probe.forward(&mut g, xv, &[t], cv);
        g.value(v).clone()
    }
}

/// Settings for fitting an unconditional probe on row-independent samples.
#[derive(Clone, Debug)]
pub struct ToyFit {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
}

/// Fits an unconditional, row-independent probe (`kernel = 1`, `cond_dim = 0`) to samples
/// drawn by `draw`, one time per row. Returns the per-step losses.
pub fn fit_unconditional(
    probe: &FlowProbe,
    store: &mut ParamStore,
    fit: &ToyFit,
    mut draw: impl FnMut(usize, &mut ChaCha8Rng) -> Mat,
) -> Result<Vec<f64>> {
    if probe.cfg.kernel != 1 || probe.cond_dim != 0 {
        return Err(config("row-independent fitting needs kernel 1 and no condition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(fit.steps);
    for _ in 0..fit.steps {
        let x1 = draw(fit.batch, &mut rng);
        let x0 = prior_sample(x1.rows(), x1.cols(), &mut rng);
        let times: Vec<f64> = (0..x1.rows()).map(|_| rng.random()).collect();
        let (loss, mut grads) = {
            let mut g = Graph::with_params(store);
            let cond = g.constant(Mat::zeros(x1.rows(), 0));
            let l = probe.loss_at(&mut g, cond, &x1, &x0, &times)?;
            let grads = g.backward(l);
            (g.scalar(l), g.param_grads(&grads))
        };
        clip_global_norm(&mut grads, fit.clip);
        adam.step(store, &grads, fit.lr);
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::param_max_rel_error;
    use crate::params::init_uniform;

    #[test]
    fn oracle_field_has_zero_loss_and_exact_samples() {
        let x1 = init_uniform(5, 3, 2.0, &mut ChaCha8Rng::seed_from_u64(0));
        let cond = Mat::zeros(5, 2);
        let s = sample_flow_state(&x1, 7);
        let oracle = OracleField { x0: s.x0.clone(), x1: x1.clone() };
        assert_eq!(fm_loss_value(&oracle, &cond, &x1, 7).unwrap(), 0.0);
        for k in [1, 2, 7, 32] {
            let y = fm_sample(&oracle, &cond, 5, 3, k, 7).unwrap();
            assert!(y.max_abs_diff(&x1) < 1e-12, "k={k}");
        }
    }

    #[test]
    fn zero_field_loss_is_mean_displacement() {
        let x1 = init_uniform(4, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let s = sample_flow_state(&x1, 3);
        let expect = x1.zip_map(&s.x0, |a, b| (a - b) * (a - b)).mean();
        let got = fm_loss_value(&ZeroField, &Mat::zeros(4, 1), &x1, 3).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert_eq!(got, fm_loss_value(&ZeroField, &Mat::zeros(4, 1), &x1, 3).unwrap());
        assert!(fm_loss_value(&ZeroField, &Mat::zeros(3, 1), &x1, 3).is_err());
    }

    #[test]
    fn single_step_is_one_euler_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let probe = FlowProbe::new(&mut store, 3, 2, &FlowConfig { hidden: 8, ..FlowConfig::default() }, &mut rng);
        let cond = init_uniform(6, 2, 1.0, &mut rng);
        let field = probe.bind(&store);
        let x0 = prior_sample(6, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let expect = x0.zip_map(&field.velocity(&x0, 0.0, &cond), |a, b| a + b);
        let got = fm_sample(&field, &cond, 6, 3, 1, 9).unwrap();
        assert_eq!(got, expect);
        assert_eq!(got, fm_sample(&field, &cond, 6, 3, 1, 9).unwrap());
        assert!(fm_sample(&field, &cond, 6, 3, 0, 9).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = FlowConfig { hidden: 6, cond_proj: 3, time_dim: 4, kernel: 3, steps: 4 };
        let probe = FlowProbe::new(&mut store, 3, 2, &cfg, &mut rng);
        let cond = init_uniform(5, 2, 1.0, &mut rng);
        let x1 = init_uniform(5, 3, 1.0, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        let err = param_max_rel_error(&store, &ids, 1e-6, 1e-7, |g| {
            let c = g.constant(cond.clone());
            probe.loss(g, c, &x1, 5).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn repeat_to_grid_covers_target() {
        let u = Mat::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(repeat_to_grid(&u, 6).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(repeat_to_grid(&u, 5).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 3.0]);
        assert!(repeat_to_grid(&u, 4).is_err());
        assert_eq!(repeat_to_grid(&u, 7).unwrap().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0]);
    }
}
