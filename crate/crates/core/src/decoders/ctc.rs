//! Connectionist temporal classification in log space.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Graph, Var};
use crate::error::{input, Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Mat;

/// Minimum input length for `target`: one frame per label plus one blank between repeats.
pub fn required_length(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check(log_probs: &Mat, target: &[usize], blank: usize) -> Result<Vec<usize>> {
    let (t, k) = log_probs.shape();
    if t == 0 {
        return Err(input("ctc needs at least one input frame"));
    }
    if blank >= k {
        return Err(input(format!("blank {blank} outside {k} classes")));
    }
    if let Some(&s) = target.iter().find(|&&s| s == blank || s >= k) {
        return Err(input(format!("target symbol {s} is the blank or out of range")));
    }
    let required = required_length(target);
    if t < required {
        return Err(Error::CtcInfeasible { target_len: target.len(), required, input_len: t });
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &s in target {
        ext.push(s);
        ext.push(blank);
    }
    Ok(ext)
}

/// A transition from `s - 2` skips a blank; it is barred into a blank and between repeated labels.
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && s % 2 == 1 && ext[s] != ext[s - 2]
}

/// Forward variables `alpha[t][s]` over the blank-augmented target.
fn forward(lp: &Mat, ext: &[usize]) -> Vec<Vec<f64>> {
    let (t_len, s_len) = (lp.rows(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut terms = vec![alpha[t - 1][s]];
            if s >= 1 {
                terms.push(alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s) {
                terms.push(alpha[t - 1][s - 2]);
            }
            alpha[t][s] = log_sum_exp(&terms) + lp.get(t, ext[s]);
        }
    }
    alpha
}

/// Backward variables `beta[t][s]`, including the emission at `t`.
fn backward(lp: &Mat, ext: &[usize]) -> Vec<Vec<f64>> {
    let (t_len, s_len) = (lp.rows(), ext.len());
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = lp.get(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = lp.get(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut terms = vec![beta[t + 1][s]];
            if s + 1 < s_len {
                terms.push(beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2) {
                terms.push(beta[t + 1][s + 2]);
            }
            beta[t][s] = log_sum_exp(&terms) + lp.get(t, ext[s]);
        }
    }
    beta
}

fn total_log_prob(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().expect("at least one frame");
    let s = last.len();
    if s == 1 {
        last[0]
    } else {
        log_sum_exp(&[last[s - 1], last[s - 2]])
    }
}

/// `-log P(target | log_probs)` summed over all alignments.
pub fn ctc_loss(log_probs: &Mat, target: &[usize], blank: usize) -> Result<f64> {
    let ext = check(log_probs, target, blank)?;
    Ok(-total_log_prob(&forward(log_probs, &ext)))
}

/// Gradient of [`ctc_loss`] with respect to each log-probability entry.
pub fn ctc_loss_grad(log_probs: &Mat, target: &[usize], blank: usize) -> Result<Mat> {
    let ext = check(log_probs, target, blank)?;
    let alpha = forward(log_probs, &ext);
    let beta = backward(log_probs, &ext);
    let log_p = total_log_prob(&alpha);
    let mut grad = Mat::zeros(log_probs.rows(), log_probs.cols());
    for t in 0..log_probs.rows() {
        for (s, &k) in ext.iter().enumerate() {
            let occ = alpha[t][s] + beta[t][s] - log_probs.get(t, k) - log_p;
            if occ > f64::NEG_INFINITY {
                grad.set(t, k, grad.get(t, k) - occ.exp());
            }
        }
    }
    Ok(grad)
}

/// Per-frame argmax, adjacent repeats collapsed, blanks dropped.
pub fn ctc_greedy_decode(log_probs: &Mat, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Linear projection onto `V + 1` classes followed by log-softmax; the blank is class `V`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CtcHead {
    pub proj: Linear,
    pub vocab: usize,
}

impl CtcHead {
    pub fn new(store: &mut ParamStore, d_model: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { proj: Linear::new(store, "ctc", d_model, vocab + 1, rng), vocab }
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    pub fn log_probs(&self, g: &mut Graph, latents: Var) -> Var {
        let logits = self.proj.forward(g, latents);
        g.log_softmax(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_log_probs(t: usize, k: usize, rng: &mut ChaCha8Rng) -> Mat {
        let mut m = Mat::zeros(t, k);
        for r in 0..t {
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z = log_sum_exp(&logits);
            for (c, l) in logits.iter().enumerate() {
                m.set(r, c, l - z);
            }
        }
        m
    }

    /// Sums path probabilities over every frame labelling that collapses to `target`.
    fn brute_force(lp: &Mat, target: &[usize], blank: usize) -> f64 {
        let (t, k) = lp.shape();
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        loop {
            let decoded = collapse(&path, blank);
            if decoded == target {
                total += path.iter().enumerate().map(|(i, &c)| lp.get(i, c)).sum::<f64>().exp();
            }
            let mut i = 0;
            while i < t && path[i] == k - 1 {
                path[i] = 0;
                i += 1;
            }
            if i == t {
                break;
            }
            path[i] += 1;
        }
        -total.ln()
    }

    fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &c in path {
            if Some(c) != prev && c != blank {
                out.push(c);
            }
            prev = Some(c);
        }
        out
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 60 {
            let v = rng.random_range(1..=3);
            let t = rng.random_range(1..=5);
            let len = rng.random_range(1..=3);
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
            let lp = random_log_probs(t, v + 1, &mut rng);
            match ctc_loss(&lp, &target, v) {
                Ok(loss) => {
                    assert!((loss - brute_force(&lp, &target, v)).abs() < 1e-8);
                    checked += 1;
                }
                Err(Error::CtcInfeasible { .. }) => assert!(brute_force(&lp, &target, v).is_infinite()),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let lp = random_log_probs(6, 4, &mut rng);
        let target = [0, 2, 2];
        let grad = ctc_loss_grad(&lp, &target, 3).unwrap();
        let eps = 1e-6;
        for i in 0..lp.len() {
            let mut p = lp.clone();
            p.data_mut()[i] += eps;
            let mut m = lp.clone();
            m.data_mut()[i] -= eps;
            let fd = (ctc_loss(&p, &target, 3).unwrap() - ctc_loss(&m, &target, 3).unwrap()) / (2.0 * eps);
            assert!((fd - grad.data()[i]).abs() < 1e-7, "{fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn single_frame_uniform() {
        let lp = Mat::filled(1, 3, -(3f64.ln()));
        let loss = ctc_loss(&lp, &[0], 2).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_alignment_has_zero_loss() {
        let mut lp = Mat::filled(3, 3, f64::NEG_INFINITY);
        for (t, k) in [(0, 0), (1, 2), (2, 1)] {
            lp.set(t, k, 0.0);
        }
        assert_eq!(ctc_loss(&lp, &[0, 1], 2).unwrap(), 0.0);
    }

    #[test]
    fn infeasible_is_an_error() {
        let lp = Mat::filled(2, 3, -(3f64.ln()));
        assert!(matches!(
            ctc_loss(&lp, &[0, 0], 2),
            Err(Error::CtcInfeasible { target_len: 2, required: 3, input_len: 2 })
        ));
        assert!(ctc_loss(&lp, &[2], 2).is_err());
    }

    #[test]
    fn empty_target_is_all_blank() {
        let lp = Mat::from_rows(&[vec![-1.0, -0.5], vec![-2.0, -0.2]]);
        assert!((ctc_loss(&lp, &[], 1).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn greedy_examples() {
        let one_hot = |path: &[usize]| {
            let mut m = Mat::filled(path.len(), 3, -5.0);
            for (t, &k) in path.iter().enumerate() {
                m.set(t, k, 0.0);
            }
            m
        };
        assert_eq!(ctc_greedy_decode(&one_hot(&[0, 0, 2, 1]), 2), vec![0, 1]);
        assert_eq!(ctc_greedy_decode(&one_hot(&[2, 2, 2]), 2), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(&one_hot(&[0, 2, 0]), 2), vec![0, 0]);
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut store = ParamStore::new();
        let head = CtcHead { proj: Linear::zeroed(&mut store, "ctc", 4, 6), vocab: 5 };
        let mut g = Graph::with_params(&store);
        let x = g.constant(Mat::filled(3, 4, 0.7));
        let lp = head.log_probs(&mut g, x);
        for &v in g.value(lp).data() {
            assert!((v + 6f64.ln()).abs() < 1e-12);
        }
    }
}
