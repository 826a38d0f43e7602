//! Joint training of the tokenizer.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::Tokenizer;
use super::stream::Checkpoint;
use crate::autograd::Graph;
use crate::corpus::{split_indices, Utterance};
use crate::dynamic_merge::target_length;
use crate::error::{input, Error, Result};
use crate::params::{accumulate, clip_global_norm, warmup_lr, Adam, ParamStore};
use crate::tensor::Mat;

/// `l_ctc + l_attn + lambda_qua * l_qua + lambda_recon * l_recon`. A zero weight drops its term.
/// Non-finite totals are reported as divergence at step 0; the trainer fills in the real step.
pub fn loss_total(l_ctc: f64, l_attn: f64, l_qua: f64, l_recon: f64, lambda_qua: f64, lambda_recon: f64) -> Result<f64> {
    let mut total = l_ctc + l_attn;
    if lambda_qua != 0.0 {
        total += lambda_qua * l_qua;
    }
    if lambda_recon != 0.0 {
        total += lambda_recon * l_recon;
    }
    if !total.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("loss is {total} (ctc {l_ctc}, attn {l_attn}, qua {l_qua}, recon {l_recon})"),
        });
    }
    Ok(total)
}

/// Batch-normalized loss components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Mean per-utterance CTC loss.
    pub ctc: f64,
    /// Attention cross-entropy per predicted symbol.
    pub attn: f64,
    /// Summed `|sum(alpha) - N|` over summed `N`; zero without merging.
    pub qua: f64,
    /// Squared error per mel bin; absent when the reconstruction loss is off.
    pub recon: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ctc: f64,
    pub attn: f64,
    pub qua: f64,
    pub recon: Option<f64>,
    pub grad_norm: f64,
    pub utterances: usize,
    pub mel_frames: usize,
    pub tokens: usize,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRecord>,
}

/// Groups utterances of similar length into batches of at most `budget` mel frames
/// (a longer utterance forms its own batch), then shuffles the batch order.
pub fn make_batches(lengths: &[(usize, usize)], budget: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut sorted = lengths.to_vec();
    sorted.shuffle(rng);
    sorted.sort_by_key(|&(_, len)| len);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut frames = 0;
    for (idx, len) in sorted {
        if !current.is_empty() && frames + len > budget {
            batches.push(std::mem::take(&mut current));
            frames = 0;
        }
        current.push(idx);
        frames += len;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(rng);
    batches
}

struct Normalizers {
    batch: f64,
    symbols: f64,
    tokens: f64,
    bins: f64,
}

fn normalizers(cfg: &RunConfig, batch: &[&Utterance]) -> Normalizers {
    Normalizers {
        batch: batch.len() as f64,
        symbols: batch.iter().map(|u| u.transcript.len() + 1).sum::<usize>() as f64,
        tokens: batch
            .iter()
            .map(|u| target_length(cfg.encoder.output_len(u.mel.n_frames()), cfg.merge.ratio))
            .sum::<usize>() as f64,
        bins: batch.iter().map(|u| u.mel.frames.len()).sum::<usize>() as f64,
    }
}

/// Loss components of `batch` and, when `with_grads` is set, the accumulated parameter gradients.
pub fn batch_loss(
    model: &Tokenizer,
    store: &ParamStore,
    cfg: &RunConfig,
    batch: &[&Utterance],
    training: bool,
    with_grads: bool,
) -> Result<(LossTerms, Vec<Option<Mat>>, usize)> {
    if batch.is_empty() {
        return Err(input("empty batch"));
    }
    let norm = normalizers(cfg, batch);
    let lambda_recon = cfg.effective_lambda_recon();
    let with_recon = lambda_recon > 0.0;
    let mut terms = LossTerms { recon: with_recon.then_some(0.0), ..LossTerms::default() };
    let mut acc = Vec::new();
    let mut tokens = 0;
    for utt in batch {
        let mut g = Graph::with_params(store);
        let t = model.forward_utterance(&mut g, cfg, utt, training, with_recon)?;
        tokens += t.n_tokens;
        terms.ctc += g.scalar(t.ctc) / norm.batch;
        terms.attn += g.scalar(t.attn_sum) / norm.symbols;
        let mut parts = vec![(t.ctc, 1.0 / norm.batch), (t.attn_sum, 1.0 / norm.symbols)];
        if let Some(q) = t.qua {
            terms.qua += g.scalar(q) / norm.tokens;
            if cfg.lambda_qua != 0.0 {
                parts.push((q, cfg.lambda_qua / norm.tokens));
            }
        }
        if let (Some(r), Some(total)) = (t.recon_sse, terms.recon.as_mut()) {
            *total += g.scalar(r) / norm.bins;
            parts.push((r, lambda_recon / norm.bins));
        }
        if with_grads {
            let root = g.weighted_sum(&parts);
            let grads = g.backward(root);
            accumulate(&mut acc, g.param_grads(&grads), 1.0);
        }
    }
    terms.total = loss_total(terms.ctc, terms.attn, terms.qua, terms.recon.unwrap_or(0.0), cfg.lambda_qua, lambda_recon)?;
    Ok((terms, acc, tokens))
}

/// Loss components over `utts` in inference mode, in batches of the configured frame budget.
pub fn evaluate_loss(model: &Tokenizer, store: &ParamStore, cfg: &RunConfig, utts: &[Utterance]) -> Result<LossTerms> {
    let lengths: Vec<(usize, usize)> = utts.iter().enumerate().map(|(i, u)| (i, u.mel.n_frames())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sum = LossTerms::default();
    let mut weight = 0.0;
    for batch in make_batches(&lengths, cfg.optim.max_frames_per_batch, &mut rng) {
        let refs: Vec<&Utterance> = batch.iter().map(|&i| &utts[i]).collect();
        let (t, _, _) = batch_loss(model, store, cfg, &refs, false, false)?;
        let w = refs.len() as f64;
        sum.ctc += w * t.ctc;
        sum.attn += w * t.attn;
        sum.qua += w * t.qua;
        sum.recon = t.recon.map(|r| sum.recon.unwrap_or(0.0) + w * r);
        sum.total += w * t.total;
        weight += w;
    }
    Ok(LossTerms {
        ctc: sum.ctc / weight,
        attn: sum.attn / weight,
        qua: sum.qua / weight,
        recon: sum.recon.map(|r| r / weight),
        total: sum.total / weight,
    })
}

/// Trains a fresh model on the training split of `utts`. The log is streamed to `log_path`
/// as JSONL. On divergence the last good state is written to `ckpt_path` before the error
/// is returned; on success the final state is written there.
pub fn train(cfg: &RunConfig, utts: &[Utterance], log_path: Option<&Path>, ckpt_path: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_idx, _) = split_indices(utts.len(), cfg.test_fraction);
    if train_idx.is_empty() {
        return Err(input("no training utterances"));
    }
    let mut store = ParamStore::new();
    let model = Tokenizer::new(&mut store, cfg)?;
    let mut log_file = match log_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            Some(BufWriter::new(File::create(p)?))
        }
        None => None,
    };
    let lengths: Vec<(usize, usize)> = train_idx.iter().map(|&i| (i, utts[i].mel.n_frames())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut adam = Adam::default();
    let mut log = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.optim.epochs {
        let batches = make_batches(&lengths, cfg.optim.max_frames_per_batch, &mut rng);
        let last_batch = batches.len() - 1;
        for (b, batch) in batches.iter().enumerate() {
            if cfg.optim.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let refs: Vec<&Utterance> = batch.iter().map(|&i| &utts[i]).collect();
            let outcome = batch_loss(&model, &store, cfg, &refs, true, true);
            let (terms, mut grads, tokens) = match outcome {
                Ok(v) => v,
                Err(Error::Divergence { detail, .. }) => return diverged(cfg, &model, &store, step, detail, ckpt_path),
                Err(e) => return Err(e),
            };
            let grad_norm = clip_global_norm(&mut grads, cfg.optim.grad_clip);
            if !grad_norm.is_finite() {
                return diverged(cfg, &model, &store, step, format!("gradient norm is {grad_norm}"), ckpt_path);
            }
            step += 1;
            let lr = warmup_lr(step, cfg.optim.lr, cfg.optim.warmup_steps);
            adam.step(&mut store, &grads, lr);
            let final_step = epoch + 1 == cfg.optim.epochs && b == last_batch;
            if step == 1 || step % cfg.optim.log_every.max(1) == 0 || final_step {
                let rec = TrainLogRecord {
                    step,
                    epoch,
                    lr,
                    loss: terms.total,
                    ctc: terms.ctc,
                    attn: terms.attn,
                    qua: terms.qua,
                    recon: terms.recon,
                    grad_norm,
                    utterances: refs.len(),
                    mel_frames: refs.iter().map(|u| u.mel.n_frames()).sum(),
                    tokens,
                };
                if let Some(w) = log_file.as_mut() {
                    serde_json::to_writer(&mut *w, &rec)?;
                    w.write_all(b"\n")?;
                }
                log.push(rec);
            }
        }
    }
    if let Some(w) = log_file.as_mut() {
        w.flush()?;
    }
    let checkpoint = Checkpoint { config: cfg.clone(), step, model, params: store };
    if let Some(p) = ckpt_path {
        checkpoint.save(p)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

fn diverged(
    cfg: &RunConfig,
    model: &Tokenizer,
    store: &ParamStore,
    step: usize,
    detail: String,
    ckpt_path: Option<&Path>,
) -> Result<TrainOutcome> {
    if let Some(p) = ckpt_path {
        Checkpoint { config: cfg.clone(), step, model: model.clone(), params: store.clone() }.save(p)?;
    }
    Err(Error::Divergence { step: step + 1, detail })
}
