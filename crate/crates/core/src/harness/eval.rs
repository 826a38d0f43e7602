//! Evaluation stages over a trained checkpoint: tokenization, transcription, reconstruction
//! and the two probes.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::stream::{Checkpoint, TokenStreamRecord};
use crate::autograd::Graph;
use crate::corpus::{split_indices, Utterance};
use crate::diagnostics::{aggregate, cer, corpus_cer, mel_metrics, AggregateReport, ReconMetrics};
use crate::error::{input, Result};
use crate::params::{accumulate, clip_global_norm, Adam, ParamStore};
use crate::probes::flow::repeat_to_grid;
use crate::probes::{fm_sample, majority_tasks, probe_train_eval, DiscriminativeProbe, FlowProbe, ProbeReport};
use crate::tensor::Mat;

/// Duration ratios inside this band count as duration-preserving.
pub const DURATION_BAND: (f64, f64) = (0.98, 1.02);

/// The held-out utterances of a corpus under `cfg.test_fraction`.
pub fn test_split(cfg: &RunConfig, utts: &[Utterance]) -> Vec<Utterance> {
    split_indices(utts.len(), cfg.test_fraction).1.into_iter().map(|i| utts[i].clone()).collect()
}

/// The training utterances of a corpus under `cfg.test_fraction`.
pub fn train_split(cfg: &RunConfig, utts: &[Utterance]) -> Vec<Utterance> {
    split_indices(utts.len(), cfg.test_fraction).0.into_iter().map(|i| utts[i].clone()).collect()
}

/// One validated record per utterance.
pub fn tokenize_utterances(ckpt: &Checkpoint, utts: &[Utterance]) -> Result<Vec<TokenStreamRecord>> {
    let cfg = &ckpt.config;
    utts.iter()
        .map(|u| {
            let tok = ckpt.model.tokenize(&ckpt.params, cfg, &u.mel)?;
            let rec = TokenStreamRecord::new(&u.id, cfg, &tok);
            rec.validate(&cfg.fsq)?;
            Ok(rec)
        })
        .collect()
}

/// Tokens per second over a stream: total tokens over total feature-frame duration.
pub fn mean_token_rate(records: &[TokenStreamRecord], feature_rate: f64) -> Result<f64> {
    let frames: usize = records.iter().map(|r| r.frames).sum();
    if frames == 0 {
        return Err(input("token rate of an empty stream"));
    }
    let tokens: usize = records.iter().map(|r| r.n).sum();
    Ok(tokens as f64 * feature_rate / frames as f64)
}

fn index_records(records: &[TokenStreamRecord]) -> HashMap<&str, &TokenStreamRecord> {
    records.iter().map(|r| (r.utterance_id.as_str(), r)).collect()
}

fn record_for<'a>(index: &HashMap<&str, &'a TokenStreamRecord>, id: &str) -> Result<&'a TokenStreamRecord> {
    index.get(id).copied().ok_or_else(|| input(format!("no tokens for utterance {id}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub utterance_id: String,
    pub reference: Vec<usize>,
    pub ctc: Vec<usize>,
    pub attention: Vec<usize>,
    pub cer_ctc: f64,
    pub cer_attention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub variant: String,
    pub ratio: f64,
    pub utterances: usize,
    /// Corpus-level CER of greedy CTC transcripts.
    pub cer_ctc: f64,
    /// Corpus-level CER of greedy attention-decoder transcripts.
    pub cer_attention: f64,
    pub token_rate: f64,
    pub expected_token_rate: f64,
}

/// Greedy transcription of every utterance from its token record.
pub fn evaluate_transcripts(
    ckpt: &Checkpoint,
    utts: &[Utterance],
    records: &[TokenStreamRecord],
) -> Result<(Vec<TranscriptRecord>, EvalSummary)> {
    let cfg = &ckpt.config;
    let index = index_records(records);
    let mut out = Vec::with_capacity(utts.len());
    for u in utts {
        let tok = record_for(&index, &u.id)?.tokenized();
        let ctc = ckpt.model.transcribe(&ckpt.params, cfg, &tok)?;
        let attention = ckpt.model.transcribe_attention(&ckpt.params, cfg, &tok, 2 * u.transcript.len() + 4)?;
        out.push(TranscriptRecord {
            utterance_id: u.id.clone(),
            cer_ctc: cer(&u.transcript, &ctc)?,
            cer_attention: cer(&u.transcript, &attention)?,
            reference: u.transcript.clone(),
            ctc,
            attention,
        });
    }
    let pairs = |f: fn(&TranscriptRecord) -> &Vec<usize>| -> Vec<(Vec<usize>, Vec<usize>)> {
        out.iter().map(|r| (r.reference.clone(), f(r).clone())).collect()
    };
    let used: Vec<TokenStreamRecord> = utts.iter().map(|u| record_for(&index, &u.id).cloned()).collect::<Result<_>>()?;
    let summary = EvalSummary {
        variant: cfg.variant.name().to_string(),
        ratio: cfg.merge.ratio,
        utterances: out.len(),
        cer_ctc: corpus_cer(&pairs(|r| &r.ctc))?,
        cer_attention: corpus_cer(&pairs(|r| &r.attention))?,
        token_rate: mean_token_rate(&used, cfg.feature_rate())?,
        expected_token_rate: cfg.feature_rate() / cfg.merge.ratio,
    };
    Ok((out, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRecord {
    pub utterance_id: String,
    #[serde(flatten)]
    pub metrics: ReconMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconSummary {
    pub utterances: usize,
    pub aggregate: AggregateReport,
    /// Fraction of utterances whose duration ratio lies in [`DURATION_BAND`].
    pub duration_within_band: f64,
}

pub fn summarize_recon(records: &[ReconRecord]) -> Result<ReconSummary> {
    let metrics: Vec<ReconMetrics> = records.iter().map(|r| r.metrics).collect();
    let within = metrics
        .iter()
        .filter(|m| (DURATION_BAND.0..=DURATION_BAND.1).contains(&m.duration_ratio))
        .count();
    Ok(ReconSummary {
        utterances: metrics.len(),
        aggregate: aggregate(&metrics)?,
        duration_within_band: within as f64 / metrics.len().max(1) as f64,
    })
}

/// Mel reconstruction through the jointly trained decoder from oracle-upsampled tokens.
pub fn reconstruct_utterances(
    ckpt: &Checkpoint,
    utts: &[Utterance],
    records: &[TokenStreamRecord],
) -> Result<Vec<ReconRecord>> {
    let index = index_records(records);
    utts.iter()
        .map(|u| {
            let tok = record_for(&index, &u.id)?.tokenized();
            let mel = ckpt.model.reconstruct(&ckpt.params, &ckpt.config, &tok, u.mel.n_frames())?;
            Ok(ReconRecord { utterance_id: u.id.clone(), metrics: mel_metrics(&mel, &u.mel.frames)? })
        })
        .collect()
}

/// Nearest-neighbour resampling of `u` to `rows` rows.
pub fn resample_rows(u: &Mat, rows: usize) -> Result<Mat> {
    if u.rows() == 0 || rows == 0 {
        return Err(input("cannot resample an empty sequence"));
    }
    Ok(u.select_rows(&(0..rows).map(|r| r * u.rows() / rows).collect::<Vec<_>>()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowProbeReport {
    pub variant: String,
    pub ratio: f64,
    pub train_utterances: usize,
    pub eval_utterances: usize,
    pub epoch_losses: Vec<f64>,
    /// Held-out fm loss with each utterance's own condition.
    pub aligned_fm_loss: f64,
    /// Held-out fm loss with conditions rotated across utterances.
    pub permuted_fm_loss: f64,
    pub aligned: AggregateReport,
    pub permuted: AggregateReport,
    pub per_utterance: Vec<ReconRecord>,
}

impl FlowProbeReport {
    /// Permuting conditions strictly increases the held-out error.
    pub fn condition_sensitive(&self) -> bool {
        self.permuted_fm_loss > self.aligned_fm_loss
    }
}

/// Trains a conditional flow-matching probe on frozen tokens of `train` (conditions are the
/// oracle-upsampled sequences repeated onto the mel grid) and evaluates it on `eval`.
pub fn flow_probe(
    ckpt: &Checkpoint,
    train: &[Utterance],
    eval: &[Utterance],
    records: &[TokenStreamRecord],
) -> Result<FlowProbeReport> {
    let cfg = &ckpt.config;
    let fcfg = &cfg.flow_train;
    if train.is_empty() || eval.len() < 2 {
        return Err(input("flow probe needs training utterances and at least two held-out utterances"));
    }
    let index = index_records(records);
    let condition = |u: &Utterance| -> Result<Mat> {
        let rec = record_for(&index, &u.id)?;
        let up = ckpt.model.upsample(&ckpt.params, cfg, &rec.ids, &rec.s_hat)?;
        repeat_to_grid(&up, u.mel.n_frames())
    };
    let train_conds: Vec<Mat> = train.iter().map(condition).collect::<Result<_>>()?;
    let eval_conds: Vec<Mat> = eval.iter().map(condition).collect::<Result<_>>()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(fcfg.seed);
    let probe = FlowProbe::new(&mut store, cfg.corpus.n_mels, cfg.encoder.hidden_dim, &cfg.flow, &mut rng);
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(fcfg.epochs);
    let batch = 8;
    let mut draw = 0u64;
    for _ in 0..fcfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut acc = Vec::new();
            for &i in chunk {
                draw += 1;
                let mut g = Graph::with_params(&store);
                let c = g.constant(train_conds[i].clone());
                let loss = probe.loss(&mut g, c, &train[i].mel.frames, fcfg.seed.wrapping_mul(1_000_003).wrapping_add(draw))?;
                total += g.scalar(loss);
                let grads = g.backward(loss);
                accumulate(&mut acc, g.param_grads(&grads), 1.0 / chunk.len() as f64);
            }
            clip_global_norm(&mut acc, fcfg.clip);
            adam.step(&mut store, &acc, fcfg.lr);
        }
        epoch_losses.push(total / train.len() as f64);
    }
    let field = probe.bind(&store);
    let n = eval.len();
    let mut aligned = Vec::with_capacity(n);
    let mut permuted = Vec::with_capacity(n);
    let (mut aligned_loss, mut permuted_loss) = (0.0, 0.0);
    let loss_reps = 4u64;
    for (i, u) in eval.iter().enumerate() {
        let x1 = &u.mel.frames;
        let other = resample_rows(&eval_conds[(i + 1) % n], x1.rows())?;
        for rep in 0..loss_reps {
            let seed = fcfg.seed ^ ((i as u64) << 8) ^ rep;
            aligned_loss += crate::probes::fm_loss_value(&field, &eval_conds[i], x1, seed)?;
            permuted_loss += crate::probes::fm_loss_value(&field, &other, x1, seed)?;
        }
        let seed = fcfg.seed.wrapping_add(i as u64);
        let a = fm_sample(&field, &eval_conds[i], x1.rows(), x1.cols(), cfg.flow.steps, seed)?;
        let p = fm_sample(&field, &other, x1.rows(), x1.cols(), cfg.flow.steps, seed)?;
        aligned.push(ReconRecord { utterance_id: u.id.clone(), metrics: mel_metrics(&a, x1)? });
        permuted.push(mel_metrics(&p, x1)?);
    }
    let reps = (n as u64 * loss_reps) as f64;
    Ok(FlowProbeReport {
        variant: cfg.variant.name().to_string(),
        ratio: cfg.merge.ratio,
        train_utterances: train.len(),
        eval_utterances: n,
        epoch_losses,
        aligned_fm_loss: aligned_loss / reps,
        permuted_fm_loss: permuted_loss / reps,
        aligned: aggregate(&aligned.iter().map(|r| r.metrics).collect::<Vec<_>>())?,
        permuted: aggregate(&permuted)?,
        per_utterance: aligned,
    })
}

/// Majority-symbol probe on frozen tokens; tasks are built from `utts` in order.
pub fn discrim_probe(cfg: &RunConfig, utts: &[Utterance], records: &[TokenStreamRecord]) -> Result<ProbeReport> {
    let dcfg = &cfg.discrim;
    let tasks = majority_tasks(utts, cfg.corpus.symbols, dcfg.options, dcfg.seed)?;
    let tokens: HashMap<String, Vec<usize>> = records.iter().map(|r| (r.utterance_id.clone(), r.ids.clone())).collect();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(dcfg.seed);
    let probe = DiscriminativeProbe::new(&mut store, &cfg.fsq, cfg.corpus.symbols, dcfg, &mut rng)?;
    probe_train_eval(&probe, &mut store, &tasks, &tokens)
}
