//! Multiple-choice probe: a trainable audio projector and bilinear head around
//! a frozen, randomly initialised transformer backbone.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{split_indices, Utterance};
use crate::error::{config, input, Result};
use crate::fsq::{id_to_digits, FsqConfig};
use crate::nn::{sinusoidal_positions, FeedForward, Linear, MultiHeadAttention};
use crate::params::{accumulate, clip_global_norm, init_normal, Adam, ParamId, ParamStore};
use crate::tensor::Mat;

/// Question id of "which symbol occurs most often?".
pub const MAJORITY_QUESTION: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub utterance_id: String,
    pub question_id: usize,
    /// Candidate symbol ids.
    pub options: Vec<usize>,
    pub correct: usize,
}

impl ProbeTask {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 || self.correct >= self.options.len() {
            return Err(input(format!("task for {} needs >= 2 options and a valid answer", self.utterance_id)));
        }
        let mut sorted = self.options.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.options.len() {
            return Err(input(format!("task for {} repeats an option", self.utterance_id)));
        }
        Ok(())
    }
}

/// The symbol with the strictly highest count, if unique.
pub fn majority_symbol(transcript: &[usize], symbols: usize) -> Option<usize> {
    let mut counts = vec![0usize; symbols];
    for &s in transcript {
        counts[s] += 1;
    }
    let best = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
    let (sym, _) = winners.next()?;
    winners.next().is_none().then_some(sym)
}

/// One majority-symbol task per utterance with a unique majority; ties are skipped.
/// Distractors are drawn uniformly from the other symbols. Answer slots are balanced: every
/// run of `options` consecutive tasks uses each slot once, in shuffled order.
pub fn majority_tasks(utts: &[Utterance], symbols: usize, options: usize, seed: u64) -> Result<Vec<ProbeTask>> {
    if options < 2 || options > symbols {
        return Err(config(format!("{options} options need between 2 and {symbols} symbols")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::new();
    let mut slots: Vec<usize> = Vec::new();
    for u in utts {
        let Some(answer) = majority_symbol(&u.transcript, symbols) else { continue };
        let mut others: Vec<usize> = (0..symbols).filter(|&s| s != answer).collect();
        others.shuffle(&mut rng);
        let mut opts: Vec<usize> = others[..options - 1].to_vec();
        if slots.is_empty() {
            slots = (0..options).collect();
            slots.shuffle(&mut rng);
        }
        let correct = slots.pop().expect("refilled above");
        opts.insert(correct, answer);
        tasks.push(ProbeTask { utterance_id: u.id.clone(), question_id: MAJORITY_QUESTION, options: opts, correct });
    }
    Ok(tasks)
}

pub fn write_tasks(path: &Path, tasks: &[ProbeTask]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_tasks(path: &Path) -> Result<Vec<ProbeTask>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: ProbeTask = serde_json::from_str(&line)?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscrimConfig {
    pub d_lm: usize,
    pub backbone_layers: usize,
    pub heads: usize,
    /// Width of each per-digit embedding table.
    pub digit_dim: usize,
    pub projector_hidden: usize,
    pub options: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DiscrimConfig {
    fn default() -> Self {
        Self {
            d_lm: 64,
            backbone_layers: 2,
            heads: 2,
            digit_dim: 32,
            projector_hidden: 64,
            options: 4,
            epochs: 12,
            batch: 16,
            lr: 2e-3,
            clip: 1.0,
            test_fraction: 0.25,
            seed: 17,
        }
    }
}

impl DiscrimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_lm == 0 || self.heads == 0 || self.d_lm % self.heads != 0 || self.options < 2 || self.batch == 0 {
            return Err(config("probe needs d_lm divisible by heads, >= 2 options and a nonzero batch"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(config("probe test_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `Network(Embed(Z))`: the embedding of an id is the sum of one embedding per FSQ digit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AudioProjector {
    pub fsq: FsqConfig,
    digits: Vec<ParamId>,
    up: Linear,
    down: Linear,
}

impl AudioProjector {
    pub fn new(store: &mut ParamStore, fsq: &FsqConfig, cfg: &DiscrimConfig, rng: &mut ChaCha8Rng) -> Self {
        let digits = fsq
            .levels
            .iter()
            .enumerate()
            .map(|(i, &l)| store.add(format!("probe.proj.digit{i}"), init_normal(l, cfg.digit_dim, 1, 1.0, rng)))
            .collect();
        Self {
            fsq: fsq.clone(),
            digits,
            up: Linear::new(store, "probe.proj.up", cfg.digit_dim, cfg.projector_hidden, rng),
            down: Linear::new(store, "probe.proj.down", cfg.projector_hidden, cfg.d_lm, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.digits.clone();
        ids.extend([self.up.w, self.up.b, self.down.w, self.down.b]);
        ids
    }

    /// `N x d_lm` embeddings.
    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(input("cannot project an empty token sequence"));
        }
        let digits: Vec<Vec<usize>> = ids.iter().map(|&id| id_to_digits(id, &self.fsq)).collect::<Result<_>>()?;
        let mut sum = None;
        for (dim, &table) in self.digits.iter().enumerate() {
            let t = g.param(table);
            let e = g.gather_rows(t, digits.iter().map(|d| d[dim]).collect());
            sum = Some(match sum {
                None => e,
                Some(s) => g.add(s, e),
            });
        }
        let h = self.up.forward(g, sum.expect("at least one dimension"));
        let h = g.silu(h);
        Ok(self.down.forward(g, h))
    }
}

pub fn audio_project(store: &ParamStore, projector: &AudioProjector, ids: &[usize]) -> Result<Mat> {
    let mut g = Graph::with_params(store);
    let e = projector.forward(&mut g, ids)?;
    Ok(g.value(e).clone())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BackboneLayer {
    attn: MultiHeadAttention,
    ff: FeedForward,
}

/// Pre-LN bidirectional transformer; every parameter is frozen at construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Backbone {
    layers: Vec<BackboneLayer>,
    ids: Vec<ParamId>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &DiscrimConfig, rng: &mut ChaCha8Rng) -> Self {
        let first = store.len();
        let layers = (0..cfg.backbone_layers)
            .map(|i| BackboneLayer {
                attn: MultiHeadAttention::new(store, &format!("probe.backbone{i}.attn"), cfg.d_lm, cfg.d_lm, cfg.heads, rng),
                ff: FeedForward::new(store, &format!("probe.backbone{i}.ff"), cfg.d_lm, 2 * cfg.d_lm, rng),
            })
            .collect();
        let ids: Vec<ParamId> = store.ids().skip(first).collect();
        for &id in &ids {
            store.set_frozen(id, true);
        }
        Self { layers, ids }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut x = x;
        for l in &self.layers {
            let n = g.layer_norm(x);
            let a = l.attn.forward(g, n, n, false);
            x = g.add(x, a);
            let n = g.layer_norm(x);
            let f = l.ff.forward(g, n);
            x = g.add(x, f);
        }
        g.layer_norm(x)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminativeProbe {
    pub cfg: DiscrimConfig,
    pub symbols: usize,
    pub projector: AudioProjector,
    pub backbone: Backbone,
    /// Frozen text embeddings: one row per symbol, then one per question.
    text: ParamId,
    head: ParamId,
}

impl DiscriminativeProbe {
    pub fn new(
        store: &mut ParamStore,
        fsq: &FsqConfig,
        symbols: usize,
        cfg: &DiscrimConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if symbols < cfg.options {
            return Err(config(format!("{} options need at least as many option embeddings, got {symbols}", cfg.options)));
        }
        let projector = AudioProjector::new(store, fsq, cfg, rng);
        let backbone = Backbone::new(store, cfg, rng);
        let text = store.add("probe.text", init_normal(symbols + 1, cfg.d_lm, 1, 1.0, rng));
        store.set_frozen(text, true);
        let head = store.add("probe.head", init_normal(cfg.d_lm, cfg.d_lm, cfg.d_lm, 1.0, rng));
        Ok(Self { cfg: cfg.clone(), symbols, projector, backbone, text, head })
    }

    /// Parameters that must never change.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        let mut ids = self.backbone.param_ids().to_vec();
        ids.push(self.text);
        ids
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.projector.param_ids();
        ids.push(self.head);
        ids
    }

    pub fn frozen_checksum(&self, store: &ParamStore) -> String {
        store.checksum_of(&self.frozen_ids())
    }

    /// `1 x K` option scores: the pooled audio output scored bilinearly against each option output.
    pub fn scores(&self, g: &mut Graph, ids: &[usize], task: &ProbeTask) -> Result<Var> {
        task.validate()?;
        if let Some(&o) = task.options.iter().find(|&&o| o >= self.symbols) {
            return Err(input(format!("option symbol {o} has no text embedding")));
        }
        if task.question_id != MAJORITY_QUESTION {
            return Err(input(format!("unknown question id {}", task.question_id)));
        }
        let audio = self.projector.forward(g, ids)?;
        let table = g.param(self.text);
        let mut text_rows = vec![self.symbols + task.question_id];
        text_rows.extend(&task.options);
        let text = g.gather_rows(table, text_rows);
        let seq = g.concat_rows(&[audio, text]);
        let n = ids.len();
        let total = n + 1 + task.options.len();
        let pos = g.constant(sinusoidal_positions(total, self.cfg.d_lm, 1.0));
        let seq = g.add(seq, pos);
        let out = self.backbone.forward(g, seq);
        let pool = g.constant(Mat::row_vector((0..total).map(|c| if c < n { 1.0 / n as f64 } else { 0.0 }).collect()));
        let pooled = g.matmul(pool, out);
        let opts = g.gather_rows(out, (n + 1..total).collect());
        let w = g.param(self.head);
        let q = g.matmul(pooled, w);
        Ok(g.matmul_nt(q, opts))
    }

    pub fn predict(&self, store: &ParamStore, ids: &[usize], task: &ProbeTask) -> Result<usize> {
        let mut g = Graph::with_params(store);
        let s = self.scores(&mut g, ids, task)?;
        let row = g.value(s).row(0);
        Ok((0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b }))
    }

    pub fn accuracy(&self, store: &ParamStore, tasks: &[&ProbeTask], tokens: &HashMap<String, Vec<usize>>) -> Result<f64> {
        if tasks.is_empty() {
            return Err(input("no tasks to evaluate"));
        }
        let mut hits = 0;
        for t in tasks {
            if self.predict(store, lookup(tokens, t)?, t)? == t.correct {
                hits += 1;
            }
        }
        Ok(hits as f64 / tasks.len() as f64)
    }
}

fn lookup<'a>(tokens: &'a HashMap<String, Vec<usize>>, task: &ProbeTask) -> Result<&'a [usize]> {
    tokens
        .get(&task.utterance_id)
        .map(Vec::as_slice)
        .ok_or_else(|| input(format!("no tokens for utterance {}", task.utterance_id)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub untrained_accuracy: f64,
    pub accuracy: f64,
    pub epoch_losses: Vec<f64>,
    pub checksum_before: String,
    pub checksum_after: String,
}

/// Trains the projector and head on the leading tasks and reports accuracy on the trailing
/// `test_fraction` of them, before and after training.
pub fn probe_train_eval(
    probe: &DiscriminativeProbe,
    store: &mut ParamStore,
    tasks: &[ProbeTask],
    tokens: &HashMap<String, Vec<usize>>,
) -> Result<ProbeReport> {
    let cfg = &probe.cfg;
    for &id in &probe.frozen_ids() {
        if !store.is_frozen(id) {
            return Err(config("probe backbone parameters must be frozen"));
        }
    }
    let (train_idx, test_idx) = split_indices(tasks.len(), cfg.test_fraction);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(input("probe needs tasks on both sides of the split"));
    }
    let test: Vec<&ProbeTask> = test_idx.iter().map(|&i| &tasks[i]).collect();
    let checksum_before = probe.frozen_checksum(store);
    let untrained_accuracy = probe.accuracy(store, &test, tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let mut order = train_idx.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut acc: Vec<Option<Mat>> = Vec::new();
            for &i in batch {
                let task = &tasks[i];
                let mut g = Graph::with_params(store);
                let s = probe.scores(&mut g, lookup(tokens, task)?, task)?;
                let lp = g.log_softmax(s);
                let nll = g.nll_pick(lp, vec![(0, task.correct)]);
                epoch_loss += g.scalar(nll);
                let grads = g.backward(nll);
                accumulate(&mut acc, g.param_grads(&grads), 1.0 / batch.len() as f64);
            }
            clip_global_norm(&mut acc, cfg.clip);
            adam.step(store, &acc, cfg.lr);
        }
        epoch_losses.push(epoch_loss / order.len() as f64);
    }
    let accuracy = probe.accuracy(store, &test, tokens)?;
    Ok(ProbeReport {
        train_tasks: train_idx.len(),
        test_tasks: test.len(),
        untrained_accuracy,
        accuracy,
        epoch_losses,
        checksum_before,
        checksum_after: probe.frozen_checksum(store),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_vocab, generate_corpus};

    fn small_cfg() -> DiscrimConfig {
        DiscrimConfig { d_lm: 8, heads: 2, digit_dim: 4, projector_hidden: 8, epochs: 1, batch: 4, ..DiscrimConfig::default() }
    }

    #[test]
    fn majority_rules() {
        assert_eq!(majority_symbol(&[1, 2, 1, 3], 4), Some(1));
        assert_eq!(majority_symbol(&[1, 2], 4), None);
        assert_eq!(majority_symbol(&[3], 4), Some(3));
    }

    #[test]
    fn tasks_are_well_formed() {
        let vocab = default_vocab(8, 16, (10, 26), 1).unwrap();
        let utts = generate_corpus(&vocab, 60, (3, 8), 2).unwrap();
        let tasks = majority_tasks(&utts, 8, 4, 3).unwrap();
        assert!(!tasks.is_empty());
        for t in &tasks {
            t.validate().unwrap();
            let u = utts.iter().find(|u| u.id == t.utterance_id).unwrap();
            assert_eq!(Some(t.options[t.correct]), majority_symbol(&u.transcript, 8));
        }
        for block in tasks.chunks_exact(4) {
            let mut slots: Vec<usize> = block.iter().map(|t| t.correct).collect();
            slots.sort_unstable();
            assert_eq!(slots, [0, 1, 2, 3]);
        }
        assert!(majority_tasks(&utts, 3, 4, 3).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        write_tasks(&path, &tasks).unwrap();
        assert_eq!(read_tasks(&path).unwrap(), tasks);
    }

    #[test]
    fn too_few_option_embeddings_is_a_config_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(DiscriminativeProbe::new(&mut store, &FsqConfig::default(), 3, &small_cfg(), &mut rng).is_err());
    }

    #[test]
    fn projection_shape_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probe = DiscriminativeProbe::new(&mut store, &FsqConfig::default(), 8, &small_cfg(), &mut rng).unwrap();
        for n in [1, 5] {
            let ids: Vec<usize> = (0..n).map(|i| i * 997).collect();
            let a = audio_project(&store, &probe.projector, &ids).unwrap();
            assert_eq!(a.shape(), (n, 8));
            assert_eq!(a, audio_project(&store, &probe.projector, &ids).unwrap());
        }
        assert!(audio_project(&store, &probe.projector, &[16384]).is_err());
    }

    #[test]
    fn gradients_skip_the_backbone() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probe = DiscriminativeProbe::new(&mut store, &FsqConfig::default(), 8, &small_cfg(), &mut rng).unwrap();
        let task = ProbeTask { utterance_id: "u".into(), question_id: 0, options: vec![1, 4, 2, 7], correct: 2 };
        let mut g = Graph::with_params(&store);
        let s = probe.scores(&mut g, &[3, 900, 12000], &task).unwrap();
        let lp = g.log_softmax(s);
        let nll = g.nll_pick(lp, vec![(0, 2)]);
        let grads = g.param_grads(&g.backward(nll));
        for id in probe.frozen_ids() {
            assert!(grads[id.0].is_none());
        }
        for id in probe.trainable_ids() {
            assert!(grads[id.0].as_ref().is_some_and(|m| m.sq_norm() > 0.0));
        }
    }
}
