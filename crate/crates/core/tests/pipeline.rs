//! End-to-end harness contracts on small configurations.

use dyntok::corpus::Utterance;
use dyntok::dynamic_merge::target_length;
use dyntok::harness::{
    batch_loss, mean_token_rate, read_jsonl, tokenize_utterances, train, write_jsonl, Checkpoint, RunConfig,
    TokenStreamRecord, TrainLogRecord,
};
use dyntok::Error;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus.n_utts = 32;
    cfg.corpus.n_mels = 8;
    cfg.corpus.symbols = 4;
    cfg.corpus.symbols_per_utt = (2, 4);
    cfg.encoder.hidden_dim = 8;
    cfg.encoder.n_layers = 1;
    cfg.merge.predictor_channels = 4;
    cfg.merge.ratio = 4.0;
    cfg.attention.layers = 1;
    cfg.attention.heads = 2;
    cfg.attention.width = 8;
    cfg.recon.channels = 4;
    cfg.recon.n_blocks = 1;
    cfg.optim.warmup_steps = 5;
    cfg.optim.max_frames_per_batch = 300;
    cfg.test_fraction = 0.125;
    cfg
}

fn corpus(cfg: &RunConfig) -> Vec<Utterance> {
    cfg.corpus.generate().unwrap()
}

#[test]
fn checkpoint_roundtrip_reproduces_losses_bit_identically() {
    let mut cfg = tiny_config();
    cfg.optim.max_steps = Some(6);
    let utts = corpus(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run").join("checkpoint.json");
    let ckpt = train(&cfg, &utts, None, Some(&path)).unwrap().checkpoint;
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.step, ckpt.step);
    let batch: Vec<&Utterance> = utts.iter().take(5).collect();
    let (a, _, _) = batch_loss(&ckpt.model, &ckpt.params, &ckpt.config, &batch, false, false).unwrap();
    let (b, _, _) = batch_loss(&loaded.model, &loaded.params, &loaded.config, &batch, false, false).unwrap();
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    assert_eq!(a, b);
}

#[test]
fn training_fifty_steps_lowers_the_loss_deterministically() {
    let mut cfg = tiny_config();
    cfg.optim.max_steps = Some(50);
    cfg.optim.max_frames_per_batch = 150;
    cfg.optim.epochs = 100;
    let utts = corpus(&cfg);
    let first = train(&cfg, &utts, None, None).unwrap();
    let second = train(&cfg, &utts, None, None).unwrap();
    assert_eq!(first.log.len(), 50);
    let (start, end) = (first.log[0].loss, first.log[49].loss);
    assert!(end < start, "loss {start} -> {end}");
    assert_eq!(end.to_bits(), second.log[49].loss.to_bits());
    assert_eq!(first.checkpoint.params, second.checkpoint.params);
}

#[test]
fn large_quantity_weight_shrinks_the_count_error_in_trend() {
    let mut cfg = tiny_config();
    cfg.lambda_qua = 10.0;
    cfg.optim.epochs = 12;
    cfg.optim.max_frames_per_batch = 150;
    let utts = corpus(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("log.jsonl");
    train(&cfg, &utts, Some(&log_path), None).unwrap();
    let log: Vec<TrainLogRecord> = read_jsonl(&log_path).unwrap();
    let k = log.len() / 4;
    let mean = |s: &[TrainLogRecord]| s.iter().map(|r| r.qua).sum::<f64>() / s.len() as f64;
    let (early, mid, late) = (mean(&log[..k]), mean(&log[k..3 * k]), mean(&log[3 * k..]));
    assert!(late < mid && mid < early, "count error {early} -> {mid} -> {late}");
}

#[test]
fn tokenizing_twice_writes_identical_files() {
    let mut cfg = tiny_config();
    cfg.optim.max_steps = Some(3);
    let utts = corpus(&cfg);
    let ckpt = train(&cfg, &utts, None, None).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_jsonl(&a, &tokenize_utterances(&ckpt, &utts).unwrap()).unwrap();
    write_jsonl(&b, &tokenize_utterances(&ckpt, &utts).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let records: Vec<TokenStreamRecord> = read_jsonl(&a).unwrap();
    assert_eq!(records.len(), utts.len());
    for r in &records {
        r.validate(&ckpt.config.fsq).unwrap();
        assert_eq!(r.n, target_length(r.frames, r.ratio));
    }
}

#[test]
fn mean_token_rate_matches_feature_rate_over_ratio() {
    // 100 Hz mels, stride-2 encoder: 50 Hz features, so R = 10 gives 5 Hz tokens.
    let mut cfg = RunConfig::default();
    cfg.merge.ratio = 10.0;
    cfg.corpus.n_utts = 200;
    let utts = corpus(&cfg);
    let mut store = dyntok::params::ParamStore::new();
    let model = dyntok::harness::Tokenizer::new(&mut store, &cfg).unwrap();
    let ckpt = Checkpoint { config: cfg.clone(), step: 0, model, params: store };
    let records = tokenize_utterances(&ckpt, &utts).unwrap();
    assert_eq!(cfg.feature_rate(), 50.0);
    let rate = mean_token_rate(&records, cfg.feature_rate()).unwrap();
    assert!((rate / 5.0 - 1.0).abs() <= 0.02, "token rate {rate} Hz");
}

#[test]
fn feature_rate_mismatch_is_a_configuration_error() {
    let mut cfg = tiny_config();
    cfg.optim.max_steps = Some(1);
    let utts = corpus(&cfg);
    let ckpt = train(&cfg, &utts, None, None).unwrap().checkpoint;
    let mut other = cfg.corpus.clone();
    other.synth.frame_rate = 80.0;
    let foreign = other.generate().unwrap();
    assert!(matches!(tokenize_utterances(&ckpt, &foreign), Err(Error::Config(_))));
}
