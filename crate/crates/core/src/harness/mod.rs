//! End-to-end pipeline: configuration, model assembly, training, token streams and experiments.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod stream;
pub mod train;

pub use config::{CorpusConfig, CtcInput, FlowTrainConfig, OptimConfig, RunConfig, Variant};
pub use model::{Tokenized, Tokenizer, UttTerms};
pub use stream::{read_jsonl, read_token_stream, write_jsonl, Checkpoint, TokenStreamRecord};
pub use train::{batch_loss, evaluate_loss, loss_total, make_batches, train, LossTerms, TrainLogRecord, TrainOutcome};
pub use eval::{
    discrim_probe, evaluate_transcripts, flow_probe, mean_token_rate, reconstruct_utterances, summarize_recon, test_split,
    tokenize_utterances, train_split, EvalSummary, FlowProbeReport, ReconRecord, ReconSummary, TranscriptRecord,
};
pub use experiment::{plan, report, run_experiment, ExperimentReport, VariantRow, Verdict};
