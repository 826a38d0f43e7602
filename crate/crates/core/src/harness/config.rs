//! Run configuration, read from TOML. Every field has a desk-scale default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{default_vocab, generate_corpus_with, SymbolSpec, SynthParams, Utterance};
use crate::decoders::{AttentionDecoderConfig, ReconConfig, VocabConfig};
use crate::dynamic_merge::MergeConfig;
use crate::encoder::EncoderConfig;
use crate::error::{config, Result};
use crate::fsq::FsqConfig;
use crate::probes::{DiscrimConfig, FlowConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Learned integrate-and-fire merging with the configured reconstruction weight.
    Dynamic,
    /// Mean pooling over equal windows in place of merging.
    FixedStride,
    /// Dynamic merging with the reconstruction loss switched off.
    PureSemantic,
    /// Dynamic merging with the reconstruction loss on.
    WithRecon,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dynamic, Variant::FixedStride, Variant::PureSemantic, Variant::WithRecon];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dynamic => "dynamic",
            Variant::FixedStride => "fixed-stride",
            Variant::PureSemantic => "pure-semantic",
            Variant::WithRecon => "with-recon",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| config(format!("unknown variant {s:?}")))
    }

    pub fn uses_merge(self) -> bool {
        self != Variant::FixedStride
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which sequence feeds the CTC head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CtcInput {
    /// The oracle-upsampled, frame-rate sequence.
    Upsampled,
    /// The token sequence itself.
    Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_utts: usize,
    pub symbols: usize,
    pub n_mels: usize,
    /// Symbols per utterance, inclusive.
    pub symbols_per_utt: (usize, usize),
    /// Mel frames per symbol, inclusive.
    pub duration_range: (usize, usize),
    pub vocab_seed: u64,
    pub seed: u64,
    pub synth: SynthParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_utts: 2000,
            symbols: 8,
            n_mels: 32,
            symbols_per_utt: (4, 10),
            duration_range: (10, 26),
            vocab_seed: 11,
            seed: 2024,
            synth: SynthParams::default(),
        }
    }
}

impl CorpusConfig {
    pub fn vocab(&self) -> Result<Vec<SymbolSpec>> {
        default_vocab(self.symbols, self.n_mels, self.duration_range, self.vocab_seed)
    }

    pub fn generate(&self) -> Result<Vec<Utterance>> {
        generate_corpus_with(&self.vocab()?, self.n_utts, self.symbols_per_utt, self.seed, &self.synth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    /// Mel frames per batch.
    pub max_frames_per_batch: usize,
    pub grad_clip: f64,
    pub epochs: usize,
    /// Stop early after this many steps when set.
    pub max_steps: Option<usize>,
    /// Log every this many steps (the first and last step are always logged).
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            warmup_steps: 200,
            max_frames_per_batch: 2000,
            grad_clip: 5.0,
            epochs: 16,
            max_steps: None,
            log_every: 1,
        }
    }
}

/// Flow-matching probe training budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub train_utts: usize,
    pub eval_utts: usize,
    pub epochs: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self { train_utts: 400, eval_utts: 60, epochs: 4, lr: 2e-3, clip: 1.0, seed: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub merge: MergeConfig,
    pub fsq: FsqConfig,
    pub attention: AttentionDecoderConfig,
    pub recon: ReconConfig,
    pub ctc_input: CtcInput,
    /// Amplitude of the sinusoidal positions added to dequantized tokens.
    pub position_amplitude: f64,
    pub lambda_qua: f64,
    pub lambda_recon: f64,
    pub optim: OptimConfig,
    pub test_fraction: f64,
    pub flow: FlowConfig,
    pub flow_train: FlowTrainConfig,
    pub discrim: DiscrimConfig,
    /// Compression ratio of the reference-rate control run in the experiment.
    pub control_ratio: f64,
    /// Corpus directory (manifest and mel files).
    pub data_dir: PathBuf,
    /// Output directory for checkpoints, logs and reports.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            variant: Variant::Dynamic,
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            merge: MergeConfig { ratio: 8.0, ..MergeConfig::default() },
            fsq: FsqConfig::default(),
            attention: AttentionDecoderConfig::default(),
            recon: ReconConfig { channels: 32, ..ReconConfig::default() },
            ctc_input: CtcInput::Upsampled,
            position_amplitude: 0.1,
            lambda_qua: 1.0,
            lambda_recon: 1.0,
            optim: OptimConfig::default(),
            test_fraction: 0.2,
            flow: FlowConfig::default(),
            flow_train: FlowTrainConfig::default(),
            discrim: DiscrimConfig::default(),
            control_ratio: 1.0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.merge.validate()?;
        self.fsq.validate()?;
        self.attention.validate()?;
        self.recon.validate()?;
        self.flow.validate()?;
        self.discrim.validate()?;
        self.vocab().validate()?;
        if !(self.lambda_qua >= 0.0) || !(self.lambda_recon >= 0.0) {
            return Err(config("loss weights must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(config("test_fraction must lie in [0, 1)"));
        }
        if self.recon.upsample_factor() != self.encoder.input_downsample {
            return Err(config(format!(
                "recon upsampling x{} must undo the encoder downsampling x{}",
                self.recon.upsample_factor(),
                self.encoder.input_downsample
            )));
        }
        if self.optim.max_frames_per_batch == 0 || !(self.optim.lr > 0.0) || !(self.optim.grad_clip > 0.0) {
            return Err(config("optimizer needs a positive lr, clip and frame budget"));
        }
        if !(self.control_ratio >= 1.0) {
            return Err(config("control ratio must be >= 1"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> VocabConfig {
        VocabConfig { symbols: self.corpus.symbols }
    }

    /// The reconstruction weight actually applied; the pure-semantic variant forces it to zero.
    pub fn effective_lambda_recon(&self) -> f64 {
        if self.variant == Variant::PureSemantic {
            0.0
        } else {
            self.lambda_recon
        }
    }

    /// Feature frames per second after the encoder.
    pub fn feature_rate(&self) -> f64 {
        self.corpus.synth.frame_rate / self.encoder.input_downsample as f64
    }

    /// A copy configured for `variant`.
    pub fn for_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    /// A copy at compression ratio `ratio`.
    pub fn with_ratio(&self, ratio: f64) -> Self {
        let mut c = self.clone();
        c.merge.ratio = ratio;
        c
    }
}
