//! The assembled tokenizer: encoder, merge (or fixed-stride pooling), FSQ and
//! the CTC, attention and reconstruction decoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{CtcInput, RunConfig};
use crate::autograd::{Graph, Var};
use crate::corpus::{MelSpectrogram, Utterance};
use crate::decoders::{ctc_greedy_decode, AttentionDecoder, CtcHead, ReconDecoder};
use crate::dynamic_merge::{merge, quantity_term, target_length, upsample_indices, WeightPredictor};
use crate::encoder::{fixed_stride_entries, fixed_stride_trace, Encoder};
use crate::error::{config, input, Result};
use crate::fsq::Fsq;
use crate::nn::sinusoidal_positions;
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tokenizer {
    pub encoder: Encoder,
    pub predictor: WeightPredictor,
    pub fsq: Fsq,
    pub ctc: CtcHead,
    pub attention: AttentionDecoder,
    pub recon: ReconDecoder,
}

/// Per-utterance loss components as graph nodes.
pub struct UttTerms {
    pub ctc: Var,
    /// Summed attention cross-entropy over `attn_count` predicted positions.
    pub attn_sum: Var,
    pub attn_count: usize,
    /// `|sum(alpha) - N|`, absent for fixed-stride pooling.
    pub qua: Option<Var>,
    /// Summed squared reconstruction error over `bins` bins, when requested.
    pub recon_sse: Option<Var>,
    pub bins: usize,
    pub n_tokens: usize,
    pub ids: Vec<usize>,
}

/// Tokens of one utterance with the trace that places them on the frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    /// Cumulative scaled weights in token units; the last value equals `ids.len()`.
    pub s_hat: Vec<f64>,
    /// Feature frames.
    pub frames: usize,
}

impl Tokenizer {
    /// Parameters are drawn from a generator seeded with `cfg.seed`.
    pub fn new(store: &mut ParamStore, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.encoder.hidden_dim;
        let vocab = cfg.vocab();
        Ok(Self {
            encoder: Encoder::new(store, cfg.corpus.n_mels, &cfg.encoder, &mut rng),
            predictor: WeightPredictor::new(store, d, &cfg.merge, &mut rng),
            fsq: Fsq::new(store, d, &cfg.fsq, &mut rng),
            ctc: CtcHead::new(store, d, vocab.symbols, &mut rng),
            attention: AttentionDecoder::new(store, d, vocab, &cfg.attention, &mut rng),
            recon: ReconDecoder::new(store, d, cfg.corpus.n_mels, &cfg.recon, &mut rng),
        })
    }

    fn check_mel(&self, cfg: &RunConfig, mel: &MelSpectrogram) -> Result<()> {
        if mel.n_mels() != cfg.corpus.n_mels {
            return Err(config(format!("model expects {} mel bins, corpus has {}", cfg.corpus.n_mels, mel.n_mels())));
        }
        if (mel.frame_rate - cfg.corpus.synth.frame_rate).abs() > 1e-9 {
            return Err(config(format!(
                "model expects {} Hz mel frames, corpus has {} Hz",
                cfg.corpus.synth.frame_rate, mel.frame_rate
            )));
        }
        if mel.n_frames() == 0 {
            return Err(input("empty spectrogram"));
        }
        Ok(())
    }

    /// Encoder, merge and quantizer. Returns dequantized tokens with positions, the token-unit trace,
    /// raw weights (merge only) and ids.
    fn tokens(&self, g: &mut Graph, cfg: &RunConfig, mel: &Mat, training: bool) -> (Var, Vec<f64>, Option<Var>, Vec<usize>) {
        let m = g.constant(mel.clone());
        let h = self.encoder.forward(g, m);
        let t = g.value(h).rows();
        let ratio = cfg.merge.ratio;
        let (c, s_hat, alpha) = if cfg.variant.uses_merge() {
            let mo = merge(g, &self.predictor, h, &cfg.merge, training);
            let theta = cfg.merge.theta;
            (mo.c, mo.trace.s_hat.iter().map(|s| s / theta).collect(), Some(mo.alpha))
        } else {
            let n = target_length(t, ratio);
            (g.weighted_rows(h, fixed_stride_entries(t, ratio), n), fixed_stride_trace(t, ratio), None)
        };
        let q = self.fsq.forward(g, c);
        let e = self.add_positions(g, cfg, q.out);
        (e, s_hat, alpha, q.ids)
    }

    fn add_positions(&self, g: &mut Graph, cfg: &RunConfig, x: Var) -> Var {
        let (n, d) = g.value(x).shape();
        let pos = g.constant(sinusoidal_positions(n, d, cfg.position_amplitude));
        g.add(x, pos)
    }

    /// Builds every loss component of one utterance.
    pub fn forward_utterance(
        &self,
        g: &mut Graph,
        cfg: &RunConfig,
        utt: &Utterance,
        training: bool,
        with_recon: bool,
    ) -> Result<UttTerms> {
        self.check_mel(cfg, &utt.mel)?;
        let (e, s_hat, alpha, ids) = self.tokens(g, cfg, &utt.mel.frames, training);
        let n = ids.len();
        let u = g.gather_rows(e, upsample_indices(&s_hat, n, 1.0));
        let ctc_in = match cfg.ctc_input {
            CtcInput::Upsampled => u,
            CtcInput::Tokens => e,
        };
        let lp = self.ctc.log_probs(g, ctc_in);
        let ctc = g.ctc_loss(lp, &utt.transcript, self.ctc.blank())?;
        let (attn_sum, attn_count) = self.attention.nll_sum(g, e, &utt.transcript, 0)?;
        let target = target_length(s_hat.len(), cfg.merge.ratio);
        let qua = alpha.map(|a| quantity_term(g, a, target, 1));
        let bins = utt.mel.frames.len();
        let recon_sse = if with_recon {
            let pred = self.recon.forward_trimmed(g, u, utt.mel.n_frames())?;
            let target = g.constant(utt.mel.frames.clone());
            let d = g.sub(pred, target);
            let sq = g.mul(d, d);
            Some(g.sum_all(sq))
        } else {
            None
        };
        Ok(UttTerms { ctc, attn_sum, attn_count, qua, recon_sse, bins, n_tokens: n, ids })
    }

    /// Inference-time tokenization (the fixed-ratio rescaling is always applied).
    pub fn tokenize(&self, store: &ParamStore, cfg: &RunConfig, mel: &MelSpectrogram) -> Result<Tokenized> {
        self.check_mel(cfg, mel)?;
        let mut g = Graph::with_params(store);
        let (_, s_hat, _, ids) = self.tokens(&mut g, cfg, &mel.frames, false);
        Ok(Tokenized { frames: s_hat.len(), ids, s_hat })
    }

    /// Dequantized tokens with positions, `N x D`.
    pub fn token_embeddings(&self, store: &ParamStore, cfg: &RunConfig, ids: &[usize]) -> Result<Mat> {
        let mut g = Graph::with_params(store);
        let q = self.fsq.dequantize_graph(&mut g, ids)?;
        let e = self.add_positions(&mut g, cfg, q);
        Ok(g.value(e).clone())
    }

    /// Oracle-upsampled sequence `U`, `T x D`.
    pub fn upsample(&self, store: &ParamStore, cfg: &RunConfig, ids: &[usize], s_hat: &[f64]) -> Result<Mat> {
        if ids.is_empty() || s_hat.is_empty() {
            return Err(input("cannot upsample an empty token sequence"));
        }
        let e = self.token_embeddings(store, cfg, ids)?;
        Ok(e.select_rows(&upsample_indices(s_hat, ids.len(), 1.0)))
    }

    pub fn reconstruct(&self, store: &ParamStore, cfg: &RunConfig, tok: &Tokenized, mel_frames: usize) -> Result<Mat> {
        let u = self.upsample(store, cfg, &tok.ids, &tok.s_hat)?;
        self.recon.decode(store, &u, mel_frames)
    }

    /// Greedy CTC transcription.
    pub fn transcribe(&self, store: &ParamStore, cfg: &RunConfig, tok: &Tokenized) -> Result<Vec<usize>> {
        let x = match cfg.ctc_input {
            CtcInput::Upsampled => self.upsample(store, cfg, &tok.ids, &tok.s_hat)?,
            CtcInput::Tokens => self.token_embeddings(store, cfg, &tok.ids)?,
        };
        let mut g = Graph::with_params(store);
        let xv = g.constant(x);
        let lp = self.ctc.log_probs(&mut g, xv);
        Ok(ctc_greedy_decode(g.value(lp), self.ctc.blank()))
    }

    /// Greedy attention-decoder transcription.
    pub fn transcribe_attention(&self, store: &ParamStore, cfg: &RunConfig, tok: &Tokenized, max_len: usize) -> Result<Vec<usize>> {
        let e = self.token_embeddings(store, cfg, &tok.ids)?;
        Ok(self.attention.greedy_decode(store, &e, max_len))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{default_vocab, generate_corpus};
    use crate::harness::config::Variant;

    pub(crate) fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.corpus.n_mels = 8;
        cfg.corpus.symbols = 4;
        cfg.encoder.hidden_dim = 8;
        cfg.encoder.n_layers = 1;
        cfg.merge.predictor_channels = 4;
        cfg.merge.ratio = 4.0;
        cfg.attention = crate::decoders::AttentionDecoderConfig { layers: 1, heads: 2, width: 8 };
        cfg.recon.channels = 4;
        cfg.recon.n_blocks = 1;
        cfg
    }

    fn tiny_utts(cfg: &RunConfig) -> Vec<Utterance> {
        let vocab = default_vocab(cfg.corpus.symbols, cfg.corpus.n_mels, (10, 26), 3).unwrap();
        generate_corpus(&vocab, 4, (2, 4), 9).unwrap()
    }

    #[test]
    fn tokenization_invariants_hold_for_every_variant() {
        for variant in Variant::ALL {
            let cfg = tiny_config().for_variant(variant);
            let mut store = ParamStore::new();
            let model = Tokenizer::new(&mut store, &cfg).unwrap();
            for utt in tiny_utts(&cfg) {
                let tok = model.tokenize(&store, &cfg, &utt.mel).unwrap();
                let t = cfg.encoder.output_len(utt.mel.n_frames());
                assert_eq!(tok.frames, t);
                assert_eq!(tok.ids.len(), target_length(t, cfg.merge.ratio));
                assert!((tok.s_hat.last().unwrap() - tok.ids.len() as f64).abs() < 1e-6);
                let mel = model.reconstruct(&store, &cfg, &tok, utt.mel.n_frames()).unwrap();
                assert_eq!(mel.shape(), utt.mel.frames.shape());
                assert!(model.transcribe(&store, &cfg, &tok).is_ok());
            }
        }
    }

    #[test]
    fn training_forward_matches_tokenize_ids() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let model = Tokenizer::new(&mut store, &cfg).unwrap();
        let utt = &tiny_utts(&cfg)[0];
        let mut g = Graph::with_params(&store);
        let terms = model.forward_utterance(&mut g, &cfg, utt, false, true).unwrap();
        assert_eq!(terms.ids, model.tokenize(&store, &cfg, &utt.mel).unwrap().ids);
        assert!(g.scalar(terms.ctc) > 0.0 && g.scalar(terms.attn_sum) > 0.0);
        assert!(terms.recon_sse.is_some() && terms.qua.is_some());
    }

    #[test]
    fn mismatched_corpus_is_a_config_error() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let model = Tokenizer::new(&mut store, &cfg).unwrap();
        let wrong = MelSpectrogram::new(Mat::zeros(20, 9), 100.0);
        assert!(matches!(model.tokenize(&store, &cfg, &wrong), Err(crate::Error::Config(_))));
        let wrong_rate = MelSpectrogram::new(Mat::zeros(20, 8), 50.0);
        assert!(matches!(model.tokenize(&store, &cfg, &wrong_rate), Err(crate::Error::Config(_))));
    }
}
