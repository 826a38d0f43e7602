//! Small autoregressive transformer decoder attending over token embeddings.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VocabConfig;
use crate::autograd::{Graph, Var};
use crate::error::{config, input, Result};
use crate::nn::{sinusoidal_positions, FeedForward, Linear, MultiHeadAttention};
use crate::params::{init_normal, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionDecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
}

impl Default for AttentionDecoderConfig {
    fn default() -> Self {
        Self { layers: 2, heads: 2, width: 64 }
    }
}

impl AttentionDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(config("attention decoder needs >= 1 layer and width divisible by heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionDecoder {
    pub cfg: AttentionDecoderConfig,
    pub vocab: VocabConfig,
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    pub out: Linear,
}

impl AttentionDecoder {
    pub fn new(
        store: &mut ParamStore,
        d_memory: usize,
        vocab: VocabConfig,
        cfg: &AttentionDecoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = cfg.width;
        let embed = store.add("attn_dec.embed", init_normal(vocab.attention_classes(), w, 1, 1.0, rng));
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("attn_dec.l{i}.self"), w, w, cfg.heads, rng),
                cross_attn: MultiHeadAttention::new(store, &format!("attn_dec.l{i}.cross"), w, d_memory, cfg.heads, rng),
                ff: FeedForward::new(store, &format!("attn_dec.l{i}.ff"), w, 2 * w, rng),
            })
            .collect();
        let out = Linear::new(store, "attn_dec.out", w, vocab.attention_classes(), rng);
        Self { cfg: cfg.clone(), vocab, embed, layers, out }
    }

    /// Log-probabilities over the next symbol for each input position.
    pub fn log_probs(&self, g: &mut Graph, memory: Var, inputs: &[usize]) -> Var {
        let table = g.param(self.embed);
        let x = g.gather_rows(table, inputs.to_vec());
        let pos = g.constant(sinusoidal_positions(inputs.len(), self.cfg.width, 1.0));
        let mut x = g.add(x, pos);
        for layer in &self.layers {
            let n = g.layer_norm(x);
            let a = layer.self_attn.forward(g, n, n, true);
            x = g.add(x, a);
            let n = g.layer_norm(x);
            let c = layer.cross_attn.forward(g, n, memory, false);
            x = g.add(x, c);
            let n = g.layer_norm(x);
            let f = layer.ff.forward(g, n);
            x = g.add(x, f);
        }
        let n = g.layer_norm(x);
        let logits = self.out.forward(g, n);
        g.log_softmax(logits)
    }

    /// Summed teacher-forced cross-entropy over the `|target| + 1` predicted positions
    /// (symbols then the end marker), with `padding` masked positions appended after the end marker.
    pub fn nll_sum(&self, g: &mut Graph, memory: Var, target: &[usize], padding: usize) -> Result<(Var, usize)> {
        if target.is_empty() {
            return Err(input("attention decoder target is empty"));
        }
        if let Some(&s) = target.iter().find(|&&s| s >= self.vocab.symbols) {
            return Err(input(format!("target symbol {s} outside vocabulary")));
        }
        let mut inputs = Vec::with_capacity(target.len() + 1 + padding);
        inputs.push(self.vocab.sot());
        inputs.extend_from_slice(target);
        inputs.extend(std::iter::repeat_n(self.vocab.eot(), padding));
        let lp = self.log_probs(g, memory, &inputs);
        let picks: Vec<(usize, usize)> =
            target.iter().chain(std::iter::once(&self.vocab.eot())).copied().enumerate().collect();
        let count = picks.len();
        Ok((g.nll_pick(lp, picks), count))
    }

    /// Mean cross-entropy per predicted position.
    pub fn loss(&self, g: &mut Graph, memory: Var, target: &[usize]) -> Result<Var> {
        let (sum, count) = self.nll_sum(g, memory, target, 0)?;
        Ok(g.scale(sum, 1.0 / count as f64))
    }

    /// Greedy autoregressive decoding, capped at `max_len` symbols.
    pub fn greedy_decode(&self, store: &ParamStore, memory: &crate::tensor::Mat, max_len: usize) -> Vec<usize> {
        let mut seq = vec![self.vocab.sot()];
        for _ in 0..max_len {
            let mut g = Graph::with_params(store);
            let m = g.constant(memory.clone());
            let lp = self.log_probs(&mut g, m, &seq);
            let lpv = g.value(lp);
            let row = lpv.row(lpv.rows() - 1);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            if best >= self.vocab.symbols {
                break;
            }
            seq.push(best);
        }
        seq.split_off(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_uniform;
    use crate::tensor::Mat;
    use rand::SeedableRng;

    fn setup() -> (ParamStore, AttentionDecoder, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = AttentionDecoderConfig { layers: 2, heads: 2, width: 8 };
        let dec = AttentionDecoder::new(&mut store, 6, VocabConfig { symbols: 5 }, &cfg, &mut rng);
        let mem = init_uniform(4, 6, 1.0, &mut rng);
        (store, dec, mem)
    }

    #[test]
    fn zero_output_layer_gives_uniform_loss() {
        let (mut store, dec, mem) = setup();
        *store.get_mut(dec.out.w) = Mat::zeros(8, 7);
        let mut g = Graph::with_params(&store);
        let m = g.constant(mem);
        let loss = dec.loss(&mut g, m, &[1, 3, 0]).unwrap();
        assert!((g.scalar(loss) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_output_has_near_zero_loss() {
        let (mut store, dec, mem) = setup();
        // Route every position to the end marker with a huge margin.
        *store.get_mut(dec.out.w) = Mat::zeros(8, 7);
        let mut b = Mat::zeros(1, 7);
        b.set(0, 6, 100.0);
        *store.get_mut(dec.out.b) = b;
        let mut g = Graph::with_params(&store);
        let m = g.constant(mem);
        let lp = dec.log_probs(&mut g, m, &[5]);
        let nll = g.nll_pick(lp, vec![(0, 6)]);
        assert!(g.scalar(nll) < 1e-30);
    }

    #[test]
    fn padding_after_end_marker_is_masked() {
        let (store, dec, mem) = setup();
        let run = |pad: usize| {
            let mut g = Graph::with_params(&store);
            let m = g.constant(mem.clone());
            let (s, n) = dec.nll_sum(&mut g, m, &[2, 4], pad).unwrap();
            (g.scalar(s), n)
        };
        let (base, n) = run(0);
        assert_eq!(n, 3);
        for pad in [1, 3] {
            assert_eq!(run(pad), (base, n));
        }
    }

    #[test]
    fn empty_or_invalid_target_is_an_error() {
        let (store, dec, mem) = setup();
        let mut g = Graph::with_params(&store);
        let m = g.constant(mem);
        assert!(dec.loss(&mut g, m, &[]).is_err());
        assert!(dec.loss(&mut g, m, &[5]).is_err());
    }
}
