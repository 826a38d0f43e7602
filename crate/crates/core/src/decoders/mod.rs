//! Semantic decoders (CTC head, attention decoder) and the mel reconstruction decoder.

pub mod attention;
pub mod ctc;
pub mod recon;

use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::tensor::Mat;

pub use attention::{AttentionDecoder, AttentionDecoderConfig};
pub use ctc::{ctc_greedy_decode, ctc_loss, ctc_loss_grad, CtcHead};
pub use recon::{ReconConfig, ReconDecoder};

/// Symbol ids `0..symbols`; the CTC blank and the attention start marker share id `symbols`,
/// the end marker is `symbols + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub symbols: usize,
}

impl VocabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.symbols == 0 {
            return Err(config("vocabulary must contain at least one symbol"));
        }
        Ok(())
    }

    pub fn blank(&self) -> usize {
        self.symbols
    }

    pub fn sot(&self) -> usize {
        self.symbols
    }

    pub fn eot(&self) -> usize {
        self.symbols + 1
    }

    /// Output classes of the attention decoder.
    pub fn attention_classes(&self) -> usize {
        self.symbols + 2
    }
}

/// Mean squared error over all time-frequency bins.
pub fn loss_recon(mel_hat: &Mat, mel_ref: &Mat) -> Result<f64> {
    if mel_hat.shape() != mel_ref.shape() {
        return Err(input(format!("shape mismatch {:?} vs {:?}", mel_hat.shape(), mel_ref.shape())));
    }
    if mel_ref.data().is_empty() {
        return Err(input("empty spectrogram"));
    }
    let sse: f64 = mel_hat.data().iter().zip(mel_ref.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / mel_ref.data().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recon_loss_examples() {
        let r = Mat::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0]]);
        assert_eq!(loss_recon(&r, &r).unwrap(), 0.0);
        let plus = r.map(|x| x + 1.0);
        assert_eq!(loss_recon(&plus, &r).unwrap(), 1.0);
        let residual = Mat::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.5]]);
        let one = r.zip_map(&residual, |a, b| a + b);
        let two = r.zip_map(&residual, |a, b| a + 2.0 * b);
        let (l1, l2) = (loss_recon(&one, &r).unwrap(), loss_recon(&two, &r).unwrap());
        assert!((l2 - 4.0 * l1).abs() < 1e-12);
        assert!(loss_recon(&Mat::zeros(2, 3), &r).is_err());
    }

    #[test]
    fn vocab_ids_are_distinct() {
        let v = VocabConfig { symbols: 8 };
        assert_eq!((v.blank(), v.sot(), v.eot(), v.attention_classes()), (8, 8, 9, 10));
        assert!(VocabConfig { symbols: 0 }.validate().is_err());
    }
}
