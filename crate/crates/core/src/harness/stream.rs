//! JSONL token streams and JSON checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::model::{Tokenized, Tokenizer};
use crate::dynamic_merge::target_length;
use crate::error::{Error, Result};
use crate::fsq::FsqConfig;
use crate::params::ParamStore;

/// One tokenized utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStreamRecord {
    pub utterance_id: String,
    pub variant: Variant,
    pub ratio: f64,
    /// Feature frames `T`.
    pub frames: usize,
    /// Token count `N`.
    pub n: usize,
    pub ids: Vec<usize>,
    /// Cumulative weights in token units, one per feature frame; the last value is `N`.
    pub s_hat: Vec<f64>,
}

impl TokenStreamRecord {
    pub fn new(utterance_id: &str, cfg: &RunConfig, tok: &Tokenized) -> Self {
        Self {
            utterance_id: utterance_id.to_string(),
            variant: cfg.variant,
            ratio: cfg.merge.ratio,
            frames: tok.frames,
            n: tok.ids.len(),
            ids: tok.ids.clone(),
            s_hat: tok.s_hat.clone(),
        }
    }

    pub fn tokenized(&self) -> Tokenized {
        Tokenized { ids: self.ids.clone(), s_hat: self.s_hat.clone(), frames: self.frames }
    }

    pub fn validate(&self, fsq: &FsqConfig) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord { id: self.utterance_id.clone(), reason };
        if self.n != self.ids.len() {
            return Err(bad(format!("n = {} but {} ids", self.n, self.ids.len())));
        }
        if self.n != target_length(self.frames, self.ratio) {
            return Err(bad(format!(
                "n = {} differs from the target length {} of {} frames at ratio {}",
                self.n,
                target_length(self.frames, self.ratio),
                self.frames,
                self.ratio
            )));
        }
        let size = fsq.codebook_size();
        if let Some(id) = self.ids.iter().find(|&&id| id >= size) {
            return Err(bad(format!("id {id} outside codebook of size {size}")));
        }
        if self.s_hat.len() != self.frames {
            return Err(bad(format!("{} trace values for {} frames", self.s_hat.len(), self.frames)));
        }
        if self.s_hat.windows(2).any(|w| w[1] < w[0] - 1e-9) || self.s_hat.iter().any(|s| !s.is_finite()) {
            return Err(bad("trace must be finite and nondecreasing".into()));
        }
        if let Some(last) = self.s_hat.last() {
            if (last - self.n as f64).abs() > 1e-6 * self.n.max(1) as f64 {
                return Err(bad(format!("trace ends at {last}, expected {}", self.n)));
            }
        }
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Reads a token stream, validating every record.
pub fn read_token_stream(path: &Path, fsq: &FsqConfig) -> Result<Vec<TokenStreamRecord>> {
    let records: Vec<TokenStreamRecord> = read_jsonl(path)?;
    for r in &records {
        r.validate(fsq)?;
    }
    Ok(records)
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub model: Tokenizer,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        drop(w);
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        ckpt.config.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> TokenStreamRecord {
        TokenStreamRecord {
            utterance_id: "u0".into(),
            variant: Variant::Dynamic,
            ratio: 4.0,
            frames: 8,
            n: 2,
            ids: vec![0, 16383],
            s_hat: vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
        }
    }

    #[test]
    fn valid_record_passes_and_roundtrips() {
        let fsq = FsqConfig::default();
        let r = record();
        r.validate(&fsq).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        write_jsonl(&p, &[r.clone(), r.clone()]).unwrap();
        assert_eq!(read_token_stream(&p, &fsq).unwrap(), vec![r.clone(), r]);
    }

    #[test]
    fn violations_are_rejected() {
        let fsq = FsqConfig::default();
        let mut r = record();
        r.ids[1] = 16384;
        assert!(matches!(r.validate(&fsq), Err(Error::InvalidRecord { .. })));
        let mut r = record();
        r.frames = 20;
        r.s_hat = vec![0.1; 20];
        assert!(r.validate(&fsq).is_err());
        let mut r = record();
        r.n = 3;
        assert!(r.validate(&fsq).is_err());
        let mut r = record();
        r.s_hat[7] = 1.9;
        assert!(r.validate(&fsq).is_err());
    }
}
