//! Synthetic speech-like corpora and log-mel feature extraction.
//!
//! Each vocabulary symbol is a fixed nonnegative spectral template. An
//! utterance concatenates templates over sampled durations, adds a per-frame
//! log-gain contour (the micro-dynamics a generative decoder has to recover)
//! and a little Gaussian noise, and pads both edges with floor-level frames.
//! Values are rounded to `f32` precision at generation time so the on-disk
//! form is lossless.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::tensor::Mat;

/// Floor applied to power before taking the natural log.
pub const POWER_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    /// `T_mel x n_mels` log energies.
    pub frames: Mat,
    pub frame_rate: f64,
}

impl MelSpectrogram {
    pub fn new(frames: Mat, frame_rate: f64) -> Self {
        Self { frames, frame_rate }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub symbol_id: usize,
    pub spectral_template: Vec<f64>,
    /// Inclusive `(min_frames, max_frames)` in mel frames.
    pub duration_range: (usize, usize),
}

/// A contiguous run of frames carrying one symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub symbol: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub mel: MelSpectrogram,
    pub transcript: Vec<usize>,
    pub seed: u64,
    /// Where each transcript symbol sits in the mel frames.
    pub segments: Vec<Segment>,
}

impl Utterance {
    /// Per-frame symbol labels (`None` on silence).
    pub fn frame_labels(&self) -> Vec<Option<usize>> {
        let mut labels = vec![None; self.mel.n_frames()];
        for s in &self.segments {
            for l in &mut labels[s.start..s.start + s.len] {
                *l = Some(s.symbol);
            }
        }
        labels
    }
}

/// Knobs for mel-domain synthesis that are not part of the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub frame_rate: f64,
    /// Log-energy of silent frames.
    pub silence_level: f64,
    /// Up to this many silent frames at each edge.
    pub max_edge_silence: usize,
    pub noise_std: f64,
    /// Stationary standard deviation of the log-gain contour on voiced frames.
    pub contour_std: f64,
    /// AR(1) coefficient between consecutive contour knots.
    pub contour_rho: f64,
    /// Spacing of contour knots in mel frames; values between knots are linearly interpolated.
    pub contour_knot: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            frame_rate: 100.0,
            silence_level: -4.0,
            max_edge_silence: 5,
            noise_std: 0.02,
            contour_std: 1.0,
            contour_rho: 0.0,
            contour_knot: 4,
        }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Builds `size` symbols whose templates are pairwise cosine-distinguishable
/// (similarity below `0.95`). Each template is two Gaussian bumps over a small
/// constant floor.
pub fn default_vocab(size: usize, n_mels: usize, duration_range: (usize, usize), seed: u64) -> Result<Vec<SymbolSpec>> {
    if size < 2 {
        return Err(config("vocabulary needs at least 2 symbols"));
    }
    if n_mels < 2 {
        return Err(config("n_mels must be at least 2"));
    }
    check_duration_range(duration_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut templates: Vec<Vec<f64>> = Vec::with_capacity(size);
    let mut attempts = 0;
    while templates.len() < size {
        attempts += 1;
        if attempts > 10_000 {
            return Err(config("could not draw distinguishable templates; increase n_mels"));
        }
        let f = n_mels as f64;
        let mut t = vec![0.3; n_mels];
        for _ in 0..2 {
            let center = rng.random_range(0.0..f);
            let width = rng.random_range(0.05 * f..0.12 * f).max(0.75);
            let height = rng.random_range(1.5..3.5);
            for (i, v) in t.iter_mut().enumerate() {
                let z = (i as f64 - center) / width;
                *v += height * (-0.5 * z * z).exp();
            }
        }
        if templates.iter().all(|o| cosine_similarity(o, &t) < 0.9) {
            templates.push(t);
        }
    }
    Ok(templates
        .into_iter()
        .enumerate()
        .map(|(symbol_id, spectral_template)| SymbolSpec { symbol_id, spectral_template, duration_range })
        .collect())
}

fn check_duration_range((lo, hi): (usize, usize)) -> Result<()> {
    if lo < 1 || hi < lo {
        return Err(config(format!("invalid duration range ({lo}, {hi})")));
    }
    Ok(())
}

fn validate_vocab(vocab: &[SymbolSpec]) -> Result<usize> {
    if vocab.is_empty() {
        return Err(config("empty vocabulary"));
    }
    if vocab.len() < 2 {
        return Err(config("vocabulary needs at least 2 symbols"));
    }
    let f = vocab[0].spectral_template.len();
    for (i, s) in vocab.iter().enumerate() {
        if s.symbol_id != i {
            return Err(config(format!("symbol ids must be 0..V in order, found {} at {i}", s.symbol_id)));
        }
        if s.spectral_template.len() != f || f == 0 {
            return Err(config("all templates must share one nonzero width"));
        }
        if s.spectral_template.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(config(format!("template {i} must be finite and nonnegative")));
        }
        check_duration_range(s.duration_range)?;
    }
    Ok(f)
}

fn utterance_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ 0x5851_F42D_4C95_7F2D
}

/// Deterministic synthetic corpus with default synthesis parameters.
pub fn generate_corpus(vocab: &[SymbolSpec], n_utts: usize, len_range: (usize, usize), seed: u64) -> Result<Vec<Utterance>> {
    generate_corpus_with(vocab, n_utts, len_range, seed, &SynthParams::default())
}

pub fn generate_corpus_with(
    vocab: &[SymbolSpec],
    n_utts: usize,
    len_range: (usize, usize),
    seed: u64,
    synth: &SynthParams,
) -> Result<Vec<Utterance>> {
    let n_mels = validate_vocab(vocab)?;
    if n_utts == 0 {
        return Err(config("n_utts must be at least 1"));
    }
    if len_range.0 > len_range.1 {
        return Err(config(format!("len_range min {} exceeds max {}", len_range.0, len_range.1)));
    }
    if len_range.0 == 0 {
        return Err(config("utterances need at least one symbol"));
    }
    if synth.contour_knot == 0 || !(synth.noise_std >= 0.0) || !(synth.contour_std >= 0.0) || synth.contour_rho.abs() >= 1.0 {
        return Err(config("invalid synthesis parameters"));
    }
    let width = (n_utts as f64).log10().floor() as usize + 1;
    (0..n_utts)
        .map(|i| {
            let useed = utterance_seed(seed, i);
            Ok(synthesize(vocab, n_mels, len_range, useed, synth, format!("utt{i:0width$}")))
        })
        .collect()
}

fn synthesize(vocab: &[SymbolSpec], n_mels: usize, len_range: (usize, usize), seed: u64, p: &SynthParams, id: String) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vocab.len();
    let len = rng.random_range(len_range.0..=len_range.1);
    let mut transcript = Vec::with_capacity(len);
    for k in 0..len {
        let sym = if k == 0 {
            rng.random_range(0..v)
        } else {
            // Uniform over the other symbols: identical neighbours would be one segment.
            let prev = transcript[k - 1];
            let r = rng.random_range(0..v - 1);
            if r >= prev {
                r + 1
            } else {
                r
            }
        };
        transcript.push(sym);
    }
    let lead = rng.random_range(0..=p.max_edge_silence);
    let trail = rng.random_range(0..=p.max_edge_silence);
    let mut segments = Vec::with_capacity(len);
    let mut cursor = lead;
    for &sym in &transcript {
        let (lo, hi) = vocab[sym].duration_range;
        let d = rng.random_range(lo..=hi);
        segments.push(Segment { start: cursor, len: d, symbol: sym });
        cursor += d;
    }
    let voiced_end = cursor;
    let total = voiced_end + trail;

    let voiced = voiced_end - lead;
    let n_knots = voiced / p.contour_knot + 2;
    let innov = Normal::new(0.0, p.contour_std * (1.0 - p.contour_rho * p.contour_rho).sqrt()).expect("finite");
    let mut knots = Vec::with_capacity(n_knots);
    let mut prev = Normal::new(0.0, p.contour_std).expect("finite").sample(&mut rng);
    for _ in 0..n_knots {
        knots.push(prev);
        prev = p.contour_rho * prev + innov.sample(&mut rng);
    }
    let noise = Normal::new(0.0, p.noise_std.max(0.0)).expect("finite");

    let mut frames = Mat::filled(total, n_mels, p.silence_level);
    for s in &segments {
        let tpl = &vocab[s.symbol].spectral_template;
        for t in s.start..s.start + s.len {
            let pos = (t - lead) as f64 / p.contour_knot as f64;
            let k = pos.floor() as usize;
            let frac = pos - k as f64;
            let gain = knots[k] * (1.0 - frac) + knots[k + 1] * frac;
            for (o, &e) in frames.row_mut(t).iter_mut().zip(tpl) {
                *o += e + gain;
            }
        }
    }
    for x in frames.data_mut() {
        if p.noise_std > 0.0 {
            *x += noise.sample(&mut rng);
        }
        *x = *x as f32 as f64;
    }
    Utterance { id, mel: MelSpectrogram::new(frames, p.frame_rate), transcript, seed, segments }
}

/// Classifies each voiced frame by the nearest template (after removing the
/// silence offset and the per-frame mean gain) and collapses runs.
pub fn nearest_template_transcript(utt: &Utterance, vocab: &[SymbolSpec], silence_level: f64) -> Vec<usize> {
    let labels = utt.frame_labels();
    let mut out: Vec<usize> = Vec::new();
    let mut last: Option<usize> = None;
    for (t, l) in labels.iter().enumerate() {
        if l.is_none() {
            last = None;
            continue;
        }
        let row: Vec<f64> = utt.mel.frames.row(t).iter().map(|x| x - silence_level).collect();
        let best = vocab
            .iter()
            .map(|s| {
                // Gain is additive across bins, so compare mean-removed shapes.
                let tm = s.spectral_template.iter().sum::<f64>() / row.len() as f64;
                let rm = row.iter().sum::<f64>() / row.len() as f64;
                let d: f64 = row.iter().zip(&s.spectral_template).map(|(x, e)| ((x - rm) - (e - tm)).powi(2)).sum();
                (s.symbol_id, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(id, _)| id)
            .expect("non-empty vocab");
        if Some(best) != last {
            out.push(best);
        }
        last = Some(best);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, fft_size: 400, hop: 160, n_mels: 128, f_min: 0.0, f_max: None }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequency (Hz) of each mel band.
pub fn mel_band_centers(cfg: &MelConfig) -> Vec<f64> {
    let f_max = cfg.f_max.unwrap_or(cfg.sample_rate as f64 / 2.0);
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(f_max));
    (1..=cfg.n_mels).map(|m| mel_to_hz(lo + (hi - lo) * m as f64 / (cfg.n_mels + 1) as f64)).collect()
}

/// Triangular, peak-normalised filters: `n_mels x (fft_size/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Mat {
    let n_bins = cfg.fft_size / 2 + 1;
    let f_max = cfg.f_max.unwrap_or(cfg.sample_rate as f64 / 2.0);
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2).map(|m| mel_to_hz(lo + (hi - lo) * m as f64 / (cfg.n_mels + 1) as f64)).collect();
    let mut fb = Mat::zeros(cfg.n_mels, n_bins);
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
            let w = if f >= l && f <= c && c > l {
                (f - l) / (c - l)
            } else if f > c && f <= r && r > c {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb.set(m, k, w.max(0.0));
        }
    }
    fb
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Log-mel spectrogram with centred, reflect-padded frames and a periodic Hann window.
/// Produces `len / hop + 1` frames.
pub fn log_mel(waveform: &[f64], cfg: &MelConfig) -> Result<MelSpectrogram> {
    if waveform.is_empty() {
        return Err(input("empty waveform"));
    }
    if waveform.iter().any(|x| !x.is_finite()) {
        return Err(input("waveform contains non-finite samples"));
    }
    if cfg.fft_size < 2 || cfg.hop == 0 || cfg.n_mels == 0 || cfg.sample_rate == 0 {
        return Err(config("invalid mel configuration"));
    }
    let n_frames = waveform.len() / cfg.hop + 1;
    let half = (cfg.fft_size / 2) as isize;
    let window: Vec<f64> = (0..cfg.fft_size)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.fft_size as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg);
    let n_bins = cfg.fft_size / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; n_bins];
    let mut out = Mat::zeros(n_frames, cfg.n_mels);
    for t in 0..n_frames {
        let start = (t * cfg.hop) as isize - half;
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + i as isize, waveform.len());
            *b = Complex::new(waveform[idx] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            out.set(t, m, e.max(POWER_FLOOR).ln());
        }
    }
    Ok(MelSpectrogram::new(out, cfg.sample_rate as f64 / cfg.hop as f64))
}

/// One line of the corpus manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub transcript: Vec<usize>,
    /// Path of the mel file, relative to the manifest directory.
    pub mel_path: String,
    pub seed: u64,
    #[serde(default)]
    pub segments: Vec<Segment>,
}

const MEL_MAGIC: &[u8; 4] = b"DMEL";
const MEL_VERSION: u32 = 1;

/// Mel file layout (little endian): magic `DMEL`, `u32` version, `u32`
/// frames, `u32` n_mels, `f32` frame rate, then `frames * n_mels` row-major `f32`.
pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MEL_MAGIC)?;
    w.write_all(&MEL_VERSION.to_le_bytes())?;
    w.write_all(&(mel.n_frames() as u32).to_le_bytes())?;
    w.write_all(&(mel.n_mels() as u32).to_le_bytes())?;
    w.write_all(&(mel.frame_rate as f32).to_le_bytes())?;
    for v in mel.frames.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != MEL_MAGIC {
        return Err(input(format!("{} is not a mel file", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != MEL_VERSION {
        return Err(input(format!("unsupported mel file version {}", u32_at(4))));
    }
    let (rows, cols) = (u32_at(8) as usize, u32_at(12) as usize);
    let frame_rate = f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as f64;
    if bytes.len() != 20 + rows * cols * 4 {
        return Err(input(format!("{} has a truncated body", path.display())));
    }
    let data = bytes[20..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok(MelSpectrogram::new(Mat::from_vec(rows, cols, data), frame_rate))
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `manifest.jsonl` plus one mel file per utterance under `dir/mels/`.
pub fn write_corpus(dir: &Path, utts: &[Utterance]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("mels"))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = BufWriter::new(File::create(&manifest)?);
    for u in utts {
        let rel = format!("mels/{}.mel", u.id);
        write_mel(&dir.join(&rel), &u.mel)?;
        let rec = ManifestRecord {
            id: u.id.clone(),
            transcript: u.transcript.clone(),
            mel_path: rel,
            seed: u.seed,
            segments: u.segments.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(manifest)
}

pub fn read_corpus(dir: &Path) -> Result<Vec<Utterance>> {
    let f = File::open(dir.join(MANIFEST_FILE))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)?;
        if rec.transcript.is_empty() {
            return Err(input(format!("utterance {} has an empty transcript", rec.id)));
        }
        let mel = read_mel(&dir.join(&rec.mel_path))?;
        out.push(Utterance { id: rec.id, mel, transcript: rec.transcript, seed: rec.seed, segments: rec.segments });
    }
    Ok(out)
}

/// Deterministic train/test split: the last `ceil(n * test_fraction)` utterances are held out.
pub fn split_indices(n: usize, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_test = ((n as f64) * test_fraction).ceil() as usize;
    let n_test = n_test.min(n.saturating_sub(1));
    ((0..n - n_test).collect(), (n - n_test..n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(v: usize) -> Vec<SymbolSpec> {
        default_vocab(v, 32, (10, 26), 11).unwrap()
    }

    #[test]
    fn single_symbol_utterance() {
        let utts = generate_corpus(&vocab(2), 1, (1, 1), 7).unwrap();
        assert_eq!(utts.len(), 1);
        assert_eq!(utts[0].transcript.len(), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&vocab(4), 5, (2, 6), 7).unwrap();
        let b = generate_corpus(&vocab(4), 5, (2, 6), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&vocab(4), 5, (2, 6), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(generate_corpus(&[], 1, (1, 1), 0), Err(crate::Error::Config(_))));
        assert!(matches!(generate_corpus(&vocab(2), 1, (3, 1), 0), Err(crate::Error::Config(_))));
        assert!(matches!(generate_corpus(&vocab(2), 0, (1, 1), 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn templates_are_distinguishable() {
        let v = vocab(8);
        for i in 0..8 {
            for j in 0..i {
                assert!(cosine_similarity(&v[i].spectral_template, &v[j].spectral_template) < 0.95);
            }
        }
    }

    #[test]
    fn frame_count_matches_durations_plus_silence() {
        for u in generate_corpus(&vocab(8), 50, (1, 8), 3).unwrap() {
            let voiced: usize = u.segments.iter().map(|s| s.len).sum();
            let lead = u.segments[0].start;
            let last = u.segments.last().unwrap();
            let trail = u.mel.n_frames() - (last.start + last.len);
            assert_eq!(u.mel.n_frames(), voiced + lead + trail);
            assert!(lead <= 5 && trail <= 5);
            assert!(u.segments.windows(2).all(|w| w[0].start + w[0].len == w[1].start));
            assert!(u.transcript.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn noise_free_frames_decode_to_transcript() {
        let v = vocab(8);
        let synth = SynthParams { noise_std: 0.0, ..SynthParams::default() };
        for u in generate_corpus_with(&v, 40, (1, 10), 5, &synth).unwrap() {
            assert_eq!(nearest_template_transcript(&u, &v, synth.silence_level), u.transcript);
        }
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let mel = log_mel(&vec![0.0; 1600], &MelConfig::default()).unwrap();
        assert!(mel.frames.data().iter().all(|&x| x == POWER_FLOOR.ln()));
    }

    #[test]
    fn centred_frame_count() {
        let mel = log_mel(&vec![0.01; 16000], &MelConfig::default()).unwrap();
        assert_eq!(mel.n_frames(), 101);
        assert_eq!(mel.frame_rate, 100.0);
        let one = log_mel(&[0.5], &MelConfig::default()).unwrap();
        assert_eq!(one.n_frames(), 1);
    }

    #[test]
    fn sinusoid_peaks_at_its_band() {
        let cfg = MelConfig::default();
        let centers = mel_band_centers(&cfg);
        for band in [60usize, 80, 100] {
            let f = centers[band];
            let wave: Vec<f64> = (0..8000).map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / 16000.0).sin()).collect();
            let mel = log_mel(&wave, &cfg).unwrap();
            for t in 3..mel.n_frames() - 3 {
                let row = mel.frames.row(t);
                let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(argmax, band, "frame {t}");
            }
        }
    }

    #[test]
    fn rejects_non_finite_samples() {
        assert!(matches!(log_mel(&[0.0, f64::NAN], &MelConfig::default()), Err(crate::Error::Input(_))));
        assert!(log_mel(&[], &MelConfig::default()).is_err());
    }

    #[test]
    fn corpus_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let utts = generate_corpus(&vocab(3), 4, (1, 3), 1).unwrap();
        write_corpus(dir.path(), &utts).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), utts);
    }

    #[test]
    fn split_holds_out_tail() {
        let (tr, te) = split_indices(10, 0.2);
        assert_eq!(tr, (0..8).collect::<Vec<_>>());
        assert_eq!(te, vec![8, 9]);
    }
}
