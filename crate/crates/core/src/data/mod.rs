//! Synthetic two-source mixtures, dataset manifests and WAV I/O.

mod manifest;
mod wav;

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use manifest::{make_dataset, make_dataset_with_ranges, DatasetManifest, ManifestEntry, SeedRange};
pub use wav::{load_wav, write_wav};

pub const MIN_LENGTH: usize = 256;
/// Every synthesized component lies on this grid, so the mixture identity
/// holds exactly in 32-bit.
pub const GRID: f64 = 1.0 / (1u64 << 20) as f64;
pub const PEAK: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub sample_rate: u32,
    /// Level of source A over source B, dB.
    pub source_snr: (f64, f64),
    /// Level of the summed sources over additive noise, dB.
    pub noise_snr: Option<(f64, f64)>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            source_snr: (-5.0, 5.0),
            noise_snr: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub seed: u64,
    pub snr_db: f64,
    pub noise_snr_db: Option<f64>,
}

/// Mixtures `[B, 1, T]`, sources `[B, C, T]` and optional noise `[B, 1, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBatch {
    pub mixture: Tensor<f32>,
    pub sources: Tensor<f32>,
    pub noise: Option<Tensor<f32>>,
    pub sample_rate: u32,
    pub meta: Vec<UtteranceMeta>,
}

impl AudioBatch {
    pub fn batch_size(&self) -> usize {
        self.mixture.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.mixture.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn speakers(&self) -> usize {
        self.sources.shape()[1]
    }

    /// Concatenates single utterances of equal length along the batch axis.
    pub fn stack(items: &[&AudioBatch]) -> Result<AudioBatch> {
        let first = items.first().ok_or_else(|| Error::invalid("cannot stack zero batches"))?;
        let (t, c) = (first.len(), first.speakers());
        let mut mix = Vec::new();
        let mut src = Vec::new();
        let mut meta = Vec::new();
        let with_noise = items.iter().all(|b| b.noise.is_some());
        let mut noise = Vec::new();
        let mut b = 0;
        for it in items {
            if it.len() != t || it.speakers() != c || it.sample_rate != first.sample_rate {
                return Err(Error::invalid("stacked batches must agree in length, speakers and rate"));
            }
            mix.extend_from_slice(it.mixture.data());
            src.extend_from_slice(it.sources.data());
            if let (true, Some(n)) = (with_noise, &it.noise) {
                noise.extend_from_slice(n.data());
            }
            meta.extend_from_slice(&it.meta);
            b += it.batch_size();
        }
        Ok(AudioBatch {
            mixture: Tensor::new(vec![b, 1, t], mix)?,
            sources: Tensor::new(vec![b, c, t], src)?,
            noise: if with_noise { Some(Tensor::new(vec![b, 1, t], noise)?) } else { None },
            sample_rate: first.sample_rate,
            meta,
        })
    }
}

fn draw_db(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64), what: &str) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::invalid(format!("{what} range [{lo}, {hi}] is invalid")));
    }
    Ok(if lo == hi { lo } else { rng.gen_range(lo..hi) })
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Three harmonics of a random fundamental, all inside 100–1000 Hz, under a
/// slow random amplitude envelope.
fn harmonic_source(rng: &mut ChaCha8Rng, t: usize, sr: f64) -> Vec<f64> {
    let f0 = rng.gen_range(100.0..330.0);
    let partials: Vec<(f64, f64, f64)> = (1..=3)
        .map(|k| (k as f64 * f0, rng.gen_range(0.3..1.0), rng.gen_range(0.0..TAU)))
        .collect();
    let env_rate = rng.gen_range(1.0..4.0);
    let env_phase = rng.gen_range(0.0..TAU);
    let env_depth = rng.gen_range(0.2..0.8);
    (0..t)
        .map(|i| {
            let time = i as f64 / sr;
            let env = 1.0 - env_depth * 0.5 * (1.0 + (TAU * env_rate * time + env_phase).sin());
            env * partials
                .iter()
                .map(|&(f, a, p)| a * (TAU * f * time + p).sin())
                .sum::<f64>()
        })
        .collect()
}

/// White noise brick-wall filtered to `[lo, hi]` Hz in the frequency domain.
fn band_noise(rng: &mut ChaCha8Rng, t: usize, sr: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..t).map(|_| Complex::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(t).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(t - k) as f64;
        let f = bin * sr / t as f64;
        if f < lo || f > hi {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(t).process(&mut buf);
    buf.iter().map(|c| c.re / t as f64).collect()
}

fn quantize(x: &mut [f64], scale: f64) {
    x.iter_mut().for_each(|v| *v = (*v * scale / GRID).round() * GRID);
}

/// The source SNR that [`synth_utterance`] draws for `seed`, without
/// synthesizing the audio.
pub fn utterance_snr(seed: u64, params: &SynthParams) -> Result<f64> {
    draw_db(&mut ChaCha8Rng::seed_from_u64(seed), params.source_snr, "source SNR")
}

/// One deterministic two-speaker utterance of `t` samples.
pub fn synth_utterance(seed: u64, t: usize, params: &SynthParams) -> Result<AudioBatch> {
    if t < MIN_LENGTH {
        return Err(Error::invalid(format!("utterance length must be at least {MIN_LENGTH}, got {t}")));
    }
    if params.sample_rate < 8000 {
        return Err(Error::invalid("sample rate must be at least 8000 Hz"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snr_db = draw_db(&mut rng, params.source_snr, "source SNR")?;
    let noise_snr_db = params
        .noise_snr
        .map(|r| draw_db(&mut rng, r, "noise SNR"))
        .transpose()?;
    let sr = params.sample_rate as f64;

    let mut a = harmonic_source(&mut rng, t, sr);
    let mut b = band_noise(&mut rng, t, sr, 1000.0, 3000.0);
    let pa = power(&a);
    a.iter_mut().for_each(|v| *v /= pa.sqrt());
    let gb = (10f64.powf(-snr_db / 10.0) / power(&b)).sqrt();
    b.iter_mut().for_each(|v| *v *= gb);
    let mut n = noise_snr_db.map(|db| {
        let raw: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let clean: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let g = (power(&clean) * 10f64.powf(-db / 10.0) / power(&raw)).sqrt();
        raw.into_iter().map(|v| v * g).collect::<Vec<f64>>()
    });

    let mut peak = 0.0f64;
    for i in 0..t {
        let nv = n.as_ref().map_or(0.0, |n| n[i]);
        let mix = a[i] + b[i] + nv;
        peak = peak.max(mix.abs()).max(a[i].abs()).max(b[i].abs()).max(nv.abs());
    }
    let scale = PEAK / peak;
    quantize(&mut a, scale);
    quantize(&mut b, scale);
    if let Some(n) = n.as_mut() {
        quantize(n, scale);
    }
    let mixture: Vec<f32> = (0..t)
        .map(|i| (a[i] + b[i] + n.as_ref().map_or(0.0, |n| n[i])) as f32)
        .collect();
    let sources: Vec<f32> = a.iter().chain(&b).map(|&v| v as f32).collect();
    Ok(AudioBatch {
        mixture: Tensor::new(vec![1, 1, t], mixture)?,
        sources: Tensor::new(vec![1, 2, t], sources)?,
        noise: n
            .map(|n| Tensor::new(vec![1, 1, t], n.into_iter().map(|v| v as f32).collect()))
            .transpose()?,
        sample_rate: params.sample_rate,
        meta: vec![UtteranceMeta {
            seed,
            snr_db,
            noise_snr_db,
        }],
    })
}
