//! 16 kHz audio to standardized log-Mel feature matrices.

use std::path::Path;
use std::sync::Arc;

use qbye_core::Tensor;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{AppError, AppResult};

pub const SAMPLE_RATE: u32 = 16_000;
pub const SEGMENT_SAMPLES: usize = 32_000;
pub const WINDOW_LENGTH: usize = 400;
pub const FRAME_SHIFT: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const MEL_BANDS: usize = 40;
/// Added before the log so digital silence stays finite.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>) -> Self {
        AudioBuffer {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Centres `audio` in `target` samples by zero padding or clipping both
/// sides equally; the odd sample goes to the right.
pub fn standardize_segment(audio: &AudioBuffer, target: usize) -> AppResult<AudioBuffer> {
    if audio.samples.is_empty() {
        return Err(AppError::Data("empty segment".into()));
    }
    let len = audio.samples.len();
    let mut out = vec![0.0; target];
    let offset = qbye_core::data::centre_offset(len, target);
    if offset >= 0 {
        let o = offset as usize;
        out[o..o + len].copy_from_slice(&audio.samples);
    } else {
        let o = (-offset) as usize;
        out.copy_from_slice(&audio.samples[o..o + target]);
    }
    Ok(AudioBuffer {
        samples: out,
        sample_rate: audio.sample_rate,
    })
}

/// `1 + floor((n − 400) / 160)` frames for `n ≥ 400` samples.
pub fn frame_count(samples: usize) -> usize {
    if samples < WINDOW_LENGTH {
        0
    } else {
        1 + (samples - WINDOW_LENGTH) / FRAME_SHIFT
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies of the triangular filters, Hz.
pub fn mel_centres() -> Vec<f64> {
    mel_edges()[1..=MEL_BANDS].to_vec()
}

fn mel_edges() -> Vec<f64> {
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    (0..MEL_BANDS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_BANDS + 1) as f64))
        .collect()
}

/// Log-Mel analysis: periodic Hann window, 512-point power spectrum and 40
/// triangular Mel filters over 0–8000 Hz.
pub struct LogMel {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// `MEL_BANDS` rows of `FFT_SIZE / 2 + 1` bin weights.
    filters: Vec<Vec<f64>>,
    /// Per-utterance mean/variance normalisation of each band.
    pub normalize: bool,
}

impl LogMel {
    pub fn new(normalize: bool) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let window = (0..WINDOW_LENGTH)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_LENGTH as f64).cos()
            })
            .collect();
        let edges = mel_edges();
        let bins = FFT_SIZE / 2 + 1;
        let filters = (0..MEL_BANDS)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect();
        LogMel {
            fft,
            window,
            filters,
            normalize,
        }
    }

    /// `T × 40` log-Mel energies with unpadded framing.
    pub fn compute(&self, audio: &AudioBuffer) -> AppResult<Tensor> {
        check_rate(audio.sample_rate)?;
        let frames = frame_count(audio.samples.len());
        if frames == 0 {
            return Err(AppError::Data("segment too short".into()));
        }
        let bins = FFT_SIZE / 2 + 1;
        let mut out = Tensor::zeros(frames, MEL_BANDS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut power = vec![0.0; bins];
        for t in 0..frames {
            let frame = &audio.samples[t * FRAME_SHIFT..t * FRAME_SHIFT + WINDOW_LENGTH];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(
                    if i < WINDOW_LENGTH {
                        frame[i] * self.window[i]
                    } else {
                        0.0
                    },
                    0.0,
                );
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            let row = out.row_mut(t);
            for (v, filt) in row.iter_mut().zip(&self.filters) {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                *v = (e + LOG_FLOOR).ln();
            }
        }
        if self.normalize {
            normalize_columns(&mut out);
        }
        Ok(out)
    }
}

fn normalize_columns(x: &mut Tensor) {
    let n = x.rows() as f64;
    for c in 0..x.cols() {
        let mean = (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / n;
        let var = (0..x.rows())
            .map(|r| (x.get(r, c) - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = var.sqrt().max(1e-5);
        for r in 0..x.rows() {
            x.set(r, c, (x.get(r, c) - mean) / sd);
        }
    }
}

/// Standardize to two seconds, then extract features.
pub fn segment_features(audio: &AudioBuffer, mel: &LogMel) -> AppResult<Tensor> {
    mel.compute(&standardize_segment(audio, SEGMENT_SAMPLES)?)
}

fn check_rate(rate: u32) -> AppResult<()> {
    if rate != SAMPLE_RATE {
        return Err(AppError::Data(format!(
            "sample rate {rate} Hz, expected {SAMPLE_RATE}"
        )));
    }
    Ok(())
}

/// Reads a mono 16-bit PCM 16 kHz WAV file.
pub fn read_wav(path: &Path) -> AppResult<AudioBuffer> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let bad = |what: String| AppError::Data(format!("{}: {what}", path.display()));
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(bad("sample format is float, expected 16-bit PCM".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(bad(format!(
            "{} bits per sample, expected 16",
            spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(bad(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(bad(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE}",
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    Ok(AudioBuffer::new(samples))
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> AppResult<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| AppError::Io(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in &audio.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
            .map_err(io)?;
    }
    w.finalize().map_err(io)
}
