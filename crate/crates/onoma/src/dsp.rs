//! Deterministic signal processing: framing, STFT/ISTFT, amplitude
//! spectrograms, mask application, and Griffin-Lim waveform reconstruction.
//!
//! Spectrograms are stored in `f32`; the FFT and overlap-add paths run in
//! `f64` internally so round-trip and phase-retrieval error bounds hold.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    Dimension {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("unsupported wav encoding: {0}")]
    UnsupportedWav(String),
    #[error("wav i/o: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono PCM signal with sample rate; the raw audio currency.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::InvalidInput("sample_rate must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::InvalidInput(
                "waveform contains NaN/Inf samples".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Signal energy accumulated in f64.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowKind {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PaddingPolicy {
    /// Reflect-pad by half a window on both sides; T = floor(len/hop) + 1.
    CenteredReflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop_length: usize,
    pub window: WindowKind,
    pub padding: PaddingPolicy,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_length: 2048,
            hop_length: 512,
            window: WindowKind::Hann,
            padding: PaddingPolicy::CenteredReflect,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 || self.hop_length > self.window_length {
            return Err(DspError::InvalidInput(format!(
                "need 0 < hop ({}) <= window ({})",
                self.hop_length, self.window_length
            )));
        }
        if !self.window_length.is_power_of_two() {
            return Err(DspError::InvalidInput(format!(
                "window_length {} is not a power of two",
                self.window_length
            )));
        }
        Ok(())
    }

    pub fn freq_bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        num_samples / self.hop_length + 1
    }
}

#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    /// F x T complex bins.
    pub bins: Array2<Complex<f32>>,
    pub config: StftConfig,
}

#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// F x T nonnegative magnitudes.
    pub magnitudes: Array2<f32>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn shape(&self) -> (usize, usize) {
        let s = self.magnitudes.dim();
        (s.0, s.1)
    }
}

/// Time-frequency soft mask, same shape as the spectrogram it scales.
#[derive(Debug, Clone)]
pub struct TFMask {
    pub values: Array2<f32>,
}

fn hann(window_length: usize) -> Vec<f64> {
    // Periodic Hann: squared windows at 75% overlap sum to a constant.
    (0..window_length)
        .map(|n| {
            0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / window_length as f64).cos())
        })
        .collect()
}

fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(samples[i.min(n - 1)]);
    }
    out.extend_from_slice(samples);
    for i in 0..pad {
        let idx = n.saturating_sub(2).saturating_sub(i);
        out.push(samples[idx]);
    }
    out
}

/// f64 STFT core shared by the public wrapper and Griffin-Lim.
pub(crate) fn stft_f64(samples: &[f64], cfg: &StftConfig) -> Array2<Complex<f64>> {
    let win = cfg.window_length;
    let hop = cfg.hop_length;
    let window = hann(win);
    let padded = reflect_pad(samples, win / 2);
    let frames = cfg.num_frames(samples.len());
    let bins = cfg.freq_bins();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);
    let mut out = Array2::zeros((bins, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for t in 0..frames {
        let start = t * hop;
        for n in 0..win {
            buf[n] = Complex::new(padded[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            out[(f, t)] = buf[f];
        }
    }
    out
}

/// Least-squares inverse STFT: windowed overlap-add normalized by the
/// accumulated squared window. Output length is (T-1) * hop.
pub(crate) fn istft_f64(bins: &ndarray::ArrayView2<Complex<f64>>, cfg: &StftConfig) -> Vec<f64> {
    let win = cfg.window_length;
    let hop = cfg.hop_length;
    let window = hann(win);
    let (nf, frames) = bins.dim();
    assert_eq!(nf, cfg.freq_bins());

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(win);
    let padded_len = (frames - 1) * hop + win;
    let mut acc = vec![0.0f64; padded_len];
    let mut wsum = vec![0.0f64; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for t in 0..frames {
        buf[0] = bins[(0, t)];
        for f in 1..nf - 1 {
            buf[f] = bins[(f, t)];
            buf[win - f] = bins[(f, t)].conj();
        }
        buf[win / 2] = bins[(nf - 1, t)];
        ifft.process(&mut buf);
        let start = t * hop;
        for n in 0..win {
            let v = buf[n].re / win as f64;
            acc[start + n] += v * window[n];
            wsum[start + n] += window[n] * window[n];
        }
    }
    let pad = win / 2;
    let out_len = (frames - 1) * hop;
    (0..out_len)
        .map(|i| {
            let j = i + pad;
            if wsum[j] > 1e-12 {
                acc[j] / wsum[j]
            } else {
                0.0
            }
        })
        .collect()
}

/// Short-time Fourier transform with centered reflect padding.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(DspError::InvalidInput("empty waveform".into()));
    }
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(DspError::InvalidInput("NaN/Inf in waveform".into()));
    }
    let samples: Vec<f64> = w.samples.iter().map(|&s| s as f64).collect();
    let bins = stft_f64(&samples, cfg).mapv(|c| Complex::new(c.re as f32, c.im as f32));
    Ok(ComplexSpectrogram { bins, config: *cfg })
}

/// Inverse STFT by normalized overlap-add.
pub fn istft(c: &ComplexSpectrogram) -> Result<Waveform> {
    let bins = c.bins.mapv(|z| Complex::new(z.re as f64, z.im as f64));
    let samples = istft_f64(&bins.view(), &c.config);
    Waveform::new(samples.iter().map(|&s| s as f32).collect(), 16_000)
}

/// Elementwise modulus of a complex spectrogram.
pub fn amplitude(c: &ComplexSpectrogram) -> Spectrogram {
    Spectrogram {
        magnitudes: c.bins.mapv(|z| (z.re * z.re + z.im * z.im).sqrt()),
        config: c.config,
    }
}

/// Hadamard product of mask and spectrogram.
pub fn apply_mask(x: &Spectrogram, m: &TFMask) -> Result<Spectrogram> {
    if x.magnitudes.dim() != m.values.dim() {
        return Err(DspError::Dimension {
            expected: x.magnitudes.dim(),
            got: m.values.dim(),
        });
    }
    Ok(Spectrogram {
        magnitudes: &x.magnitudes * &m.values,
        config: x.config,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InitPhase {
    Zero,
    Random { seed: u64 },
}

/// Griffin-Lim phase retrieval from a magnitude spectrogram.
pub fn griffin_lim(s: &Spectrogram, iterations: usize, init_phase: InitPhase) -> Result<Waveform> {
    Ok(griffin_lim_with_trace(s, iterations, init_phase)?.0)
}

/// Griffin-Lim returning the per-iteration spectral-convergence error
/// ||  |STFT(x_k)| - s ||_F; the sequence is non-increasing.
pub fn griffin_lim_with_trace(
    s: &Spectrogram,
    iterations: usize,
    init_phase: InitPhase,
) -> Result<(Waveform, Vec<f64>)> {
    if iterations == 0 {
        return Err(DspError::InvalidInput("iterations must be >= 1".into()));
    }
    let cfg = s.config;
    cfg.validate()?;
    let mag = s.magnitudes.mapv(|v| v as f64);
    let (nf, nt) = mag.dim();
    let mut phase = Array2::<f64>::zeros((nf, nt));
    if let InitPhase::Random { seed } = init_phase {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        phase.mapv_inplace(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI));
    }
    let mut c = Array2::from_shape_fn((nf, nt), |(f, t)| {
        Complex::from_polar(mag[(f, t)], phase[(f, t)])
    });
    let mut errors = Vec::with_capacity(iterations);
    let mut x = istft_f64(&c.view(), &cfg);
    for _ in 0..iterations {
        let spec = stft_f64(&x, &cfg);
        let mut err = 0.0f64;
        for ((f, t), z) in spec.indexed_iter() {
            let d = z.norm() - mag[(f, t)];
            err += d * d;
            c[(f, t)] = Complex::from_polar(mag[(f, t)], z.arg());
        }
        errors.push(err.sqrt());
        x = istft_f64(&c.view(), &cfg);
    }
    let w = Waveform::new(x.iter().map(|&v| v as f32).collect(), 16_000)?;
    Ok((w, errors))
}

/// Reads a mono 16-bit linear PCM WAV file; other encodings are rejected.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::UnsupportedWav(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(DspError::UnsupportedWav(format!(
            "{}: expected 16-bit linear PCM, got {}-bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let samples = samples?;
    Waveform::new(
        samples.iter().map(|&s| s as f32 / 32768.0).collect(),
        spec.sample_rate,
    )
}

/// Writes a mono 16-bit linear PCM WAV file.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
