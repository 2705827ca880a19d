//! Signal-processing primitives shared by the oracle, the model and the
//! losses: analysis windows, STFT magnitudes and the sinusoidal encoding of
//! the time query.
//!
//! Everything here is a pure function. The FFT plans are cached per size in
//! [`FftCache`] so that the differentiable STFT op can reuse them.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A two-channel (left, right) impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    channels: [Vec<f64>; 2],
    sample_rate: u32,
}

impl Rir {
    pub fn new(left: Vec<f64>, right: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if left.is_empty() {
            return Err(invalid("impulse response must have at least one sample"));
        }
        if left.len() != right.len() {
            return Err(invalid(format!(
                "channel lengths differ: {} vs {}",
                left.len(),
                right.len()
            )));
        }
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if left.iter().chain(right.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("impulse response contains non-finite samples"));
        }
        Ok(Self {
            channels: [left, right],
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            channels: [vec![0.0; len], vec![0.0; len]],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels[0].is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Channel 0 is the left ear, channel 1 the right ear.
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>; 2] {
        &self.channels
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let scale = |ch: &Vec<f64>| ch.iter().map(|v| v * alpha).collect::<Vec<_>>();
        Self {
            channels: [scale(&self.channels[0]), scale(&self.channels[1])],
            sample_rate: self.sample_rate,
        }
    }

    pub fn energy(&self) -> f64 {
        self.channels.iter().flatten().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Hann,
    Rectangular,
}

/// STFT framing parameters. `fft_size` may exceed `window_size`; frames are
/// zero-padded up to the FFT length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub window_size: usize,
    pub hop_size: usize,
    pub fft_size: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl StftParams {
    pub fn new(window_size: usize, hop_size: usize, fft_size: usize) -> Result<Self> {
        let p = Self {
            window_size,
            hop_size,
            fft_size,
            window: WindowKind::Hann,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_window(mut self, window: WindowKind) -> Self {
        self.window = window;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_size == 0 || self.hop_size > self.window_size || self.window_size > self.fft_size {
            return Err(invalid(format!(
                "stft parameters need 0 < hop ({}) <= window ({}) <= fft ({})",
                self.hop_size, self.window_size, self.fft_size
            )));
        }
        if self.window == WindowKind::Hann && self.window_size < 2 {
            return Err(invalid("hann window needs at least 2 samples"));
        }
        Ok(())
    }

    /// Number of frequency bins, `fft_size / 2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames for a signal of `len` samples once the tail is
    /// zero-padded so the last frame is full.
    pub fn num_windows(&self, len: usize) -> usize {
        if len <= self.window_size {
            1
        } else {
            (len - self.window_size).div_ceil(self.hop_size) + 1
        }
    }

    pub fn padded_len(&self, len: usize) -> usize {
        (self.num_windows(len) - 1) * self.hop_size + self.window_size
    }

    pub fn window_values(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Hann => hann_window(self.window_size).expect("validated window size"),
            WindowKind::Rectangular => vec![1.0; self.window_size],
        }
    }
}

/// STFT magnitudes, frame-major: `data[c][d * F + f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub params: StftParams,
    pub num_windows: usize,
    pub num_bins: usize,
    pub channels: Vec<Vec<f64>>,
}

impl Spectrogram {
    pub fn get(&self, f: usize, d: usize, c: usize) -> f64 {
        self.channels[c][d * self.num_bins + f]
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Magnitudes of both channels of an impulse response.
    pub fn of_rir(rir: &Rir, params: &StftParams) -> Result<Self> {
        let left = stft_magnitude(rir.channel(0), params)?;
        let right = stft_magnitude(rir.channel(1), params)?;
        Ok(Self {
            params: left.params,
            num_windows: left.num_windows,
            num_bins: left.num_bins,
            channels: vec![
                left.channels.into_iter().next().unwrap(),
                right.channels.into_iter().next().unwrap(),
            ],
        })
    }

    pub fn same_shape(&self, other: &Spectrogram) -> bool {
        self.num_windows == other.num_windows
            && self.num_bins == other.num_bins
            && self.channels.len() == other.channels.len()
    }
}

/// Symmetric Hann window, `w[n] = 0.5 (1 - cos(2 pi n / (size - 1)))`.
pub fn hann_window(size: usize) -> Result<Vec<f64>> {
    if size < 2 {
        return Err(invalid(format!("hann window size must be >= 2, got {size}")));
    }
    let denom = (size - 1) as f64;
    Ok((0..size)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / denom).cos()))
        .collect())
}

/// Process-wide cache of forward FFT plans keyed by length.
pub struct FftCache;

impl FftCache {
    pub fn forward(len: usize) -> Arc<dyn Fft<f64>> {
        static PLANS: OnceLock<Mutex<(FftPlanner<f64>, HashMap<usize, Arc<dyn Fft<f64>>>)>> =
            OnceLock::new();
        let lock = PLANS.get_or_init(|| Mutex::new((FftPlanner::new(), HashMap::new())));
        let mut guard = lock.lock().expect("fft cache poisoned");
        let (planner, plans) = &mut *guard;
        plans
            .entry(len)
            .or_insert_with(|| planner.plan_fft_forward(len))
            .clone()
    }
}

/// Process-wide cache of real-input FFT plans, used by the differentiable
/// magnitude op.
pub struct RealFftCache;

impl RealFftCache {
    fn planner() -> std::sync::MutexGuard<'static, RealFftPlanner<f64>> {
        static PLANNER: OnceLock<Mutex<RealFftPlanner<f64>>> = OnceLock::new();
        PLANNER
            .get_or_init(|| Mutex::new(RealFftPlanner::new()))
            .lock()
            .expect("fft cache poisoned")
    }

    pub fn forward(len: usize) -> Arc<dyn RealToComplex<f64>> {
        Self::planner().plan_fft_forward(len)
    }

    pub fn inverse(len: usize) -> Arc<dyn ComplexToReal<f64>> {
        Self::planner().plan_fft_inverse(len)
    }
}

/// Complex spectra of every frame of one channel, frame-major with
/// `fft_size` bins per frame. Used by the differentiable STFT op, which needs
/// the phases for its backward pass.
pub(crate) fn stft_complex(signal: &[f64], params: &StftParams, window: &[f64]) -> Vec<Complex<f64>> {
    let n_frames = params.num_windows(signal.len());
    let n = params.fft_size;
    let fft = FftCache::forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n_frames * n];
    for (d, frame) in buf.chunks_mut(n).enumerate() {
        let start = d * params.hop_size;
        for (k, w) in window.iter().enumerate() {
            let x = signal.get(start + k).copied().unwrap_or(0.0);
            frame[k] = Complex::new(x * w, 0.0);
        }
    }
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(&mut buf, &mut scratch);
    buf
}

/// STFT magnitude of a single channel. The result has one channel.
pub fn stft_magnitude(signal: &[f64], params: &StftParams) -> Result<Spectrogram> {
    params.validate()?;
    if signal.is_empty() {
        return Err(invalid("signal must have at least one sample"));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(invalid("signal contains non-finite samples"));
    }
    let window = params.window_values();
    let spectra = stft_complex(signal, params, &window);
    let bins = params.num_bins();
    let n_frames = params.num_windows(signal.len());
    let mut mag = Vec::with_capacity(n_frames * bins);
    for frame in spectra.chunks(params.fft_size) {
        mag.extend(frame[..bins].iter().map(|z| z.norm()));
    }
    Ok(Spectrogram {
        params: *params,
        num_windows: n_frames,
        num_bins: bins,
        channels: vec![mag],
    })
}

/// Sinusoidal encoding of a normalised time query `t_norm` in `[0, 1]`.
///
/// The query is first mapped to `t' = 2 t_norm - 1`; the output interleaves
/// `sin(2^k pi t')` and `cos(2^k pi t')` for `k = 0..frequencies`.
pub fn positional_encoding(t_norm: f64, frequencies: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t_norm) {
        return Err(invalid(format!("time query {t_norm} outside [0, 1]")));
    }
    if frequencies == 0 {
        return Err(invalid("positional encoding needs at least one frequency"));
    }
    let t = 2.0 * t_norm - 1.0;
    let mut out = Vec::with_capacity(2 * frequencies);
    let mut scale = PI;
    for _ in 0..frequencies {
        let (s, c) = (scale * t).sin_cos();
        out.push(s);
        out.push(c);
        scale *= 2.0;
    }
    Ok(out)
}
