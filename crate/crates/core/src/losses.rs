//! Multi-scale training objective: spectral magnitude L1 plus a log-space
//! energy-decay L1 at every STFT scale.
//!
//! Both terms use mean reduction so that scales with different `F x D`
//! grids contribute on a comparable footing. The plain functions here work
//! on [`Spectrogram`]s; [`loss_graph`] records the same computation on a
//! [`Tape`] for training.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dsp::{Rir, Spectrogram, StftParams};
use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// One STFT resolution of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale {
    pub window: usize,
    pub fft: usize,
    pub hop: usize,
}

impl Scale {
    /// Hann-windowed STFT with a quarter-window hop.
    pub fn with_quarter_hop(window: usize, fft: usize) -> Self {
        Self { window, fft, hop: window / 4 }
    }

    pub fn stft(&self) -> Result<StftParams> {
        StftParams::new(self.window, self.hop, self.fft)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub scales: Vec<Scale>,
    /// Weight of the decay term.
    pub lambda: f64,
    /// Added to the decay curve before taking `log10`.
    pub eps_log: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            scales: vec![
                Scale::with_quarter_hop(240, 512),
                Scale::with_quarter_hop(600, 1024),
                Scale::with_quarter_hop(1200, 2048),
            ],
            lambda: 0.01,
            eps_log: 1e-12,
        }
    }
}

impl LossConfig {
    /// The middle scale alone, used by the single-resolution ablation.
    pub fn single_scale() -> Self {
        Self { scales: vec![Scale::with_quarter_hop(600, 1024)], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(invalid("loss needs at least one STFT scale"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid("lambda must be finite and non-negative"));
        }
        if !(self.eps_log > 0.0) {
            return Err(invalid("eps_log must be positive"));
        }
        for s in &self.scales {
            s.stft()?;
        }
        Ok(())
    }
}

fn check_shapes(g: &Spectrogram, p: &Spectrogram) -> Result<()> {
    if !g.same_shape(p) {
        return Err(invalid(format!(
            "spectrogram shapes differ: {}x{}x{} vs {}x{}x{}",
            g.num_bins,
            g.num_windows,
            g.num_channels(),
            p.num_bins,
            p.num_windows,
            p.num_channels()
        )));
    }
    Ok(())
}

/// Mean absolute difference over every `(f, d, channel)` entry.
pub fn magnitude_loss(g: &Spectrogram, p: &Spectrogram) -> Result<f64> {
    check_shapes(g, p)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (cg, cp) in g.channels.iter().zip(&p.channels) {
        sum += cg.iter().zip(cp).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += cg.len();
    }
    Ok(sum / count as f64)
}

/// Per channel, the energy remaining from window `d` onward:
/// `M''[d] = sum_{i >= d} sum_f M[f, i]^2`.
pub fn energy_decay_curve(m: &Spectrogram) -> Vec<Vec<f64>> {
    m.channels
        .iter()
        .map(|ch| {
            let per_window: Vec<f64> = ch.chunks(m.num_bins).map(|w| w.iter().map(|v| v * v).sum()).collect();
            let mut out = vec![0.0; per_window.len()];
            let mut acc = 0.0;
            for d in (0..per_window.len()).rev() {
                acc += per_window[d];
                out[d] = acc;
            }
            out
        })
        .collect()
}

/// Mean over `(d, channel)` of `|log10(M''_g + eps) - log10(M''_p + eps)|`.
pub fn decay_loss(g: &Spectrogram, p: &Spectrogram, eps_log: f64) -> Result<f64> {
    check_shapes(g, p)?;
    let (eg, ep) = (energy_decay_curve(g), energy_decay_curve(p));
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in eg.iter().zip(&ep) {
        for (x, y) in a.iter().zip(b) {
            sum += ((x + eps_log).log10() - (y + eps_log).log10()).abs();
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleLoss {
    pub magnitude: f64,
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_scale: Vec<ScaleLoss>,
}

/// `sum_i L_mag(W_i, F_i) + lambda * L_dcy(W_i, F_i)`.
pub fn total_loss(g: &Rir, p: &Rir, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    if g.len() != p.len() || g.sample_rate() != p.sample_rate() {
        return Err(invalid("responses differ in length or sample rate"));
    }
    let mut per_scale = Vec::with_capacity(cfg.scales.len());
    let mut total = 0.0;
    for s in &cfg.scales {
        let params = s.stft()?;
        let mg = Spectrogram::of_rir(g, &params)?;
        let mp = Spectrogram::of_rir(p, &params)?;
        let l = ScaleLoss { magnitude: magnitude_loss(&mg, &mp)?, decay: decay_loss(&mg, &mp, cfg.eps_log)? };
        total += l.magnitude + cfg.lambda * l.decay;
        per_scale.push(l);
    }
    Ok(LossBreakdown { total, per_scale })
}

/// Ground-truth quantities the loss graph compares against, computed once
/// per training item.
#[derive(Debug, Clone)]
pub struct LossTargets {
    /// Per scale, per channel: `D x F` magnitudes and `D x 1` log decay.
    scales: Vec<[(Arc<Matrix>, Arc<Matrix>); 2]>,
}

impl LossTargets {
    pub fn new(rir: &Rir, cfg: &LossConfig) -> Result<Self> {
        let mut scales = Vec::with_capacity(cfg.scales.len());
        for s in &cfg.scales {
            let params = s.stft()?;
            let spec = Spectrogram::of_rir(rir, &params)?;
            let decay = energy_decay_curve(&spec);
            let per_channel = |c: usize| {
                let mag = Matrix::from_vec(spec.num_windows, spec.num_bins, spec.channels[c].clone());
                let log = decay[c].iter().map(|v| (v + cfg.eps_log).log10()).collect();
                (Arc::new(mag), Arc::new(Matrix::from_vec(spec.num_windows, 1, log)))
            };
            scales.push([per_channel(0), per_channel(1)]);
        }
        Ok(Self { scales })
    }
}

/// Loss nodes for one recorded prediction.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: Var,
    /// `(magnitude, decay)` per scale.
    pub per_scale: Vec<(Var, Var)>,
}

/// Records the loss of the `2 x T` prediction `signal` on the tape.
pub fn loss_graph(tape: &mut Tape, signal: Var, targets: &LossTargets, cfg: &LossConfig) -> LossNodes {
    let mut terms = Vec::new();
    let mut per_scale = Vec::new();
    for (s, target) in cfg.scales.iter().zip(&targets.scales) {
        let window = Arc::new(s.stft().expect("validated scale").window_values());
        let mut mags = Vec::with_capacity(2);
        let mut decays = Vec::with_capacity(2);
        for (c, (mag_t, log_t)) in target.iter().enumerate() {
            let frames = tape.frames(signal, c, s.hop, window.clone(), s.fft);
            let mag = tape.dft_mag(frames);
            mags.push(tape.abs_diff_mean(mag, mag_t.clone()));
            let sq = tape.square(mag);
            let energy = tape.row_sums(sq);
            let remaining = tape.rev_cumsum(energy);
            let log = tape.log10(remaining, cfg.eps_log);
            decays.push(tape.abs_diff_mean(log, log_t.clone()));
        }
        // Both channels have the same grid, so the mean over channels of
        // per-channel means is the mean over all entries.
        let mag_sum = tape.sum(&mags);
        let mag = tape.scale(mag_sum, 0.5);
        let decay_sum = tape.sum(&decays);
        let decay = tape.scale(decay_sum, 0.5);
        let weighted = tape.scale(decay, cfg.lambda);
        terms.push(mag);
        terms.push(weighted);
        per_scale.push((mag, decay));
    }
    LossNodes { total: tape.sum(&terms), per_scale }
}
