//! Plot-data export: waveforms, errors and decay curves of rendered
//! responses next to the ground truth, written as JSON for any external
//! plotting tool.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::dsp::{Rir, Spectrogram};
use crate::error::{invalid, io_err, Result};
use crate::losses::{energy_decay_curve, Scale};
use crate::metrics::ChannelMetrics;
use crate::model::Model;
use crate::room::Query;
use crate::train::render_pairs;

/// STFT resolution the exported decay curves are computed at (the middle
/// loss scale).
pub const DECAY_SCALE: Scale = Scale { window: 600, fft: 1024, hop: 150 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlot {
    pub ground_truth: Vec<f64>,
    pub predicted: Vec<f64>,
    /// `|predicted - ground_truth|` per sample.
    pub abs_error: Vec<f64>,
    /// Energy decay curve in dB relative to its first window; `null` where
    /// the ratio is zero or undefined.
    pub decay_db_ground_truth: Vec<Option<f64>>,
    pub decay_db_predicted: Vec<Option<f64>>,
    pub metrics_ground_truth: ChannelMetrics,
    pub metrics_predicted: ChannelMetrics,
}

/// Everything needed to redraw one comparison figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotBundle {
    pub index: usize,
    pub query: Query,
    pub sample_rate: u32,
    pub decay_scale: Scale,
    pub channels: Vec<ChannelPlot>,
}

/// `10 log10(E[d] / E[0])` for every window, `None` where not finite.
pub fn decay_db(curve: &[f64]) -> Vec<Option<f64>> {
    let first = curve.first().copied().unwrap_or(0.0);
    curve
        .iter()
        .map(|e| Some(10.0 * (e / first).log10()).filter(|v| v.is_finite()))
        .collect()
}

/// Builds the bundle for one `(ground truth, prediction)` pair.
pub fn plot_bundle(index: usize, query: Query, ground_truth: &Rir, predicted: &Rir) -> Result<PlotBundle> {
    if ground_truth.len() != predicted.len() {
        return Err(invalid("ground truth and prediction differ in length"));
    }
    let params = DECAY_SCALE.stft()?;
    let decay_g = energy_decay_curve(&Spectrogram::of_rir(ground_truth, &params)?);
    let decay_p = energy_decay_curve(&Spectrogram::of_rir(predicted, &params)?);
    let fs = ground_truth.sample_rate();
    let channels = (0..2)
        .map(|c| {
            let (g, p) = (ground_truth.channel(c), predicted.channel(c));
            ChannelPlot {
                ground_truth: g.to_vec(),
                predicted: p.to_vec(),
                abs_error: g.iter().zip(p).map(|(a, b)| (b - a).abs()).collect(),
                decay_db_ground_truth: decay_db(&decay_g[c]),
                decay_db_predicted: decay_db(&decay_p[c]),
                metrics_ground_truth: ChannelMetrics::of(g, fs),
                metrics_predicted: ChannelMetrics::of(p, fs),
            }
        })
        .collect();
    Ok(PlotBundle { index, query, sample_rate: fs, decay_scale: DECAY_SCALE, channels })
}

/// Renders the dataset entries `indices` and writes `plot_{index}.json`
/// for each into `out_dir`.
pub fn export_plots(model: &Model, ds: &Dataset, indices: &[usize], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.samples.len()) {
        return Err(invalid(format!("plot index {bad} out of range (dataset has {} entries)", ds.samples.len())));
    }
    let pairs = render_pairs(model, ds, indices)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::with_capacity(indices.len());
    for (&i, (gt, pred)) in indices.iter().zip(&pairs) {
        let bundle = plot_bundle(i, ds.samples[i].query, gt, pred)?;
        let path = out_dir.join(format!("plot_{i}.json"));
        let json = serde_json::to_string(&bundle).expect("bundle serialises");
        fs::write(&path, json).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
