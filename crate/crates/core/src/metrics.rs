//! Room-acoustics metrics (T60, C50, EDT) and their error aggregation over
//! a test set.
//!
//! All three are computed from the Schroeder backward-integrated energy of
//! the squared time-domain samples. T60 is extrapolated from a
//! least-squares line over the -5 dB to -35 dB span of that curve; EDT is
//! six times the (linearly interpolated) time of the -10 dB crossing. Scaling
//! a response by a power of two leaves every metric bit-identical; other
//! positive factors agree to rounding.

use serde::{Deserialize, Serialize};

use crate::dsp::Rir;
use crate::error::{invalid, NacfError, Result};

/// Fit span of the T60 regression, in dB below the total energy.
pub const T60_FIT_START_DB: f64 = -5.0;
pub const T60_FIT_END_DB: f64 = -35.0;
/// Early/late boundary of C50, in seconds.
pub const C50_BOUNDARY_S: f64 = 0.05;

/// Schroeder energy decay curve in dB relative to the total energy.
pub fn schroeder_db(h: &[f64]) -> Result<Vec<f64>> {
    if h.is_empty() || h.iter().any(|v| !v.is_finite()) {
        return Err(invalid("decay curve needs a non-empty finite signal"));
    }
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for n in (0..h.len()).rev() {
        acc += h[n] * h[n];
        edc[n] = acc;
    }
    let total = edc[0];
    if total <= 0.0 {
        return Err(NacfError::InsufficientDecay("silent signal".into()));
    }
    Ok(edc.iter().map(|e| 10.0 * (e / total).log10()).collect())
}

/// Reverberation time in seconds.
pub fn t60(h: &[f64], sample_rate: u32) -> Result<f64> {
    let db = schroeder_db(h)?;
    let start = db
        .iter()
        .position(|&v| v <= T60_FIT_START_DB)
        .ok_or_else(|| NacfError::InsufficientDecay("never decays by 5 dB".into()))?;
    let end = db
        .iter()
        .position(|&v| v < T60_FIT_END_DB)
        .ok_or_else(|| NacfError::InsufficientDecay("never decays by 35 dB".into()))?;
    if end < start + 2 {
        return Err(NacfError::InsufficientDecay("fit span shorter than two samples".into()));
    }
    let fs = sample_rate as f64;
    let n = (end - start) as f64;
    let mean_t = (start..end).map(|i| i as f64 / fs).sum::<f64>() / n;
    let mean_y = db[start..end].iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in (start..end).zip(&db[start..end]) {
        let dt = i as f64 / fs - mean_t;
        sxy += dt * (y - mean_y);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(NacfError::InsufficientDecay("non-negative decay slope".into()));
    }
    Ok(-60.0 / slope)
}

/// Early decay time in seconds.
pub fn edt(h: &[f64], sample_rate: u32) -> Result<f64> {
    let db = schroeder_db(h)?;
    let k = db
        .iter()
        .position(|&v| v <= -10.0)
        .ok_or_else(|| NacfError::InsufficientDecay("never decays by 10 dB".into()))?;
    // db[0] is exactly 0, so k >= 1.
    let (y0, y1) = (db[k - 1], db[k]);
    let frac = (y0 + 10.0) / (y0 - y1);
    let t10 = ((k - 1) as f64 + frac) / sample_rate as f64;
    Ok(6.0 * t10)
}

/// Clarity: early (first 50 ms) to late energy ratio in dB.
pub fn c50(h: &[f64], sample_rate: u32) -> Result<f64> {
    let boundary = (C50_BOUNDARY_S * sample_rate as f64).round() as usize;
    if h.len() <= boundary {
        return Err(invalid(format!("C50 needs more than {boundary} samples")));
    }
    let early: f64 = h[..boundary].iter().map(|v| v * v).sum();
    let late: f64 = h[boundary..].iter().map(|v| v * v).sum();
    if late == 0.0 || early == 0.0 || !early.is_finite() || !late.is_finite() {
        return Err(NacfError::DegenerateMetric(format!("C50 undefined (early {early}, late {late})")));
    }
    Ok(10.0 * (early / late).log10())
}

/// Metric values of one channel; `None` where the metric is degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub t60: Option<f64>,
    pub c50: Option<f64>,
    pub edt: Option<f64>,
}

impl ChannelMetrics {
    pub fn of(h: &[f64], sample_rate: u32) -> Self {
        Self { t60: t60(h, sample_rate).ok(), c50: c50(h, sample_rate).ok(), edt: edt(h, sample_rate).ok() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDetail {
    pub pair: usize,
    pub channel: usize,
    pub ground_truth: ChannelMetrics,
    pub predicted: ChannelMetrics,
}

/// How many (pair, channel) cases were left out of each mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Exclusions {
    pub t60: usize,
    pub c50: usize,
    pub edt: usize,
}

/// The three headline error figures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricErrors {
    pub t60_error_percent: f64,
    pub c50_error_db: f64,
    pub edt_error_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub errors: MetricErrors,
    pub cases: usize,
    pub excluded: Exclusions,
    pub detail: Vec<PairDetail>,
}

impl MetricsReport {
    pub fn t60_error_percent(&self) -> f64 {
        self.errors.t60_error_percent
    }

    pub fn c50_error_db(&self) -> f64 {
        self.errors.c50_error_db
    }

    pub fn edt_error_sec(&self) -> f64 {
        self.errors.edt_error_sec
    }
}

fn mean_of(values: &[f64], name: &str) -> Result<f64> {
    if values.is_empty() {
        return Err(NacfError::DegenerateMetric(format!("{name} is degenerate for every pair")));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean absolute metric errors over all pairs and both channels. A case
/// whose metric is degenerate for either response is excluded from that
/// metric's mean and counted.
pub fn evaluate(pairs: &[(Rir, Rir)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(invalid("evaluation needs at least one pair"));
    }
    let mut detail = Vec::with_capacity(2 * pairs.len());
    for (i, (g, p)) in pairs.iter().enumerate() {
        if g.len() != p.len() || g.sample_rate() != p.sample_rate() {
            return Err(invalid(format!("pair {i}: responses differ in length or sample rate")));
        }
        for c in 0..2 {
            detail.push(PairDetail {
                pair: i,
                channel: c,
                ground_truth: ChannelMetrics::of(g.channel(c), g.sample_rate()),
                predicted: ChannelMetrics::of(p.channel(c), p.sample_rate()),
            });
        }
    }
    report_from_detail(detail)
}

/// Aggregates precomputed per-channel metrics.
pub fn report_from_detail(detail: Vec<PairDetail>) -> Result<MetricsReport> {
    let (mut t60s, mut c50s, mut edts) = (Vec::new(), Vec::new(), Vec::new());
    let mut excluded = Exclusions::default();
    for d in &detail {
        let (g, p) = (&d.ground_truth, &d.predicted);
        match (g.t60, p.t60) {
            (Some(a), Some(b)) => t60s.push(100.0 * (b - a).abs() / a),
            _ => excluded.t60 += 1,
        }
        match (g.c50, p.c50) {
            (Some(a), Some(b)) => c50s.push((b - a).abs()),
            _ => excluded.c50 += 1,
        }
        match (g.edt, p.edt) {
            (Some(a), Some(b)) => edts.push((b - a).abs()),
            _ => excluded.edt += 1,
        }
    }
    Ok(MetricsReport {
        errors: MetricErrors {
            t60_error_percent: mean_of(&t60s, "T60")?,
            c50_error_db: mean_of(&c50s, "C50")?,
            edt_error_sec: mean_of(&edts, "EDT")?,
        },
        cases: detail.len(),
        excluded,
        detail,
    })
}
