//! Acoustic context: per-boundary-point features, their six modality
//! encoders, the fused context tensor `C` (`N x 6 x h`) and the time
//! conditioning that contracts `C` with an embedded time query.
//!
//! The fused tensor is laid out point-major, modality-minor: row
//! `i * 6 + j` of the `6N x h` matrix is modality `j` of point `i`. The
//! spatial-temporal query handed to the field keeps that order.

use rand_chacha::ChaCha8Rng;

use crate::dsp::positional_encoding;
use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::model::{add_mlp2, gaussian, Model, ModelConfig};
use crate::params::ParamSet;
use crate::room::{BoundaryContext, Orientation};
use crate::tape::{relu, Tape, Var};

/// The six context categories, in their fixed fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Depth,
    Material,
    Coeffs,
    Position,
    Emitter,
    Receiver,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Depth,
        Modality::Material,
        Modality::Coeffs,
        Modality::Position,
        Modality::Emitter,
        Modality::Receiver,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Depth => "depth",
            Modality::Material => "material",
            Modality::Coeffs => "coeffs",
            Modality::Position => "position",
            Modality::Emitter => "emitter",
            Modality::Receiver => "receiver",
        }
    }

    pub fn input_dim(self, cfg: &ModelConfig) -> usize {
        match self {
            Modality::Depth => cfg.rays,
            Modality::Material => cfg.materials + 3,
            Modality::Coeffs => 3 * cfg.bands,
            Modality::Position | Modality::Emitter | Modality::Receiver => 2,
        }
    }

    fn prefix(self) -> String {
        format!("ctx.{}", self.name())
    }
}

/// Normalised encoder inputs for one query: one `N x d` matrix per
/// modality plus the head orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatures {
    pub modalities: [Matrix; 6],
    pub orientation: Orientation,
}

impl ItemFeatures {
    /// Builds encoder inputs. Lengths are divided by `diagonal` (the room
    /// footprint diagonal); coefficient features are used as-is.
    pub fn from_contexts(
        contexts: &[BoundaryContext],
        orientation: Orientation,
        diagonal: f64,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        if contexts.len() != cfg.boundary_points {
            return Err(invalid(format!(
                "expected {} boundary contexts, got {}",
                cfg.boundary_points,
                contexts.len()
            )));
        }
        if !(diagonal > 0.0) {
            return Err(invalid("normalisation diagonal must be positive"));
        }
        let n = contexts.len();
        let modalities = Modality::ALL.map(|m| {
            let dim = m.input_dim(cfg);
            let mut data = Vec::with_capacity(n * dim);
            for c in contexts {
                match m {
                    Modality::Depth => data.extend(c.depth_scan.iter().map(|d| d / diagonal)),
                    Modality::Material => data.extend_from_slice(&c.material_desc),
                    Modality::Coeffs => data.extend_from_slice(&c.acoustic_coeffs),
                    Modality::Position => data.extend(c.position.iter().map(|v| v / diagonal)),
                    Modality::Emitter => data.extend(c.emitter_disp.iter().map(|v| v / diagonal)),
                    Modality::Receiver => data.extend(c.receiver_disp.iter().map(|v| v / diagonal)),
                }
            }
            (dim, data)
        });
        for (m, (dim, data)) in Modality::ALL.iter().zip(&modalities) {
            if data.len() != n * dim {
                return Err(invalid(format!(
                    "{} features have {} values, encoder expects {} per point",
                    m.name(),
                    data.len() / n.max(1),
                    dim
                )));
            }
        }
        Ok(Self {
            modalities: modalities.map(|(dim, data)| Matrix::from_vec(n, dim, data)),
            orientation,
        })
    }
}

pub(crate) fn add_params(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    if cfg.use_context {
        for m in Modality::ALL {
            add_mlp2(params, &m.prefix(), (m.input_dim(cfg), cfg.encoder_hidden, cfg.context_dim), rng);
        }
    } else {
        params.add("ctx.constant", gaussian(cfg.query_width(), cfg.context_dim, 0.1, rng));
    }
    add_mlp2(params, "time", (2 * cfg.pe_frequencies, cfg.encoder_hidden, cfg.context_dim), rng);
}

fn mlp2_graph(tape: &mut Tape, prefix: &str, x: Var) -> Var {
    let w1 = tape.param_named(&format!("{prefix}.w1"));
    let b1 = tape.param_named(&format!("{prefix}.b1"));
    let w2 = tape.param_named(&format!("{prefix}.w2"));
    let b2 = tape.param_named(&format!("{prefix}.b2"));
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let o = tape.matmul(h, w2);
    tape.add_row(o, b2)
}

/// Row order that turns modality-major stacking into point-major order.
fn point_major_rows(n: usize) -> Vec<usize> {
    let mods = Modality::ALL.len();
    (0..n * mods).map(|r| (r % mods) * n + r / mods).collect()
}

/// The fused context as a `6N x h` node, point-major.
pub(crate) fn context_graph(cfg: &ModelConfig, tape: &mut Tape, features: &ItemFeatures) -> Var {
    if !cfg.use_context {
        return tape.param_named("ctx.constant");
    }
    let parts: Vec<Var> = Modality::ALL
        .iter()
        .zip(&features.modalities)
        .map(|(m, x)| {
            let x = tape.constant(x.clone());
            mlp2_graph(tape, &m.prefix(), x)
        })
        .collect();
    let stacked = tape.concat_rows(&parts);
    tape.gather_rows(stacked, &point_major_rows(cfg.boundary_points))
}

/// Normalised time for index `t` in `1..=T`.
pub fn normalized_time(t: usize, len: usize) -> f64 {
    (t - 1) as f64 / (len - 1) as f64
}

pub fn encoding_matrix(cfg: &ModelConfig) -> Matrix {
    let l = cfg.pe_frequencies;
    let mut data = Vec::with_capacity(cfg.rir_length * 2 * l);
    for t in 1..=cfg.rir_length {
        data.extend(positional_encoding(normalized_time(t, cfg.rir_length), l).expect("t in range"));
    }
    Matrix::from_vec(cfg.rir_length, 2 * l, data)
}

pub(crate) fn time_encoder_graph(cfg: &ModelConfig, tape: &mut Tape) -> Var {
    let gamma = tape.constant(encoding_matrix(cfg));
    mlp2_graph(tape, "time", gamma)
}

/// The fused context tensor `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTensor {
    pub points: usize,
    pub dim: usize,
    /// `points x 6 x dim`, row-major.
    pub values: Vec<f64>,
}

impl ContextTensor {
    pub fn get(&self, point: usize, modality: usize, k: usize) -> f64 {
        self.values[(point * Modality::ALL.len() + modality) * self.dim + k]
    }

    pub fn slot(&self, point: usize, modality: usize) -> &[f64] {
        let start = (point * Modality::ALL.len() + modality) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * alpha).collect(), ..self.clone() }
    }

    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_vec(self.points * Modality::ALL.len(), self.dim, self.values.clone())
    }
}

/// Encodes every modality of every boundary point and fuses them.
pub fn encode_contexts(model: &Model, features: &ItemFeatures) -> ContextTensor {
    let mut tape = Tape::new(&model.params);
    let c = context_graph(&model.config, &mut tape, features);
    let m = tape.value(c);
    ContextTensor { points: model.config.boundary_points, dim: m.cols, values: m.data.clone() }
}

/// Time vector for index `t` (1-based), evaluated one sample at a time.
pub fn time_vector(model: &Model, t: usize) -> Result<Vec<f64>> {
    let len = model.config.rir_length;
    if t < 1 || t > len {
        return Err(invalid(format!("time index {t} outside 1..={len}")));
    }
    let gamma = positional_encoding(normalized_time(t, len), model.config.pe_frequencies)?;
    let p = &model.params;
    let hidden: Vec<f64> = affine(&gamma, p.by_name("time.w1"), p.by_name("time.b1"))
        .into_iter()
        .map(relu)
        .collect();
    Ok(affine(&hidden, p.by_name("time.w2"), p.by_name("time.b2")))
}

/// `x * w + b` for a single row, accumulating in input order.
pub(crate) fn affine(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    debug_assert_eq!(x.len(), w.rows);
    (0..w.cols)
        .map(|j| {
            let mut acc = 0.0;
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.data[i * w.cols + j];
            }
            acc + b.data[j]
        })
        .collect()
}

/// `C_t[i, j] = <C[i, j, :], t_vec>` as an `N x 6` matrix.
pub fn condition_on(c: &ContextTensor, t_vec: &[f64]) -> Result<Matrix> {
    if t_vec.len() != c.dim {
        return Err(invalid(format!("time vector has {} values, context dim is {}", t_vec.len(), c.dim)));
    }
    let mods = Modality::ALL.len();
    let mut out = Matrix::zeros(c.points, mods);
    for i in 0..c.points {
        for j in 0..mods {
            let mut acc = 0.0;
            for (a, b) in c.slot(i, j).iter().zip(t_vec) {
                acc += a * b;
            }
            out.data[i * mods + j] = acc;
        }
    }
    Ok(out)
}

/// Spatial-temporal query at time index `t` (1-based).
pub fn time_condition(c: &ContextTensor, t: usize, model: &Model) -> Result<Matrix> {
    condition_on(c, &time_vector(model, t)?)
}
