//! Model configuration, parameter layout and the per-query forward graph
//! that chains the context encoders, the time conditioning, the field MLP
//! and (optionally) the temporal correlation stack.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{self, ItemFeatures, Modality};
use crate::dsp::Rir;
use crate::error::{invalid, NacfError, Result};
use crate::field;
use crate::matrix::Matrix;
use crate::params::{read_checkpoint, write_checkpoint, BlockId, ParamSet};
use crate::tape::{Tape, Var};

/// Architecture and scene-dependent sizes. Paper-scale widths are the
/// defaults; desk-scale experiments shrink them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `h`: width of every context vector, the time vector and the
    /// orientation/channel embeddings.
    pub context_dim: usize,
    /// Hidden width of the 2-layer encoder projections.
    pub encoder_hidden: usize,
    /// Width of the four field MLP layers.
    pub field_width: usize,
    /// `L`, number of positional-encoding frequencies.
    pub pe_frequencies: usize,
    /// `N`, boundary sample points.
    pub boundary_points: usize,
    /// `K`, depth-scan rays per point.
    pub rays: usize,
    /// `P`, frequency bands of the acoustic coefficients.
    pub bands: usize,
    /// Size of the material vocabulary for the one-hot descriptor.
    pub materials: usize,
    /// `T`, rendered samples per channel.
    pub rir_length: usize,
    pub sample_rate: u32,
    /// When false, the encoded contexts are replaced by one learned
    /// constant vector per (point, modality) slot.
    #[serde(default = "yes")]
    pub use_context: bool,
    /// Apply the temporal correlation stack at render time.
    #[serde(default)]
    pub apply_temporal: bool,
    /// Hidden channel count of the temporal correlation stack.
    #[serde(default = "default_conv_channels")]
    pub conv_channels: usize,
    /// Std-dev of the noise added to the identity-initialised conv taps.
    #[serde(default = "default_conv_noise")]
    pub conv_init_noise: f64,
}

fn yes() -> bool {
    true
}

fn default_conv_channels() -> usize {
    4
}

fn default_conv_noise() -> f64 {
    0.01
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_dim: 256,
            encoder_hidden: 256,
            field_width: 256,
            pe_frequencies: 10,
            boundary_points: 4,
            rays: 32,
            bands: 3,
            materials: 5,
            rir_length: 4096,
            sample_rate: 16000,
            use_context: true,
            apply_temporal: false,
            conv_channels: default_conv_channels(),
            conv_init_noise: default_conv_noise(),
        }
    }
}

impl ModelConfig {
    /// Compact widths for single-machine experiments on the default scene:
    /// a 100-epoch run over the default dataset fits in half an hour on a
    /// single core.
    pub fn desk_scale() -> Self {
        Self {
            context_dim: 8,
            encoder_hidden: 8,
            field_width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("context_dim", self.context_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("field_width", self.field_width),
            ("pe_frequencies", self.pe_frequencies),
            ("boundary_points", self.boundary_points),
            ("rays", self.rays),
            ("bands", self.bands),
            ("materials", self.materials),
            ("rir_length", self.rir_length),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("model config field {name} must be positive")));
        }
        if self.rir_length < 2 {
            return Err(invalid("rir_length must be at least 2"));
        }
        if self.conv_channels < 4 {
            return Err(invalid("conv_channels must be at least 4"));
        }
        Ok(())
    }

    /// Number of scalars in the spatial-temporal query, `N * 6`.
    pub fn query_width(&self) -> usize {
        self.boundary_points * Modality::ALL.len()
    }
}

/// All trainable state of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// He-style uniform initialisation, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub(crate) fn kaiming_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    use rand::Rng;
    let bound = (6.0 / rows as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect(),
    )
}

/// Adds a 2-layer projection `in_dim -> hidden -> out_dim` under `prefix`.
pub(crate) fn add_mlp2(params: &mut ParamSet, prefix: &str, dims: (usize, usize, usize), rng: &mut ChaCha8Rng) {
    let (in_dim, hidden, out_dim) = dims;
    params.add(format!("{prefix}.w1"), kaiming_uniform(in_dim, hidden, rng));
    params.add(format!("{prefix}.b1"), Matrix::zeros(1, hidden));
    params.add(format!("{prefix}.w2"), kaiming_uniform(hidden, out_dim, rng));
    params.add(format!("{prefix}.b2"), Matrix::zeros(1, out_dim));
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        context::add_params(&config, &mut params, &mut rng);
        field::add_params(&config, &mut params, &mut rng);
        Ok(Self { config, params })
    }

    /// Block ids of the temporal correlation stack.
    pub fn conv_blocks(&self) -> Vec<BlockId> {
        self.params
            .ids()
            .filter(|id| self.params.blocks()[id.0].name.starts_with(field::CONV_PREFIX))
            .collect()
    }

    /// Every block except the temporal correlation stack.
    pub fn main_blocks(&self) -> Vec<BlockId> {
        let conv = self.conv_blocks();
        self.params.ids().filter(|id| !conv.contains(id)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.config).expect("config serialises");
        write_checkpoint(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = read_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_str(&meta).map_err(|e| NacfError::Format {
            path: path.to_path_buf(),
            reason: format!("bad metadata: {e}"),
        })?;
        let reference = Model::new(config.clone(), 0)?;
        let layout_matches = reference.params.len() == params.len()
            && reference
                .params
                .blocks()
                .iter()
                .zip(params.blocks())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !layout_matches {
            return Err(NacfError::Format {
                path: path.to_path_buf(),
                reason: "parameter layout does not match the stored config".into(),
            });
        }
        Ok(Self { config, params })
    }

    /// The `T x h` time vectors for every time index, as a tape node.
    pub fn time_vectors_graph(&self, tape: &mut Tape) -> Var {
        context::time_encoder_graph(&self.config, tape)
    }

    pub fn time_vectors(&self) -> Matrix {
        let mut tape = Tape::new(&self.params);
        let v = self.time_vectors_graph(&mut tape);
        tape.value(v).clone()
    }

    /// Forward graph for one query given the time vectors as node `tvec`.
    /// Returns the `2 x T` rendered response (after the temporal stack when
    /// `temporal` is set).
    pub fn item_graph(&self, tape: &mut Tape, features: &ItemFeatures, tvec: Var, temporal: bool) -> Var {
        let cmat = context::context_graph(&self.config, tape, features);
        let signal = field::field_graph(&self.config, tape, tvec, cmat, features.orientation);
        if temporal {
            field::temporal_graph(&self.config, tape, signal)
        } else {
            signal
        }
    }

    /// Renders the binaural response for one query, reusing precomputed
    /// time vectors.
    pub fn render_with(&self, features: &ItemFeatures, tvec: &Matrix) -> Rir {
        let mut tape = Tape::new(&self.params);
        let tv = tape.constant(tvec.clone());
        let out = self.item_graph(&mut tape, features, tv, self.config.apply_temporal);
        rir_from_rows(tape.value(out), self.config.sample_rate)
    }

    pub fn render(&self, features: &ItemFeatures) -> Rir {
        self.render_with(features, &self.time_vectors())
    }
}

/// Converts a `2 x T` matrix into an impulse response. Non-finite samples
/// are not expected from a finite model and are mapped to zero.
pub fn rir_from_rows(m: &Matrix, sample_rate: u32) -> Rir {
    let clean = |row: &[f64]| row.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
    Rir::new(clean(m.row(0)), clean(m.row(1)), sample_rate).expect("two equal non-empty rows")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { field_width: 0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { conv_channels: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn paper_widths_and_block_split() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        assert_eq!(m.params.by_name("emb.orientation").shape(), (4, 256));
        assert_eq!(m.params.by_name("emb.channel").shape(), (2, 256));
        assert_eq!(m.params.by_name("field.l1.w").shape(), (24, 256));
        assert_eq!(m.params.by_name("field.l3.w").shape(), (256 + 24, 256));
        assert_eq!(m.params.by_name("time.w1").shape(), (20, 256));
        assert_eq!(m.conv_blocks().len(), 6);
        assert_eq!(m.conv_blocks().len() + m.main_blocks().len(), m.params.len());
    }

    #[test]
    fn same_seed_same_init() {
        let a = Model::new(ModelConfig::desk_scale(), 9).unwrap();
        let b = Model::new(ModelConfig::desk_scale(), 9).unwrap();
        let c = Model::new(ModelConfig::desk_scale(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_roundtrip_and_layout_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = Model::new(ModelConfig::desk_scale(), 2).unwrap();
        m.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        m.params.round_to_f32();
        assert_eq!(loaded, m);

        let mut other = ModelConfig::desk_scale();
        other.use_context = false;
        let wrong = Model::new(other, 2).unwrap();
        let meta = serde_json::to_string(&m.config).unwrap();
        crate::params::write_checkpoint(&path, &meta, &wrong.params).unwrap();
        assert!(Model::load(&path).is_err());
        assert!(Model::load(&dir.path().join("missing")).is_err());
    }
}
