//! Synthetic datasets: an emitter grid x receiver set x orientation set in
//! one room, rendered by the image-source oracle, with boundary contexts
//! and a seeded train/test split.
//!
//! On disk a dataset directory holds `manifest.json`, one `rir_{i}.wav`
//! (stereo 32-bit float) and one `ctx_{i}.json` per entry.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::Rir;
use crate::error::{invalid, io_err, NacfError, Result};
use crate::room::{extract_contexts, simulate_rir, BoundaryContext, Orientation, Query, RoomSpec};
use crate::wav;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Emitter grid, receiver positions and head orientations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Emitters sit at the cell centres of an `emitters_x x emitters_y`
    /// grid over the footprint shrunk by `margin` on every side.
    pub emitters_x: usize,
    pub emitters_y: usize,
    pub margin: f64,
    pub receivers: Vec<[f64; 2]>,
    pub orientations: Vec<Orientation>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            emitters_x: 10,
            emitters_y: 10,
            margin: 0.2,
            // Chosen between grid cell centres so no ear sits on an emitter.
            receivers: vec![[1.58, 1.28], [3.42, 1.28], [1.58, 2.72], [3.42, 2.72]],
            orientations: Orientation::ALL.to_vec(),
        }
    }
}

impl GridSpec {
    pub fn emitters(&self, room: &RoomSpec) -> Vec<[f64; 2]> {
        let step_x = (room.width - 2.0 * self.margin) / self.emitters_x as f64;
        let step_y = (room.length - 2.0 * self.margin) / self.emitters_y as f64;
        let mut out = Vec::with_capacity(self.emitters_x * self.emitters_y);
        for j in 0..self.emitters_y {
            for i in 0..self.emitters_x {
                out.push([
                    self.margin + (i as f64 + 0.5) * step_x,
                    self.margin + (j as f64 + 0.5) * step_y,
                ]);
            }
        }
        out
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(default = "RoomSpec::default_scene")]
    pub room: RoomSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_z")]
    pub z: f64,
    #[serde(default = "default_points")]
    pub boundary_points: usize,
    #[serde(default = "default_rays")]
    pub rays: usize,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_z() -> f64 {
    1.5
}
fn default_points() -> usize {
    4
}
fn default_rays() -> usize {
    32
}
fn default_train_ratio() -> f64 {
    0.9
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            room: RoomSpec::default_scene(),
            grid: GridSpec::default(),
            z: default_z(),
            boundary_points: default_points(),
            rays: default_rays(),
            train_ratio: default_train_ratio(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        let g = &self.grid;
        if g.emitters_x == 0 || g.emitters_y == 0 || g.receivers.is_empty() || g.orientations.is_empty() {
            return Err(invalid("grid must have at least one emitter, receiver and orientation"));
        }
        if !(g.margin >= 0.2) || 2.0 * g.margin >= self.room.width.min(self.room.length) {
            return Err(invalid("grid margin must be at least 0.2 m and leave room for emitters"));
        }
        for r in &g.receivers {
            let ok = r[0] >= g.margin && r[0] <= self.room.width - g.margin && r[1] >= g.margin && r[1] <= self.room.length - g.margin;
            if !ok {
                return Err(invalid(format!("receiver {r:?} violates the {} m wall margin", g.margin)));
            }
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return Err(invalid("train_ratio must lie in (0, 1]"));
        }
        if self.boundary_points == 0 || self.rays == 0 {
            return Err(invalid("boundary_points and rays must be positive"));
        }
        Ok(())
    }

    /// All queries in manifest order: emitter-major, then receiver, then
    /// orientation.
    pub fn queries(&self) -> Vec<Query> {
        let mut out = Vec::new();
        for e in self.grid.emitters(&self.room) {
            for r in &self.grid.receivers {
                for &o in &self.grid.orientations {
                    out.push(Query { emitter: e, receiver: *r, orientation: o, z: self.z });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub emitter: [f64; 2],
    pub receiver: [f64; 2],
    pub orientation: Orientation,
    pub file: String,
    pub context_file: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.index).collect()
    }

    pub fn query(&self, index: usize) -> Query {
        let e = &self.entries[index];
        Query { emitter: e.emitter, receiver: e.receiver, orientation: e.orientation, z: self.config.z }
    }
}

/// Seeded split of `n` entries: a shuffled index order whose first
/// `round(ratio * n)` entries are training entries.
pub fn split_assignment(n: usize, ratio: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * n as f64).round() as usize;
    let mut out = vec![Split::Test; n];
    for &i in &order[..n_train.min(n)] {
        out[i] = Split::Train;
    }
    out
}

/// One fully materialised dataset entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub query: Query,
    pub contexts: Vec<BoundaryContext>,
    /// Ground truth as stored on disk (rounded to `f32`).
    pub rir: Rir,
    pub split: Split,
}

/// A dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Renders every entry with the oracle. Entries are independent and
    /// computed in parallel; results keep manifest order.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let queries = config.queries();
        let splits = split_assignment(queries.len(), config.train_ratio, config.seed);
        let samples = queries
            .par_iter()
            .zip(splits.par_iter())
            .map(|(q, &split)| {
                let rir = wav::quantize(&simulate_rir(&config.room, q)?);
                let contexts = extract_contexts(&config.room, q, config.boundary_points, config.rays)?;
                Ok(Sample { query: *q, contexts, rir, split })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), samples })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn manifest(&self) -> Manifest {
        let entries = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestEntry {
                index: i,
                emitter: s.query.emitter,
                receiver: s.query.receiver,
                orientation: s.query.orientation,
                file: format!("rir_{i}.wav"),
                context_file: format!("ctx_{i}.json"),
                split: s.split,
            })
            .collect();
        Manifest { version: MANIFEST_VERSION, config: self.config.clone(), entries }
    }

    /// Writes the dataset directory. The manifest is written last, once.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = self.manifest();
        self.samples
            .par_iter()
            .zip(manifest.entries.par_iter())
            .try_for_each(|(s, e)| -> Result<()> {
                wav::write(&dir.join(&e.file), &s.rir)?;
                let ctx_path = dir.join(&e.context_file);
                let json = serde_json::to_string(&s.contexts).expect("contexts serialise");
                fs::write(&ctx_path, json).map_err(io_err(ctx_path))
            })?;
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, json).map_err(io_err(path))?;
        Ok(manifest)
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => invalid(format!("no dataset manifest at {}", path.display())),
            _ => NacfError::Io { path: path.clone(), source: e },
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| NacfError::Format { path: path.clone(), reason: e.to_string() })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(NacfError::Format { path, reason: format!("unsupported manifest version {}", manifest.version) });
        }
        Ok(manifest)
    }

    /// Loads a dataset directory written by [`Dataset::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let samples = manifest
            .entries
            .par_iter()
            .map(|e| {
                let rir = wav::read(&dir.join(&e.file))?;
                let ctx_path: PathBuf = dir.join(&e.context_file);
                let text = fs::read_to_string(&ctx_path).map_err(io_err(&ctx_path))?;
                let contexts: Vec<BoundaryContext> = serde_json::from_str(&text)
                    .map_err(|err| NacfError::Format { path: ctx_path.clone(), reason: err.to_string() })?;
                Ok(Sample { query: manifest.query(e.index), contexts, rir, split: e.split })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: manifest.config, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        let mut room = RoomSpec::default_scene();
        room.rir_length = 256;
        room.max_image_order = 2;
        DatasetConfig {
            room,
            grid: GridSpec { emitters_x: 2, emitters_y: 2, orientations: vec![Orientation::Deg0, Orientation::Deg90], ..GridSpec::default() },
            rays: 4,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn default_grid_counts() {
        let cfg = DatasetConfig::default();
        let q = cfg.queries();
        assert_eq!(q.len(), 1600);
        let s = split_assignment(q.len(), 0.9, 7);
        assert_eq!(s.iter().filter(|x| **x == Split::Train).count(), 1440);
        for e in cfg.grid.emitters(&cfg.room) {
            assert!(e[0] >= 0.2 && e[0] <= 4.8 && e[1] >= 0.2 && e[1] <= 3.8);
        }
    }

    #[test]
    fn split_arithmetic() {
        let s = split_assignment(10, 0.5, 1);
        assert_eq!(s.iter().filter(|x| **x == Split::Train).count(), 5);
        assert_eq!(split_assignment(10, 0.5, 1), s);
        assert_ne!(split_assignment(40, 0.5, 1), split_assignment(40, 0.5, 2));
    }

    #[test]
    fn write_load_round_trip() {
        let cfg = tiny();
        let ds = Dataset::generate(&cfg).unwrap();
        assert_eq!(ds.samples.len(), 32);
        let dir = tempfile::tempdir().unwrap();
        let m = ds.write(dir.path()).unwrap();
        assert_eq!(m.entries[3].file, "rir_3.wav");
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let again = tempfile::tempdir().unwrap();
        Dataset::generate(&cfg).unwrap().write(again.path()).unwrap();
        let read = |d: &Path| fs::read(d.join(MANIFEST_FILE)).unwrap();
        assert_eq!(read(dir.path()), read(again.path()));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = tiny();
        cfg.grid.margin = 0.1;
        assert!(Dataset::generate(&cfg).is_err());
        let mut cfg = tiny();
        cfg.train_ratio = 0.0;
        assert!(cfg.validate().is_err());
        assert!(matches!(Dataset::load(Path::new("/nonexistent/dir")), Err(NacfError::InvalidArgument(_))));
    }
}
