//! Two-stage training, ablation toggles and few-shot subsampling.
//!
//! Stage `main` optimises the context encoders, the time encoder, the field
//! and the embeddings; stage `refine` loads a main checkpoint and updates
//! only the temporal correlation stack. Both stages minimise the same
//! multi-scale loss with Adam and are deterministic given the seed: the
//! epoch shuffles come from one seeded generator, batch items may be
//! processed in parallel but their gradients are summed in batch order.
//!
//! Files written to the output directory:
//!
//! | stage  | checkpoints                               | log                      |
//! |--------|-------------------------------------------|--------------------------|
//! | main   | `best.ckpt` (every improvement), `final.ckpt` | `train_log_main.jsonl`   |
//! | refine | `refine_best.ckpt`, `refine_final.ckpt`   | `train_log_refine.jsonl` |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::context::ItemFeatures;
use crate::dataset::{Dataset, Manifest, Split};
use crate::dsp::Rir;
use crate::error::{invalid, io_err, NacfError, Result};
use crate::field;
use crate::losses::{loss_graph, LossConfig, LossTargets, ScaleLoss};
use crate::matrix::Matrix;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::params::BlockId;
use crate::tape::Tape;

pub const MAIN_BEST: &str = "best.ckpt";
pub const MAIN_FINAL: &str = "final.ckpt";
pub const REFINE_BEST: &str = "refine_best.ckpt";
pub const REFINE_FINAL: &str = "refine_final.ckpt";
pub const MAIN_LOG: &str = "train_log_main.jsonl";
pub const REFINE_LOG: &str = "train_log_refine.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Main,
    Refine,
}

/// Component toggles. All on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Off: encoded boundary contexts are replaced by a learned constant
    /// vector per (point, modality) slot.
    #[serde(default = "yes")]
    pub use_context: bool,
    /// Off: the loss uses only the middle STFT scale, same `lambda`.
    #[serde(default = "yes")]
    pub use_multiscale: bool,
    /// On: an experiment runs the refine stage after the main stage and
    /// renders through the temporal correlation stack.
    #[serde(default)]
    pub use_temporal: bool,
}

fn yes() -> bool {
    true
}

impl Default for Ablations {
    fn default() -> Self {
        Self { use_context: true, use_multiscale: true, use_temporal: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_stage")]
    pub stage: Stage,
    #[serde(default)]
    pub ablations: Ablations,
    /// Fraction of the training split used (few-shot runs).
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Network sizes. `use_context` here is overridden by the ablation.
    #[serde(default = "ModelConfig::desk_scale")]
    pub model: ModelConfig,
}

fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    5e-4
}
fn default_stage() -> Stage {
    Stage::Main
}
fn default_fraction() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            stage: Stage::Main,
            ablations: Ablations::default(),
            train_fraction: 1.0,
            seed: 0,
            model: ModelConfig::desk_scale(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be positive and finite"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(invalid(format!("train_fraction {} outside (0, 1]", self.train_fraction)));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { use_context: self.ablations.use_context, apply_temporal: false, ..self.model.clone() }
    }

    pub fn loss_config(&self) -> LossConfig {
        if self.ablations.use_multiscale {
            LossConfig::default()
        } else {
            LossConfig::single_scale()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| NacfError::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One epoch of training as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    /// 1-based.
    pub epoch: usize,
    /// Mean item loss over the epoch, each item evaluated before the
    /// update of its batch.
    pub loss: f64,
    pub per_scale: Vec<ScaleLoss>,
    pub steps: usize,
    pub improved: bool,
    pub wall_time_sec: f64,
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Epoch(EpochLog),
    TestReport(MetricsReport),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub test_report: Option<MetricsReport>,
}

impl TrainLog {
    pub fn total_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.steps).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let records = self
            .epochs
            .iter()
            .cloned()
            .map(LogRecord::Epoch)
            .chain(self.test_report.clone().map(LogRecord::TestReport));
        for r in records {
            out.push_str(&serde_json::to_string(&r).expect("log record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let mut log = TrainLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                LogRecord::Epoch(e) => log.epochs.push(e),
                LogRecord::TestReport(r) => log.test_report = Some(r),
            }
        }
        Ok(log)
    }
}

/// Encoder inputs and ground truth for one dataset entry.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub features: ItemFeatures,
    pub target: Rir,
    /// Loss targets of `target` for the first loss configuration used with
    /// this item; every later step with that configuration reuses them.
    targets: OnceLock<(LossConfig, Arc<LossTargets>)>,
}

impl TrainItem {
    pub fn new(features: ItemFeatures, target: Rir) -> Self {
        Self { features, target, targets: OnceLock::new() }
    }

    /// Loss targets of the ground truth under `cfg`.
    pub fn loss_targets(&self, cfg: &LossConfig) -> Result<Arc<LossTargets>> {
        if let Some((cached_cfg, t)) = self.targets.get() {
            if cached_cfg == cfg {
                return Ok(t.clone());
            }
            return Ok(Arc::new(LossTargets::new(&self.target, cfg)?));
        }
        let t = Arc::new(LossTargets::new(&self.target, cfg)?);
        // A concurrent caller may have won the race; either value is identical.
        let _ = self.targets.set((cfg.clone(), t.clone()));
        Ok(t)
    }
}

pub fn prepare_items(ds: &Dataset, indices: &[usize], cfg: &ModelConfig) -> Result<Vec<TrainItem>> {
    let diagonal = ds.config.room.footprint_diagonal();
    indices
        .iter()
        .map(|&i| {
            let s = ds.samples.get(i).ok_or_else(|| invalid(format!("sample index {i} out of range")))?;
            if s.rir.len() != cfg.rir_length || s.rir.sample_rate() != cfg.sample_rate {
                return Err(invalid(format!(
                    "sample {i} has {} samples at {} Hz, model expects {} at {} Hz",
                    s.rir.len(),
                    s.rir.sample_rate(),
                    cfg.rir_length,
                    cfg.sample_rate
                )));
            }
            Ok(TrainItem::new(
                ItemFeatures::from_contexts(&s.contexts, s.query.orientation, diagonal, cfg)?,
                s.rir.clone(),
            ))
        })
        .collect()
}

/// What a batch evaluation feeds the loss with.
#[derive(Debug, Clone, Copy)]
pub enum Forward<'a> {
    /// The full field, optionally followed by the temporal stack.
    Field { temporal: bool },
    /// Precomputed `2 x T` field outputs (one per item) passed through the
    /// temporal stack only.
    Cached(&'a [Matrix]),
}

/// Loss and (optionally) gradient of one batch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    /// Mean item loss.
    pub loss: f64,
    pub item_losses: Vec<f64>,
    pub per_scale: Vec<ScaleLoss>,
    /// Gradient of the mean loss for every parameter block (empty when not
    /// requested).
    pub grads: Vec<Matrix>,
}

struct ItemEval {
    loss: f64,
    per_scale: Vec<ScaleLoss>,
    params: Vec<Matrix>,
    dtime: Option<Matrix>,
}

/// Evaluates the batch `items[batch[..]]`. Items run in parallel; every
/// reduction is done afterwards in batch order.
pub fn evaluate_batch(
    model: &Model,
    items: &[TrainItem],
    batch: &[usize],
    loss_cfg: &LossConfig,
    forward: Forward,
    with_grad: bool,
) -> Result<BatchEval> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut time_tape = Tape::new(&model.params);
    let time_node = match forward {
        Forward::Field { .. } => Some(model.time_vectors_graph(&mut time_tape)),
        Forward::Cached(_) => None,
    };
    let time_values = time_node.map(|v| time_tape.value(v).clone());

    let evals: Vec<Result<ItemEval>> = batch
        .par_iter()
        .map(|&i| {
            let item = &items[i];
            let mut tape = Tape::new(&model.params);
            let signal = match forward {
                Forward::Field { temporal } => {
                    let tv = tape.input(time_values.clone().expect("field mode has time vectors"));
                    model.item_graph(&mut tape, &item.features, tv, temporal)
                }
                Forward::Cached(fields) => {
                    let x = tape.constant(fields[i].clone());
                    field::temporal_graph(&model.config, &mut tape, x)
                }
            };
            let targets = item.loss_targets(loss_cfg)?;
            let nodes = loss_graph(&mut tape, signal, &targets, loss_cfg);
            let loss = tape.value(nodes.total).data[0];
            let per_scale = nodes
                .per_scale
                .iter()
                .map(|&(m, d)| ScaleLoss { magnitude: tape.value(m).data[0], decay: tape.value(d).data[0] })
                .collect();
            if !loss.is_finite() {
                return Err(NacfError::NonFinite { op_index: nodes.total.index(), op: "loss" });
            }
            let (params, dtime) = if with_grad {
                let mut g = tape.backward(nodes.total)?;
                let dtime = if g.inputs.is_empty() { None } else { Some(g.inputs.swap_remove(0)) };
                (g.params, dtime)
            } else {
                (Vec::new(), None)
            };
            Ok(ItemEval { loss, per_scale, params, dtime })
        })
        .collect();

    let n = batch.len() as f64;
    let mut item_losses = Vec::with_capacity(batch.len());
    let mut per_scale = vec![ScaleLoss { magnitude: 0.0, decay: 0.0 }; loss_cfg.scales.len()];
    let mut grads: Vec<Matrix> = if with_grad { model.params.zeros_like() } else { Vec::new() };
    let mut dtime: Option<Matrix> = None;
    for e in evals {
        let e = e?;
        item_losses.push(e.loss);
        for (acc, s) in per_scale.iter_mut().zip(&e.per_scale) {
            acc.magnitude += s.magnitude / n;
            acc.decay += s.decay / n;
        }
        for (acc, g) in grads.iter_mut().zip(&e.params) {
            acc.add_assign(g);
        }
        if let Some(d) = e.dtime {
            match &mut dtime {
                Some(acc) => acc.add_assign(&d),
                None => dtime = Some(d),
            }
        }
    }
    if let (Some(node), Some(d)) = (time_node, dtime) {
        let g = time_tape.backward_seeded(node, d)?;
        for (acc, gt) in grads.iter_mut().zip(&g.params) {
            acc.add_assign(gt);
        }
    }
    for g in &mut grads {
        g.data.iter_mut().for_each(|v| *v /= n);
    }
    let loss = item_losses.iter().sum::<f64>() / n;
    Ok(BatchEval { loss, item_losses, per_scale, grads })
}

/// Result of one training stage.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step, rounded as stored in the final
    /// checkpoint.
    pub model: Model,
    pub log: TrainLog,
    /// Mean loss of the very first batch, before any update.
    pub first_batch_loss: f64,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Per-epoch visiting orders: every epoch reshuffles the previous order
/// with one generator seeded once per run.
#[derive(Debug, Clone)]
pub struct EpochShuffler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl EpochShuffler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect() }
    }

    pub fn next_order(&mut self) -> Vec<usize> {
        self.order.shuffle(&mut self.rng);
        self.order.clone()
    }
}

struct StageFiles {
    best: &'static str,
    last: &'static str,
    log: &'static str,
}

/// Seeded, prefix-nested subset of `train` of size `round(fraction * n)`.
pub fn subsample_indices(train: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(train.to_vec());
    }
    let size = (fraction * train.len() as f64).round() as usize;
    if size == 0 {
        return Err(invalid(format!("fraction {fraction} of {} training entries selects nothing", train.len())));
    }
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f5a7));
    let mut subset = order[..size].to_vec();
    subset.sort_unstable();
    Ok(subset)
}

/// The manifest with its train split reduced by [`subsample_indices`]; the
/// test split is untouched.
pub fn subsample_training(manifest: &Manifest, fraction: f64, seed: u64) -> Result<Manifest> {
    let keep = subsample_indices(&manifest.indices(Split::Train), fraction, seed)?;
    let mut out = manifest.clone();
    out.entries.retain(|e| e.split == Split::Test || keep.binary_search(&e.index).is_ok());
    Ok(out)
}

/// Training indices after applying `train_fraction`.
pub fn training_indices(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<usize>> {
    subsample_indices(&ds.indices(Split::Train), cfg.train_fraction, cfg.seed)
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(log.to_jsonl().as_bytes()).map_err(io_err(path))
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    mut model: Model,
    items: &[TrainItem],
    cfg: &TrainConfig,
    trainable: Vec<BlockId>,
    forward: Forward,
    out_dir: &Path,
    files: StageFiles,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    if items.is_empty() {
        return Err(invalid("no training items"));
    }
    let loss_cfg = cfg.loss_config();
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(adam_cfg, &model.params, trainable);
    let mut shuffler = EpochShuffler::new(items.len(), cfg.seed);
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    let mut first_batch_loss = None;
    let best_path = out_dir.join(files.best);
    let final_path = out_dir.join(files.last);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = shuffler.next_order();
        let mut loss_sum = 0.0;
        let mut per_scale = vec![ScaleLoss { magnitude: 0.0, decay: 0.0 }; loss_cfg.scales.len()];
        let mut steps = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let eval = evaluate_batch(&model, items, batch, &loss_cfg, forward, true).map_err(|e| match e {
                NacfError::NonFinite { .. } => NacfError::NonFiniteLoss { epoch, batch: b + 1 },
                other => other,
            })?;
            first_batch_loss.get_or_insert(eval.loss);
            let w = batch.len() as f64 / items.len() as f64;
            loss_sum += eval.loss * w;
            for (acc, s) in per_scale.iter_mut().zip(&eval.per_scale) {
                acc.magnitude += s.magnitude * w;
                acc.decay += s.decay * w;
            }
            adam.step(&mut model.params, &eval.grads)?;
            steps += 1;
        }
        let improved = loss_sum < best;
        if improved {
            best = loss_sum;
            model.save(&best_path)?;
        }
        log.epochs.push(EpochLog {
            stage: cfg.stage,
            epoch,
            loss: loss_sum,
            per_scale,
            steps,
            improved,
            wall_time_sec: started.elapsed().as_secs_f64(),
        });
    }
    model.save(&final_path)?;
    model.params.round_to_f32();
    write_log(&out_dir.join(files.log), &log)?;
    Ok(TrainOutcome {
        model,
        log,
        first_batch_loss: first_batch_loss.expect("at least one batch"),
        best_checkpoint: best_path,
        final_checkpoint: final_path,
    })
}

/// Stage 1: everything except the temporal stack is trained; the stack
/// keeps its initial values and is not applied.
pub fn train_stage_main(ds: &Dataset, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Main {
        return Err(invalid("train_stage_main needs stage = main"));
    }
    let model = Model::new(cfg.model_config(), cfg.seed)?;
    let items = prepare_items(ds, &training_indices(ds, cfg)?, &model.config)?;
    let trainable = model.main_blocks();
    let files = StageFiles { best: MAIN_BEST, last: MAIN_FINAL, log: MAIN_LOG };
    run_stage(model, &items, cfg, trainable, Forward::Field { temporal: false }, out_dir, files)
}

/// Field outputs of `model` (without the temporal stack) for every item.
pub fn field_outputs(model: &Model, items: &[TrainItem]) -> Vec<Matrix> {
    let tvec = model.time_vectors();
    items
        .par_iter()
        .map(|it| {
            let mut tape = Tape::new(&model.params);
            let tv = tape.constant(tvec.clone());
            let out = model.item_graph(&mut tape, &it.features, tv, false);
            tape.value(out).clone()
        })
        .collect()
}

/// Stage 2: loads the stage-1 checkpoint at `main_checkpoint` and trains
/// only the temporal stack. The field is frozen, so its outputs are
/// computed once and reused for every step.
pub fn train_stage_refine(ds: &Dataset, cfg: &TrainConfig, main_checkpoint: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Refine {
        return Err(invalid("train_stage_refine needs stage = refine"));
    }
    if !main_checkpoint.is_file() {
        return Err(invalid(format!("main-stage checkpoint {} does not exist", main_checkpoint.display())));
    }
    let mut model = Model::load(main_checkpoint)?;
    model.config.apply_temporal = true;
    let items = prepare_items(ds, &training_indices(ds, cfg)?, &model.config)?;
    let frozen = model.main_blocks();
    let before: Vec<[u8; 32]> = frozen.iter().map(|&id| model.params.block_digest(id)).collect();
    let fields = field_outputs(&model, &items);
    let trainable = model.conv_blocks();
    let files = StageFiles { best: REFINE_BEST, last: REFINE_FINAL, log: REFINE_LOG };
    let outcome = run_stage(model, &items, cfg, trainable, Forward::Cached(&fields), out_dir, files)?;
    let after: Vec<[u8; 32]> = frozen.iter().map(|&id| outcome.model.params.block_digest(id)).collect();
    assert_eq!(before, after, "refine stage modified a frozen block");
    Ok(outcome)
}

/// Renders `indices` of the dataset in parallel and scores them against
/// the ground truth.
pub fn evaluate_model(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<MetricsReport> {
    let pairs = render_pairs(model, ds, indices)?;
    evaluate(&pairs)
}

/// `(ground truth, prediction)` for each index.
pub fn render_pairs(model: &Model, ds: &Dataset, indices: &[usize]) -> Result<Vec<(Rir, Rir)>> {
    let items = prepare_items(ds, indices, &model.config)?;
    let tvec = model.time_vectors();
    Ok(items
        .par_iter()
        .map(|it| (it.target.clone(), model.render_with(&it.features, &tvec)))
        .collect())
}

/// A complete experiment: main stage, optional refine stage, test report.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub main: TrainOutcome,
    pub refine: Option<TrainOutcome>,
    /// Test metrics of the main-stage final model.
    pub main_report: MetricsReport,
    /// Test metrics of the model the experiment delivers (refined when
    /// `use_temporal` is on).
    pub report: MetricsReport,
}

/// Runs the stages selected by `cfg.ablations` and evaluates on the test
/// split. The final test reports are appended to the stage logs.
pub fn run_experiment(ds: &Dataset, cfg: &TrainConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let test = ds.indices(Split::Test);
    let main_cfg = TrainConfig { stage: Stage::Main, ..cfg.clone() };
    let mut main = train_stage_main(ds, &main_cfg, out_dir)?;
    let main_report = evaluate_model(&main.model, ds, &test)?;
    main.log.test_report = Some(main_report.clone());
    write_log(&out_dir.join(MAIN_LOG), &main.log)?;
    let (refine, report) = if cfg.ablations.use_temporal {
        let refine_cfg = TrainConfig { stage: Stage::Refine, ..cfg.clone() };
        let mut r = train_stage_refine(ds, &refine_cfg, &main.final_checkpoint, out_dir)?;
        let report = evaluate_model(&r.model, ds, &test)?;
        r.log.test_report = Some(report.clone());
        write_log(&out_dir.join(REFINE_LOG), &r.log)?;
        (Some(r), report)
    } else {
        (None, main_report.clone())
    };
    Ok(ExperimentOutcome { main, refine, main_report, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetConfig, GridSpec};
    use crate::room::{Orientation, RoomSpec};

    pub(crate) fn toy_dataset(emitters: usize) -> Dataset {
        let mut room = RoomSpec::default_scene();
        room.rir_length = 2048;
        room.max_image_order = 3;
        let cfg = DatasetConfig {
            room,
            grid: GridSpec {
                emitters_x: emitters,
                emitters_y: 2,
                receivers: vec![[1.58, 1.28], [3.42, 2.72]],
                orientations: vec![Orientation::Deg0, Orientation::Deg180],
                ..GridSpec::default()
            },
            rays: 8,
            train_ratio: 0.5,
            ..DatasetConfig::default()
        };
        Dataset::generate(&cfg).unwrap()
    }

    fn toy_config(epochs: usize) -> TrainConfig {
        let model = ModelConfig {
            context_dim: 4,
            encoder_hidden: 4,
            field_width: 4,
            pe_frequencies: 3,
            rays: 8,
            rir_length: 2048,
            ..ModelConfig::desk_scale()
        };
        TrainConfig { epochs, model, ..TrainConfig::default() }
    }

    fn small_loss() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn config_json_uses_field_names() {
        let cfg = TrainConfig::default();
        let v: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        for key in ["epochs", "batch_size", "lr", "stage", "ablations", "train_fraction", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["stage"], "main");
        assert_eq!(v["ablations"]["use_multiscale"], true);
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "stage": "refine"}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.batch_size, 32);
        assert_eq!(parsed.stage, Stage::Refine);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        let bad = TrainConfig { train_fraction: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { train_fraction: 1.5, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ablations_select_model_and_loss() {
        let mut cfg = TrainConfig::default();
        cfg.ablations.use_multiscale = false;
        cfg.ablations.use_context = false;
        assert_eq!(cfg.loss_config().scales.len(), 1);
        assert_eq!(cfg.loss_config().scales[0].window, 600);
        assert_eq!(cfg.loss_config().lambda, LossConfig::default().lambda);
        assert!(!cfg.model_config().use_context);
    }

    #[test]
    fn subsample_sizes_and_nesting() {
        let train: Vec<usize> = (0..1440).map(|i| i * 2 + 1).collect();
        assert_eq!(subsample_indices(&train, 1.0, 3).unwrap(), train);
        let five = subsample_indices(&train, 0.05, 3).unwrap();
        assert_eq!(five.len(), 72);
        let ten = subsample_indices(&train, 0.10, 3).unwrap();
        assert!(five.iter().all(|i| ten.contains(i)));
        assert_eq!(five, subsample_indices(&train, 0.05, 3).unwrap());
        assert!(subsample_indices(&train[..5], 0.05, 3).is_err());
        assert!(subsample_indices(&train, 0.0, 3).is_err());
    }

    #[test]
    fn batch_gradient_matches_finite_difference() {
        let ds = toy_dataset(2);
        let cfg = toy_config(1);
        let model = Model::new(cfg.model_config(), 4).unwrap();
        let items = prepare_items(&ds, &[0, 1, 2], &model.config).unwrap();
        let loss = small_loss();
        let fwd = Forward::Field { temporal: false };
        let eval = evaluate_batch(&model, &items, &[2, 0], &loss, fwd, true).unwrap();
        assert_eq!(eval.item_losses.len(), 2);
        for name in ["time.w1", "field.l2.w", "ctx.depth.w2", "emb.channel"] {
            let id = model.params.id(name);
            let h = 1e-5;
            let mut plus = model.clone();
            plus.params.get_mut(id).data[1] += h;
            let mut minus = model.clone();
            minus.params.get_mut(id).data[1] -= h;
            let lp = evaluate_batch(&plus, &items, &[2, 0], &loss, fwd, false).unwrap().loss;
            let lm = evaluate_batch(&minus, &items, &[2, 0], &loss, fwd, false).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = eval.grads[id.0].data[1];
            assert!((fd - an).abs() <= 1e-4 * (1.0 + an.abs()), "{name}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn one_step_per_small_epoch_and_determinism() {
        let ds = toy_dataset(2);
        let cfg = toy_config(1);
        let train = ds.indices(Split::Train);
        assert_eq!(train.len(), 8);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = train_stage_main(&ds, &cfg, a.path()).unwrap();
        let rb = train_stage_main(&ds, &cfg, b.path()).unwrap();
        assert_eq!(ra.log.total_steps(), 1);
        assert_eq!(ra.first_batch_loss, rb.first_batch_loss);
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), MAIN_FINAL), read(b.path(), MAIN_FINAL));
        assert_eq!(read(a.path(), MAIN_BEST), read(b.path(), MAIN_BEST));
        let log = TrainLog::from_jsonl(&String::from_utf8(read(a.path(), MAIN_LOG)).unwrap()).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert!(log.epochs[0].loss.is_finite());
    }

    #[test]
    fn refine_freezes_field_and_starts_at_main_loss() {
        let ds = toy_dataset(2);
        let mut cfg = toy_config(2);
        cfg.model.conv_init_noise = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let refine_cfg = TrainConfig { stage: Stage::Refine, ..cfg.clone() };
        let missing = train_stage_refine(&ds, &refine_cfg, &dir.path().join(MAIN_FINAL), dir.path());
        assert!(matches!(missing, Err(NacfError::InvalidArgument(_))));

        let main = train_stage_main(&ds, &cfg, dir.path()).unwrap();
        let refined = train_stage_refine(&ds, &refine_cfg, &main.final_checkpoint, dir.path()).unwrap();
        for id in main.model.main_blocks() {
            assert_eq!(main.model.params.block_digest(id), refined.model.params.block_digest(id));
        }
        assert!(refined.model.conv_blocks().iter().any(|&id| main.model.params.get(id) != refined.model.params.get(id)));

        // The first refine batch is the first batch of the same seeded order.
        let items = prepare_items(&ds, &training_indices(&ds, &cfg).unwrap(), &main.model.config).unwrap();
        let order = EpochShuffler::new(items.len(), cfg.seed).next_order();
        let first = &order[..cfg.batch_size.min(order.len())];
        let fwd = Forward::Field { temporal: false };
        let main_loss = evaluate_batch(&main.model, &items, first, &cfg.loss_config(), fwd, false).unwrap().loss;
        assert!((refined.first_batch_loss - main_loss).abs() <= 1e-6 * main_loss);
        let loaded = Model::load(&refined.final_checkpoint).unwrap();
        assert!(loaded.config.apply_temporal);
    }

    #[test]
    fn experiment_reports_test_metrics() {
        let ds = toy_dataset(2);
        let mut cfg = toy_config(1);
        cfg.ablations.use_temporal = true;
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&ds, &cfg, dir.path()).unwrap();
        assert!(out.refine.is_some());
        assert_eq!(out.report.cases, 16);
        let text = fs::read_to_string(dir.path().join(REFINE_LOG)).unwrap();
        assert!(TrainLog::from_jsonl(&text).unwrap().test_report.is_some());
    }
}
