//! End-to-end acceptance checks, one per criterion, run sequentially so the
//! timed criteria are not disturbed by concurrent tests.
//!
//! Every criterion prints one `PASS`/`FAIL` line. Positional arguments
//! select criteria by number or by a substring of their name, e.g.
//! `cargo test --test acceptance -- 3 oracle`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use nacf::dataset::{Dataset, DatasetConfig, GridSpec, Split};
use nacf::dsp::{stft_magnitude, Rir, Spectrogram, StftParams};
use nacf::field::set_identity_conv;
use nacf::losses::{decay_loss, energy_decay_curve, total_loss, LossConfig, Scale};
use nacf::metrics::{c50, edt, t60, MetricsReport};
use nacf::model::{Model, ModelConfig};
use nacf::room::{extract_contexts, image_source_response, Material, Orientation, Query, RoomSpec};
use nacf::train::{
    evaluate_batch, prepare_items, run_experiment, subsample_indices, subsample_training, train_stage_main,
    train_stage_refine, training_indices, EpochShuffler, Forward, Stage, TrainConfig, TrainItem,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Epochs per run in the ablation study and the few-shot sweep: every run
/// is fully trained.
const FULL_EPOCHS: usize = 100;
const SEEDS: [u64; 3] = [1, 2, 3];
const FRACTIONS: [f64; 5] = [0.05, 0.1, 0.2, 0.4, 0.6];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

type Criterion = (u32, &'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "stft matches a naive dft", stft_oracle),
        (2, "image-source oracle", image_source_oracle),
        (3, "gradient check", gradient_check),
        (4, "loss identities", loss_identities),
        (5, "metric oracles", metric_oracles),
        (6, "energy-decay monotonicity", decay_monotonicity),
        (7, "desk-scale training", desk_scale_training),
        (8, "ablation direction", ablation_direction),
        (9, "curriculum freeze", curriculum_freeze),
        (10, "few-shot harness", few_shot),
        (11, "cli reproducibility", cli_reproducibility),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (id, name, _) in &criteria {
            println!("criterion {id:>2}: {name}: test");
        }
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let selected = |id: u32, name: &str| {
        filters.is_empty() || filters.iter().any(|f| f.parse::<u32>() == Ok(id) || name.contains(f.as_str()))
    };

    let mut failures = 0;
    for (id, name, check) in criteria {
        if !selected(id, name) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} [{status}] {name} ({:.1} s): {}", start.elapsed().as_secs_f64(), v.detail);
        if !v.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// 1. STFT

/// Magnitude of the windowed DFT of every frame, evaluated term by term.
fn naive_stft(x: &[f64], window: usize, hop: usize, fft: usize) -> Vec<Vec<f64>> {
    let frames = if x.len() <= window { 1 } else { (x.len() - window).div_ceil(hop) + 1 };
    let hann: Vec<f64> = (0..window).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (window - 1) as f64).cos()).collect();
    let twiddle: Vec<(f64, f64)> = (0..fft).map(|k| (-2.0 * PI * k as f64 / fft as f64).sin_cos()).collect();
    (0..frames)
        .map(|d| {
            (0..=fft / 2)
                .map(|f| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (n, w) in hann.iter().enumerate() {
                        let v = x.get(d * hop + n).copied().unwrap_or(0.0) * w;
                        let (sin, cos) = twiddle[(f * n) % fft];
                        re += v * cos;
                        im += v * sin;
                    }
                    re.hypot(im)
                })
                .collect()
        })
        .collect()
}

fn stft_oracle() -> Verdict {
    let scales = LossConfig::default().scales;
    let mut r = rng(11);
    let mut worst = 0.0f64;
    let mut secs = 0.0;
    for i in 0..100 {
        let s = scales[i % scales.len()];
        let len = r.random_range(s.window..s.window + 2500);
        let x: Vec<f64> = (0..len).map(|_| normal(&mut r)).collect();
        let start = Instant::now();
        let got = stft_magnitude(&x, &s.stft().unwrap()).unwrap();
        secs += start.elapsed().as_secs_f64();
        let want = naive_stft(&x, s.window, s.hop, s.fft);
        assert_eq!(got.num_windows, want.len());
        for (d, frame) in want.iter().enumerate() {
            for (f, &v) in frame.iter().enumerate() {
                worst = worst.max((got.get(f, d, 0) - v).abs());
            }
        }
    }
    verdict(worst <= 1e-6 && secs < 10.0, format!("max abs error {worst:.2e}, {secs:.3} s spent in the transform"))
}

// ---------------------------------------------------------------------------
// 2. Image sources

/// Every image reachable with at most `order` wall reflections, found by a
/// breadth-first walk over mirror operations. Each image is kept once, at
/// the depth it is first reached, with the product of the reflection
/// coefficients along that path.
fn enumerate_images(dims: [f64; 3], beta: [f64; 6], src: [f64; 3], order: usize) -> Vec<([f64; 3], f64)> {
    let key = |p: [f64; 3]| p.map(|v| (v * 1e6).round() as i64);
    let mut seen: HashMap<[i64; 3], ([f64; 3], f64)> = HashMap::new();
    seen.insert(key(src), (src, 1.0));
    let mut queue = VecDeque::from([(src, 1.0, 0usize)]);
    while let Some((p, gain, depth)) = queue.pop_front() {
        if depth == order {
            continue;
        }
        for wall in 0..6 {
            let axis = wall / 2;
            let mut q = p;
            // Even walls sit at coordinate 0, odd walls at the room extent.
            q[axis] = if wall % 2 == 0 { -p[axis] } else { 2.0 * dims[axis] - p[axis] };
            let k = key(q);
            if seen.contains_key(&k) {
                continue;
            }
            let g = gain * beta[wall];
            seen.insert(k, (q, g));
            queue.push_back((q, g, depth + 1));
        }
    }
    seen.into_values().collect()
}

fn oracle_response(room: &RoomSpec, src: [f64; 3], rcv: [f64; 3], order: usize) -> Vec<f64> {
    let dims = [room.width, room.length, room.height];
    let beta = room.reflection_coefficients();
    let fs = room.sample_rate as f64;
    let mut out = vec![0.0; room.rir_length];
    for (img, gain) in enumerate_images(dims, beta, src, order) {
        let dist = ((img[0] - rcv[0]).powi(2) + (img[1] - rcv[1]).powi(2) + (img[2] - rcv[2]).powi(2)).sqrt();
        let delay = dist * fs / room.speed_of_sound;
        let amp = gain / (4.0 * PI * dist);
        let centre = delay.floor() as i64;
        for n in centre - 40..=centre + 40 {
            if n < 0 || n >= out.len() as i64 {
                continue;
            }
            let x = n as f64 - delay;
            let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
            let window = 0.5 * (1.0 + (PI * x / 41.0).cos());
            out[n as usize] += amp * sinc * window;
        }
    }
    out
}

fn image_source_oracle() -> Verdict {
    let start = Instant::now();
    let mut room = RoomSpec::default_scene();
    // Mean absorption 0.19 on every surface: reflection coefficient 0.9.
    room.materials = vec![Material {
        name: "uniform".into(),
        absorption: vec![0.19; 3],
        scattering: vec![0.1; 3],
        transmission: vec![0.01; 3],
    }];
    room.surfaces = [0; 6];
    room.rir_length = 2048;
    let mut r = rng(22);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for order in 0..=3u32 {
        room.max_image_order = order;
        for _ in 0..5 {
            let mut point = || [r.random_range(0.3..4.7), r.random_range(0.3..3.7), r.random_range(0.3..2.7)];
            let (src, rcv) = (point(), point());
            let got = image_source_response(&room, src, rcv).unwrap();
            let want = oracle_response(&room, src, rcv, order as usize);
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst <= 1e-6 && secs < 30.0, format!("{cases} responses, max abs error {worst:.2e}, {secs:.2} s"))
}

// ---------------------------------------------------------------------------
// 3. Gradients

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mut room = RoomSpec::default_scene();
    room.rir_length = 64;
    let query = Query { emitter: [2.0, 2.0], receiver: [2.3, 2.1], orientation: Orientation::Deg90, z: 1.5 };
    let cfg = ModelConfig {
        context_dim: 8,
        encoder_hidden: 8,
        field_width: 8,
        pe_frequencies: 4,
        boundary_points: 2,
        rays: 8,
        rir_length: 64,
        ..ModelConfig::default()
    };
    let contexts = extract_contexts(&room, &query, cfg.boundary_points, cfg.rays).unwrap();
    let features =
        nacf::context::ItemFeatures::from_contexts(&contexts, query.orientation, room.footprint_diagonal(), &cfg).unwrap();
    let target = nacf::room::simulate_rir(&room, &query).unwrap();
    let items = vec![TrainItem::new(features, target)];
    let loss_cfg = LossConfig { scales: vec![Scale { window: 32, fft: 64, hop: 8 }], ..LossConfig::default() };
    let forward = Forward::Field { temporal: true };
    let mut model = Model::new(cfg, 5).unwrap();
    let analytic = evaluate_batch(&model, &items, &[0], &loss_cfg, forward, true).unwrap();

    let coords: Vec<(usize, usize)> =
        model.params.blocks().iter().enumerate().flat_map(|(b, blk)| (0..blk.value.data.len()).map(move |k| (b, k))).collect();
    let mut r = rng(33);
    // Small enough that no probe straddles a ReLU kink, large enough for
    // f64 cancellation to stay far below the tolerance.
    let step = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (b, k) = coords[r.random_range(0..coords.len())];
        let id = nacf::params::BlockId(b);
        let orig = model.params.get(id).data[k];
        let mut loss_at = |v: f64| {
            model.params.get_mut(id).data[k] = v;
            evaluate_batch(&model, &items, &[0], &loss_cfg, forward, false).unwrap().loss
        };
        let numeric = (loss_at(orig + step) - loss_at(orig - step)) / (2.0 * step);
        model.params.get_mut(id).data[k] = orig;
        let a = analytic.grads[b].data[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst <= 1e-3 && secs < 60.0, format!("50 coordinates, max relative error {worst:.2e}, {secs:.2} s"))
}

// ---------------------------------------------------------------------------
// 4. Loss identities

fn loss_identities() -> Verdict {
    let cfg = LossConfig::default();
    let mut r = rng(44);
    let mut nonzero_self = 0;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut ch = || (0..4096).map(|_| normal(&mut r)).collect::<Vec<f64>>();
        let x = Rir::new(ch(), ch(), 16000).unwrap();
        if total_loss(&x, &x, &cfg).unwrap().total != 0.0 {
            nonzero_self += 1;
        }
        for alpha in [0.5, 2.0, 10.0] {
            let y = x.scaled(alpha);
            for s in &cfg.scales {
                let p = s.stft().unwrap();
                let (g, q) = (Spectrogram::of_rir(&x, &p).unwrap(), Spectrogram::of_rir(&y, &p).unwrap());
                let l = decay_loss(&g, &q, cfg.eps_log).unwrap();
                worst = worst.max((l - 2.0 * alpha.log10().abs()).abs());
            }
        }
    }
    verdict(
        nonzero_self == 0 && worst <= 1e-9,
        format!("self-loss nonzero on {nonzero_self}/20, max decay deviation {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 5. Metrics

fn metric_oracles() -> Verdict {
    let fs = 16000u32;
    let mut r = rng(55);
    // Noise under an amplitude envelope that falls 60 dB in 0.3 s.
    let h: Vec<f64> = (0..16000)
        .map(|n| {
            let t = n as f64 / fs as f64;
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            sign * 10f64.powf(-3.0 * t / 0.3)
        })
        .collect();
    let (t, e, c) = (t60(&h, fs).unwrap(), edt(&h, fs).unwrap(), c50(&h, fs).unwrap());
    let t_err = (t - 0.3).abs() / 0.3;
    let e_err = (e - 0.3).abs() / 0.3;

    let boundary = 800;
    let early: f64 = h.iter().take(boundary).map(|v| v * v).sum();
    let late: f64 = h.iter().skip(boundary).map(|v| v * v).sum();
    let c_err = (c - 10.0 * (early / late).log10()).abs();

    let mut exact = true;
    let mut worst_rel = 0.0f64;
    for alpha in [0.25, 2.0, 8.0, 0.3, 7.7, 1234.5] {
        let s: Vec<f64> = h.iter().map(|v| v * alpha).collect();
        let pairs = [(t, t60(&s, fs).unwrap()), (e, edt(&s, fs).unwrap()), (c, c50(&s, fs).unwrap())];
        for (a, b) in pairs {
            let rel = (a - b).abs() / a.abs();
            if (alpha as f64).log2().fract() == 0.0 && a != b {
                exact = false;
            }
            worst_rel = worst_rel.max(rel);
        }
    }
    verdict(
        t_err <= 0.05 && e_err <= 0.05 && c_err <= 1e-9 && exact && worst_rel <= 1e-12,
        format!(
            "T60 {t:.4} s ({:.2}%), EDT {e:.4} s ({:.2}%), C50 deviation {c_err:.1e} dB, \
             power-of-two scaling exact: {exact}, other scalings within {worst_rel:.1e}",
            100.0 * t_err,
            100.0 * e_err
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Decay monotonicity

fn decay_monotonicity() -> Verdict {
    let mut r = rng(66);
    let params = StftParams::new(4, 1, 4).unwrap();
    let mut violations = 0;
    let mut checked = 0;
    for _ in 0..1000 {
        let num_windows = r.random_range(1..80);
        let num_bins = r.random_range(1..300);
        let mut channel = || {
            (0..num_windows * num_bins)
                .map(|_| if r.random_bool(0.2) { 0.0 } else { r.random_range(-20.0..5.0f64).exp() })
                .collect::<Vec<f64>>()
        };
        let m = Spectrogram { params, num_windows, num_bins, channels: vec![channel(), channel()] };
        for curve in energy_decay_curve(&m) {
            for w in curve.windows(2) {
                checked += 1;
                if w[1] > w[0] {
                    violations += 1;
                }
            }
        }
    }
    verdict(violations == 0, format!("{violations} violations in {checked} adjacent pairs"))
}

// ---------------------------------------------------------------------------
// Shared desk-scale data

fn default_dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| Dataset::generate(&DatasetConfig::default()).expect("default dataset"))
}

fn desk_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, seed, ..TrainConfig::default() }
}

fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

// ---------------------------------------------------------------------------
// 7. Training run

fn desk_scale_training() -> Verdict {
    let ds = default_dataset();
    let (train, test) = (ds.indices(Split::Train).len(), ds.indices(Split::Test).len());
    let dir = scratch();
    let start = Instant::now();
    let out = run_experiment(ds, &desk_config(100, 0), dir.path()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let epochs = &out.main.log.epochs;
    let (first, last) = (epochs[0].loss, epochs[epochs.len() - 1].loss);
    let ratio = last / first;
    let threads = rayon::current_num_threads();
    verdict(
        train == 1440 && test == 160 && ratio < 0.1 && secs < 1800.0,
        format!(
            "{train}/{test} split, epoch-1 loss {first:.4}, final {last:.4} ({:.1}%), {:.1} min on {threads} thread(s); \
             test T60 {:.1}% C50 {:.2} dB EDT {:.3} s",
            100.0 * ratio,
            secs / 60.0,
            out.report.t60_error_percent(),
            out.report.c50_error_db(),
            out.report.edt_error_sec()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Ablations

fn metric_triplet(r: &MetricsReport) -> [f64; 3] {
    [r.t60_error_percent(), r.c50_error_db(), r.edt_error_sec()]
}

fn ablation_direction() -> Verdict {
    let ds = default_dataset();
    let mut runs: BTreeMap<&str, Vec<[f64; 3]>> = BTreeMap::new();
    let mut excluded: BTreeMap<&str, usize> = BTreeMap::new();
    let mut record = |name, r: &MetricsReport| {
        runs.entry(name).or_default().push(metric_triplet(r));
        *excluded.entry(name).or_default() += r.excluded.t60;
    };
    for seed in SEEDS {
        let full = TrainConfig { ablations: nacf::train::Ablations { use_temporal: true, ..Default::default() }, ..desk_config(FULL_EPOCHS, seed) };
        let dir = scratch();
        let out = run_experiment(ds, &full, dir.path()).unwrap();
        record("nacf", &out.main_report);
        record("w/T", &out.report);

        let mut no_ctx = desk_config(FULL_EPOCHS, seed);
        no_ctx.ablations.use_context = false;
        let out = run_experiment(ds, &no_ctx, scratch().path()).unwrap();
        record("w/o C", &out.report);

        let mut no_ms = desk_config(FULL_EPOCHS, seed);
        no_ms.ablations.use_multiscale = false;
        let out = run_experiment(ds, &no_ms, scratch().path()).unwrap();
        record("w/o M", &out.report);
    }
    let med: BTreeMap<&str, [f64; 3]> =
        runs.iter().map(|(k, v)| (*k, std::array::from_fn(|m| median(v.iter().map(|t| t[m]).collect())))).collect();
    let nacf = med["nacf"];
    let wins_t = (0..3).filter(|&m| med["w/T"][m] <= nacf[m]).count();
    let pass = nacf[0] < med["w/o C"][0] && nacf[0] < med["w/o M"][0] && wins_t >= 2;
    let table: Vec<String> =
        med.iter().map(|(k, m)| format!("{k}: T60 {:.1}% ({} pair exclusions over all seeds) C50 {:.2} dB EDT {:.3} s", m[0], excluded[k], m[1], m[2])).collect();
    verdict(pass, format!("seed medians over {FULL_EPOCHS} epochs: {}; w/T no worse on {wins_t}/3", table.join("; ")))
}

// ---------------------------------------------------------------------------
// 9. Curriculum

fn curriculum_freeze() -> Verdict {
    let ds = default_dataset();
    let dir = scratch();
    let main_cfg = TrainConfig { train_fraction: 0.1, ..desk_config(2, 9) };
    let main = train_stage_main(ds, &main_cfg, dir.path()).unwrap();
    let mut start_model = main.model.clone();
    set_identity_conv(&mut start_model);
    let identity_ckpt = dir.path().join("identity.ckpt");
    start_model.save(&identity_ckpt).unwrap();
    let start_model = Model::load(&identity_ckpt).unwrap();

    let refine_cfg = TrainConfig { stage: Stage::Refine, epochs: 1, ..main_cfg.clone() };
    let refine_dir = dir.path().join("refine");
    let refine = train_stage_refine(ds, &refine_cfg, &identity_ckpt, &refine_dir).unwrap();

    let frozen = start_model.main_blocks();
    let digests = |m: &Model| frozen.iter().map(|&id| m.params.block_digest(id)).collect::<Vec<_>>();
    let saved = Model::load(&refine_dir.join(nacf::train::REFINE_FINAL)).unwrap();
    let frozen_ok = digests(&start_model) == digests(&refine.model) && digests(&start_model) == digests(&saved);
    let conv_moved = start_model.conv_blocks().iter().any(|&id| start_model.params.get(id) != refine.model.params.get(id));

    let items = prepare_items(ds, &training_indices(ds, &refine_cfg).unwrap(), &start_model.config).unwrap();
    let order = EpochShuffler::new(items.len(), refine_cfg.seed).next_order();
    let first = &order[..refine_cfg.batch_size.min(order.len())];
    let main_loss = evaluate_batch(
        &start_model,
        &items,
        first,
        &refine_cfg.loss_config(),
        Forward::Field { temporal: false },
        false,
    )
    .unwrap()
    .loss;
    let rel = (refine.first_batch_loss - main_loss).abs() / main_loss.abs();
    verdict(
        frozen_ok && conv_moved && rel <= 1e-6,
        format!(
            "{} frozen blocks unchanged: {frozen_ok}, conv blocks trained: {conv_moved}, \
             first-batch loss {:.6} vs main {main_loss:.6} (relative {rel:.1e})",
            frozen.len(),
            refine.first_batch_loss
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Few-shot

fn few_shot() -> Verdict {
    let ds = default_dataset();
    let manifest = ds.manifest();
    let train = ds.indices(Split::Train);
    let mut structure_ok = true;
    for seed in SEEDS {
        let subsets: Vec<Vec<usize>> = FRACTIONS.iter().map(|&f| subsample_indices(&train, f, seed).unwrap()).collect();
        for (f, s) in FRACTIONS.iter().zip(&subsets) {
            structure_ok &= *s == subsample_indices(&train, *f, seed).unwrap();
            let m = subsample_training(&manifest, *f, seed).unwrap();
            structure_ok &= m.indices(Split::Train) == *s && m.indices(Split::Test) == ds.indices(Split::Test);
        }
        for w in subsets.windows(2) {
            structure_ok &= w[0].len() < w[1].len() && w[0].iter().all(|i| w[1].contains(i));
        }
    }

    let mut errors: Vec<Vec<f64>> = vec![Vec::new(); FRACTIONS.len()];
    for seed in SEEDS {
        for (k, &f) in FRACTIONS.iter().enumerate() {
            let cfg = TrainConfig { train_fraction: f, ..desk_config(FULL_EPOCHS, seed) };
            let out = run_experiment(ds, &cfg, scratch().path()).unwrap();
            errors[k].push(out.report.t60_error_percent());
        }
    }
    let medians: Vec<f64> = errors.into_iter().map(median).collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let curve: Vec<String> =
        FRACTIONS.iter().zip(&medians).map(|(f, m)| format!("{:.0}%: {m:.1}", 100.0 * f)).collect();
    verdict(
        structure_ok && monotone,
        format!(
            "nested and deterministic: {structure_ok}; median test T60 error after {FULL_EPOCHS} epochs {}",
            curve.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 11. CLI

fn nacf(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_nacf")).args(args).output().expect("run the binary");
    if !out.status.success() {
        eprintln!("nacf {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

/// Relative path and contents of every file below `root`, sorted.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn digest(files: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<u8> {
    let mut h = Sha256::new();
    for (p, bytes) in files {
        h.update(p.to_string_lossy().as_bytes());
        h.update(bytes);
    }
    h.finalize().to_vec()
}

/// Training logs carry wall-clock times; everything else must match.
fn strip_wall_time(bytes: &[u8]) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            if let Some(o) = v.as_object_mut() {
                o.remove("wall_time_sec");
            }
            v
        })
        .collect()
}

/// Runs the whole pipeline in `root` and returns its output files.
fn pipeline(root: &Path) -> std::result::Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let data_cfg = DatasetConfig {
        room: RoomSpec { max_image_order: 6, ..RoomSpec::default_scene() },
        grid: GridSpec {
            emitters_x: 2,
            emitters_y: 2,
            receivers: vec![[1.58, 1.28], [3.42, 2.72]],
            orientations: vec![Orientation::Deg0, Orientation::Deg180],
            ..GridSpec::default()
        },
        rays: 8,
        train_ratio: 0.75,
        ..DatasetConfig::default()
    };
    let mut train_cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
    train_cfg.model = ModelConfig { context_dim: 4, encoder_hidden: 4, field_width: 4, rays: 8, ..train_cfg.model };
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    fs::write(p("data.json"), serde_json::to_string(&data_cfg).unwrap()).unwrap();
    fs::write(p("train.json"), serde_json::to_string(&train_cfg).unwrap()).unwrap();

    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data", "--config", &p("data.json"), "--out", &p("data"), "--seed", "3"].into_iter().map(String::from).collect(),
    ];
    let run = |args: &[&str]| -> std::result::Result<(), String> {
        match nacf(args) {
            0 => Ok(()),
            code => Err(format!("{args:?} exited with {code}")),
        }
    };
    for s in &steps {
        run(&s.iter().map(String::as_str).collect::<Vec<_>>())?;
    }
    let data_before = digest(&snapshot(&root.join("data")));
    let (data, tc, ck) = (p("data"), p("train.json"), p("ckpt"));
    run(&["train", "--stage", "main", "--config", &tc, "--data", &data, "--out", &ck, "--seed", "7"])?;
    run(&["train", "--stage", "refine", "--config", &tc, "--data", &data, "--out", &ck, "--seed", "7"])?;
    run(&["eval", "--ckpt", &p("ckpt/best"), "--data", &data, "--report", &p("out/report.json")])?;
    run(&["eval", "--ckpt", &p("ckpt/refine_final.ckpt"), "--data", &data, "--report", &p("out/refine.json"), "--split", "all"])?;
    run(&["render", "--ckpt", &p("ckpt/final.ckpt"), "--data", &data, "--index", "1", "--out", &p("out/render.wav")])?;
    run(&["plot", "--ckpt", &p("ckpt/refine_final.ckpt"), "--data", &data, "--indices", "0,5", "--out", &p("out/plots")])?;
    if digest(&snapshot(&root.join("data"))) != data_before {
        return Err("the data directory changed after training and evaluation".into());
    }
    if nacf(&["train", "--stage", "refine", "--config", &tc, "--data", &data, "--out", &p("empty")]) != 2 {
        return Err("refine without a main checkpoint did not fail with exit code 2".into());
    }
    let mut files = snapshot(root);
    for (path, bytes) in files.iter_mut() {
        if path.extension().is_some_and(|e| e == "jsonl") {
            *bytes = serde_json::to_vec(&strip_wall_time(bytes)).unwrap();
        }
    }
    Ok(files)
}

fn cli_reproducibility() -> Verdict {
    let (a, b) = (scratch(), scratch());
    let (fa, fb) = match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(fa), Ok(fb)) => (fa, fb),
        (Err(e), _) | (_, Err(e)) => return verdict(false, e),
    };
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let count = |ext: &str| fa.keys().filter(|k| k.extension().is_some_and(|e| e == ext)).count();
    let report: serde_json::Value = serde_json::from_slice(&fa[Path::new("out/report.json")]).unwrap();
    let report_keys = report.as_object().map(|o| o.len()).unwrap_or(0);
    verdict(
        differing.is_empty() && count("ckpt") == 4 && report_keys == 3,
        format!(
            "{} files compared ({} checkpoints, {} json), report has {report_keys} fields, differing: {:?}",
            fa.len(),
            count("ckpt"),
            count("json"),
            differing
        ),
    )
}
