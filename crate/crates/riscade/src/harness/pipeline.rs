//! The work behind every CLI subcommand: dataset generation, training,
//! estimator evaluation, parameter sweeps, the direct-link experiment, the
//! complexity report, and the self-test battery.
//!
//! Reproducibility contract: every random draw comes from a counter-derived
//! stream keyed by `(seed, domain, index)`, where the index is a stable
//! function of what the draw is for (sample number, sweep point, epoch).
//! Two runs with the same resolved configuration therefore produce
//! byte-identical containers, checkpoints, and CSV files, regardless of
//! scheduling. Wall-clock timings are reported on stderr and in return
//! values, never inside result files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array4, Axis};
use num_complex::Complex64;

use crate::channel::{ChannelRealization, ChannelSampler, LinkAngles};
use crate::complexity::{closed_form_cost, exact_layer_cost, CostBreakdown};
use crate::config::{grid_for, ExperimentConfig};
use crate::denoiser::{
    build_net, gradient_check, infer, load_checkpoint, save_checkpoint, train, write_loss_trace,
    CheckpointMeta, DenoiserNet, EpochLoss, InferMode,
};
use crate::geometry::Direction;
use crate::harness::testset::{deserialize_test_set, serialize_test_set, TestSet};
use crate::patching::{
    deserialize_dataset, extract_patches, reshape_direct, serialize_dataset, PatchSpec,
};
use crate::pilots::{
    blmmse_estimate, dft_schedule, estimate_direct, ls_estimate, ls_filter, lmmse_filter, nmse,
    nmse_db, partial_dft_schedule, simulate_direct_pilots, simulate_pilots, CovarianceAccumulator,
    PhaseSchedule, PilotConfig, ReceivedPilots,
};
use crate::rng::{stream, StreamDomain};
use crate::{Error, Result};

pub const TRAIN_FILE: &str = "train.rcds";
pub const VAL_FILE: &str = "val.rcds";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss_trace.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const DIRECT_FILE: &str = "direct.csv";
pub const DIRECT_MODEL_FILE: &str = "direct_model.ckpt";
pub const DIRECT_LOSS_FILE: &str = "direct_loss_trace.csv";
pub const COMPLEXITY_FILE: &str = "complexity.csv";

/// Stable text form of an axis value (`-5`, `10`, `2.5`).
pub fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Path of the full-resolution test container for one SNR point.
pub fn test_set_path(dir: &Path, snr_db: f64) -> PathBuf {
    dir.join(format!("test_snr_{}db.rcts", fmt_value(snr_db)))
}

/// One emitted result: a method's average NMSE at one axis value.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub axis: String,
    pub method: String,
    /// Mean of per-sample NMSE ratios; NaN marks a method that is
    /// unavailable at this axis value.
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "axis,method,nmse_linear,nmse_db,n_samples,seed";

/// Writes rows in the fixed schema; overwrites any existing file.
pub fn write_rows(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.axis, r.method, r.nmse_linear, r.nmse_db, r.n_samples, r.seed
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn mean_row(axis: &str, method: &str, ratios: &[f64], seed: u64) -> CsvRow {
    let (lin, db) = if ratios.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        (mean, nmse_db(mean))
    };
    CsvRow {
        axis: axis.to_string(),
        method: method.to_string(),
        nmse_linear: lin,
        nmse_db: db,
        n_samples: ratios.len(),
        seed,
    }
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.write_echo(&cfg.out_dir)?;
    Ok(())
}

/// Draws one channel realization and its despread pilot observation from a
/// single per-sample stream (realization first, then noise).
fn draw_sample(
    sampler: &ChannelSampler,
    sched: &PhaseSchedule,
    snr_db: f64,
    seed: u64,
    domain: StreamDomain,
    index: u64,
) -> Result<(ChannelRealization, ReceivedPilots)> {
    let mut rng = stream(seed, domain, index);
    let realization = sampler.realize(&mut rng);
    let pilots = PilotConfig::from_snr_db(snr_db);
    // The direct path is handled in its own estimation phase and cancelled
    // before despreading, so the cascaded pipeline observes G·S + V.
    let y = simulate_pilots(&realization, sched, &pilots, &mut rng, false)?;
    Ok((realization, y))
}

/// Minimal realization wrapper for estimator entry points that only touch
/// the cascaded channel (the binary-reflection baseline re-simulates its own
/// pilot pass from `G`).
fn wrap_cascaded(g: &Array2<Complex64>) -> ChannelRealization {
    let (m, n) = g.dim();
    let dir = Direction::new(0.0, 0.0).expect("origin direction is valid");
    ChannelRealization {
        user_link: Array1::default(n),
        hop_link: Array2::default((m, n)),
        direct_link: Array1::default(m),
        cascaded: g.clone(),
        angles: LinkAngles {
            user_arrival: dir,
            surface_departure: dir,
            receiver_arrival: dir,
        },
    }
}

/// Minimal realization wrapper holding only a direct-link vector.
fn wrap_direct(b: Array1<Complex64>) -> ChannelRealization {
    let m = b.len();
    let dir = Direction::new(0.0, 0.0).expect("origin direction is valid");
    ChannelRealization {
        user_link: Array1::default(1),
        hop_link: Array2::default((m, 1)),
        direct_link: b,
        cascaded: Array2::default((m, 1)),
        angles: LinkAngles {
            user_arrival: dir,
            surface_departure: dir,
            receiver_arrival: dir,
        },
    }
}

/// Config keys that determine container contents. Containers generated under
/// a different value of any of these must not be consumed silently.
const GENERATION_KEYS: &[&str] = &[
    "bs.horizontal",
    "bs.vertical",
    "bs.spacing",
    "ris.horizontal",
    "ris.vertical",
    "ris.spacing",
    "channel.eta_ris",
    "channel.eta_bs",
    "channel.rho",
    "channel.correlated",
    "pilots.subframes",
    "pilots.snr_grid_db",
    "patch.rows",
    "patch.cols",
    "patch.per_sample",
    "run.samples",
    "run.train_fraction",
    "run.seed",
];

/// Snapshot embedded in container headers: generation-relevant keys only
/// (locations like `run.out_dir` are deliberately excluded so identical
/// experiments in different directories produce identical bytes).
fn container_snapshot(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let keep: std::collections::BTreeSet<&str> = GENERATION_KEYS.iter().copied().collect();
    cfg.snapshot()
        .into_iter()
        .filter(|(k, _)| keep.contains(k.as_str()))
        .collect()
}

fn check_container_config(
    header: &BTreeMap<String, String>,
    cfg: &ExperimentConfig,
    what: &str,
) -> Result<()> {
    let now = cfg.snapshot();
    for key in GENERATION_KEYS {
        let stored = header.get(*key).ok_or_else(|| {
            Error::Integrity(format!("{what} header lacks the generation key {key:?}"))
        })?;
        let current = &now[*key];
        if stored != current {
            return Err(Error::Integrity(format!(
                "{what} was generated under {key} = {stored}, but the current \
                 configuration has {key} = {current}"
            )));
        }
    }
    Ok(())
}

/// What `generate` wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    pub train_patches: usize,
    pub val_patches: usize,
    pub test_files: Vec<PathBuf>,
}

/// Samples channels, simulates pilots over the SNR grid, computes
/// least-squares inputs, and writes the train/validation patch containers
/// plus one full-resolution test container per SNR.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GenerateSummary> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let sampler = ChannelSampler::new(cfg.channel_config()?)?;
    let n = cfg.elements();
    let sched = dft_schedule(n, cfg.subframes)?;
    let grid = &cfg.snr_grid_db;

    // Training + validation pool: SNRs cycle deterministically through the
    // grid so the mix is uniform.
    let mut estimates = Vec::with_capacity(cfg.samples);
    let mut truths = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let snr = grid[i % grid.len()];
        let (real, y) = draw_sample(
            &sampler,
            &sched,
            snr,
            cfg.seed,
            StreamDomain::TrainChannel,
            i as u64,
        )?;
        estimates.push(ls_estimate(&y, &sched)?);
        truths.push(real.cascaded);
    }
    let split = cfg.train_samples();
    let snapshot = container_snapshot(cfg);
    let mut summary = GenerateSummary {
        train_patches: 0,
        val_patches: 0,
        test_files: Vec::new(),
    };
    for (file, range, count_slot) in [
        (TRAIN_FILE, 0..split, 0usize),
        (VAL_FILE, split..cfg.samples, 1),
    ] {
        let spec = PatchSpec {
            p_x: cfg.patch_cols,
            p_y: cfg.patch_rows,
            total_patches: range.len() * cfg.patches_per_sample,
            seed: cfg.seed,
        };
        let mut ds = extract_patches(&estimates[range.clone()], &truths[range], &spec)?;
        ds.header.config = snapshot.clone();
        ds.header
            .config
            .insert("split".into(), if count_slot == 0 { "train" } else { "val" }.into());
        serialize_dataset(&ds, &cfg.out_dir.join(file))?;
        if count_slot == 0 {
            summary.train_patches = ds.num_patches();
        } else {
            summary.val_patches = ds.num_patches();
        }
    }
    drop(estimates);
    drop(truths);

    // One full-resolution test container per SNR point.
    for (si, &snr) in grid.iter().enumerate() {
        let mut observations = Vec::with_capacity(cfg.test_per_snr);
        let mut truths = Vec::with_capacity(cfg.test_per_snr);
        let mut noise_variance = 0.0;
        for j in 0..cfg.test_per_snr {
            let idx = (si * cfg.test_per_snr + j) as u64;
            let (real, y) = draw_sample(
                &sampler,
                &sched,
                snr,
                cfg.seed,
                StreamDomain::TestChannel,
                idx,
            )?;
            noise_variance = y.noise_variance;
            observations.push(y.observation);
            truths.push(real.cascaded);
        }
        let ts = TestSet {
            snr_db: snr,
            noise_variance,
            subframes: cfg.subframes,
            seed: cfg.seed,
            observations,
            truths,
        };
        let path = test_set_path(&cfg.out_dir, snr);
        serialize_test_set(&ts, &path)?;
        summary.test_files.push(path);
    }
    Ok(summary)
}

/// Mean NMSE ratio of the network's outputs over a stack of patches.
fn net_nmse_on_patches(
    net: &DenoiserNet<f32>,
    data: &Array4<f32>,
    labels: &Array4<f32>,
) -> Result<f64> {
    let count = data.shape()[0];
    if count == 0 {
        return Err(Error::Argument("no patches to evaluate".into()));
    }
    let chunk = 64usize;
    let mut ratios = Vec::with_capacity(count);
    let mut at = 0;
    while at < count {
        let hi = (at + chunk).min(count);
        let x = data.slice(ndarray::s![at..hi, .., .., ..]).to_owned();
        let y = net.forward_eval(&x)?;
        for p in 0..hi - at {
            let mut err = 0.0f64;
            let mut pow = 0.0f64;
            for (a, b) in y
                .index_axis(Axis(0), p)
                .iter()
                .zip(labels.index_axis(Axis(0), at + p).iter())
            {
                let d = (*a as f64) - (*b as f64);
                err += d * d;
                pow += (*b as f64) * (*b as f64);
            }
            if pow > 0.0 {
                ratios.push(err / pow);
            }
        }
        at = hi;
    }
    if ratios.is_empty() {
        return Err(Error::Argument("every patch had zero reference power".into()));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// What `train` produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<EpochLoss>,
    pub val_nmse_db: f64,
    pub checkpoint: PathBuf,
    pub started_from_epoch: usize,
}

/// Trains the denoiser on the generated patch containers and writes the
/// checkpoint plus the loss trace.
pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let train_ds = deserialize_dataset(&cfg.out_dir.join(TRAIN_FILE))?;
    let val_ds = deserialize_dataset(&cfg.out_dir.join(VAL_FILE))?;
    for (ds, what) in [(&train_ds, "training container"), (&val_ds, "validation container")] {
        check_container_config(&ds.header.config, cfg, what)?;
        if ds.patch_dim() != (cfg.patch_rows, cfg.patch_cols) {
            return Err(Error::Integrity(format!(
                "{what} holds {:?} patches but the configuration expects {}x{}",
                ds.patch_dim(),
                cfg.patch_rows,
                cfg.patch_cols
            )));
        }
    }

    let mut net = build_net::<f32>(&cfg.net_config(), cfg.seed)?;
    let mut start_epoch = 0usize;
    if let Some(ckpt) = resume {
        let (loaded, meta) = load_checkpoint::<f32>(ckpt)?;
        if *loaded.config() != cfg.net_config() {
            return Err(Error::Integrity(format!(
                "checkpoint architecture {:?} does not match the configured {:?}",
                loaded.config(),
                cfg.net_config()
            )));
        }
        if meta.seed != cfg.seed || meta.lr != cfg.lr || meta.decay != cfg.decay {
            return Err(Error::Integrity(format!(
                "checkpoint was trained under seed {}, lr {}, decay {}; the \
                 configuration has seed {}, lr {}, decay {}",
                meta.seed, meta.lr, meta.decay, cfg.seed, cfg.lr, cfg.decay
            )));
        }
        if meta.epochs_completed > cfg.epochs {
            return Err(Error::Integrity(format!(
                "checkpoint already has {} epochs but the configuration asks for {}",
                meta.epochs_completed, cfg.epochs
            )));
        }
        start_epoch = meta.epochs_completed;
        net = loaded;
    }

    let tc = cfg.train_config(start_epoch);
    let losses = train(
        &mut net,
        &train_ds.data,
        &train_ds.labels,
        &val_ds.data,
        &val_ds.labels,
        &tc,
    )?;
    write_loss_trace(&cfg.out_dir.join(LOSS_FILE), &losses)?;
    let checkpoint = cfg.out_dir.join(MODEL_FILE);
    save_checkpoint(
        &net,
        &CheckpointMeta {
            epochs_completed: cfg.epochs,
            lr: cfg.lr,
            decay: cfg.decay,
            seed: cfg.seed,
        },
        &checkpoint,
    )?;
    let val_nmse = net_nmse_on_patches(&net, &val_ds.data, &val_ds.labels)?;
    Ok(TrainSummary {
        losses,
        val_nmse_db: nmse_db(val_nmse),
        checkpoint,
        started_from_epoch: start_epoch,
    })
}

/// Re-derives the linear-MMSE channel covariance from the training
/// distribution: the deterministic channel draws the training pool starts
/// with, truncated to the configured sample budget.
fn training_covariance(
    sampler: &ChannelSampler,
    count: usize,
    seed: u64,
) -> Result<Array2<Complex64>> {
    let mut acc = CovarianceAccumulator::new(sampler.surface_elements());
    for i in 0..count {
        let mut rng = stream(seed, StreamDomain::TrainChannel, i as u64);
        let real = sampler.realize(&mut rng);
        acc.push(&real.cascaded.view())?;
    }
    acc.finish()
}

/// What `eval` measured.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<CsvRow>,
    pub csv_path: PathBuf,
    /// Accumulated wall time of full-matrix network inference.
    pub full_wall: Duration,
    /// Accumulated wall time of tiled network inference.
    pub tiled_wall: Duration,
}

/// Evaluates every estimator on the per-SNR test containers: least squares,
/// linear MMSE, the binary-reflection baseline, and the network in full and
/// tiled inference modes.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let (net, _meta) = load_checkpoint::<f32>(checkpoint)?;
    if *net.config() != cfg.net_config() {
        return Err(Error::Integrity(format!(
            "checkpoint architecture {:?} does not match the configured {:?}",
            net.config(),
            cfg.net_config()
        )));
    }
    let sampler = ChannelSampler::new(cfg.channel_config()?)?;
    let (m, n) = (cfg.antennas(), cfg.elements());
    let sched = dft_schedule(n, cfg.subframes)?;
    let r_g = training_covariance(&sampler, cfg.covariance_samples, cfg.seed)?;
    let f_ls = ls_filter(&sched)?;

    let mut rows = Vec::new();
    let mut full_wall = Duration::ZERO;
    let mut tiled_wall = Duration::ZERO;
    let tile = InferMode::Tiled {
        tile_rows: cfg.patch_rows,
        tile_cols: cfg.patch_cols,
    };
    for (si, &snr) in cfg.snr_grid_db.iter().enumerate() {
        let path = test_set_path(&cfg.out_dir, snr);
        let ts = deserialize_test_set(&path)?;
        if ts.seed != cfg.seed
            || ts.subframes != cfg.subframes
            || ts.channel_dim() != (m, n)
            || ts.len() != cfg.test_per_snr
            || ts.snr_db != snr
        {
            return Err(Error::Integrity(format!(
                "test container {} does not match the configuration \
                 (seed {}, L {}, {:?} channels, {} samples at {} dB)",
                path.display(),
                ts.seed,
                ts.subframes,
                ts.channel_dim(),
                ts.len(),
                ts.snr_db
            )));
        }
        let w_lmmse = lmmse_filter(&sched, &r_g, m, ts.noise_variance, true)?;
        let pilots = PilotConfig::from_snr_db(snr);
        let mut ratios: [Vec<f64>; 5] = Default::default();
        for j in 0..ts.len() {
            let g = &ts.truths[j];
            let ls = ts.observations[j].dot(&f_ls);
            let lm = ts.observations[j].dot(&w_lmmse);
            let mut noise_rng = stream(
                cfg.seed,
                StreamDomain::Noise,
                (si * cfg.test_per_snr + j) as u64,
            );
            let bl = blmmse_estimate(&wrap_cascaded(g), &pilots, &mut noise_rng, &r_g, true)?;
            let t0 = Instant::now();
            let net_full = infer(&net, &ls.view(), InferMode::Full)?;
            full_wall += t0.elapsed();
            let t1 = Instant::now();
            let net_tiled = infer(&net, &ls.view(), tile)?;
            tiled_wall += t1.elapsed();
            for (k, est) in [&ls, &lm, &bl, &net_full, &net_tiled].into_iter().enumerate() {
                ratios[k].push(nmse(est, g)?);
            }
        }
        let axis = fmt_value(snr);
        for (k, method) in ["ls", "lmmse", "blmmse", "net_full", "net_tiled"]
            .into_iter()
            .enumerate()
        {
            rows.push(mean_row(&axis, method, &ratios[k], cfg.seed));
        }
    }
    let csv_path = cfg.out_dir.join(EVAL_FILE);
    write_rows(&csv_path, &rows)?;
    Ok(EvalReport {
        rows,
        csv_path,
        full_wall,
        tiled_wall,
    })
}

/// Sweep axes: which parameter varies while everything else stays fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Snr,
    PilotL,
    AntennasM,
    ElementsN,
    Correlation,
}

impl SweepAxis {
    pub fn file_name(self) -> &'static str {
        match self {
            SweepAxis::Snr => "sweep_snr.csv",
            SweepAxis::PilotL => "sweep_pilot_l.csv",
            SweepAxis::AntennasM => "sweep_antennas_m.csv",
            SweepAxis::ElementsN => "sweep_elements_n.csv",
            SweepAxis::Correlation => "sweep_correlation.csv",
        }
    }
}

struct SweepPoint {
    label: String,
    cfg: ExperimentConfig,
    subframes: usize,
    snr_db: f64,
}

fn sweep_points(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::new();
    match axis {
        SweepAxis::Snr => {
            for &snr in &cfg.snr_grid_db {
                points.push(SweepPoint {
                    label: fmt_value(snr),
                    cfg: cfg.clone(),
                    subframes: cfg.subframes,
                    snr_db: snr,
                });
            }
        }
        SweepAxis::PilotL => {
            for &l in &cfg.sweep_pilot_l {
                points.push(SweepPoint {
                    label: l.to_string(),
                    cfg: cfg.clone(),
                    subframes: l,
                    snr_db: cfg.sweep_snr_db,
                });
            }
        }
        SweepAxis::AntennasM => {
            for &m in &cfg.sweep_antennas_m {
                let (h, v) = grid_for(m)?;
                let mut point_cfg = cfg.clone();
                point_cfg.bs_horizontal = h;
                point_cfg.bs_vertical = v;
                points.push(SweepPoint {
                    label: m.to_string(),
                    cfg: point_cfg,
                    subframes: cfg.subframes,
                    snr_db: cfg.sweep_snr_db,
                });
            }
        }
        SweepAxis::ElementsN => {
            for &n in &cfg.sweep_elements_n {
                let (h, v) = grid_for(n)?;
                let mut point_cfg = cfg.clone();
                point_cfg.ris_horizontal = h;
                point_cfg.ris_vertical = v;
                points.push(SweepPoint {
                    label: n.to_string(),
                    cfg: point_cfg,
                    subframes: cfg.subframes,
                    snr_db: cfg.sweep_snr_db,
                });
            }
        }
        SweepAxis::Correlation => {
            for correlated in [true, false] {
                let mut point_cfg = cfg.clone();
                point_cfg.correlated = correlated;
                points.push(SweepPoint {
                    label: if correlated { "correlated" } else { "uncorrelated" }.to_string(),
                    cfg: point_cfg,
                    subframes: cfg.subframes,
                    snr_db: cfg.sweep_snr_db,
                });
            }
        }
    }
    Ok(points)
}

/// What `sweep` measured.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<CsvRow>,
    pub csv_path: PathBuf,
}

/// Regenerates test data along one axis and evaluates the fixed trained
/// model at every point — no retraining. Points where the subframe budget
/// cannot identify the surface (`L < N`) emit NaN for least squares and the
/// network (which denoises the least-squares estimate); the regularized
/// linear-MMSE column is always present.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, checkpoint: &Path) -> Result<SweepReport> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let (net, _meta) = load_checkpoint::<f32>(checkpoint)?;
    if *net.config() != cfg.net_config() {
        return Err(Error::Integrity(format!(
            "checkpoint architecture {:?} does not match the configured {:?}",
            net.config(),
            cfg.net_config()
        )));
    }
    let mut rows = Vec::new();
    for (pi, point) in sweep_points(cfg, axis)?.into_iter().enumerate() {
        let sampler = ChannelSampler::new(point.cfg.channel_config()?)?;
        let n = point.cfg.elements();
        let m = point.cfg.antennas();
        let sched = partial_dft_schedule(n, point.subframes)?;
        let ls_available = ls_filter(&sched).is_ok();
        let net_divisor = cfg.net_config().spatial_divisor();
        let net_available = ls_available && m % net_divisor == 0 && n % net_divisor == 0;
        let r_g = training_covariance(&sampler, point.cfg.covariance_samples, cfg.seed)?;
        let pilots = PilotConfig::from_snr_db(point.snr_db);
        let w_lmmse = lmmse_filter(&sched, &r_g, m, pilots.noise_variance(), true)?;
        let f_ls = if ls_available {
            Some(ls_filter(&sched)?)
        } else {
            None
        };
        let mut ls_ratios = Vec::new();
        let mut lmmse_ratios = Vec::new();
        let mut net_ratios = Vec::new();
        for j in 0..cfg.test_per_snr {
            let idx = (pi * cfg.test_per_snr + j) as u64;
            let (real, y) = draw_sample(
                &sampler,
                &sched,
                point.snr_db,
                cfg.seed,
                StreamDomain::TestChannel,
                idx,
            )?;
            let g = &real.cascaded;
            lmmse_ratios.push(nmse(&y.observation.dot(&w_lmmse), g)?);
            if let Some(f) = &f_ls {
                let ls = y.observation.dot(f);
                ls_ratios.push(nmse(&ls, g)?);
                if net_available {
                    let denoised = infer(&net, &ls.view(), InferMode::Full)?;
                    net_ratios.push(nmse(&denoised, g)?);
                }
            }
        }
        rows.push(mean_row(&point.label, "ls", &ls_ratios, cfg.seed));
        rows.push(mean_row(&point.label, "lmmse", &lmmse_ratios, cfg.seed));
        rows.push(mean_row(&point.label, "net_full", &net_ratios, cfg.seed));
    }
    let csv_path = cfg.out_dir.join(axis.file_name());
    write_rows(&csv_path, &rows)?;
    Ok(SweepReport { rows, csv_path })
}

/// What the direct-link experiment produced.
#[derive(Debug, Clone)]
pub struct DirectReport {
    pub rows: Vec<CsvRow>,
    pub csv_path: PathBuf,
    pub losses: Vec<EpochLoss>,
}

/// The user-to-receiver (surface off) experiment: estimates the direct
/// channel vector from surface-off subframes, reshapes it onto the antenna
/// grid, trains the same denoiser architecture on its plane encoding, and
/// compares against plain least squares per SNR.
pub fn cmd_direct(cfg: &ExperimentConfig) -> Result<DirectReport> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let (mh, mv) = (cfg.bs_horizontal, cfg.bs_vertical);
    let div = cfg.net_config().spatial_divisor();
    if mv % div != 0 || mh % div != 0 {
        return Err(Error::Config(format!(
            "the {mv}x{mh} antenna grid must be divisible by {div} for the \
             direct-link denoiser"
        )));
    }
    let sampler = ChannelSampler::new(cfg.channel_config()?)?;
    let grid = &cfg.snr_grid_db;

    // Training pool on the direct link.
    let mut estimates = Vec::with_capacity(cfg.samples);
    let mut truths = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let snr = grid[i % grid.len()];
        let mut rng = stream(cfg.seed, StreamDomain::Direct, i as u64);
        let b = sampler.direct_link(&mut rng);
        let pilots = PilotConfig::from_snr_db(snr);
        let y = simulate_direct_pilots(&wrap_direct(b.clone()), cfg.direct_subframes, &pilots, &mut rng)?;
        let est = estimate_direct(&y.view())?;
        estimates.push(reshape_direct(&est.view(), mh, mv)?);
        truths.push(reshape_direct(&b.view(), mh, mv)?);
    }
    let split = cfg.train_samples();
    let full_grid = PatchSpec {
        p_x: mh,
        p_y: mv,
        total_patches: 0, // set per split below
        seed: cfg.seed,
    };
    let train_ds = extract_patches(
        &estimates[..split],
        &truths[..split],
        &PatchSpec {
            total_patches: split,
            ..full_grid
        },
    )?;
    let val_ds = extract_patches(
        &estimates[split..],
        &truths[split..],
        &PatchSpec {
            total_patches: cfg.samples - split,
            ..full_grid
        },
    )?;
    drop(estimates);
    drop(truths);

    let mut net = build_net::<f32>(&cfg.net_config(), cfg.seed)?;
    let losses = train(
        &mut net,
        &train_ds.data,
        &train_ds.labels,
        &val_ds.data,
        &val_ds.labels,
        &cfg.train_config(0),
    )?;
    write_loss_trace(&cfg.out_dir.join(DIRECT_LOSS_FILE), &losses)?;
    save_checkpoint(
        &net,
        &CheckpointMeta {
            epochs_completed: cfg.epochs,
            lr: cfg.lr,
            decay: cfg.decay,
            seed: cfg.seed,
        },
        &cfg.out_dir.join(DIRECT_MODEL_FILE),
    )?;

    // Per-SNR test on fresh direct-link draws.
    let mut rows = Vec::new();
    for (si, &snr) in grid.iter().enumerate() {
        let pilots = PilotConfig::from_snr_db(snr);
        let mut ls_ratios = Vec::with_capacity(cfg.test_per_snr);
        let mut net_ratios = Vec::with_capacity(cfg.test_per_snr);
        for j in 0..cfg.test_per_snr {
            let idx = (cfg.samples + si * cfg.test_per_snr + j) as u64;
            let mut rng = stream(cfg.seed, StreamDomain::Direct, idx);
            let b = sampler.direct_link(&mut rng);
            let y = simulate_direct_pilots(&wrap_direct(b.clone()), cfg.direct_subframes, &pilots, &mut rng)?;
            let est = estimate_direct(&y.view())?;
            ls_ratios.push(nmse(&est, &b)?);
            let est_grid = reshape_direct(&est.view(), mh, mv)?;
            let truth_grid = reshape_direct(&b.view(), mh, mv)?;
            let denoised = infer(&net, &est_grid.view(), InferMode::Full)?;
            net_ratios.push(nmse(&denoised, &truth_grid)?);
        }
        let axis = fmt_value(snr);
        rows.push(mean_row(&axis, "ls", &ls_ratios, cfg.seed));
        rows.push(mean_row(&axis, "net_full", &net_ratios, cfg.seed));
    }
    let csv_path = cfg.out_dir.join(DIRECT_FILE);
    write_rows(&csv_path, &rows)?;
    Ok(DirectReport {
        rows,
        csv_path,
        losses,
    })
}

/// What the complexity report contains.
#[derive(Debug, Clone)]
pub struct ComplexityReport {
    pub closed: CostBreakdown,
    pub exact: CostBreakdown,
    /// Exact total divided by closed-form total.
    pub ratio: f64,
    pub table: String,
    pub csv_path: PathBuf,
}

/// Evaluates both cost models for the configured network at the configured
/// patch size and writes the combined comma-separated breakdown.
pub fn cmd_complexity(cfg: &ExperimentConfig) -> Result<ComplexityReport> {
    cfg.validate()?;
    ensure_out_dir(cfg)?;
    let net = build_net::<f32>(&cfg.net_config(), cfg.seed)?;
    let closed = closed_form_cost(
        cfg.patch_rows,
        cfg.patch_cols,
        cfg.base_filters,
        cfg.kernel,
        cfg.levels,
    );
    let exact = exact_layer_cost(&net, cfg.patch_rows, cfg.patch_cols)?;
    let ratio = exact.total as f64 / closed.total as f64;
    let mut csv = String::from("# closed-form dominant-term model\n");
    csv.push_str(&closed.to_csv());
    csv.push_str("# exact wiring-graph count\n");
    csv.push_str(&exact.to_csv());
    csv.push_str(&format!("# exact/closed ratio = {ratio}\n"));
    let csv_path = cfg.out_dir.join(COMPLEXITY_FILE);
    std::fs::write(&csv_path, &csv)?;
    let mut table = String::from("closed-form dominant-term model\n");
    table.push_str(&closed.to_table());
    table.push_str("exact wiring-graph count\n");
    table.push_str(&exact.to_table());
    table.push_str(&format!("exact/closed ratio: {ratio:.3}\n"));
    Ok(ComplexityReport {
        closed,
        exact,
        ratio,
        table,
        csv_path,
    })
}

/// One self-test check with its measured detail.
#[derive(Debug, Clone)]
pub struct SelfCheck {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// What `selftest` verified.
#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub checks: Vec<SelfCheck>,
}

impl SelftestReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Fast invariant battery: pilot-schedule orthogonality, noiseless
/// least-squares recovery, and an analytic-vs-numeric gradient check.
pub fn cmd_selftest(cfg: &ExperimentConfig) -> Result<SelftestReport> {
    cfg.validate()?;
    let mut checks = Vec::new();

    // Schedule rows must be orthogonal: S·S^H = L·I.
    let n = cfg.elements();
    let sched = dft_schedule(n, cfg.subframes)?;
    let s = sched.matrix();
    let gram = s.dot(&s.t().mapv(|z| z.conj()));
    let mut err = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j {
                Complex64::new(cfg.subframes as f64, 0.0)
            } else {
                Complex64::default()
            };
            err += (gram[[i, j]] - target).norm_sqr();
        }
    }
    let resid = err.sqrt() / (cfg.subframes as f64 * (n as f64).sqrt());
    checks.push(SelfCheck {
        name: "schedule_orthogonality",
        pass: resid < 1e-12,
        detail: format!("relative residual {resid:.3e}"),
    });

    // Noiseless pilots must recover the channel to double-precision depth.
    let sampler = ChannelSampler::new(cfg.channel_config()?)?;
    let mut worst = 0.0f64;
    for i in 0..10 {
        let (real, y) = draw_sample(
            &sampler,
            &sched,
            f64::INFINITY,
            cfg.seed,
            StreamDomain::Statistics,
            1000 + i,
        )?;
        let ls = ls_estimate(&y, &sched)?;
        worst = worst.max(nmse(&ls, &real.cascaded)?);
    }
    checks.push(SelfCheck {
        name: "noiseless_ls_recovery",
        pass: worst < 1e-20,
        detail: format!("worst NMSE {worst:.3e}"),
    });

    // Analytic gradients must match central finite differences.
    let mut small = cfg.net_config();
    small.base_filters = small.base_filters.min(4);
    let net = build_net::<f64>(&small, cfg.seed)?;
    let div = small.spatial_divisor();
    let side = (2 * div).max(8);
    let mut rng = stream(cfg.seed, StreamDomain::Statistics, 2000);
    use rand::Rng;
    let input = Array4::from_shape_fn((2, 2, side, side), |_| rng.gen::<f64>() - 0.5);
    let target = input.mapv(|v| 0.5 * v);
    let report = gradient_check(&net, &input, &target, 60, cfg.seed)?;
    checks.push(SelfCheck {
        name: "gradient_check",
        pass: report.max_rel_err < 1e-4,
        detail: format!(
            "max relative error {:.3e} over {} probes",
            report.max_rel_err,
            report.probes()
        ),
    });

    Ok(SelftestReport { checks })
}
