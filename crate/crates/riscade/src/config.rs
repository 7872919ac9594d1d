//! The resolved parameter tree every experiment runs from.
//!
//! [`ExperimentConfig`] collects geometry, channel statistics, pilot
//! protocol, patch extraction, network architecture, training schedule,
//! sample budgets, and sweep axes in one flat structure. Two named profiles
//! exist: `desk` (the default; sized so a full generate/train/eval cycle
//! fits in CPU-minutes on one core) and `paper` (the large-array sizing;
//! accepted and echoed, but generating it is a long-haul run).
//!
//! Serialization is a flat `key = value` text format, one key per line,
//! `#` comments allowed. Every key can also be overridden through an
//! environment variable: `RISCADE_` plus the key upper-cased with dots
//! replaced by underscores (`channel.rho` -> `RISCADE_CHANNEL_RHO`).
//! Precedence: profile defaults < config file < environment < CLI flags.
//!
//! Every run writes the fully resolved tree (defaults applied) next to its
//! outputs; feeding that echo back through `--config` reproduces the run.
//!
//! All lengths are in carrier wavelengths (the sampler is dimensionless),
//! so element spacings are plain fractions like `0.5` and `0.25`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::channel::{AnglePolicy, ChannelConfig};
use crate::denoiser::{NetConfig, TrainConfig};
use crate::geometry::{ArrayGeometry, SteeringConvention};
use crate::{Error, Result};

/// Environment-variable prefix for config overrides.
pub const ENV_PREFIX: &str = "RISCADE_";

/// File name of the resolved-config echo written beside run outputs.
pub const ECHO_FILE: &str = "config_echo.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Receiver (base station) planar array: elements across and down.
    pub bs_horizontal: usize,
    pub bs_vertical: usize,
    /// Receiver element spacing in wavelengths.
    pub bs_spacing: f64,
    /// Reflecting-surface planar array.
    pub ris_horizontal: usize,
    pub ris_vertical: usize,
    pub ris_spacing: f64,

    /// Rician factor of the user-to-surface link.
    pub eta_ris: f64,
    /// Rician factor of the surface-to-receiver link.
    pub eta_bs: f64,
    /// Per-axis receiver correlation coefficient.
    pub rho: f64,
    /// When false, both sides fade without spatial correlation.
    pub correlated: bool,

    /// Pilot subframes per estimate (columns of the phase schedule).
    pub subframes: usize,
    /// Operating points; training data mixes these uniformly, testing gets
    /// one dedicated set per point.
    pub snr_grid_db: Vec<f64>,
    /// Surface-off subframes used by the direct-link experiment.
    pub direct_subframes: usize,

    /// Patch size cut from each full estimate for training.
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub patches_per_sample: usize,

    /// Network architecture.
    pub levels: usize,
    pub base_filters: usize,
    pub convs_per_block: usize,
    pub kernel: usize,
    pub batchnorm: bool,

    /// Training schedule.
    pub lr: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,

    /// Channel realizations generated for training + validation.
    pub samples: usize,
    /// Fraction of samples (and therefore patches) in the training split.
    pub train_fraction: f64,
    /// Full-resolution test samples per SNR point.
    pub test_per_snr: usize,
    /// Training-distribution draws used to estimate the channel covariance
    /// the linear-MMSE filters need.
    pub covariance_samples: usize,
    pub seed: u64,
    pub out_dir: PathBuf,

    /// Operating point the non-SNR sweeps run at.
    pub sweep_snr_db: f64,
    pub sweep_pilot_l: Vec<usize>,
    pub sweep_antennas_m: Vec<usize>,
    pub sweep_elements_n: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// CPU-minutes profile: 64 receiver antennas, 16 surface elements,
    /// 2 000 samples, a two-level network.
    pub fn desk() -> Self {
        ExperimentConfig {
            bs_horizontal: 8,
            bs_vertical: 8,
            bs_spacing: 0.5,
            ris_horizontal: 4,
            ris_vertical: 4,
            ris_spacing: 0.25,
            eta_ris: 10.0,
            eta_bs: 10.0,
            rho: 0.8,
            correlated: true,
            subframes: 16,
            snr_grid_db: vec![-5.0, 0.0, 5.0, 10.0, 15.0],
            direct_subframes: 16,
            patch_rows: 8,
            patch_cols: 8,
            patches_per_sample: 1,
            levels: 2,
            base_filters: 8,
            convs_per_block: 2,
            kernel: 3,
            batchnorm: true,
            lr: 0.004,
            decay: 0.95,
            batch_size: 32,
            epochs: 10,
            samples: 2000,
            train_fraction: 0.7,
            test_per_snr: 2000,
            covariance_samples: 1000,
            seed: 1,
            out_dir: PathBuf::from("out"),
            sweep_snr_db: 10.0,
            sweep_pilot_l: vec![16, 24, 32],
            sweep_antennas_m: vec![64, 256],
            sweep_elements_n: vec![4, 16],
        }
    }

    /// Large-array profile: 1024 receiver antennas (32x32), 128 surface
    /// elements (16x8), 10 000 samples, 32x32 patches, a three-level
    /// 32-filter network trained for 40 epochs.
    pub fn paper() -> Self {
        ExperimentConfig {
            bs_horizontal: 32,
            bs_vertical: 32,
            ris_horizontal: 16,
            ris_vertical: 8,
            subframes: 128,
            patch_rows: 32,
            patch_cols: 32,
            levels: 3,
            base_filters: 32,
            epochs: 40,
            samples: 10_000,
            sweep_pilot_l: vec![128, 192, 256],
            sweep_antennas_m: vec![256, 1024],
            sweep_elements_n: vec![32, 128],
            ..Self::desk()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (available: desk, paper)"
            ))),
        }
    }

    /// Total receiver antennas `M`.
    pub fn antennas(&self) -> usize {
        self.bs_horizontal * self.bs_vertical
    }

    /// Total surface elements `N`.
    pub fn elements(&self) -> usize {
        self.ris_horizontal * self.ris_vertical
    }

    /// Samples in the training split (the rest validate).
    pub fn train_samples(&self) -> usize {
        (self.samples as f64 * self.train_fraction).round() as usize
    }

    pub fn val_samples(&self) -> usize {
        self.samples - self.train_samples()
    }

    pub fn receiver_geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(
            self.bs_horizontal,
            self.bs_vertical,
            self.bs_spacing,
            self.bs_spacing,
            1.0,
        )
    }

    pub fn surface_geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(
            self.ris_horizontal,
            self.ris_vertical,
            self.ris_spacing,
            self.ris_spacing,
            1.0,
        )
    }

    pub fn channel_config(&self) -> Result<ChannelConfig> {
        Ok(ChannelConfig {
            surface: self.surface_geometry()?,
            receiver: self.receiver_geometry()?,
            eta_surface: self.eta_ris,
            eta_receiver: self.eta_bs,
            rho: self.rho,
            correlated: self.correlated,
            angles: AnglePolicy::UniformPerSample,
            convention: SteeringConvention::default(),
        })
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            levels: self.levels,
            base_filters: self.base_filters,
            convs_per_block: self.convs_per_block,
            kernel: self.kernel,
            use_batchnorm: self.batchnorm,
        }
    }

    pub fn train_config(&self, start_epoch: usize) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            decay: self.decay,
            batch_size: self.batch_size,
            epochs: self.epochs.saturating_sub(start_epoch),
            seed: self.seed,
            start_epoch,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let m = self.antennas();
        let n = self.elements();
        if m == 0 || n == 0 {
            return fail("array grids need at least one element per axis".into());
        }
        if !(self.bs_spacing > 0.0) || !(self.ris_spacing > 0.0) {
            return fail("element spacings must be positive".into());
        }
        if !(self.eta_ris >= 0.0) || !(self.eta_bs >= 0.0) {
            return fail("Rician factors must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return fail(format!("channel.rho must be in [0, 1), got {}", self.rho));
        }
        if self.subframes < n {
            return fail(format!(
                "pilots.subframes = {} cannot invert {n} surface elements; the \
                 least-squares pipeline needs subframes >= elements",
                self.subframes
            ));
        }
        if self.snr_grid_db.is_empty() {
            return fail("pilots.snr_grid_db must list at least one operating point".into());
        }
        if self.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return fail("pilots.snr_grid_db entries must be finite".into());
        }
        if self.direct_subframes == 0 {
            return fail("pilots.direct_subframes must be at least 1".into());
        }
        self.net_config().validate()?;
        if self.patch_rows == 0 || self.patch_cols == 0 || self.patches_per_sample == 0 {
            return fail("patch dimensions and count must be at least 1".into());
        }
        if self.patch_rows > m || self.patch_cols > n {
            return fail(format!(
                "a {}x{} patch does not fit in the {m}x{n} channel matrix",
                self.patch_rows, self.patch_cols
            ));
        }
        let div = self.net_config().spatial_divisor();
        if self.patch_rows % div != 0 || self.patch_cols % div != 0 {
            return fail(format!(
                "patch {}x{} must be divisible by {div} (the network halves \
                 resolution {} times)",
                self.patch_rows,
                self.patch_cols,
                self.levels - 1
            ));
        }
        if m % div != 0 || n % div != 0 {
            return fail(format!(
                "the {m}x{n} channel matrix must be divisible by {div} for \
                 full-resolution inference"
            ));
        }
        if m % self.patch_rows != 0 || n % self.patch_cols != 0 {
            return fail(format!(
                "patch {}x{} must tile the {m}x{n} channel matrix exactly for \
                 tiled inference",
                self.patch_rows, self.patch_cols
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail(format!("train.decay must be in (0, 1], got {}", self.decay));
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if self.samples == 0 {
            return fail("run.samples must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!(
                "run.train_fraction must be strictly between 0 and 1, got {}",
                self.train_fraction
            ));
        }
        if self.train_samples() == 0 || self.val_samples() == 0 {
            return fail(format!(
                "the {}/{} split leaves an empty train or validation set",
                self.train_samples(),
                self.val_samples()
            ));
        }
        if self.test_per_snr == 0 {
            return fail("run.test_per_snr must be at least 1".into());
        }
        if self.covariance_samples == 0 || self.covariance_samples > self.samples {
            return fail(format!(
                "run.covariance_samples must be in 1..={}, got {}",
                self.samples, self.covariance_samples
            ));
        }
        if !self.sweep_snr_db.is_finite() {
            return fail("sweep.snr_db must be finite".into());
        }
        for (key, list_empty) in [
            ("sweep.pilot_l", self.sweep_pilot_l.is_empty()),
            ("sweep.antennas_m", self.sweep_antennas_m.is_empty()),
            ("sweep.elements_n", self.sweep_elements_n.is_empty()),
        ] {
            if list_empty {
                return fail(format!("{key} must list at least one point"));
            }
        }
        Ok(())
    }

    /// All keys with their serialized values, in echo order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let fu = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let ff = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("bs.horizontal".into(), self.bs_horizontal.to_string()),
            ("bs.vertical".into(), self.bs_vertical.to_string()),
            ("bs.spacing".into(), self.bs_spacing.to_string()),
            ("ris.horizontal".into(), self.ris_horizontal.to_string()),
            ("ris.vertical".into(), self.ris_vertical.to_string()),
            ("ris.spacing".into(), self.ris_spacing.to_string()),
            ("channel.eta_ris".into(), self.eta_ris.to_string()),
            ("channel.eta_bs".into(), self.eta_bs.to_string()),
            ("channel.rho".into(), self.rho.to_string()),
            ("channel.correlated".into(), self.correlated.to_string()),
            ("pilots.subframes".into(), self.subframes.to_string()),
            ("pilots.snr_grid_db".into(), ff(&self.snr_grid_db)),
            (
                "pilots.direct_subframes".into(),
                self.direct_subframes.to_string(),
            ),
            ("patch.rows".into(), self.patch_rows.to_string()),
            ("patch.cols".into(), self.patch_cols.to_string()),
            (
                "patch.per_sample".into(),
                self.patches_per_sample.to_string(),
            ),
            ("net.levels".into(), self.levels.to_string()),
            ("net.base_filters".into(), self.base_filters.to_string()),
            (
                "net.convs_per_block".into(),
                self.convs_per_block.to_string(),
            ),
            ("net.kernel".into(), self.kernel.to_string()),
            ("net.batchnorm".into(), self.batchnorm.to_string()),
            ("train.lr".into(), self.lr.to_string()),
            ("train.decay".into(), self.decay.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.epochs".into(), self.epochs.to_string()),
            ("run.samples".into(), self.samples.to_string()),
            ("run.train_fraction".into(), self.train_fraction.to_string()),
            ("run.test_per_snr".into(), self.test_per_snr.to_string()),
            (
                "run.covariance_samples".into(),
                self.covariance_samples.to_string(),
            ),
            ("run.seed".into(), self.seed.to_string()),
            (
                "run.out_dir".into(),
                self.out_dir.to_string_lossy().into_owned(),
            ),
            ("sweep.snr_db".into(), self.sweep_snr_db.to_string()),
            ("sweep.pilot_l".into(), fu(&self.sweep_pilot_l)),
            ("sweep.antennas_m".into(), fu(&self.sweep_antennas_m)),
            ("sweep.elements_n".into(), fu(&self.sweep_elements_n)),
        ]
    }

    /// Applies one `key = value` assignment. Unknown keys and malformed
    /// values are configuration errors.
    pub fn apply_pair(&mut self, key: &str, value: &str) -> Result<()> {
        fn int(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: {v:?} is not a nonnegative integer")))
        }
        fn float(key: &str, v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: {v:?} is not a number")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("{key}: {v:?} is not true/false"))),
            }
        }
        fn float_list(key: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',').map(|p| float(key, p.trim())).collect()
        }
        fn int_list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|p| int(key, p.trim())).collect()
        }
        match key {
            "bs.horizontal" => self.bs_horizontal = int(key, value)?,
            "bs.vertical" => self.bs_vertical = int(key, value)?,
            "bs.spacing" => self.bs_spacing = float(key, value)?,
            "ris.horizontal" => self.ris_horizontal = int(key, value)?,
            "ris.vertical" => self.ris_vertical = int(key, value)?,
            "ris.spacing" => self.ris_spacing = float(key, value)?,
            "channel.eta_ris" => self.eta_ris = float(key, value)?,
            "channel.eta_bs" => self.eta_bs = float(key, value)?,
            "channel.rho" => self.rho = float(key, value)?,
            "channel.correlated" => self.correlated = flag(key, value)?,
            "pilots.subframes" => self.subframes = int(key, value)?,
            "pilots.snr_grid_db" => self.snr_grid_db = float_list(key, value)?,
            "pilots.direct_subframes" => self.direct_subframes = int(key, value)?,
            "patch.rows" => self.patch_rows = int(key, value)?,
            "patch.cols" => self.patch_cols = int(key, value)?,
            "patch.per_sample" => self.patches_per_sample = int(key, value)?,
            "net.levels" => self.levels = int(key, value)?,
            "net.base_filters" => self.base_filters = int(key, value)?,
            "net.convs_per_block" => self.convs_per_block = int(key, value)?,
            "net.kernel" => self.kernel = int(key, value)?,
            "net.batchnorm" => self.batchnorm = flag(key, value)?,
            "train.lr" => self.lr = float(key, value)?,
            "train.decay" => self.decay = float(key, value)?,
            "train.batch_size" => self.batch_size = int(key, value)?,
            "train.epochs" => self.epochs = int(key, value)?,
            "run.samples" => self.samples = int(key, value)?,
            "run.train_fraction" => self.train_fraction = float(key, value)?,
            "run.test_per_snr" => self.test_per_snr = int(key, value)?,
            "run.covariance_samples" => self.covariance_samples = int(key, value)?,
            "run.seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: {value:?} is not a seed")))?
            }
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            "sweep.snr_db" => self.sweep_snr_db = float(key, value)?,
            "sweep.pilot_l" => self.sweep_pilot_l = int_list(key, value)?,
            "sweep.antennas_m" => self.sweep_antennas_m = int_list(key, value)?,
            "sweep.elements_n" => self.sweep_elements_n = int_list(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown configuration key {key:?}"
                )))
            }
        }
        Ok(())
    }

    /// Serializes the full tree in the `key = value` file format.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved experiment configuration\n");
        for (k, v) in self.pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Applies every assignment in a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "config line {} has no '=': {line:?}",
                    lineno + 1
                ))
            })?;
            self.apply_pair(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        self.apply_text(&text)
    }

    /// Environment-variable name for a config key.
    pub fn env_key(key: &str) -> String {
        format!(
            "{ENV_PREFIX}{}",
            key.to_ascii_uppercase().replace('.', "_")
        )
    }

    /// Applies overrides found through `lookup` (normally `std::env::var`).
    /// Returns the `(key, value)` pairs that were applied, for logging.
    pub fn apply_env<F: Fn(&str) -> Option<String>>(
        &mut self,
        lookup: F,
    ) -> Result<Vec<(String, String)>> {
        let keys: Vec<String> = self.pairs().into_iter().map(|(k, _)| k).collect();
        let mut applied = Vec::new();
        for key in keys {
            if let Some(value) = lookup(&Self::env_key(&key)) {
                self.apply_pair(&key, &value)?;
                applied.push((key, value));
            }
        }
        Ok(applied)
    }

    /// Writes the resolved tree beside the run outputs and returns the path.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }

    /// Flat snapshot for embedding in dataset container headers.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.pairs().into_iter().collect()
    }
}

/// Splits a total element count into a planar grid, preferring the squarest
/// factorization with the horizontal axis at least as long as the vertical.
pub fn grid_for(total: usize) -> Result<(usize, usize)> {
    if total == 0 {
        return Err(Error::Config("array size must be positive".into()));
    }
    let root = (total as f64).sqrt() as usize;
    for v in (1..=root).rev() {
        if total % v == 0 {
            return Ok((total / v, v));
        }
    }
    Ok((total, 1))
}
