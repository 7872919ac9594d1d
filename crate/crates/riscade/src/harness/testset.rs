//! Per-SNR test containers: full-resolution samples for estimator
//! evaluation.
//!
//! Each container holds, for every test sample, the despread pilot
//! observation `Y` (`M x L`) and the true cascaded channel `G` (`M x N`) in
//! double precision — enough to run every estimator downstream without
//! regenerating channels. Layout mirrors the patch container: the magic
//! `RCTS`, a format version, a length-prefixed `key=value` text header, then
//! the complex matrices as interleaved `f64` little-endian (re, im) pairs,
//! sample-major (`Y` then `G` per sample).

use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::FormatError;
use crate::{Error, Result};

pub const TESTSET_VERSION: u32 = 1;
const MAGIC: [u8; 4] = *b"RCTS";

/// Full-resolution evaluation samples at one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    /// Operating point of the noise draws.
    pub snr_db: f64,
    /// Post-despreading noise variance the observations were simulated at.
    pub noise_variance: f64,
    /// Pilot subframes `L` (columns of each observation).
    pub subframes: usize,
    /// Master seed of the generating run.
    pub seed: u64,
    /// `M x L` despread observations.
    pub observations: Vec<Array2<Complex64>>,
    /// `M x N` true cascaded channels, aligned with `observations`.
    pub truths: Vec<Array2<Complex64>>,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// `(antennas, elements)` of the stored channels.
    pub fn channel_dim(&self) -> (usize, usize) {
        self.truths.first().map(|g| g.dim()).unwrap_or((0, 0))
    }

    fn check(&self) -> Result<()> {
        if self.observations.len() != self.truths.len() {
            return Err(Error::Shape(format!(
                "{} observations but {} truths",
                self.observations.len(),
                self.truths.len()
            )));
        }
        if self.is_empty() {
            return Err(Error::Argument("test set has no samples".into()));
        }
        let (m, n) = self.channel_dim();
        for (y, g) in self.observations.iter().zip(&self.truths) {
            if y.dim() != (m, self.subframes) || g.dim() != (m, n) {
                return Err(Error::Shape(format!(
                    "inconsistent sample shapes: observation {:?}, truth {:?}",
                    y.dim(),
                    g.dim()
                )));
            }
        }
        Ok(())
    }
}

fn push_matrix(out: &mut Vec<u8>, a: &Array2<Complex64>) {
    for z in a.iter() {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
}

/// Writes a test container to `path`.
pub fn serialize_test_set(ts: &TestSet, path: &Path) -> Result<()> {
    ts.check()?;
    let (m, n) = ts.channel_dim();
    let header = format!(
        "dtype=c128le\nsamples={}\nantennas={m}\nelements={n}\nsubframes={}\n\
         snr_db={}\nnoise_variance={}\nseed={}\n",
        ts.len(),
        ts.subframes,
        ts.snr_db,
        ts.noise_variance,
        ts.seed
    );
    let per_sample = 16 * (m * ts.subframes + m * n);
    let mut out = Vec::with_capacity(12 + header.len() + ts.len() * per_sample);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&TESTSET_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (y, g) in ts.observations.iter().zip(&ts.truths) {
        push_matrix(&mut out, y);
        push_matrix(&mut out, g);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_matrix(bytes: &[u8], at: &mut usize, rows: usize, cols: usize) -> Array2<Complex64> {
    let mut a = Array2::default((rows, cols));
    for z in a.iter_mut() {
        let re = f64::from_le_bytes(bytes[*at..*at + 8].try_into().unwrap());
        let im = f64::from_le_bytes(bytes[*at + 8..*at + 16].try_into().unwrap());
        *z = Complex64::new(re, im);
        *at += 16;
    }
    a
}

/// Reads and validates a test container.
pub fn deserialize_test_set(path: &Path) -> Result<TestSet> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 {
        return Err(FormatError::Truncated {
            needed: 12,
            found: bytes.len(),
        }
        .into());
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        }
        .into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TESTSET_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: TESTSET_VERSION,
        }
        .into());
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(FormatError::Truncated {
            needed: 12 + header_len,
            found: bytes.len(),
        }
        .into());
    }
    let header = std::str::from_utf8(&bytes[12..12 + header_len])
        .map_err(|_| FormatError::MalformedHeader("header is not valid UTF-8".into()))?;
    let mut fields = std::collections::BTreeMap::new();
    for line in header.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::MalformedHeader(format!("line without '=': {line:?}")))?;
        if fields.insert(k, v).is_some() {
            return Err(FormatError::MalformedHeader(format!("duplicate key {k:?}")).into());
        }
    }
    let get = |k: &str| -> Result<&str> {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| FormatError::MalformedHeader(format!("missing key {k:?}")).into())
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| FormatError::MalformedHeader(format!("key {k:?} is not an integer")).into())
    };
    let float = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| FormatError::MalformedHeader(format!("key {k:?} is not a number")).into())
    };
    if get("dtype")? != "c128le" {
        return Err(
            FormatError::MalformedHeader(format!("unsupported dtype {:?}", get("dtype")?)).into(),
        );
    }
    let samples = int("samples")?;
    let m = int("antennas")?;
    let n = int("elements")?;
    let subframes = int("subframes")?;
    let snr_db = float("snr_db")?;
    let noise_variance = float("noise_variance")?;
    let seed = get("seed")?
        .parse::<u64>()
        .map_err(|_| FormatError::MalformedHeader("seed is not an integer".into()))?;
    if samples == 0 || m == 0 || n == 0 || subframes == 0 {
        return Err(Error::Integrity(
            "test container declares an empty dimension".into(),
        ));
    }

    let per_sample = 16 * (m * subframes + m * n);
    let expected = 12 + header_len + samples * per_sample;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            needed: expected,
            found: bytes.len(),
        }
        .into());
    }
    if bytes.len() > expected {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after test payload",
            bytes.len() - expected
        )));
    }
    let mut at = 12 + header_len;
    let mut observations = Vec::with_capacity(samples);
    let mut truths = Vec::with_capacity(samples);
    for _ in 0..samples {
        observations.push(read_matrix(&bytes, &mut at, m, subframes));
        truths.push(read_matrix(&bytes, &mut at, m, n));
    }
    Ok(TestSet {
        snr_db,
        noise_variance,
        subframes,
        seed,
        observations,
        truths,
    })
}
