//! Training-patch extraction, the complex→planar encoding, direct-channel
//! reshaping, and the on-disk dataset container.
//!
//! The denoiser trains on small spatial sub-blocks of the least-squares
//! estimate rather than on full `M×N` channel matrices: spatial correlation
//! makes a patch statistically representative of the whole map, and the
//! network's input dimensionality (hence cost) drops accordingly. Each patch
//! is stored as two `f32` planes (real, imaginary) together with its label —
//! the identically-sliced true channel — and a provenance triple
//! `(sample, x, y)` that makes every patch auditable against its source.
//!
//! Container layout (little-endian throughout):
//!
//! ```text
//! "RCDS" | version u32 | header-length u32 | UTF-8 key=value header
//!        | data tensor f32 | label tensor f32
//! ```
//!
//! Tensors are row-major `[patch, channel, row, col]`. The header carries the
//! shapes, dtype tag, seed, provenance triples, and a flat config snapshot,
//! so a container is self-describing and byte-reproducible from its inputs.

use crate::error::{Error, FormatError, Result};
use crate::rng::{stream, StreamDomain};
use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;

/// Container format version written by [`serialize_dataset`].
pub const DATASET_VERSION: u32 = 1;
const DATASET_MAGIC: [u8; 4] = *b"RCDS";

/// How patches are cut out of a stack of channel maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    /// Patch width along the surface-element axis (columns).
    pub p_x: usize,
    /// Patch height along the antenna axis (rows).
    pub p_y: usize,
    /// Total number of patches over the whole stack; must divide evenly by
    /// the number of samples.
    pub total_patches: usize,
    /// Master seed for the per-sample offset streams.
    pub seed: u64,
}

/// Where a patch came from: source sample index and the top-left corner
/// `(x, y)` = (column offset, row offset) of the slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchProvenance {
    pub sample: u32,
    pub x: u32,
    pub y: u32,
}

/// Metadata carried alongside the tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetHeader {
    /// Seed the offsets were drawn under.
    pub seed: u64,
    /// Flat config snapshot (generation parameters, SNR grid, …); keys are
    /// free-form and serialized in sorted order.
    pub config: BTreeMap<String, String>,
    /// One triple per patch, in tensor order.
    pub provenance: Vec<PatchProvenance>,
}

/// A stack of plane-encoded patches plus labels and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    /// `[patch, channel, row, col]`; channel 0 = real, 1 = imaginary part of
    /// the noisy estimate.
    pub data: Array4<f32>,
    /// Same layout, holding the true channel.
    pub labels: Array4<f32>,
    pub header: DatasetHeader,
}

impl PatchDataset {
    pub fn num_patches(&self) -> usize {
        self.data.shape()[0]
    }

    /// `(rows, cols)` of one patch.
    pub fn patch_dim(&self) -> (usize, usize) {
        (self.data.shape()[2], self.data.shape()[3])
    }
}

/// Cuts `total_patches` aligned data/label patches out of paired stacks of
/// complex maps (noisy estimates and ground truth).
///
/// Each sample contributes `total_patches / len` patches whose top-left
/// corners are drawn uniformly from the inclusive offset ranges
/// `x ∈ {0..N−p_x}`, `y ∈ {0..M−p_y}` — so edge-flush patches are reachable.
/// Offsets come from a per-sample RNG stream keyed by the sample index,
/// which keeps the output identical no matter how extraction is scheduled
/// across threads.
pub fn extract_patches(
    estimates: &[Array2<Complex64>],
    truths: &[Array2<Complex64>],
    spec: &PatchSpec,
) -> Result<PatchDataset> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        return Err(Error::Argument(format!(
            "need matching non-empty stacks, got {} estimates and {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    let (m, n) = estimates[0].dim();
    for (idx, (e, t)) in estimates.iter().zip(truths).enumerate() {
        if e.dim() != (m, n) || t.dim() != (m, n) {
            return Err(Error::Shape(format!(
                "sample {idx} has shape {:?}/{:?}, expected {:?}",
                e.dim(),
                t.dim(),
                (m, n)
            )));
        }
    }
    if spec.p_x == 0 || spec.p_y == 0 || spec.total_patches == 0 {
        return Err(Error::Config(
            "patch dimensions and total count must be at least 1".into(),
        ));
    }
    if spec.p_x > n || spec.p_y > m {
        return Err(Error::Shape(format!(
            "{}x{} patch does not fit in a {m}x{n} sample",
            spec.p_y, spec.p_x
        )));
    }
    if spec.total_patches % estimates.len() != 0 {
        return Err(Error::Config(format!(
            "{} patches cannot be split evenly over {} samples",
            spec.total_patches,
            estimates.len()
        )));
    }
    let per_sample = spec.total_patches / estimates.len();
    let patch_len = 2 * spec.p_y * spec.p_x;

    struct SamplePatches {
        data: Vec<f32>,
        labels: Vec<f32>,
        provenance: Vec<PatchProvenance>,
    }

    let parts: Vec<SamplePatches> = (0..estimates.len())
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(spec.seed, StreamDomain::Patch, s as u64);
            let mut data = Vec::with_capacity(per_sample * patch_len);
            let mut labels = Vec::with_capacity(per_sample * patch_len);
            let mut provenance = Vec::with_capacity(per_sample);
            for _ in 0..per_sample {
                let x = rng.gen_range(0..=n - spec.p_x);
                let y = rng.gen_range(0..=m - spec.p_y);
                provenance.push(PatchProvenance {
                    sample: s as u32,
                    x: x as u32,
                    y: y as u32,
                });
                for (src, dst) in [(&estimates[s], &mut data), (&truths[s], &mut labels)] {
                    for extract_im in [false, true] {
                        for r in 0..spec.p_y {
                            for c in 0..spec.p_x {
                                let z = src[[y + r, x + c]];
                                dst.push(if extract_im { z.im as f32 } else { z.re as f32 });
                            }
                        }
                    }
                }
            }
            SamplePatches {
                data,
                labels,
                provenance,
            }
        })
        .collect();

    let mut data = Vec::with_capacity(spec.total_patches * patch_len);
    let mut labels = Vec::with_capacity(spec.total_patches * patch_len);
    let mut provenance = Vec::with_capacity(spec.total_patches);
    for part in parts {
        data.extend(part.data);
        labels.extend(part.labels);
        provenance.extend(part.provenance);
    }
    let shape = (spec.total_patches, 2, spec.p_y, spec.p_x);
    Ok(PatchDataset {
        data: Array4::from_shape_vec(shape, data).expect("extraction fills the declared shape"),
        labels: Array4::from_shape_vec(shape, labels).expect("extraction fills the declared shape"),
        header: DatasetHeader {
            seed: spec.seed,
            config: BTreeMap::new(),
            provenance,
        },
    })
}

/// Splits a complex matrix into stacked real and imaginary planes
/// `[2, H, W]`. Exact: each plane holds the untouched `f64` component.
pub fn complex_to_planes(a: &ArrayView2<Complex64>) -> Array3<f64> {
    let (h, w) = a.dim();
    Array3::from_shape_fn((2, h, w), |(p, r, c)| {
        if p == 0 {
            a[[r, c]].re
        } else {
            a[[r, c]].im
        }
    })
}

/// Inverse of [`complex_to_planes`]; the input must have exactly two planes.
pub fn planes_to_complex(p: &ArrayView3<f64>) -> Result<Array2<Complex64>> {
    let (planes, h, w) = p.dim();
    if planes != 2 {
        return Err(Error::Shape(format!(
            "plane tensor has {planes} channels, expected 2 (real, imaginary)"
        )));
    }
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        Complex64::new(p[[0, r, c]], p[[1, r, c]])
    }))
}

/// Lays a length-`M` direct-channel vector onto its antenna grid: entry `i`
/// lands at row `i / m_h`, column `i % m_h` (vertical position slow,
/// horizontal fast — the same order antennas are numbered in), giving an
/// `m_v × m_h` matrix.
pub fn reshape_direct(
    b: &ArrayView1<Complex64>,
    m_h: usize,
    m_v: usize,
) -> Result<Array2<Complex64>> {
    if m_h * m_v != b.len() {
        return Err(Error::Shape(format!(
            "{m_h}x{m_v} grid cannot hold a {}-antenna vector",
            b.len()
        )));
    }
    Ok(Array2::from_shape_fn((m_v, m_h), |(r, c)| b[r * m_h + c]))
}

/// Inverse of [`reshape_direct`]: reads the grid back in antenna order.
pub fn flatten_direct(grid: &ArrayView2<Complex64>) -> Array1<Complex64> {
    Array1::from_iter(grid.iter().copied())
}

/// Writes a dataset container to `path` (layout in the module docs).
pub fn serialize_dataset(ds: &PatchDataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

/// Reads and validates a dataset container.
pub fn deserialize_dataset(path: &Path) -> Result<PatchDataset> {
    decode_dataset(&std::fs::read(path)?)
}

fn encode_dataset(ds: &PatchDataset) -> Vec<u8> {
    let shape = ds.data.shape();
    let mut header = String::new();
    header.push_str("dtype=f32le\n");
    header.push_str(&format!("patches={}\n", shape[0]));
    header.push_str(&format!("channels={}\n", shape[1]));
    header.push_str(&format!("rows={}\n", shape[2]));
    header.push_str(&format!("cols={}\n", shape[3]));
    header.push_str(&format!("seed={}\n", ds.header.seed));
    let triples: Vec<String> = ds
        .header
        .provenance
        .iter()
        .map(|p| format!("{},{},{}", p.sample, p.x, p.y))
        .collect();
    header.push_str(&format!("provenance={}\n", triples.join(";")));
    for (k, v) in &ds.header.config {
        header.push_str(&format!("config.{k}={v}\n"));
    }

    let mut out = Vec::with_capacity(12 + header.len() + 8 * ds.data.len());
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for tensor in [&ds.data, &ds.labels] {
        for v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_dataset(bytes: &[u8]) -> Result<PatchDataset> {
    if bytes.len() < 12 {
        return Err(FormatError::Truncated {
            needed: 12,
            found: bytes.len(),
        }
        .into());
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if magic != DATASET_MAGIC {
        return Err(FormatError::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: DATASET_VERSION,
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
    let header_text = std::str::from_utf8(&bytes[12..12 + header_len])
        .map_err(|_| FormatError::MalformedHeader("header is not valid UTF-8".into()))?;

    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for line in header_text.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| FormatError::MalformedHeader(format!("line without '=': {line:?}")))?;
        if fields.insert(key, value).is_some() {
            return Err(FormatError::MalformedHeader(format!("duplicate key {key:?}")).into());
        }
    }

    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| FormatError::MalformedHeader(format!("missing key {key:?}")).into())
    };
    let parse_num = |key: &str| -> Result<usize> {
        get(key)?.parse::<usize>().map_err(|_| {
            FormatError::MalformedHeader(format!("key {key:?} is not an integer")).into()
        })
    };

    let dtype = get("dtype")?;
    if dtype != "f32le" {
        return Err(FormatError::MalformedHeader(format!("unsupported dtype {dtype:?}")).into());
    }
    let patches = parse_num("patches")?;
    let channels = parse_num("channels")?;
    let rows = parse_num("rows")?;
    let cols = parse_num("cols")?;
    let seed = get("seed")?
        .parse::<u64>()
        .map_err(|_| FormatError::MalformedHeader("seed is not an integer".into()))?;
    if channels != 2 {
        return Err(Error::Integrity(format!(
            "container declares {channels} channels; this toolkit produces 2 (real, imaginary)"
        )));
    }

    let provenance_text = get("provenance")?;
    let mut provenance = Vec::new();
    if !provenance_text.is_empty() {
        for triple in provenance_text.split(';') {
            let parts: Vec<&str> = triple.split(',').collect();
            if parts.len() != 3 {
                return Err(FormatError::MalformedHeader(format!(
                    "provenance triple {triple:?} is not sample,x,y"
                ))
                .into());
            }
            let nums: Result<Vec<u32>> = parts
                .iter()
                .map(|p| {
                    p.parse::<u32>().map_err(|_| {
                        FormatError::MalformedHeader(format!(
                            "provenance component {p:?} is not an integer"
                        ))
                        .into()
                    })
                })
                .collect();
            let nums = nums?;
            provenance.push(PatchProvenance {
                sample: nums[0],
                x: nums[1],
                y: nums[2],
            });
        }
    }
    if provenance.len() != patches {
        return Err(Error::Integrity(format!(
            "header records {} provenance triples for {patches} patches",
            provenance.len()
        )));
    }

    let mut config = BTreeMap::new();
    for (key, value) in &fields {
        if let Some(stripped) = key.strip_prefix("config.") {
            config.insert(stripped.to_string(), value.to_string());
        }
    }

    let tensor_elems = patches
        .checked_mul(channels)
        .and_then(|v| v.checked_mul(rows))
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| FormatError::MalformedHeader("tensor shape overflows".into()))?;
    let tensor_bytes = tensor_elems
        .checked_mul(4)
        .ok_or_else(|| FormatError::MalformedHeader("tensor shape overflows".into()))?;
    let payload = &bytes[12 + header_len..];
    if payload.len() < 2 * tensor_bytes {
        return Err(FormatError::Truncated {
            needed: 12 + header_len + 2 * tensor_bytes,
            found: bytes.len(),
        }
        .into());
    }
    if payload.len() > 2 * tensor_bytes {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes but the header accounts for {}",
            payload.len(),
            2 * tensor_bytes
        )));
    }

    let read_tensor = |offset: usize| -> Array4<f32> {
        let mut v = Vec::with_capacity(tensor_elems);
        for i in 0..tensor_elems {
            let at = offset + 4 * i;
            v.push(f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()));
        }
        Array4::from_shape_vec((patches, channels, rows, cols), v)
            .expect("length checked against the declared shape")
    };
    let data = read_tensor(0);
    let labels = read_tensor(tensor_bytes);

    Ok(PatchDataset {
        data,
        labels,
        header: DatasetHeader {
            seed,
            config,
            provenance,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{AnglePolicy, ChannelConfig, ChannelSampler, LinkAngles};
    use crate::geometry::{ArrayGeometry, Direction, SteeringConvention};
    use crate::pilots::nmse;
    use ndarray::arr1;
    use tempfile::tempdir;

    fn random_stack(count: usize, m: usize, n: usize, seed_offset: u64) -> Vec<Array2<Complex64>> {
        (0..count)
            .map(|i| {
                let mut rng = stream(77, StreamDomain::Statistics, seed_offset + i as u64);
                let mut v = vec![Complex64::default(); m * n];
                crate::rng::fill_complex_gaussian(&mut rng, 1.0, &mut v);
                Array2::from_shape_vec((m, n), v).unwrap()
            })
            .collect()
    }

    fn small_dataset() -> PatchDataset {
        let x = random_stack(4, 6, 5, 0);
        let y = random_stack(4, 6, 5, 100);
        let spec = PatchSpec {
            p_x: 3,
            p_y: 4,
            total_patches: 8,
            seed: 5,
        };
        let mut ds = extract_patches(&x, &y, &spec).unwrap();
        ds.header.config.insert("snr_grid".into(), "-5,0,5".into());
        ds
    }

    #[test]
    fn patch_count_splits_evenly_across_samples() {
        let x = random_stack(500, 4, 4, 0);
        let y = random_stack(500, 4, 4, 1000);
        let spec = PatchSpec {
            p_x: 2,
            p_y: 2,
            total_patches: 1000,
            seed: 1,
        };
        let ds = extract_patches(&x, &y, &spec).unwrap();
        assert_eq!(ds.num_patches(), 1000);
        // Sample-major order: two consecutive patches per source sample.
        for (i, p) in ds.header.provenance.iter().enumerate() {
            assert_eq!(p.sample as usize, i / 2);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let x = random_stack(3, 4, 4, 0);
        let y = random_stack(3, 4, 4, 50);
        let indivisible = PatchSpec {
            p_x: 2,
            p_y: 2,
            total_patches: 10,
            seed: 0,
        };
        assert!(matches!(
            extract_patches(&x, &y, &indivisible),
            Err(Error::Config(_))
        ));
        let oversized = PatchSpec {
            p_x: 2,
            p_y: 5,
            total_patches: 3,
            seed: 0,
        };
        assert!(matches!(
            extract_patches(&x, &y, &oversized),
            Err(Error::Shape(_))
        ));
        assert!(extract_patches(&x[..2], &y, &indivisible).is_err());
        assert!(extract_patches(&[], &[], &indivisible).is_err());
    }

    #[test]
    fn full_size_patches_pin_the_offset_to_zero() {
        let x = random_stack(3, 4, 5, 0);
        let y = random_stack(3, 4, 5, 60);
        let spec = PatchSpec {
            p_x: 5,
            p_y: 4,
            total_patches: 3,
            seed: 9,
        };
        let ds = extract_patches(&x, &y, &spec).unwrap();
        for (s, p) in ds.header.provenance.iter().enumerate() {
            assert_eq!((p.sample as usize, p.x, p.y), (s, 0, 0));
        }
        // Degenerate patches are the full source sample, plane-encoded.
        for s in 0..3 {
            for r in 0..4 {
                for c in 0..5 {
                    assert_eq!(ds.data[[s, 0, r, c]], x[s][[r, c]].re as f32);
                    assert_eq!(ds.data[[s, 1, r, c]], x[s][[r, c]].im as f32);
                    assert_eq!(ds.labels[[s, 0, r, c]], y[s][[r, c]].re as f32);
                }
            }
        }
    }

    #[test]
    fn patches_match_a_direct_slice_oracle() {
        let x = random_stack(5, 8, 6, 0);
        let y = random_stack(5, 8, 6, 70);
        let spec = PatchSpec {
            p_x: 4,
            p_y: 3,
            total_patches: 15,
            seed: 3,
        };
        let ds = extract_patches(&x, &y, &spec).unwrap();
        for (idx, p) in ds.header.provenance.iter().enumerate() {
            let (s, x0, y0) = (p.sample as usize, p.x as usize, p.y as usize);
            assert!(x0 <= 6 - 4 && y0 <= 8 - 3, "offset ({x0},{y0}) out of range");
            for r in 0..3 {
                for c in 0..4 {
                    let zx = x[s][[y0 + r, x0 + c]];
                    let zy = y[s][[y0 + r, x0 + c]];
                    assert_eq!(ds.data[[idx, 0, r, c]], zx.re as f32);
                    assert_eq!(ds.data[[idx, 1, r, c]], zx.im as f32);
                    assert_eq!(ds.labels[[idx, 0, r, c]], zy.re as f32);
                    assert_eq!(ds.labels[[idx, 1, r, c]], zy.im as f32);
                }
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let x = random_stack(6, 6, 6, 0);
        let y = random_stack(6, 6, 6, 80);
        let spec = PatchSpec {
            p_x: 3,
            p_y: 3,
            total_patches: 12,
            seed: 21,
        };
        let a = extract_patches(&x, &y, &spec).unwrap();
        let b = extract_patches(&x, &y, &spec).unwrap();
        assert_eq!(a, b);
        let reseeded = PatchSpec { seed: 22, ..spec };
        let c = extract_patches(&x, &y, &reseeded).unwrap();
        assert_ne!(a.header.provenance, c.header.provenance);
    }

    #[test]
    fn offsets_cover_the_whole_valid_range() {
        let x = random_stack(1, 8, 8, 0);
        let y = random_stack(1, 8, 8, 90);
        let spec = PatchSpec {
            p_x: 4,
            p_y: 4,
            total_patches: 10_000,
            seed: 2,
        };
        let ds = extract_patches(&x, &y, &spec).unwrap();
        let bins = 8 - 4 + 1;
        let mut x_counts = vec![0usize; bins];
        let mut y_counts = vec![0usize; bins];
        for p in &ds.header.provenance {
            x_counts[p.x as usize] += 1;
            y_counts[p.y as usize] += 1;
        }
        assert!(x_counts.iter().all(|&c| c > 0), "x coverage {x_counts:?}");
        assert!(y_counts.iter().all(|&c| c > 0), "y coverage {y_counts:?}");
        // Uniformity smoke test, reported rather than asserted: chi-square
        // against the uniform law; the 0.001 critical value at 4 degrees of
        // freedom is 18.47.
        let expected = 10_000.0 / bins as f64;
        let chi2 = |counts: &[usize]| {
            counts
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum::<f64>()
        };
        println!(
            "offset uniformity chi-square: x = {:.2}, y = {:.2} (crit 18.47 at alpha = 0.001)",
            chi2(&x_counts),
            chi2(&y_counts)
        );
    }

    #[test]
    fn planes_round_trip_exactly() {
        let a = random_stack(1, 5, 7, 0).remove(0);
        let p = complex_to_planes(&a.view());
        let back = planes_to_complex(&p.view()).unwrap();
        assert_eq!(a, back);
        // Pure-imaginary input: plane 0 is all zero, plane 1 all one.
        let j = Array2::from_elem((3, 3), Complex64::new(0.0, 1.0));
        let pj = complex_to_planes(&j.view());
        assert!(pj.slice(ndarray::s![0, .., ..]).iter().all(|&v| v == 0.0));
        assert!(pj.slice(ndarray::s![1, .., ..]).iter().all(|&v| v == 1.0));
        // Wrong plane count is rejected.
        let three = ndarray::Array3::<f64>::zeros((3, 2, 2));
        assert!(planes_to_complex(&three.view()).is_err());
    }

    #[test]
    fn plane_nmse_matches_complex_nmse() {
        let a = random_stack(1, 6, 6, 5).remove(0);
        let b = random_stack(1, 6, 6, 6).remove(0);
        let complex_nmse = nmse(&a, &b).unwrap();
        let pa = complex_to_planes(&a.view());
        let pb = complex_to_planes(&b.view());
        let err: f64 = pa.iter().zip(pb.iter()).map(|(x, y)| (x - y).powi(2)).sum();
        let power: f64 = pb.iter().map(|y| y.powi(2)).sum();
        assert!((err / power - complex_nmse).abs() < 1e-14);
    }

    #[test]
    fn direct_reshape_is_row_major() {
        let b = arr1(&[
            Complex64::new(1.0, 0.0),
            Complex64::new(2.0, 0.0),
            Complex64::new(3.0, 0.0),
            Complex64::new(4.0, 0.0),
        ]);
        let g = reshape_direct(&b.view(), 2, 2).unwrap();
        assert_eq!(g[[0, 0]].re, 1.0);
        assert_eq!(g[[0, 1]].re, 2.0);
        assert_eq!(g[[1, 0]].re, 3.0);
        assert_eq!(g[[1, 1]].re, 4.0);
        assert_eq!(flatten_direct(&g.view()), b);
        assert!(reshape_direct(&b.view(), 3, 2).is_err());
    }

    #[test]
    fn reshaped_direct_preserves_receiver_correlation() {
        // The receiver's separable exponential correlation (rho = 0.8) must
        // survive the reshape: in-row neighbors correlate at rho, entries two
        // rows apart at rho^2.
        let sampler = ChannelSampler::new(ChannelConfig {
            surface: ArrayGeometry::new(2, 2, 0.25, 0.25, 1.0).unwrap(),
            receiver: ArrayGeometry::new(4, 4, 0.5, 0.5, 1.0).unwrap(),
            eta_surface: 10.0,
            eta_receiver: 10.0,
            rho: 0.8,
            correlated: true,
            angles: AnglePolicy::Fixed(LinkAngles {
                user_arrival: Direction::new(0.1, 0.2).unwrap(),
                surface_departure: Direction::new(0.0, 0.0).unwrap(),
                receiver_arrival: Direction::new(-0.3, 0.1).unwrap(),
            }),
            convention: SteeringConvention::WaveVector,
        })
        .unwrap();
        let trials = 20_000;
        let mut in_row = Complex64::default();
        let mut two_rows = Complex64::default();
        let mut power = 0.0f64;
        let mut rng = stream(33, StreamDomain::Statistics, 0);
        for _ in 0..trials {
            let b = sampler.direct_link(&mut rng);
            let g = reshape_direct(&b.view(), 4, 4).unwrap();
            for r in 0..4 {
                for c in 0..3 {
                    in_row += g[[r, c]] * g[[r, c + 1]].conj();
                }
            }
            for r in 0..2 {
                for c in 0..4 {
                    two_rows += g[[r, c]] * g[[r + 2, c]].conj();
                }
            }
            power += g.iter().map(|z| z.norm_sqr()).sum::<f64>() / 16.0;
        }
        let in_row = in_row.re / (trials as f64 * 12.0);
        let two_rows = two_rows.re / (trials as f64 * 8.0);
        let power = power / trials as f64;
        let rho_measured = in_row / power;
        let rho2_measured = two_rows / power;
        assert!(
            rho_measured > rho2_measured,
            "in-row correlation {rho_measured:.3} should exceed two-rows-apart {rho2_measured:.3}"
        );
        assert!((rho_measured - 0.8).abs() < 0.05, "in-row {rho_measured:.3}");
        assert!((rho2_measured - 0.64).abs() < 0.05, "two-rows {rho2_measured:.3}");
    }

    #[test]
    fn container_round_trip_is_byte_identical() {
        let ds = small_dataset();
        let dir = tempdir().unwrap();
        let path_a = dir.path().join("a.rcds");
        let path_b = dir.path().join("b.rcds");
        serialize_dataset(&ds, &path_a).unwrap();
        let back = deserialize_dataset(&path_a).unwrap();
        assert_eq!(ds, back);
        serialize_dataset(&back, &path_b).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap()
        );
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let ds = small_dataset();
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.rcds");
        serialize_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            deserialize_dataset(&path),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let ds = small_dataset();
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.rcds");
        serialize_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            deserialize_dataset(&path),
            Err(Error::Format(FormatError::UnsupportedVersion { found: 9, .. }))
        ));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let ds = small_dataset();
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.rcds");
        serialize_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            deserialize_dataset(&path),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn header_payload_disagreement_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.rcds");

        let raw = |header: &str, payload_floats: usize| {
            let mut v = Vec::new();
            v.extend_from_slice(b"RCDS");
            v.extend_from_slice(&1u32.to_le_bytes());
            v.extend_from_slice(&(header.len() as u32).to_le_bytes());
            v.extend_from_slice(header.as_bytes());
            v.extend(std::iter::repeat(0u8).take(4 * payload_floats));
            v
        };

        // Payload longer than the declared shape accounts for.
        let header = "dtype=f32le\npatches=1\nchannels=2\nrows=2\ncols=2\nseed=0\nprovenance=0,0,0\n";
        std::fs::write(&path, raw(header, 2 * 8 + 4)).unwrap();
        assert!(matches!(
            deserialize_dataset(&path),
            Err(Error::Integrity(_))
        ));

        // Provenance count disagrees with the patch count.
        let header = "dtype=f32le\npatches=2\nchannels=2\nrows=2\ncols=2\nseed=0\nprovenance=0,0,0\n";
        std::fs::write(&path, raw(header, 2 * 16)).unwrap();
        assert!(matches!(
            deserialize_dataset(&path),
            Err(Error::Integrity(_))
        ));

        // Non-2 channel count parses but is not something this crate wrote.
        let header = "dtype=f32le\npatches=1\nchannels=3\nrows=2\ncols=2\nseed=0\nprovenance=0,0,0\n";
        std::fs::write(&path, raw(header, 2 * 12)).unwrap();
        assert!(matches!(
            deserialize_dataset(&path),
            Err(Error::Integrity(_))
        ));

        // Missing key is a malformed header.
        let header = "dtype=f32le\npatches=1\nchannels=2\nrows=2\nseed=0\nprovenance=0,0,0\n";
        std::fs::write(&path, raw(header, 2 * 8)).unwrap();
        assert!(matches!(
            deserialize_dataset(&path),
            Err(Error::Format(FormatError::MalformedHeader(_)))
        ));
    }

    #[test]
    fn config_snapshot_survives_the_container() {
        let mut ds = small_dataset();
        ds.header.config.insert("profile".into(), "desk".into());
        ds.header
            .config
            .insert("train.epochs".into(), "10".into());
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.rcds");
        serialize_dataset(&ds, &path).unwrap();
        let back = deserialize_dataset(&path).unwrap();
        assert_eq!(back.header.config.get("profile").unwrap(), "desk");
        assert_eq!(back.header.config.get("train.epochs").unwrap(), "10");
        assert_eq!(back.header.config.get("snr_grid").unwrap(), "-5,0,5");
    }
}
