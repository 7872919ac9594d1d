//! Planar array geometry, propagation directions, and steering vectors.
//!
//! Both the reflecting surface and the receiver are uniform planar arrays in
//! the y-z plane: element `n` (1-based) sits at `[0, α_n·d_h, γ_n·d_v]` with
//! `α_n = (n-1) mod n_h` counting along the horizontal axis and
//! `γ_n = (n-1) div n_h` along the vertical axis. A direction is an
//! (azimuth, elevation) pair, and the narrowband steering vector collects the
//! per-element phases of a plane wave arriving from that direction.

use ndarray::Array1;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Uniform planar array: grid dimensions, element spacings, and the carrier
/// wavelength (all lengths in meters).
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    pub n_h: usize,
    pub n_v: usize,
    pub d_h: f64,
    pub d_v: f64,
    pub wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(n_h: usize, n_v: usize, d_h: f64, d_v: f64, wavelength: f64) -> Result<Self> {
        if n_h < 1 || n_v < 1 {
            return Err(Error::Config(format!(
                "array grid must be at least 1x1, got {n_h}x{n_v}"
            )));
        }
        if !(d_h > 0.0) || !(d_v > 0.0) {
            return Err(Error::Config(format!(
                "element spacings must be positive, got d_h={d_h}, d_v={d_v}"
            )));
        }
        if !(wavelength > 0.0) {
            return Err(Error::Config(format!("wavelength must be positive, got {wavelength}")));
        }
        Ok(Self { n_h, n_v, d_h, d_v, wavelength })
    }

    /// Total number of elements.
    pub fn total(&self) -> usize {
        self.n_h * self.n_v
    }

    /// Horizontal grid index of 1-based element `n`.
    pub fn alpha(&self, n: usize) -> usize {
        (n - 1) % self.n_h
    }

    /// Vertical grid index of 1-based element `n`.
    pub fn gamma(&self, n: usize) -> usize {
        (n - 1) / self.n_h
    }
}

/// Propagation direction: azimuth and elevation, both restricted to the
/// principal range [-pi/2, pi/2].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Direction {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        let half = std::f64::consts::FRAC_PI_2;
        for (name, v) in [("azimuth", azimuth), ("elevation", elevation)] {
            if !v.is_finite() || v < -half || v > half {
                return Err(Error::Config(format!(
                    "{name} must lie in [-pi/2, pi/2], got {v}"
                )));
            }
        }
        Ok(Self { azimuth, elevation })
    }
}

/// Which per-element phase law the steering vector uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SteeringConvention {
    /// Phases from the full 3-D wave vector: the vertical term is driven by
    /// the elevation angle. This is the physically consistent default.
    #[default]
    WaveVector,
    /// Variant in which the azimuth angle drives the vertical phase term as
    /// well. Kept selectable because some published planar-array expressions
    /// are written this way; differs from `WaveVector` only when both the
    /// azimuth and the vertical extent are nonzero.
    AzimuthVertical,
}

/// Position of 1-based element `n` on the array plane.
///
/// Errors with an index error if `n` is 0 or exceeds the element count.
pub fn element_position(geom: &ArrayGeometry, n: usize) -> Result<[f64; 3]> {
    if n == 0 || n > geom.total() {
        return Err(Error::Index(format!(
            "element index {n} outside 1..={}",
            geom.total()
        )));
    }
    Ok([0.0, geom.alpha(n) as f64 * geom.d_h, geom.gamma(n) as f64 * geom.d_v])
}

/// Wave vector of a plane wave from `dir`: magnitude 2*pi/wavelength, pointing
/// along [cos(el)cos(az), cos(el)sin(az), sin(el)].
pub fn wave_vector(dir: &Direction, wavelength: f64) -> [f64; 3] {
    let k = 2.0 * std::f64::consts::PI / wavelength;
    let (saz, caz) = dir.azimuth.sin_cos();
    let (sel, cel) = dir.elevation.sin_cos();
    [k * cel * caz, k * cel * saz, k * sel]
}

/// Unit-norm steering vector of the array toward `dir` under the default
/// wave-vector convention. Entry `n` is `exp(j w . d_n) / sqrt(total)`.
pub fn array_response(geom: &ArrayGeometry, dir: &Direction) -> Array1<Complex64> {
    array_response_with(geom, dir, SteeringConvention::WaveVector)
}

/// Steering vector under an explicit phase convention.
pub fn array_response_with(
    geom: &ArrayGeometry,
    dir: &Direction,
    convention: SteeringConvention,
) -> Array1<Complex64> {
    let k = 2.0 * std::f64::consts::PI / geom.wavelength;
    let saz = dir.azimuth.sin();
    let (sel, cel) = dir.elevation.sin_cos();
    // Per-element phase = horizontal term + vertical term; only the y and z
    // position components are nonzero for a y-z planar array.
    let horiz = k * cel * saz * geom.d_h;
    let vert = match convention {
        SteeringConvention::WaveVector => k * sel * geom.d_v,
        SteeringConvention::AzimuthVertical => k * saz * geom.d_v,
    };
    let norm = 1.0 / (geom.total() as f64).sqrt();
    Array1::from_iter((1..=geom.total()).map(|n| {
        let phase = geom.alpha(n) as f64 * horiz + geom.gamma(n) as f64 * vert;
        Complex64::from_polar(norm, phase)
    }))
}
