//! Physical channel model: user -> reflecting surface -> receiver.
//!
//! Three links are drawn per realization, all Rician with configurable
//! factors and spatially correlated diffuse parts:
//!
//! * `f` (surface elements): user to surface, LoS term from the arrival
//!   steering vector, diffuse term colored by the surface correlation.
//! * `H` (receiver x surface): surface to receiver, rank-one LoS term from
//!   the departure/arrival steering pair, diffuse term colored on both sides.
//! * `b` (receiver antennas): user to receiver directly, pure diffuse,
//!   colored by the receiver correlation.
//!
//! LoS components are scaled so every channel entry has unit average power,
//! which is also what the diffuse components deliver through unit-diagonal
//! correlation matrices; receiver noise power is then defined relative to
//! unit-power entries. The cascaded channel seen by the pilot protocol is
//! `G = H diag(f)`.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;

use crate::correlation::{bs_correlation, psd_sqrt, ris_correlation};
use crate::error::{Error, Result};
use crate::geometry::{array_response_with, ArrayGeometry, Direction, SteeringConvention};
use crate::rng::complex_gaussian;

/// How propagation angles are chosen per realization.
#[derive(Debug, Clone, PartialEq)]
pub enum AnglePolicy {
    /// The same three directions for every realization.
    Fixed(LinkAngles),
    /// Azimuth and elevation of all three directions drawn independently and
    /// uniformly over (-pi/2, pi/2) for each realization.
    UniformPerSample,
}

/// The three directions that parameterize the LoS geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkAngles {
    /// Arrival at the surface from the user.
    pub user_arrival: Direction,
    /// Departure from the surface toward the receiver.
    pub surface_departure: Direction,
    /// Arrival at the receiver.
    pub receiver_arrival: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    /// Reflecting surface array.
    pub surface: ArrayGeometry,
    /// Receiver array.
    pub receiver: ArrayGeometry,
    /// Rician factor of the user-to-surface link (>= 0).
    pub eta_surface: f64,
    /// Rician factor of the surface-to-receiver link (>= 0).
    pub eta_receiver: f64,
    /// Per-axis coefficient of the receiver's exponential correlation model.
    pub rho: f64,
    /// When false, both correlation matrices are replaced by identities
    /// (uncorrelated fading), which is the comparison case in the sweeps.
    pub correlated: bool,
    pub angles: AnglePolicy,
    pub convention: SteeringConvention,
}

/// One drawn realization of all links.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// User to surface, length N.
    pub user_link: Array1<Complex64>,
    /// Surface to receiver, M x N.
    pub hop_link: Array2<Complex64>,
    /// User to receiver, length M.
    pub direct_link: Array1<Complex64>,
    /// Cascaded channel `H diag(f)`, M x N.
    pub cascaded: Array2<Complex64>,
    /// The directions used for the LoS terms.
    pub angles: LinkAngles,
}

/// Precomputes the correlation square roots once and then draws realizations
/// from caller-provided RNG streams.
pub struct ChannelSampler {
    cfg: ChannelConfig,
    /// Surface-side correlation square root (N x N), complex-promoted.
    sqrt_surface: Array2<Complex64>,
    /// Receiver-side correlation square root (M x M), complex-promoted.
    sqrt_receiver: Array2<Complex64>,
    identity_correlation: bool,
}

fn promote(r: &Array2<f64>) -> Array2<Complex64> {
    r.mapv(|v| Complex64::new(v, 0.0))
}

impl ChannelSampler {
    pub fn new(cfg: ChannelConfig) -> Result<Self> {
        if !(cfg.eta_surface >= 0.0) || !(cfg.eta_receiver >= 0.0) {
            return Err(Error::Config(format!(
                "Rician factors must be nonnegative, got {} and {}",
                cfg.eta_surface, cfg.eta_receiver
            )));
        }
        let (sqrt_surface, sqrt_receiver) = if cfg.correlated {
            let r_surface = ris_correlation(&cfg.surface)?;
            let r_receiver = bs_correlation(cfg.receiver.n_h, cfg.receiver.n_v, cfg.rho)?;
            (promote(&psd_sqrt(&r_surface)?), promote(&psd_sqrt(&r_receiver)?))
        } else {
            (
                Array2::eye(cfg.surface.total()).mapv(|v: f64| Complex64::new(v, 0.0)),
                Array2::eye(cfg.receiver.total()).mapv(|v: f64| Complex64::new(v, 0.0)),
            )
        };
        let identity_correlation = !cfg.correlated;
        Ok(Self { cfg, sqrt_surface, sqrt_receiver, identity_correlation })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn surface_elements(&self) -> usize {
        self.cfg.surface.total()
    }

    pub fn receiver_antennas(&self) -> usize {
        self.cfg.receiver.total()
    }

    fn draw_direction<R: Rng + ?Sized>(rng: &mut R) -> Direction {
        let half = std::f64::consts::FRAC_PI_2;
        let az = rng.gen_range(-half..half);
        let el = rng.gen_range(-half..half);
        Direction::new(az, el).expect("uniform draw stays in range")
    }

    /// Resolves the angle policy: fixed angles pass through, otherwise six
    /// uniforms are consumed from `rng` (azimuth before elevation, in link
    /// order user/surface/receiver).
    pub fn draw_angles<R: Rng + ?Sized>(&self, rng: &mut R) -> LinkAngles {
        match &self.cfg.angles {
            AnglePolicy::Fixed(a) => *a,
            AnglePolicy::UniformPerSample => LinkAngles {
                user_arrival: Self::draw_direction(rng),
                surface_departure: Self::draw_direction(rng),
                receiver_arrival: Self::draw_direction(rng),
            },
        }
    }

    /// User-to-surface link for given arrival direction:
    /// `sqrt(eta/(1+eta)) * sqrt(N) * conj(a_surface)` plus the colored
    /// diffuse term `sqrt(1/(1+eta)) * R_surface^{1/2} * w`, w ~ CN(0, I).
    pub fn user_link<R: Rng + ?Sized>(&self, arrival: &Direction, rng: &mut R) -> Array1<Complex64> {
        let n = self.surface_elements();
        let eta = self.cfg.eta_surface;
        let los_w = (eta / (1.0 + eta)).sqrt() * (n as f64).sqrt();
        let diff_w = (1.0 / (1.0 + eta)).sqrt();
        let steer = array_response_with(&self.cfg.surface, arrival, self.cfg.convention);
        let mut innovations = Array1::from_elem(n, Complex64::default());
        for z in innovations.iter_mut() {
            *z = complex_gaussian(rng);
        }
        let colored = self.color_surface(&innovations);
        Array1::from_iter(
            (0..n).map(|i| los_w * steer[i].conj() + diff_w * colored[i]),
        )
    }

    /// Surface-to-receiver link: rank-one LoS outer product
    /// `sqrt(MN) * a_receiver * a_surface^H` plus the two-sided colored
    /// diffuse term `R_receiver^{1/2} W R_surface^{1/2}`.
    pub fn hop_link<R: Rng + ?Sized>(
        &self,
        departure: &Direction,
        arrival: &Direction,
        rng: &mut R,
    ) -> Array2<Complex64> {
        let m = self.receiver_antennas();
        let n = self.surface_elements();
        let eta = self.cfg.eta_receiver;
        let los_w = (eta / (1.0 + eta)).sqrt() * ((m * n) as f64).sqrt();
        let diff_w = (1.0 / (1.0 + eta)).sqrt();
        let a_rx = array_response_with(&self.cfg.receiver, arrival, self.cfg.convention);
        let a_dep = array_response_with(&self.cfg.surface, departure, self.cfg.convention);
        let mut innovations = Array2::from_elem((m, n), Complex64::default());
        for z in innovations.iter_mut() {
            *z = complex_gaussian(rng);
        }
        let diffuse = if self.identity_correlation {
            innovations
        } else {
            self.sqrt_receiver.dot(&innovations).dot(&self.sqrt_surface)
        };
        let mut h = diffuse;
        for i in 0..m {
            for j in 0..n {
                h[[i, j]] = los_w * a_rx[i] * a_dep[j].conj() + diff_w * h[[i, j]];
            }
        }
        h
    }

    /// Direct user-to-receiver link: pure diffuse, receiver-side colored.
    pub fn direct_link<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<Complex64> {
        let m = self.receiver_antennas();
        let mut innovations = Array1::from_elem(m, Complex64::default());
        for z in innovations.iter_mut() {
            *z = complex_gaussian(rng);
        }
        self.direct_link_from(&innovations)
    }

    /// Deterministic coloring stage of the direct link, exposed so tests can
    /// inject a fixed innovation vector.
    pub fn direct_link_from(&self, innovations: &Array1<Complex64>) -> Array1<Complex64> {
        if self.identity_correlation {
            innovations.clone()
        } else {
            self.sqrt_receiver.dot(innovations)
        }
    }

    fn color_surface(&self, innovations: &Array1<Complex64>) -> Array1<Complex64> {
        if self.identity_correlation {
            innovations.clone()
        } else {
            self.sqrt_surface.dot(innovations)
        }
    }

    /// Draws a full realization from one stream: angles (if per-sample),
    /// then user link, hop link, direct link, in that fixed order.
    pub fn realize<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelRealization {
        let angles = self.draw_angles(rng);
        let user_link = self.user_link(&angles.user_arrival, rng);
        let hop_link = self.hop_link(&angles.surface_departure, &angles.receiver_arrival, rng);
        let direct_link = self.direct_link(rng);
        let cascaded = cascade(&hop_link, &user_link).expect("sampler dims agree");
        ChannelRealization { user_link, hop_link, direct_link, cascaded, angles }
    }
}

/// Cascaded channel `G = H diag(f)`: column `n` of `H` scaled by `f[n]`.
pub fn cascade(h: &Array2<Complex64>, f: &Array1<Complex64>) -> Result<Array2<Complex64>> {
    let (m, n) = h.dim();
    if f.len() != n {
        return Err(Error::Shape(format!(
            "cascade: H has {n} columns but f has {} entries",
            f.len()
        )));
    }
    let mut g = h.clone();
    for i in 0..m {
        for j in 0..n {
            g[[i, j]] *= f[j];
        }
    }
    Ok(g)
}
