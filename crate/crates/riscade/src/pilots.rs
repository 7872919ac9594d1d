//! Reflection schedules, despread pilot observations, and the linear
//! cascaded-channel estimators.
//!
//! During training, the surface cycles through `L` reflection patterns (one
//! per pilot subframe) while each user transmits a known pilot sequence.
//! After despreading, user `k`'s observation collapses to
//!
//! ```text
//! Y = b·1ᵀ + G·S + V,          Y ∈ C^{M×L}
//! ```
//!
//! where `G` is the cascaded channel, `S` the `N×L` schedule, `b` the direct
//! path (absent once cancelled) and `V` white complex Gaussian noise. The
//! operating point is set post-despreading: `σ_v² = 10^(−snr_db/10)` under the
//! unit-entry-power channel normalization, so pilot power and length are
//! absorbed into the SNR and only matter for the multi-user bookkeeping.
//!
//! Estimators are pure functions of `(Y, S)` plus, for the LMMSE family, a
//! column-space covariance of the cascaded channel. Filters depend only on
//! `(S, R_G, σ_v²)` and can be precomputed and reused across samples.

use crate::channel::ChannelRealization;
use crate::error::{Error, Result};
use crate::rng::fill_complex_gaussian;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayBase, ArrayView1, ArrayView2, Axis, Data, Dimension};
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::TAU;

/// Reporting floor when converting an NMSE ratio to decibels; exact recovery
/// would otherwise print `-inf`.
pub const NMSE_DB_FLOOR: f64 = -300.0;

/// How the surface is driven during the pilot subframes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Every element reflects in every subframe with DFT-spaced phases; rows
    /// are mutually orthogonal so the whole aperture contributes power.
    Dft,
    /// One element reflects per subframe (`S = I_N`, `L = N`).
    Binary,
    /// Fewer subframes than elements: `L` columns of the `N`-point DFT.
    /// Underdetermined, so least squares is undefined, but the regularized
    /// linear-MMSE filter still exists. Used by pilot-overhead sweeps.
    PartialDft,
}

/// Unit-modulus reflection coefficients of the `N` elements over `L`
/// subframes. Built by [`dft_schedule`] or [`binary_schedule`]; both uphold
/// the invariants checked by [`PhaseSchedule::validate`].
#[derive(Debug, Clone)]
pub struct PhaseSchedule {
    matrix: Array2<Complex64>,
    kind: ScheduleKind,
}

impl PhaseSchedule {
    /// The `N×L` coefficient matrix `S`.
    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.matrix
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of surface elements `N` (rows).
    pub fn elements(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of pilot subframes `L` (columns).
    pub fn subframes(&self) -> usize {
        self.matrix.ncols()
    }

    /// Re-checks the construction invariants: unit modulus plus row
    /// orthogonality (`S·Sᴴ = L·I`) in DFT mode, a 0/1 matrix with a single
    /// active element per subframe in binary mode.
    pub fn validate(&self) -> Result<()> {
        let (n, l) = self.matrix.dim();
        match self.kind {
            ScheduleKind::Dft => {
                for z in self.matrix.iter() {
                    if (z.norm() - 1.0).abs() > 1e-12 {
                        return Err(Error::Integrity(format!(
                            "schedule entry {z} is not unit modulus"
                        )));
                    }
                }
                let gram = self.matrix.dot(&self.matrix.t().mapv(|z| z.conj()));
                let mut err = 0.0f64;
                for i in 0..n {
                    for j in 0..n {
                        let target = if i == j {
                            Complex64::new(l as f64, 0.0)
                        } else {
                            Complex64::default()
                        };
                        err += (gram[[i, j]] - target).norm_sqr();
                    }
                }
                let rel = err.sqrt() / (l as f64 * (n as f64).sqrt());
                if rel > 1e-12 {
                    return Err(Error::Integrity(format!(
                        "schedule rows are not orthogonal (relative error {rel:.3e})"
                    )));
                }
            }
            ScheduleKind::Binary => {
                for col in 0..l {
                    let mut active = 0usize;
                    for row in 0..n {
                        let z = self.matrix[[row, col]];
                        if z.im != 0.0 || (z.re != 0.0 && z.re != 1.0) {
                            return Err(Error::Integrity(format!(
                                "binary schedule entry {z} is not 0 or 1"
                            )));
                        }
                        if z.re == 1.0 {
                            active += 1;
                        }
                    }
                    if active != 1 {
                        return Err(Error::Integrity(format!(
                            "binary subframe {col} activates {active} elements instead of 1"
                        )));
                    }
                }
            }
            ScheduleKind::PartialDft => {
                // No orthogonality to check; only the physical constraint
                // that reflection coefficients have unit modulus.
                for z in self.matrix.iter() {
                    if (z.norm() - 1.0).abs() > 1e-12 {
                        return Err(Error::Integrity(format!(
                            "schedule entry {z} is not unit modulus"
                        )));
                    }
                }
                if l >= n {
                    return Err(Error::Integrity(format!(
                        "partial schedule with {l} subframes for {n} elements \
                         should be a full DFT schedule"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// DFT reflection schedule: `S[n, l] = W^{n·(l−1)}` with `W = exp(j·2π/L)`,
/// element indices `n = 1..N` and subframes `l = 1..L`. Row frequencies are
/// distinct modulo `L`, so `S·Sᴴ = L·I_N` whenever `L ≥ N`.
pub fn dft_schedule(n: usize, l: usize) -> Result<PhaseSchedule> {
    if n == 0 {
        return Err(Error::Config("schedule needs at least one element".into()));
    }
    if l < n {
        return Err(Error::Config(format!(
            "{l} subframes cannot identify {n} elements: least-squares needs L >= N"
        )));
    }
    let mut s = Array2::default((n, l));
    for row in 0..n {
        let freq = row + 1;
        for col in 0..l {
            // Reduce the phase index modulo L before touching floating point
            // so orthogonality survives at machine precision for large N·L.
            let t = (freq * col) % l;
            s[[row, col]] = Complex64::from_polar(1.0, TAU * t as f64 / l as f64);
        }
    }
    Ok(PhaseSchedule {
        matrix: s,
        kind: ScheduleKind::Dft,
    })
}

/// Reflection schedule for any subframe budget, including `L < N`.
///
/// Delegates to [`dft_schedule`] when `L >= N`. Otherwise it takes the first
/// `L` columns of the `N`-point DFT pattern — still unit-modulus and
/// well-spread, but underdetermined, so only regularized estimators apply
/// ([`ls_filter`] refuses such schedules).
pub fn partial_dft_schedule(n: usize, l: usize) -> Result<PhaseSchedule> {
    if l >= n {
        return dft_schedule(n, l);
    }
    if l == 0 {
        return Err(Error::Config("schedule needs at least one subframe".into()));
    }
    let mut s = Array2::default((n, l));
    for row in 0..n {
        let freq = row + 1;
        for col in 0..l {
            let t = (freq * col) % n;
            s[[row, col]] = Complex64::from_polar(1.0, TAU * t as f64 / n as f64);
        }
    }
    Ok(PhaseSchedule {
        matrix: s,
        kind: ScheduleKind::PartialDft,
    })
}

/// Binary reflection schedule: subframe `l` switches on element `l` only,
/// i.e. `S = I_N` and `L = N`.
pub fn binary_schedule(n: usize) -> PhaseSchedule {
    PhaseSchedule {
        matrix: Array2::eye(n),
        kind: ScheduleKind::Binary,
    }
}

/// Pilot-sequence bookkeeping. Power and length are absorbed by the
/// post-despreading SNR convention, so the defaults (`P = 1`, `u = K`) are
/// what every experiment uses; the fields exist to validate multi-user
/// configurations (`u ≥ K` keeps per-user pilots orthogonal).
#[derive(Debug, Clone, Copy)]
pub struct PilotConfig {
    /// Per-symbol pilot power `P` (linear).
    pub power: f64,
    /// Pilot length `u` in symbols.
    pub spread_len: usize,
    /// Number of users `K`.
    pub users: usize,
    /// Post-despreading SNR in dB; `+inf` means noiseless.
    pub snr_db: f64,
}

impl PilotConfig {
    pub fn new(power: f64, spread_len: usize, users: usize, snr_db: f64) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::Config(format!("pilot power must be positive, got {power}")));
        }
        if users == 0 {
            return Err(Error::Config("at least one user is required".into()));
        }
        if spread_len < users {
            return Err(Error::Config(format!(
                "pilot length {spread_len} cannot keep {users} users orthogonal"
            )));
        }
        if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("invalid SNR {snr_db} dB")));
        }
        Ok(Self {
            power,
            spread_len,
            users,
            snr_db,
        })
    }

    /// Single-user configuration at the given operating point.
    pub fn from_snr_db(snr_db: f64) -> Self {
        Self {
            power: 1.0,
            spread_len: 1,
            users: 1,
            snr_db,
        }
    }

    /// Post-despreading noise variance `σ_v² = 10^(−snr_db/10)`; zero when
    /// the SNR is `+inf`.
    pub fn noise_variance(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0)
    }
}

/// One user's despread observation block.
#[derive(Debug, Clone)]
pub struct ReceivedPilots {
    /// `Y ∈ C^{M×L}`: one column per pilot subframe.
    pub observation: Array2<Complex64>,
    /// The noise variance the block was simulated at (needed by LMMSE).
    pub noise_variance: f64,
}

/// Simulates the despread observation `Y = [b·1ᵀ] + G·S + V` for one user.
///
/// Despreading is folded in analytically: orthogonal pilots remove the other
/// users exactly and scale the noise to the post-despreading variance, so the
/// per-subframe matched filter never needs to be materialized.
pub fn simulate_pilots<R: Rng + ?Sized>(
    realization: &ChannelRealization,
    sched: &PhaseSchedule,
    pilots: &PilotConfig,
    rng: &mut R,
    include_direct: bool,
) -> Result<ReceivedPilots> {
    let (m, n) = realization.cascaded.dim();
    if sched.elements() != n {
        return Err(Error::Shape(format!(
            "schedule drives {} elements but the channel has {n}",
            sched.elements()
        )));
    }
    let sigma2 = pilots.noise_variance();
    if !sigma2.is_finite() {
        return Err(Error::Argument(format!(
            "snr {} dB gives a non-finite noise variance",
            pilots.snr_db
        )));
    }
    let l = sched.subframes();
    let mut y = realization.cascaded.dot(&sched.matrix);
    if include_direct {
        for col in 0..l {
            for row in 0..m {
                y[[row, col]] += realization.direct_link[row];
            }
        }
    }
    if sigma2 > 0.0 {
        let mut noise = vec![Complex64::default(); m * l];
        fill_complex_gaussian(rng, sigma2, &mut noise);
        for (dst, v) in y.iter_mut().zip(noise) {
            *dst += v;
        }
    }
    Ok(ReceivedPilots {
        observation: y,
        noise_variance: sigma2,
    })
}

/// The right-multiplied least-squares filter `F` with `Ĝ = Y·F`.
///
/// In general `F = Sᴴ·(S·Sᴴ)⁻¹`; both supported schedules make the Gram
/// matrix trivial, so the filter is `Sᴴ/L` (DFT) or the identity (binary)
/// with no linear solve and no rounding beyond the conjugation.
pub fn ls_filter(sched: &PhaseSchedule) -> Result<Array2<Complex64>> {
    let (n, l) = sched.matrix.dim();
    match sched.kind {
        ScheduleKind::Binary => Ok(Array2::eye(n)),
        ScheduleKind::Dft => {
            let scale = 1.0 / l as f64;
            let mut f = Array2::default((l, n));
            for i in 0..l {
                for j in 0..n {
                    f[[i, j]] = sched.matrix[[j, i]].conj() * scale;
                }
            }
            Ok(f)
        }
        ScheduleKind::PartialDft => Err(Error::Config(format!(
            "{l} subframes cannot identify {n} elements: least-squares needs L >= N"
        ))),
    }
}

/// Least-squares estimate `Ĝ = Y·Sᴴ·(S·Sᴴ)⁻¹` of the cascaded channel.
pub fn ls_estimate(y: &ReceivedPilots, sched: &PhaseSchedule) -> Result<Array2<Complex64>> {
    if y.observation.ncols() != sched.subframes() {
        return Err(Error::Shape(format!(
            "observation has {} subframes but the schedule has {}",
            y.observation.ncols(),
            sched.subframes()
        )));
    }
    Ok(y.observation.dot(&ls_filter(sched)?))
}

/// The LMMSE filter `W = (Sᴴ·R_G·S + c·σ_v²·I_L)⁻¹·Sᴴ·R_G` with `Ĝ = Y·W`.
///
/// `R_G` is the column-space covariance `E(GᴴG)` (trace ≈ `M·N` under the
/// unit-power normalization). With `use_m_factor` the regularizer weight is
/// `c = M`, which exactly cancels the factor `M` that `E(GᴴG)` carries
/// relative to the per-row covariance; the resulting filter is the optimal
/// row-wise linear estimator. Pass `use_m_factor = false` together with a
/// covariance already divided by `M` for the conventional `σ_v²·I` form —
/// the two parameterizations produce the same filter.
pub fn lmmse_filter(
    sched: &PhaseSchedule,
    r_g: &Array2<Complex64>,
    antennas: usize,
    noise_variance: f64,
    use_m_factor: bool,
) -> Result<Array2<Complex64>> {
    let n = sched.elements();
    let l = sched.subframes();
    if r_g.dim() != (n, n) {
        return Err(Error::Argument(format!(
            "covariance is {:?} but the schedule drives {n} elements",
            r_g.dim()
        )));
    }
    let mut max_abs = 0.0f64;
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            max_abs = max_abs.max(r_g[[i, j]].norm());
            max_asym = max_asym.max((r_g[[i, j]] - r_g[[j, i]].conj()).norm());
        }
    }
    if max_asym > 1e-9 * max_abs.max(1.0) {
        return Err(Error::Argument(format!(
            "covariance is not Hermitian (asymmetry {max_asym:.3e})"
        )));
    }
    if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
        return Err(Error::Argument(format!(
            "noise variance must be finite and nonnegative, got {noise_variance}"
        )));
    }
    let s = to_na(&sched.matrix.view());
    let rg = to_na(&r_g.view());
    let sh_rg = s.adjoint() * rg;
    let mut gram = &sh_rg * &s;
    let weight = if use_m_factor { antennas as f64 } else { 1.0 };
    for i in 0..l {
        gram[(i, i)] += Complex64::new(weight * noise_variance, 0.0);
    }
    let solved = gram
        .lu()
        .solve(&sh_rg)
        .ok_or_else(|| Error::Singular("regularized schedule Gram matrix".into()))?;
    Ok(from_na(&solved))
}

/// LMMSE estimate of the cascaded channel from a despread observation.
pub fn lmmse_estimate(
    y: &ReceivedPilots,
    sched: &PhaseSchedule,
    r_g: &Array2<Complex64>,
    antennas: usize,
    use_m_factor: bool,
) -> Result<Array2<Complex64>> {
    if y.observation.nrows() != antennas || y.observation.ncols() != sched.subframes() {
        return Err(Error::Shape(format!(
            "observation is {:?} but expected {}×{}",
            y.observation.dim(),
            antennas,
            sched.subframes()
        )));
    }
    let w = lmmse_filter(sched, r_g, antennas, y.noise_variance, use_m_factor)?;
    Ok(y.observation.dot(&w))
}

/// Binary-reflection baseline: simulate one pilot pass with `S = I_N`
/// (direct path off — it is handled in its own phase) and apply the LMMSE
/// filter to the resulting observation.
pub fn blmmse_estimate<R: Rng + ?Sized>(
    realization: &ChannelRealization,
    pilots: &PilotConfig,
    rng: &mut R,
    r_g: &Array2<Complex64>,
    use_m_factor: bool,
) -> Result<Array2<Complex64>> {
    let sched = binary_schedule(realization.cascaded.ncols());
    let y = simulate_pilots(realization, &sched, pilots, rng, false)?;
    lmmse_estimate(&y, &sched, r_g, realization.cascaded.nrows(), use_m_factor)
}

/// Streaming estimator of the column-space covariance `(1/T)·Σ_t G_tᴴ·G_t`.
///
/// The result's trace sits near `M·N`; divide by `M` for the per-row
/// convention (see [`lmmse_filter`]).
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    sum: Array2<Complex64>,
    count: usize,
}

impl CovarianceAccumulator {
    pub fn new(elements: usize) -> Self {
        Self {
            sum: Array2::default((elements, elements)),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, g: &ArrayView2<Complex64>) -> Result<()> {
        let n = self.sum.nrows();
        if g.ncols() != n {
            return Err(Error::Shape(format!(
                "sample has {} columns but the accumulator expects {n}",
                g.ncols()
            )));
        }
        let gh = g.t().mapv(|z| z.conj());
        self.sum += &gh.dot(g);
        self.count += 1;
        Ok(())
    }

    /// Averaged covariance, symmetrized so accumulation round-off cannot leak
    /// a non-Hermitian matrix into the estimators.
    pub fn finish(&self) -> Result<Array2<Complex64>> {
        if self.count == 0 {
            return Err(Error::Argument(
                "covariance needs at least one sample".into(),
            ));
        }
        let n = self.sum.nrows();
        let scale = 1.0 / self.count as f64;
        let mut r = self.sum.mapv(|z| z * scale);
        for i in 0..n {
            for j in i + 1..n {
                let avg = 0.5 * (r[[i, j]] + r[[j, i]].conj());
                r[[i, j]] = avg;
                r[[j, i]] = avg.conj();
            }
            r[[i, i]] = Complex64::new(r[[i, i]].re, 0.0);
        }
        Ok(r)
    }
}

/// Column-space covariance of a batch of cascaded-channel samples.
pub fn cascaded_covariance(samples: &[Array2<Complex64>]) -> Result<Array2<Complex64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("covariance needs at least one sample".into()))?;
    let mut acc = CovarianceAccumulator::new(first.ncols());
    for g in samples {
        acc.push(&g.view())?;
    }
    acc.finish()
}

/// Surface-off subframes for the direct-path phase: `J` columns of `b + v_j`.
pub fn simulate_direct_pilots<R: Rng + ?Sized>(
    realization: &ChannelRealization,
    subframes: usize,
    pilots: &PilotConfig,
    rng: &mut R,
) -> Result<Array2<Complex64>> {
    if subframes == 0 {
        return Err(Error::Argument(
            "direct-path estimation needs at least one subframe".into(),
        ));
    }
    let sigma2 = pilots.noise_variance();
    if !sigma2.is_finite() {
        return Err(Error::Argument(format!(
            "snr {} dB gives a non-finite noise variance",
            pilots.snr_db
        )));
    }
    let m = realization.direct_link.len();
    let mut y = Array2::from_shape_fn((m, subframes), |(i, _)| realization.direct_link[i]);
    if sigma2 > 0.0 {
        let mut noise = vec![Complex64::default(); m * subframes];
        fill_complex_gaussian(rng, sigma2, &mut noise);
        for (dst, v) in y.iter_mut().zip(noise) {
            *dst += v;
        }
    }
    Ok(y)
}

/// Least-squares direct-path estimate: the average over the surface-off
/// subframes, with error variance `σ_v²/J` per antenna.
pub fn estimate_direct(observations: &ArrayView2<Complex64>) -> Result<Array1<Complex64>> {
    let j = observations.ncols();
    if j == 0 {
        return Err(Error::Argument(
            "direct-path estimation needs at least one subframe".into(),
        ));
    }
    let scale = 1.0 / j as f64;
    Ok(observations.sum_axis(Axis(1)).mapv(|z| z * scale))
}

/// Subtracts a direct-path estimate from every subframe of `y` in place.
pub fn cancel_direct(y: &mut ReceivedPilots, direct: &ArrayView1<Complex64>) -> Result<()> {
    let (m, l) = y.observation.dim();
    if direct.len() != m {
        return Err(Error::Shape(format!(
            "direct estimate has {} entries but the observation has {m} rows",
            direct.len()
        )));
    }
    for col in 0..l {
        for row in 0..m {
            y.observation[[row, col]] -= direct[row];
        }
    }
    Ok(())
}

/// Normalized mean squared error `‖G − Ĝ‖_F² / ‖G‖_F²` of an estimate
/// against the true channel (any dimensionality — matrices for the cascaded
/// channel, vectors for the direct path).
pub fn nmse<S1, S2, D>(estimate: &ArrayBase<S1, D>, reference: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = Complex64>,
    S2: Data<Elem = Complex64>,
    D: Dimension,
{
    if estimate.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "estimate shape {:?} does not match reference shape {:?}",
            estimate.shape(),
            reference.shape()
        )));
    }
    let mut err = 0.0f64;
    let mut reference_power = 0.0f64;
    for (e, r) in estimate.iter().zip(reference.iter()) {
        err += (e - r).norm_sqr();
        reference_power += r.norm_sqr();
    }
    if reference_power == 0.0 {
        return Err(Error::Argument(
            "NMSE reference has zero Frobenius norm".into(),
        ));
    }
    Ok(err / reference_power)
}

/// Converts an NMSE ratio to decibels with the [`NMSE_DB_FLOOR`] guard.
pub fn nmse_db(ratio: f64) -> f64 {
    if ratio <= 0.0 {
        return NMSE_DB_FLOOR;
    }
    (10.0 * ratio.log10()).max(NMSE_DB_FLOOR)
}

/// Batch NMSE: the mean of per-sample ratios (not the ratio of sums), so
/// every sample carries equal weight regardless of its channel power.
pub fn batch_nmse(ratios: &[f64]) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::Argument("batch NMSE over zero samples".into()));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

fn to_na(a: &ArrayView2<'_, Complex64>) -> DMatrix<Complex64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<Complex64>) -> Array2<Complex64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{cascade, AnglePolicy, ChannelConfig, ChannelRealization, ChannelSampler, LinkAngles};
    use crate::geometry::{ArrayGeometry, Direction, SteeringConvention};
    use crate::rng::{stream, StreamDomain};
    use ndarray::arr1;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn fixed_angles() -> LinkAngles {
        LinkAngles {
            user_arrival: Direction::new(0.3, -0.2).unwrap(),
            surface_departure: Direction::new(-0.7, 0.1).unwrap(),
            receiver_arrival: Direction::new(0.5, 0.4).unwrap(),
        }
    }

    /// M antennas (half-wavelength UPA) by N elements (quarter-wavelength).
    fn sampler(
        surface: (usize, usize),
        receiver: (usize, usize),
        eta: f64,
        correlated: bool,
    ) -> ChannelSampler {
        ChannelSampler::new(ChannelConfig {
            surface: ArrayGeometry::new(surface.0, surface.1, 0.25, 0.25, 1.0).unwrap(),
            receiver: ArrayGeometry::new(receiver.0, receiver.1, 0.5, 0.5, 1.0).unwrap(),
            eta_surface: eta,
            eta_receiver: eta,
            rho: 0.8,
            correlated,
            angles: AnglePolicy::UniformPerSample,
            convention: SteeringConvention::WaveVector,
        })
        .unwrap()
    }

    fn zero_realization(m: usize, n: usize) -> ChannelRealization {
        ChannelRealization {
            user_link: Array1::default(n),
            hop_link: Array2::default((m, n)),
            direct_link: Array1::default(m),
            cascaded: Array2::default((m, n)),
            angles: fixed_angles(),
        }
    }

    fn frob(a: &Array2<Complex64>) -> f64 {
        a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn dft_schedule_matches_hand_expansion_for_two_elements() {
        // L = 2 makes W = -1: element 1 alternates sign, element 2 (frequency
        // 2 = 0 mod 2) stays at +1.
        let s = dft_schedule(2, 2).unwrap();
        let expect = [[c(1.0), c(-1.0)], [c(1.0), c(1.0)]];
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (s.matrix()[[i, j]] - expect[i][j]).norm() < 1e-15,
                    "entry ({i},{j}): {}",
                    s.matrix()[[i, j]]
                );
            }
        }
        let gram = s.matrix().dot(&s.matrix().t().mapv(|z| z.conj()));
        assert!((gram[[0, 0]] - c(2.0)).norm() < 1e-15);
        assert!((gram[[0, 1]]).norm() < 1e-15);
    }

    #[test]
    fn dft_schedule_rows_are_orthogonal() {
        for (n, l) in [(4, 4), (16, 16), (16, 32), (4, 8)] {
            let s = dft_schedule(n, l).unwrap();
            let gram = s.matrix().dot(&s.matrix().t().mapv(|z| z.conj()));
            let mut err = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    let target = if i == j { c(l as f64) } else { c(0.0) };
                    err += (gram[[i, j]] - target).norm_sqr();
                }
            }
            let rel = err.sqrt() / (l as f64 * (n as f64).sqrt());
            assert!(rel < 1e-12, "({n},{l}): relative orthogonality error {rel:.3e}");
            s.validate().unwrap();
        }
    }

    #[test]
    fn dft_schedule_entries_are_unit_modulus() {
        let s = dft_schedule(16, 32).unwrap();
        for z in s.matrix().iter() {
            assert!((z.norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn underdetermined_dft_schedule_is_rejected() {
        let err = dft_schedule(16, 8).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert!(dft_schedule(0, 4).is_err());
    }

    #[test]
    fn binary_schedule_is_the_identity() {
        let s = binary_schedule(3);
        assert_eq!(s.kind(), ScheduleKind::Binary);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { c(1.0) } else { c(0.0) };
                assert_eq!(s.matrix()[[i, j]], expect);
            }
        }
        // Each subframe activates exactly one element.
        let s = binary_schedule(7);
        s.validate().unwrap();
        for col in 0..7 {
            let active: usize = (0..7).filter(|&row| s.matrix()[[row, col]].re != 0.0).count();
            assert_eq!(active, 1);
        }
    }

    #[test]
    fn binary_subframes_carry_a_fraction_of_the_dft_power() {
        // With orthogonal rows the DFT schedule's per-subframe received power
        // averages to ||G||_F^2, the binary schedule's to ||G||_F^2 / N: the
        // whole aperture reflects every subframe instead of one element.
        let n = 8;
        let s_dft = dft_schedule(n, n).unwrap();
        let s_bin = binary_schedule(n);
        let sampler = sampler((4, 2), (4, 4), 0.0, false);
        let mut rng = stream(11, StreamDomain::Statistics, 0);
        for _ in 0..20 {
            let g = sampler.realize(&mut rng).cascaded;
            let dft_power = frob(&g.dot(s_dft.matrix())).powi(2) / n as f64;
            let bin_power = frob(&g.dot(s_bin.matrix())).powi(2) / n as f64;
            let ratio = dft_power / bin_power;
            assert!(
                (ratio - n as f64).abs() < 1e-9 * n as f64,
                "per-subframe power ratio {ratio} should equal {n}"
            );
        }
    }

    #[test]
    fn noiseless_observation_is_the_scheduled_channel() {
        let sampler = sampler((2, 2), (4, 2), 10.0, true);
        let mut rng = stream(3, StreamDomain::TestChannel, 0);
        let real = sampler.realize(&mut rng);
        let sched = dft_schedule(4, 8).unwrap();
        let pilots = PilotConfig::from_snr_db(f64::INFINITY);
        let y = simulate_pilots(&real, &sched, &pilots, &mut rng, false).unwrap();
        assert_eq!(y.noise_variance, 0.0);
        let expect = real.cascaded.dot(sched.matrix());
        for (a, b) in y.observation.iter().zip(expect.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn direct_term_adds_to_every_subframe() {
        let sampler = sampler((2, 2), (4, 2), 10.0, true);
        let mut rng = stream(4, StreamDomain::TestChannel, 0);
        let real = sampler.realize(&mut rng);
        let sched = dft_schedule(4, 4).unwrap();
        let pilots = PilotConfig::from_snr_db(f64::INFINITY);
        let y = simulate_pilots(&real, &sched, &pilots, &mut rng, true).unwrap();
        let gs = real.cascaded.dot(sched.matrix());
        for col in 0..4 {
            for row in 0..8 {
                let expect = gs[[row, col]] + real.direct_link[row];
                assert!((y.observation[[row, col]] - expect).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn despreading_two_orthogonal_users_separates_their_channels() {
        // Simulate the raw (pre-despreading) subframe blocks for two users
        // sharing the receiver-side hop, then despread with each user's pilot
        // and check the result equals the analytic observation the simulator
        // produces directly.
        let m = 8;
        let n = 4;
        let l = 4;
        let s = sampler((2, 2), (4, 2), 10.0, true);
        let mut rng = stream(5, StreamDomain::TestChannel, 0);
        let angles0 = s.draw_angles(&mut rng);
        let angles1 = s.draw_angles(&mut rng);
        let hop = s.hop_link(&angles0.surface_departure, &angles0.receiver_arrival, &mut rng);
        let f0 = s.user_link(&angles0.user_arrival, &mut rng);
        let f1 = s.user_link(&angles1.user_arrival, &mut rng);
        let b0 = s.direct_link(&mut rng);
        let b1 = s.direct_link(&mut rng);
        let g0 = cascade(&hop, &f0).unwrap();
        let g1 = cascade(&hop, &f1).unwrap();

        // Orthogonal pilots with x_k^H x_k = P*u, x_0^H x_1 = 0 (P = 1, u = 2).
        let pilots_mat = [arr1(&[c(1.0), c(1.0)]), arr1(&[c(1.0), c(-1.0)])];
        let u = 2;
        let sched = dft_schedule(n, l).unwrap();
        let cfg = PilotConfig::new(1.0, u, 2, f64::INFINITY).unwrap();

        let reals = [
            ChannelRealization {
                user_link: f0,
                hop_link: hop.clone(),
                direct_link: b0.clone(),
                cascaded: g0.clone(),
                angles: angles0,
            },
            ChannelRealization {
                user_link: f1,
                hop_link: hop.clone(),
                direct_link: b1.clone(),
                cascaded: g1.clone(),
                angles: angles1,
            },
        ];
        let expected: Vec<_> = reals
            .iter()
            .map(|r| {
                simulate_pilots(r, &sched, &cfg, &mut rng, true)
                    .unwrap()
                    .observation
            })
            .collect();

        let user_channels = [(&b0, &g0), (&b1, &g1)];
        for col in 0..l {
            // Raw block: Y_l = sum_k (b_k + G_k s_l) x_k^H, M x u symbols.
            let mut block = Array2::<Complex64>::default((m, u));
            for (k, (b, g)) in user_channels.iter().enumerate() {
                let mut signal = (*b).clone();
                for row in 0..m {
                    for el in 0..n {
                        signal[row] += g[[row, el]] * sched.matrix()[[el, col]];
                    }
                }
                for row in 0..m {
                    for sym in 0..u {
                        block[[row, sym]] += signal[row] * pilots_mat[k][sym].conj();
                    }
                }
            }
            // Despread each user: (Y_l x_k) / (P u) isolates that user.
            for k in 0..2 {
                let despread = block.dot(&pilots_mat[k]).mapv(|z| z / (u as f64));
                for row in 0..m {
                    assert!(
                        (despread[row] - expected[k][[row, col]]).norm() < 1e-10,
                        "user {k}, subframe {col}, antenna {row}"
                    );
                }
            }
        }
    }

    #[test]
    fn noise_variance_tracks_the_snr_setting() {
        // 0 dB => unit variance; measured over 1e6 despread entries.
        let real = zero_realization(500, 2);
        let sched = dft_schedule(2, 100).unwrap();
        let pilots = PilotConfig::from_snr_db(0.0);
        let mut rng = stream(6, StreamDomain::Noise, 0);
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for _ in 0..20 {
            let y = simulate_pilots(&real, &sched, &pilots, &mut rng, false).unwrap();
            acc += y.observation.iter().map(|z| z.norm_sqr()).sum::<f64>();
            count += y.observation.len();
        }
        assert_eq!(count, 1_000_000);
        let var = acc / count as f64;
        assert!((var - 1.0).abs() < 0.03, "measured variance {var}");
        // And the mapping itself at a couple of points.
        assert!((PilotConfig::from_snr_db(10.0).noise_variance() - 0.1).abs() < 1e-15);
        assert!((PilotConfig::from_snr_db(-5.0).noise_variance() - 10f64.powf(0.5)).abs() < 1e-12);
        assert_eq!(PilotConfig::from_snr_db(f64::INFINITY).noise_variance(), 0.0);
    }

    #[test]
    fn pilot_config_validation() {
        assert!(PilotConfig::new(1.0, 4, 2, 10.0).is_ok());
        assert!(matches!(PilotConfig::new(0.0, 4, 2, 10.0), Err(Error::Config(_))));
        assert!(matches!(PilotConfig::new(1.0, 1, 2, 10.0), Err(Error::Config(_))));
        assert!(matches!(PilotConfig::new(1.0, 4, 0, 10.0), Err(Error::Config(_))));
        assert!(matches!(PilotConfig::new(1.0, 4, 2, f64::NAN), Err(Error::Config(_))));
        assert!(matches!(
            PilotConfig::new(1.0, 4, 2, f64::NEG_INFINITY),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ls_recovers_the_channel_without_noise() {
        let sampler = sampler((4, 2), (4, 4), 10.0, true);
        let sched = dft_schedule(8, 8).unwrap();
        let pilots = PilotConfig::from_snr_db(f64::INFINITY);
        for trial in 0..5 {
            let mut rng = stream(7, StreamDomain::TestChannel, trial);
            let real = sampler.realize(&mut rng);
            let y = simulate_pilots(&real, &sched, &pilots, &mut rng, false).unwrap();
            let est = ls_estimate(&y, &sched).unwrap();
            let err = nmse(&est, &real.cascaded).unwrap();
            assert!(err < 1e-20, "trial {trial}: NMSE {err:.3e}");
        }
    }

    #[test]
    fn ls_power_on_pure_noise_matches_the_averaging_gain() {
        // Y = V only: the filter averages L unit-modulus-weighted noise terms
        // per output entry, so E||Ghat||_F^2 = M*N*sigma^2/L.
        let (m, n, l) = (32, 8, 8);
        let sched = dft_schedule(n, l).unwrap();
        let mut rng = stream(8, StreamDomain::Noise, 0);
        let trials = 2000;
        let mut acc = 0.0f64;
        for _ in 0..trials {
            let mut v = vec![Complex64::default(); m * l];
            fill_complex_gaussian(&mut rng, 1.0, &mut v);
            let y = ReceivedPilots {
                observation: Array2::from_shape_vec((m, l), v).unwrap(),
                noise_variance: 1.0,
            };
            let est = ls_estimate(&y, &sched).unwrap();
            acc += frob(&est).powi(2);
        }
        let mean = acc / trials as f64;
        let expect = (m * n) as f64 / l as f64;
        assert!(
            (mean - expect).abs() < 0.03 * expect,
            "mean power {mean}, expected {expect}"
        );
    }

    #[test]
    fn ls_nmse_follows_the_noise_law() {
        // Desk geometry: the per-sample NMSE ratio averages to
        // sigma^2*M*N/(L*E||G||^2) = sigma^2/L under unit entry power.
        let sampler = sampler((4, 4), (8, 8), 10.0, true);
        let (n, l) = (16, 16);
        let sched = dft_schedule(n, l).unwrap();
        let trials = 2000;
        for (snr_db, sigma2) in [(10.0, 0.1), (0.0, 1.0)] {
            let pilots = PilotConfig::from_snr_db(snr_db);
            let mut ratios = Vec::with_capacity(trials);
            for t in 0..trials as u64 {
                let mut ch_rng = stream(12, StreamDomain::TestChannel, t);
                let real = sampler.realize(&mut ch_rng);
                let mut noise_rng = stream(12, StreamDomain::Noise, t);
                let y = simulate_pilots(&real, &sched, &pilots, &mut noise_rng, false).unwrap();
                let est = ls_estimate(&y, &sched).unwrap();
                ratios.push(nmse(&est, &real.cascaded).unwrap());
            }
            let measured = batch_nmse(&ratios).unwrap();
            let analytic = sigma2 / l as f64;
            assert!(
                (measured - analytic).abs() < 0.05 * analytic,
                "snr {snr_db} dB: measured {measured:.5}, analytic {analytic:.5}"
            );
        }
    }

    #[test]
    fn ls_is_unbiased() {
        let sampler = sampler((4, 2), (4, 4), 10.0, true);
        let (m, n, l) = (16, 8, 8);
        let sched = dft_schedule(n, l).unwrap();
        let pilots = PilotConfig::from_snr_db(0.0);
        let mut rng = stream(13, StreamDomain::TestChannel, 0);
        let real = sampler.realize(&mut rng);
        let trials = 5000;
        let mut mean_err = Array2::<Complex64>::default((m, n));
        for t in 0..trials as u64 {
            let mut noise_rng = stream(13, StreamDomain::Noise, t);
            let y = simulate_pilots(&real, &sched, &pilots, &mut noise_rng, false).unwrap();
            let est = ls_estimate(&y, &sched).unwrap();
            mean_err += &(&est - &real.cascaded);
        }
        mean_err.mapv_inplace(|z| z / trials as f64);
        // Three Monte Carlo standard errors of the mean-error norm.
        let threshold = 3.0 * ((m * n) as f64 / (l as f64 * trials as f64)).sqrt();
        let norm = frob(&mean_err);
        assert!(norm < threshold, "|mean error| = {norm}, threshold {threshold}");
    }

    #[test]
    fn ls_nmse_is_invariant_to_row_permuted_schedules() {
        // Reassigning DFT frequencies to different elements permutes the
        // filter's columns; the per-draw error norm is unchanged exactly.
        let (m, n, l) = (8, 8, 8);
        let base = dft_schedule(n, l).unwrap();
        let perm = [3usize, 0, 6, 1, 7, 2, 5, 4];
        let mut permuted_matrix = Array2::default((n, l));
        for row in 0..n {
            for col in 0..l {
                permuted_matrix[[row, col]] = base.matrix()[[perm[row], col]];
            }
        }
        let permuted = PhaseSchedule {
            matrix: permuted_matrix,
            kind: ScheduleKind::Dft,
        };
        permuted.validate().unwrap();

        let sampler = sampler((4, 2), (4, 2), 10.0, true);
        let mut rng = stream(14, StreamDomain::TestChannel, 0);
        let real = sampler.realize(&mut rng);
        let mut noise = vec![Complex64::default(); m * l];
        fill_complex_gaussian(&mut rng, 0.5, &mut noise);
        let v = Array2::from_shape_vec((m, l), noise).unwrap();

        let nmse_of = |sched: &PhaseSchedule| {
            let y = ReceivedPilots {
                observation: real.cascaded.dot(sched.matrix()) + &v,
                noise_variance: 0.5,
            };
            nmse(&ls_estimate(&y, sched).unwrap(), &real.cascaded).unwrap()
        };
        let a = nmse_of(&base);
        let b = nmse_of(&permuted);
        assert!(
            (a - b).abs() < 1e-12 * a,
            "NMSE changed under row permutation: {a} vs {b}"
        );
    }

    #[test]
    fn lmmse_reduces_to_ls_as_noise_vanishes() {
        let sampler = sampler((4, 2), (4, 4), 0.0, false);
        let (m, n, l) = (16, 8, 8);
        let sched = dft_schedule(n, l).unwrap();
        let r_g = Array2::eye(n).mapv(|z: Complex64| z * m as f64);
        let snr_db = 120.0; // sigma^2 = 1e-12
        let pilots = PilotConfig::from_snr_db(snr_db);
        let mut rng = stream(15, StreamDomain::TestChannel, 0);
        let real = sampler.realize(&mut rng);
        let y = simulate_pilots(&real, &sched, &pilots, &mut rng, false).unwrap();
        let ls = ls_estimate(&y, &sched).unwrap();
        let lm = lmmse_estimate(&y, &sched, &r_g, m, true).unwrap();
        let rel = frob(&(&ls - &lm)) / frob(&ls);
        assert!(rel < 1e-6, "estimates differ by {rel:.3e}");
        let dn = (nmse(&ls, &real.cascaded).unwrap() - nmse(&lm, &real.cascaded).unwrap()).abs();
        assert!(dn < 1e-6, "NMSE gap {dn:.3e}");
    }

    #[test]
    fn lmmse_matches_the_scalar_closed_form() {
        // N = L = M = 1, S = [1], covariance r, noise s^2: Ghat = Y*r/(r+s^2).
        let sched = dft_schedule(1, 1).unwrap();
        let r = 2.0;
        let s2 = 0.5;
        let y = ReceivedPilots {
            observation: Array2::from_elem((1, 1), Complex64::new(1.0, 2.0)),
            noise_variance: s2,
        };
        let r_g = Array2::from_elem((1, 1), c(r));
        let est = lmmse_estimate(&y, &sched, &r_g, 1, true).unwrap();
        let expect = Complex64::new(1.0, 2.0) * (r / (r + s2));
        assert!((est[[0, 0]] - expect).norm() < 1e-14, "{}", est[[0, 0]]);
    }

    #[test]
    fn lmmse_rejects_bad_covariance() {
        let sched = dft_schedule(4, 4).unwrap();
        let y = ReceivedPilots {
            observation: Array2::default((2, 4)),
            noise_variance: 0.1,
        };
        // Wrong size.
        let r_small = Array2::<Complex64>::eye(3);
        assert!(matches!(
            lmmse_estimate(&y, &sched, &r_small, 2, true),
            Err(Error::Argument(_))
        ));
        // Non-Hermitian.
        let mut r_bad = Array2::<Complex64>::eye(4);
        r_bad[[0, 1]] = Complex64::new(0.5, 0.0);
        assert!(matches!(
            lmmse_estimate(&y, &sched, &r_bad, 2, true),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn lmmse_beats_ls_at_low_snr() {
        let sampler = sampler((4, 2), (4, 4), 10.0, true);
        let (m, n, l) = (16, 8, 8);
        let sched = dft_schedule(n, l).unwrap();

        // Column-space covariance from an independent training draw.
        let mut acc = CovarianceAccumulator::new(n);
        for t in 0..500u64 {
            let mut rng = stream(16, StreamDomain::Statistics, t);
            acc.push(&sampler.realize(&mut rng).cascaded.view()).unwrap();
        }
        let r_g = acc.finish().unwrap();

        for snr_db in [-5.0, 0.0] {
            let pilots = PilotConfig::from_snr_db(snr_db);
            let filter = lmmse_filter(&sched, &r_g, m, pilots.noise_variance(), true).unwrap();
            let mut ls_ratios = Vec::new();
            let mut lm_ratios = Vec::new();
            for t in 0..800u64 {
                let mut ch_rng = stream(17, StreamDomain::TestChannel, t);
                let real = sampler.realize(&mut ch_rng);
                let mut noise_rng = stream(17, StreamDomain::Noise, t);
                let y = simulate_pilots(&real, &sched, &pilots, &mut noise_rng, false).unwrap();
                let ls = ls_estimate(&y, &sched).unwrap();
                let lm = y.observation.dot(&filter);
                ls_ratios.push(nmse(&ls, &real.cascaded).unwrap());
                lm_ratios.push(nmse(&lm, &real.cascaded).unwrap());
            }
            let ls_nmse = batch_nmse(&ls_ratios).unwrap();
            let lm_nmse = batch_nmse(&lm_ratios).unwrap();
            assert!(
                lm_nmse <= ls_nmse,
                "snr {snr_db} dB: LMMSE {lm_nmse:.4} vs LS {ls_nmse:.4}"
            );
        }
    }

    #[test]
    fn blmmse_recovers_exactly_without_noise() {
        let sampler = sampler((4, 2), (4, 4), 10.0, true);
        let m = 16;
        let r_g = Array2::eye(8).mapv(|z: Complex64| z * m as f64);
        let pilots = PilotConfig::from_snr_db(f64::INFINITY);
        let mut rng = stream(18, StreamDomain::TestChannel, 0);
        let real = sampler.realize(&mut rng);
        let est = blmmse_estimate(&real, &pilots, &mut rng, &r_g, true).unwrap();
        let err = nmse(&est, &real.cascaded).unwrap();
        assert!(err < 1e-20, "NMSE {err:.3e}");
    }

    #[test]
    fn blmmse_loses_to_dft_ls_at_high_snr() {
        // One active element per subframe collects 1/N of the aperture power,
        // which shrinkage cannot buy back once noise is already small.
        let sampler = sampler((4, 2), (4, 4), 0.0, false);
        let (m, n) = (16, 8);
        let sched = dft_schedule(n, n).unwrap();
        let r_g = Array2::eye(n).mapv(|z: Complex64| z * m as f64);
        let pilots = PilotConfig::from_snr_db(10.0);
        let mut ls_ratios = Vec::new();
        let mut bl_ratios = Vec::new();
        for t in 0..400u64 {
            let mut ch_rng = stream(19, StreamDomain::TestChannel, t);
            let real = sampler.realize(&mut ch_rng);
            let mut noise_rng = stream(19, StreamDomain::Noise, t);
            let y = simulate_pilots(&real, &sched, &pilots, &mut noise_rng, false).unwrap();
            ls_ratios.push(nmse(&ls_estimate(&y, &sched).unwrap(), &real.cascaded).unwrap());
            let mut b_rng = stream(20, StreamDomain::Noise, t);
            let bl = blmmse_estimate(&real, &pilots, &mut b_rng, &r_g, true).unwrap();
            bl_ratios.push(nmse(&bl, &real.cascaded).unwrap());
        }
        let ls_nmse = batch_nmse(&ls_ratios).unwrap();
        let bl_nmse = batch_nmse(&bl_ratios).unwrap();
        assert!(
            bl_nmse > ls_nmse,
            "B-LMMSE {bl_nmse:.4} should trail DFT LS {ls_nmse:.4} at 10 dB"
        );
    }

    #[test]
    fn blmmse_beats_identity_ls_at_low_snr() {
        let sampler = sampler((4, 2), (4, 4), 0.0, false);
        let (m, n) = (16, 8);
        let bin = binary_schedule(n);
        let r_g = Array2::eye(n).mapv(|z: Complex64| z * m as f64);
        let pilots = PilotConfig::from_snr_db(-5.0);
        let mut ls_ratios = Vec::new();
        let mut bl_ratios = Vec::new();
        for t in 0..400u64 {
            let mut ch_rng = stream(21, StreamDomain::TestChannel, t);
            let real = sampler.realize(&mut ch_rng);
            let mut noise_rng = stream(21, StreamDomain::Noise, t);
            let y = simulate_pilots(&real, &bin, &pilots, &mut noise_rng, false).unwrap();
            ls_ratios.push(nmse(&ls_estimate(&y, &bin).unwrap(), &real.cascaded).unwrap());
            let lm = lmmse_estimate(&y, &bin, &r_g, m, true).unwrap();
            bl_ratios.push(nmse(&lm, &real.cascaded).unwrap());
        }
        let ls_nmse = batch_nmse(&ls_ratios).unwrap();
        let bl_nmse = batch_nmse(&bl_ratios).unwrap();
        assert!(
            bl_nmse < ls_nmse,
            "B-LMMSE {bl_nmse:.4} should beat identity LS {ls_nmse:.4} at -5 dB"
        );
    }

    #[test]
    fn covariance_accumulator_matches_direct_computation() {
        let sampler = sampler((2, 2), (4, 2), 10.0, true);
        let mut rng = stream(22, StreamDomain::Statistics, 0);
        let samples: Vec<_> = (0..3).map(|_| sampler.realize(&mut rng).cascaded).collect();
        let r = cascaded_covariance(&samples).unwrap();
        let n = 4;
        for i in 0..n {
            for j in 0..n {
                let mut expect = Complex64::default();
                for g in &samples {
                    for row in 0..8 {
                        expect += g[[row, i]].conj() * g[[row, j]];
                    }
                }
                expect /= samples.len() as f64;
                assert!((r[[i, j]] - expect).norm() < 1e-12 * expect.norm().max(1.0));
                // Exact Hermitian symmetry by construction.
                assert_eq!(r[[i, j]], r[[j, i]].conj());
            }
        }
        assert!(matches!(cascaded_covariance(&[]), Err(Error::Argument(_))));
        let mut acc = CovarianceAccumulator::new(3);
        assert!(acc.push(&samples[0].view()).is_err());
    }

    #[test]
    fn direct_estimate_averages_subframes() {
        let sampler = sampler((2, 2), (4, 4), 10.0, true);
        let mut rng = stream(23, StreamDomain::TestChannel, 0);
        let real = sampler.realize(&mut rng);
        let m = 16;

        // Noiseless: the average of identical columns is the column.
        let clean = PilotConfig::from_snr_db(f64::INFINITY);
        let obs = simulate_direct_pilots(&real, 4, &clean, &mut rng).unwrap();
        let est = estimate_direct(&obs.view()).unwrap();
        for row in 0..m {
            assert!((est[row] - real.direct_link[row]).norm() < 1e-15);
        }

        // Noisy: averaging J subframes divides the error power by J.
        let j = 8;
        let pilots = PilotConfig::from_snr_db(0.0);
        let trials = 1000;
        let mut acc = 0.0f64;
        for t in 0..trials as u64 {
            let mut noise_rng = stream(23, StreamDomain::Noise, t);
            let obs = simulate_direct_pilots(&real, j, &pilots, &mut noise_rng).unwrap();
            let est = estimate_direct(&obs.view()).unwrap();
            acc += (&est - &real.direct_link).iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        let mean = acc / trials as f64;
        let expect = m as f64 / j as f64;
        assert!(
            (mean - expect).abs() < 0.05 * expect,
            "mean error power {mean}, expected {expect}"
        );

        // Cancelling the true direct path recovers the scheduled channel.
        let sched = dft_schedule(4, 8).unwrap();
        let mut y = simulate_pilots(&real, &sched, &clean, &mut rng, true).unwrap();
        cancel_direct(&mut y, &real.direct_link.view()).unwrap();
        let gs = real.cascaded.dot(sched.matrix());
        for (a, b) in y.observation.iter().zip(gs.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
        // Shape guard.
        let short = Array1::<Complex64>::default(3);
        assert!(cancel_direct(&mut y, &short.view()).is_err());
    }

    #[test]
    fn nmse_fixed_points() {
        let sampler = sampler((2, 2), (4, 2), 10.0, true);
        let mut rng = stream(24, StreamDomain::TestChannel, 0);
        let g = sampler.realize(&mut rng).cascaded;
        assert_eq!(nmse(&g, &g).unwrap(), 0.0);
        let zero = Array2::<Complex64>::default(g.dim());
        assert!((nmse(&zero, &g).unwrap() - 1.0).abs() < 1e-15);
        let double = g.mapv(|z| z * 2.0);
        assert!((nmse(&double, &g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmse_rejects_zero_reference_and_shape_mismatch() {
        let zero = Array2::<Complex64>::default((2, 2));
        let est = Array2::<Complex64>::eye(2);
        assert!(matches!(nmse(&est, &zero), Err(Error::Argument(_))));
        let wide = Array2::<Complex64>::default((2, 3));
        assert!(matches!(nmse(&est, &wide), Err(Error::Shape(_))));
    }

    #[test]
    fn nmse_db_applies_the_reporting_floor() {
        assert_eq!(nmse_db(0.0), NMSE_DB_FLOOR);
        assert_eq!(nmse_db(1e-40), NMSE_DB_FLOOR);
        assert_eq!(nmse_db(1.0), 0.0);
        assert!((nmse_db(0.1) + 10.0).abs() < 1e-12);
    }

    #[test]
    fn batch_nmse_averages_ratios() {
        assert!((batch_nmse(&[0.1, 0.3, 0.2]).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(batch_nmse(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn partial_schedule_supports_lmmse_but_not_least_squares() {
        let sched = partial_dft_schedule(16, 8).unwrap();
        assert_eq!(sched.kind(), ScheduleKind::PartialDft);
        assert_eq!((sched.elements(), sched.subframes()), (16, 8));
        sched.validate().unwrap();
        assert!(matches!(ls_filter(&sched), Err(Error::Config(_))));

        // The regularized filter exists and yields finite estimates.
        let r_g = Array2::from_shape_fn((16, 16), |(i, j)| {
            if i == j {
                Complex64::new(64.0, 0.0)
            } else {
                Complex64::default()
            }
        });
        let w = lmmse_filter(&sched, &r_g, 64, 0.1, true).unwrap();
        assert_eq!(w.dim(), (8, 16));
        assert!(w.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
    }

    #[test]
    fn partial_schedule_delegates_to_full_dft_when_possible() {
        let sched = partial_dft_schedule(4, 8).unwrap();
        assert_eq!(sched.kind(), ScheduleKind::Dft);
        sched.validate().unwrap();
        assert!(ls_filter(&sched).is_ok());
    }
}
