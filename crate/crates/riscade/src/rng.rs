//! Deterministic, counter-based random number streams.
//!
//! Every stochastic quantity in the toolkit draws from a stream keyed by
//! `(master_seed, domain, index)`. Streams are mutually independent and can
//! be opened in any order, so parallel workers produce bit-identical results
//! regardless of scheduling: worker `i` simply opens the stream for index `i`.
//!
//! The backing generator is ChaCha8; the domain and index select one of its
//! 2^64 independent streams while the master seed selects the key.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Namespaces for the per-purpose substreams. Keeping these disjoint means
/// e.g. noise draws can never alias channel draws even at equal indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    /// Channel realizations for the training/validation pool.
    TrainChannel = 1,
    /// Channel realizations for test sets (index also encodes the axis point).
    TestChannel = 2,
    /// Additive receiver noise.
    Noise = 3,
    /// Patch offset draws.
    Patch = 4,
    /// Network weight initialization.
    NetInit = 5,
    /// Per-epoch shuffling of the training set.
    Shuffle = 6,
    /// Channel realizations used to estimate second-order statistics.
    Statistics = 7,
    /// Direct-link experiment draws.
    Direct = 8,
}

const INDEX_BITS: u32 = 56;

/// Opens the ChaCha stream for `(master_seed, domain, index)`.
///
/// `index` must fit in 56 bits; the domain occupies the top byte of the
/// stream identifier.
pub fn stream(master_seed: u64, domain: StreamDomain, index: u64) -> ChaCha8Rng {
    assert!(
        index < 1u64 << INDEX_BITS,
        "stream index {index} exceeds {} bits",
        INDEX_BITS
    );
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((domain as u64) << INDEX_BITS) | index);
    rng
}

/// One draw from the standard circularly-symmetric complex Gaussian CN(0, 1):
/// real and imaginary parts are independent N(0, 1/2).
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * std::f64::consts::FRAC_1_SQRT_2, im * std::f64::consts::FRAC_1_SQRT_2)
}

/// Fills a slice with CN(0, `variance`) draws.
pub fn fill_complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64, out: &mut [Complex64]) {
    let scale = variance.sqrt();
    for z in out.iter_mut() {
        *z = complex_gaussian(rng) * scale;
    }
}
