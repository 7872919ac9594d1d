//! Applying a trained network to complex channel estimates.
//!
//! An estimate matrix is split into real and imaginary planes, pushed through
//! the network in evaluation mode, and recombined. Inference can run on the
//! full matrix at once or on a grid of non-overlapping tiles; tiling bounds
//! the working-set size at the cost of per-tile dispatch overhead and runs
//! each tile through exactly the same code path as a full-size pass, so a
//! tile size equal to the input reproduces full-mode output bit for bit.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;

use super::layers::{planes_to_tensor, tensor_to_planes};
use super::net::DenoiserNet;
use super::TensorFloat;
use crate::patching::{complex_to_planes, planes_to_complex};
use crate::{Error, Result};

/// How to cover the input matrix during inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// One forward pass over the whole matrix.
    Full,
    /// Independent forward passes over a grid of `tile_rows x tile_cols`
    /// windows stitched back together. Tiles must not overlap, so the tile
    /// dimensions have to divide the input dimensions exactly.
    Tiled { tile_rows: usize, tile_cols: usize },
}

/// Runs one window through the network in evaluation mode.
fn denoise_window<T: TensorFloat>(
    net: &DenoiserNet<T>,
    window: &ArrayView2<Complex64>,
) -> Result<Array2<Complex64>> {
    let planes = complex_to_planes(window);
    let x = planes_to_tensor::<T>(&planes).insert_axis(Axis(0));
    let y = net.forward_eval(&x)?;
    let y3: Array3<T> = y.index_axis(Axis(0), 0).to_owned();
    planes_to_complex(&tensor_to_planes(&y3).view())
}

/// Denoises a complex estimate matrix with a trained network.
///
/// The matrix (or each tile, in tiled mode) must be divisible by the
/// network's resolution-halving factor; the error message says what size to
/// pad or crop to when it is not.
pub fn infer<T: TensorFloat>(
    net: &DenoiserNet<T>,
    estimate: &ArrayView2<Complex64>,
    mode: InferMode,
) -> Result<Array2<Complex64>> {
    let (m, n) = estimate.dim();
    match mode {
        InferMode::Full => denoise_window(net, estimate),
        InferMode::Tiled {
            tile_rows,
            tile_cols,
        } => {
            if tile_rows == 0 || tile_cols == 0 {
                return Err(Error::Argument(
                    "tile dimensions must be at least 1".into(),
                ));
            }
            if m % tile_rows != 0 || n % tile_cols != 0 {
                return Err(Error::Shape(format!(
                    "tiles of {tile_rows}x{tile_cols} do not cover a {m}x{n} matrix \
                     exactly; choose tile dimensions dividing the input"
                )));
            }
            let d = net.config().spatial_divisor();
            if tile_rows % d != 0 || tile_cols % d != 0 {
                return Err(Error::Shape(format!(
                    "tile dimensions {tile_rows}x{tile_cols} must be multiples of {d} \
                     (the network halves resolution {} times)",
                    net.config().levels - 1
                )));
            }
            let mut out = Array2::<Complex64>::zeros((m, n));
            for ti in 0..m / tile_rows {
                for tj in 0..n / tile_cols {
                    let (r0, c0) = (ti * tile_rows, tj * tile_cols);
                    let window = estimate.slice(s![r0..r0 + tile_rows, c0..c0 + tile_cols]);
                    let denoised = denoise_window(net, &window)?;
                    out.slice_mut(s![r0..r0 + tile_rows, c0..c0 + tile_cols])
                        .assign(&denoised);
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::net::{build_net, NetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net() -> DenoiserNet<f32> {
        let cfg = NetConfig {
            levels: 2,
            base_filters: 4,
            convs_per_block: 2,
            kernel: 3,
            use_batchnorm: true,
        };
        build_net(&cfg, 60).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        })
    }

    #[test]
    fn output_shape_matches_input_and_is_finite() {
        let net = small_net();
        let x = random_matrix(8, 16, 61);
        let y = infer(&net, &x.view(), InferMode::Full).unwrap();
        assert_eq!(y.dim(), (8, 16));
        assert!(y.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
    }

    #[test]
    fn single_tile_covering_the_input_matches_full_mode_exactly() {
        let net = small_net();
        let x = random_matrix(8, 8, 62);
        let full = infer(&net, &x.view(), InferMode::Full).unwrap();
        let tiled = infer(
            &net,
            &x.view(),
            InferMode::Tiled {
                tile_rows: 8,
                tile_cols: 8,
            },
        )
        .unwrap();
        assert_eq!(full, tiled);
    }

    #[test]
    fn tiles_are_denoised_independently_and_stitched_in_place() {
        let net = small_net();
        let x = random_matrix(16, 8, 63);
        let tiled = infer(
            &net,
            &x.view(),
            InferMode::Tiled {
                tile_rows: 8,
                tile_cols: 8,
            },
        )
        .unwrap();
        let top = infer(&net, &x.slice(s![0..8, ..]), InferMode::Full).unwrap();
        let bottom = infer(&net, &x.slice(s![8..16, ..]), InferMode::Full).unwrap();
        assert_eq!(tiled.slice(s![0..8, ..]), top);
        assert_eq!(tiled.slice(s![8..16, ..]), bottom);
    }

    #[test]
    fn invalid_tilings_are_rejected() {
        let net = small_net();
        let x = random_matrix(12, 8, 64);
        let zero = infer(
            &net,
            &x.view(),
            InferMode::Tiled {
                tile_rows: 0,
                tile_cols: 8,
            },
        );
        assert!(matches!(zero, Err(Error::Argument(_))));
        let uneven = infer(
            &net,
            &x.view(),
            InferMode::Tiled {
                tile_rows: 8,
                tile_cols: 8,
            },
        );
        assert!(matches!(uneven, Err(Error::Shape(_))));
        // 3 divides 12 but is not a multiple of the resolution-halving factor.
        let indivisible = infer(
            &net,
            &x.view(),
            InferMode::Tiled {
                tile_rows: 3,
                tile_cols: 8,
            },
        );
        let msg = format!("{}", indivisible.unwrap_err());
        assert!(msg.contains("multiples of 2"), "{msg}");
    }

    #[test]
    fn full_mode_on_an_odd_size_reports_the_padding_target() {
        let net = small_net();
        let x = random_matrix(7, 8, 65);
        let err = infer(&net, &x.view(), InferMode::Full).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("8x8"), "{msg}");
    }
}
