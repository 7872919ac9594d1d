//! A from-scratch convolutional denoiser for two-plane (real/imaginary)
//! channel estimates, with exact manually derived gradients.
//!
//! The network is an encoder/decoder over a small number of resolution
//! levels. Its building unit is a residual denoising block: a 1x1 convolution
//! aligns the channel width, a short stack of convolutions (batch-normalized
//! and rectified, except the last, which is linear and zero-initialized)
//! predicts the noise, and the block output is the aligned input minus that
//! prediction — so a freshly built block is an exact identity on its aligned
//! input. Each decoder stage sees the feature maps of *every* level, pooled
//! or bilinearly upsampled to its own resolution, so fine detail and coarse
//! context are fused at every scale.
//!
//! Everything here is deterministic given the seed: initialization draws come
//! from per-tensor counter-derived streams, and training visits batches in a
//! seeded shuffle order. All layers carry hand-written backward passes that
//! are validated against central finite differences in the test suite.
//!
//! The public surface covers layer primitives (convolution, pooling,
//! bilinear resampling, batch normalization — each with its exact adjoint),
//! network assembly ([`NetConfig`], [`build_net`], [`DenoiserNet`]),
//! training ([`train`], [`TrainConfig`]) with Adam, a decaying learning rate
//! and divergence detection, versioned binary checkpoints
//! ([`save_checkpoint`], [`load_checkpoint`]), and inference ([`infer`]) over
//! full matrices or stitched tiles.

mod checkpoint;
mod infer;
mod layers;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use infer::{infer, InferMode};
pub use layers::{
    bilinear_up, bilinear_up_backward, concat_channels, maxpool2, maxpool2_backward,
    planes_to_tensor, relu, split_channels, tensor_to_planes, BatchNorm, Conv2d,
};
pub use net::{
    build_net, conv_shapes, ConvShape, DenoiserNet, NetConfig, PLANE_CHANNELS,
};
pub use train::{
    epoch_lr, gradient_check, train, write_loss_trace, EpochLoss, GradientCheckReport,
    TrainConfig,
};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar element type the network can run in (`f32` or `f64`).
///
/// `f64` is used by the finite-difference gradient checks, `f32` by the
/// experiment pipeline. Conversions through `f64` are lossless for both.
pub trait TensorFloat:
    Float
    + FromPrimitive
    + ToPrimitive
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float width")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float widens to f64")
    }
}

impl TensorFloat for f32 {}
impl TensorFloat for f64 {}

/// Asserts (in debug builds only) that a tensor holds no NaN or infinity.
/// Called after every layer so numerical blow-ups are caught at their source.
pub(crate) fn debug_assert_finite<T: TensorFloat, D: ndarray::Dimension>(
    t: &ndarray::ArrayBase<impl ndarray::Data<Elem = T>, D>,
    label: &str,
) {
    if cfg!(debug_assertions) {
        debug_assert!(
            t.iter().all(|v| v.is_finite()),
            "non-finite value after {label}"
        );
    }
}
