//! Mini-batch training with Adam, and a finite-difference gradient checker
//! that holds the analytic backward pass to account.

use std::io::Write as _;
use std::path::Path;

use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::Rng;

use super::net::DenoiserNet;
use super::TensorFloat;
use crate::rng::{stream, StreamDomain};
use crate::{Error, Result};

/// Optimizer and schedule settings for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Base learning rate, decayed per epoch.
    pub lr: f64,
    /// Multiplicative per-epoch decay of the learning rate.
    pub decay: f64,
    pub batch_size: usize,
    /// Number of epochs this call runs.
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds the per-epoch shuffle streams.
    pub seed: u64,
    /// Absolute index of the first epoch; a resumed run passes the number of
    /// epochs already completed so the learning-rate schedule and shuffle
    /// order continue where they left off.
    pub start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.004,
            decay: 0.95,
            batch_size: 32,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            start_epoch: 0,
        }
    }
}

/// Learning rate used during the given absolute epoch (zero-based).
pub fn epoch_lr(lr: f64, decay: f64, epoch: usize) -> f64 {
    lr * decay.powi(epoch as i32)
}

/// Train and validation loss of one epoch. Losses are plain mean squared
/// error over every tensor element.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Bias-corrected Adam over the flat parameter vector. First and second
/// moments are kept in `f64` regardless of the network precision.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    fn step<T: TensorFloat>(&mut self, lr: f64, grads: &[T], net: &mut DenoiserNet<T>) {
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut k = 0usize;
        let (m, v) = (&mut self.m, &mut self.v);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        net.for_each_trainable_mut(&mut |slice| {
            for p in slice {
                let g = grads[k].to_f64_lossy();
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let update = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                *p = *p - T::from_f64_lossy(update);
                k += 1;
            }
        });
    }
}

/// Largest parameter magnitude treated as recoverable. Past this point a
/// single-precision forward pass through two or more convolution levels is
/// guaranteed to overflow, so the run is aborted as diverged *before* the
/// next forward pass rather than after the activations explode.
const PARAM_DIVERGENCE_LIMIT: f64 = 1e6;

/// Mean squared error of a batch (in `f64`) and its gradient at the
/// prediction, `2 (y - t) / numel`.
fn mse_and_grad<T: TensorFloat>(y: &Array4<T>, t: &Array4<T>) -> (f64, Array4<T>) {
    debug_assert_eq!(y.dim(), t.dim());
    let numel = y.len() as f64;
    let mut acc = 0.0f64;
    let mut grad = Array4::zeros(y.dim());
    let scale = T::from_f64_lossy(2.0 / numel);
    ndarray::Zip::from(&mut grad).and(y).and(t).for_each(|g, &a, &b| {
        let d = a - b;
        let df = d.to_f64_lossy();
        acc += df * df;
        *g = scale * d;
    });
    (acc / numel, grad)
}

fn gather_batch<T: TensorFloat>(src: &Array4<T>, idx: &[usize]) -> Array4<T> {
    let (_, c, h, w) = src.dim();
    let mut out = Array4::zeros((idx.len(), c, h, w));
    for (k, &i) in idx.iter().enumerate() {
        out.slice_mut(s![k, .., .., ..]).assign(&src.slice(s![i, .., .., ..]));
    }
    out
}

/// Mean squared error of a whole set under inference mode, evaluated in
/// batches to bound memory. Returns NaN for an empty set.
fn eval_loss<T: TensorFloat>(
    net: &DenoiserNet<T>,
    inputs: &Array4<T>,
    targets: &Array4<T>,
    batch_size: usize,
) -> Result<f64> {
    let n = inputs.dim().0;
    if n == 0 {
        return Ok(f64::NAN);
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    let mut at = 0;
    while at < n {
        let hi = (at + batch_size).min(n);
        let xb = inputs.slice(s![at..hi, .., .., ..]).to_owned();
        let tb = targets.slice(s![at..hi, .., .., ..]).to_owned();
        let y = net.forward_eval(&xb)?;
        ndarray::Zip::from(&y).and(&tb).for_each(|&a, &b| {
            let d = (a - b).to_f64_lossy();
            acc += d * d;
        });
        count += y.len();
        at = hi;
    }
    Ok(acc / count as f64)
}

/// Runs `tc.epochs` epochs of shuffled mini-batch Adam on the network and
/// returns one loss record per epoch. Training loss is the size-weighted
/// mean over the epoch's batches; validation loss is computed in inference
/// mode after the epoch. A non-finite batch loss aborts with a divergence
/// error.
pub fn train<T: TensorFloat>(
    net: &mut DenoiserNet<T>,
    train_inputs: &Array4<T>,
    train_targets: &Array4<T>,
    val_inputs: &Array4<T>,
    val_targets: &Array4<T>,
    tc: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    if tc.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(tc.lr.is_finite() && tc.lr > 0.0) || !(tc.decay.is_finite() && tc.decay > 0.0) {
        return Err(Error::Config(format!(
            "learning rate {} / decay {} must be positive and finite",
            tc.lr, tc.decay
        )));
    }
    let n = train_inputs.dim().0;
    if n == 0 {
        return Err(Error::Argument("training set is empty".into()));
    }
    if train_inputs.dim() != train_targets.dim() {
        return Err(Error::Shape(format!(
            "training inputs {:?} and targets {:?} disagree",
            train_inputs.dim(),
            train_targets.dim()
        )));
    }
    if val_inputs.dim() != val_targets.dim() {
        return Err(Error::Shape(format!(
            "validation inputs {:?} and targets {:?} disagree",
            val_inputs.dim(),
            val_targets.dim()
        )));
    }

    let mut adam = Adam::new(net.param_count(), tc.beta1, tc.beta2, tc.epsilon);
    let mut out = Vec::with_capacity(tc.epochs);
    for e in 0..tc.epochs {
        let epoch = tc.start_epoch + e;
        let lr = epoch_lr(tc.lr, tc.decay, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(tc.seed, StreamDomain::Shuffle, epoch as u64));

        let mut acc = 0.0f64;
        for chunk in order.chunks(tc.batch_size) {
            let xb = gather_batch(train_inputs, chunk);
            let tb = gather_batch(train_targets, chunk);
            let (y, trace) = net.forward_train(&xb)?;
            let (loss, grad) = mse_and_grad(&y, &tb);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "training loss became {loss} in epoch {epoch}"
                )));
            }
            let (_, grads) = net.backward(&trace, &grad);
            adam.step(lr, &grads, net);
            let mut worst = 0.0f64;
            let mut finite = true;
            net.for_each_trainable(&mut |s| {
                for v in s {
                    let a = v.to_f64_lossy().abs();
                    finite &= a.is_finite();
                    if a > worst {
                        worst = a;
                    }
                }
            });
            if !finite || worst > PARAM_DIVERGENCE_LIMIT {
                return Err(Error::Diverged(format!(
                    "parameter magnitude reached {worst:e} in epoch {epoch}; \
                     the learning rate is far too high or the initialization is broken"
                )));
            }
            acc += loss * chunk.len() as f64;
        }
        let train_loss = acc / n as f64;
        let val_loss = eval_loss(net, val_inputs, val_targets, tc.batch_size)?;
        out.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok(out)
}

/// Appends epoch records to a `epoch,train_loss,val_loss` CSV, writing the
/// header only when the file starts empty — so a resumed run extends the
/// existing trace.
pub fn write_loss_trace(path: &Path, losses: &[EpochLoss]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(f, "epoch,train_loss,val_loss")?;
    }
    for l in losses {
        writeln!(f, "{},{},{}", l.epoch, l.train_loss, l.val_loss)?;
    }
    Ok(())
}

/// Outcome of a finite-difference sweep over randomly probed parameters and
/// input entries.
#[derive(Debug, Clone)]
pub struct GradientCheckReport {
    pub param_probes: usize,
    pub input_probes: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

impl GradientCheckReport {
    pub fn probes(&self) -> usize {
        self.param_probes + self.input_probes
    }
}

/// Compares the analytic gradients of the mean-squared-error loss against
/// central finite differences (step `1e-5`), probing at least `min_probes`
/// positions split over parameters and input entries. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-8)`. Input entries that are exactly zero are
/// not probed: they sit on the rectifier's kink, where a two-sided
/// difference straddles the non-differentiable point and measures nothing.
///
/// Run this on an `f64` network; at `f32` the difference quotient drowns in
/// rounding noise.
pub fn gradient_check(
    net: &DenoiserNet<f64>,
    input: &Array4<f64>,
    target: &Array4<f64>,
    min_probes: usize,
    seed: u64,
) -> Result<GradientCheckReport> {
    let loss_of = |n: &DenoiserNet<f64>, x: &Array4<f64>| -> Result<f64> {
        let mut work = n.clone();
        let (y, _) = work.forward_train(x)?;
        let numel = y.len() as f64;
        let mut acc = 0.0;
        ndarray::Zip::from(&y).and(target).for_each(|&a, &b| {
            let d = a - b;
            acc += d * d;
        });
        Ok(acc / numel)
    };

    // Analytic gradients, computed once.
    let mut work = net.clone();
    let (y, trace) = work.forward_train(input)?;
    let (_, loss_grad) = mse_and_grad(&y, target);
    let (grad_input, grad_params) = work.backward(&trace, &loss_grad);

    let param_count = net.param_count();
    let flat_params_grad = grad_params;
    let input_slice_grad = grad_input.as_slice().expect("standard layout").to_vec();
    let nonzero_inputs: Vec<usize> = input
        .as_slice()
        .expect("standard layout")
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect();
    if nonzero_inputs.is_empty() {
        return Err(Error::Argument(
            "gradient check input is identically zero".into(),
        ));
    }

    let n_param = min_probes.div_ceil(2).max(1);
    let n_input = (min_probes - min_probes / 2).max(1);
    let h = 1e-5;
    let mut rng = stream(seed, StreamDomain::Statistics, 0);
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;

    for _ in 0..n_param {
        let idx = rng.gen_range(0..param_count);
        let mut hi = net.clone();
        hi.perturb_trainable(idx, h);
        let mut lo = net.clone();
        lo.perturb_trainable(idx, -h);
        let fd = (loss_of(&hi, input)? - loss_of(&lo, input)?) / (2.0 * h);
        let a = flat_params_grad[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }
    for _ in 0..n_input {
        let idx = nonzero_inputs[rng.gen_range(0..nonzero_inputs.len())];
        let mut hi = input.clone();
        hi.as_slice_mut().unwrap()[idx] += h;
        let mut lo = input.clone();
        lo.as_slice_mut().unwrap()[idx] -= h;
        let fd = (loss_of(net, &hi)? - loss_of(net, &lo)?) / (2.0 * h);
        let a = input_slice_grad[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
    }

    Ok(GradientCheckReport {
        param_probes: n_param,
        input_probes: n_input,
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / (n_param + n_input) as f64,
    })
}
