//! Per-channel batch normalization.
//!
//! Train mode normalizes with the biased batch variance and folds the
//! unbiased variance into the running estimate; eval mode is a fixed
//! per-channel affine map.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<S: Scalar> BatchNormState<S> {
    /// gamma = 1, beta = 0, running stats (0, 1).
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving average update with the batch mean and the
    /// biased batch variance over `count` values (stored unbiased).
    pub fn update_running(&mut self, stats: &BatchStats, count: usize) {
        let m = self.momentum;
        let unbias = count as f64 / (count as f64 - 1.0);
        for c in 0..self.channels() {
            let rm = self.running_mean[c].to_f64_lossy();
            let rv = self.running_var[c].to_f64_lossy();
            self.running_mean[c] = S::from_f64_lossy((1.0 - m) * rm + m * stats.mean[c]);
            self.running_var[c] = S::from_f64_lossy((1.0 - m) * rv + m * stats.var[c] * unbias);
        }
    }

    pub fn cast<T: Scalar>(&self) -> BatchNormState<T> {
        let conv = |v: &[S]| v.iter().map(|x| T::from_f64_lossy(x.to_f64_lossy())).collect();
        BatchNormState {
            gamma: conv(&self.gamma),
            beta: conv(&self.beta),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            momentum: self.momentum,
            epsilon: self.epsilon,
        }
    }
}

/// Per-channel statistics used by a normalization (batch statistics in
/// train mode, running statistics in eval mode). `var` is biased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub epsilon: f64,
}

impl BatchStats {
    fn inv_std(&self, c: usize) -> f64 {
        1.0 / (self.var[c] + self.epsilon).sqrt()
    }
}

fn check_channels<S: Scalar>(input: &Tensor4<S>, gamma: &[S], beta: &[S]) -> Result<()> {
    let c = input.dims().c;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Config(format!(
            "batch norm over {c} channels given gamma/beta of length {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Mean and biased variance of every channel over (N, H, W).
pub fn batch_stats<S: Scalar>(input: &Tensor4<S>, epsilon: f64) -> Result<BatchStats> {
    let d = input.dims();
    let count = d.n * d.plane();
    if count < 2 {
        return Err(Error::DegenerateBatch(count));
    }
    let mut mean = vec![0.0; d.c];
    let mut var = vec![0.0; d.c];
    for c in 0..d.c {
        let mut sum = 0.0;
        for n in 0..d.n {
            sum += input.plane(n, c).iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        }
        let mu = sum / count as f64;
        let mut sq = 0.0;
        for n in 0..d.n {
            sq += input
                .plane(n, c)
                .iter()
                .map(|v| {
                    let e = v.to_f64_lossy() - mu;
                    e * e
                })
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = sq / count as f64;
    }
    Ok(BatchStats { mean, var, epsilon })
}

/// `gamma · (x − mean) / sqrt(var + eps) + beta` with the given statistics.
pub fn normalize<S: Scalar>(
    input: &Tensor4<S>,
    gamma: &[S],
    beta: &[S],
    stats: &BatchStats,
) -> Result<Tensor4<S>> {
    check_channels(input, gamma, beta)?;
    let d = input.dims();
    let mut out = Tensor4::zeros(d);
    for c in 0..d.c {
        let scale = gamma[c].to_f64_lossy() * stats.inv_std(c);
        let shift = beta[c].to_f64_lossy() - scale * stats.mean[c];
        let (scale, shift) = (S::from_f64_lossy(scale), S::from_f64_lossy(shift));
        for n in 0..d.n {
            let src = input.plane(n, c);
            for (o, &x) in out.plane_mut(n, c).iter_mut().zip(src) {
                *o = x * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Batch norm with state. Train mode updates the running statistics.
pub fn batchnorm<S: Scalar>(
    input: &Tensor4<S>,
    state: &mut BatchNormState<S>,
    mode: Mode,
) -> Result<Tensor4<S>> {
    check_channels(input, &state.gamma, &state.beta)?;
    match mode {
        Mode::Train => {
            let stats = batch_stats(input, state.epsilon)?;
            let out = normalize(input, &state.gamma, &state.beta, &stats)?;
            let d = input.dims();
            state.update_running(&stats, d.n * d.plane());
            Ok(out)
        }
        Mode::Eval => normalize(input, &state.gamma, &state.beta, &running_stats(state)),
    }
}

pub fn running_stats<S: Scalar>(state: &BatchNormState<S>) -> BatchStats {
    BatchStats {
        mean: state.running_mean.iter().map(|v| v.to_f64_lossy()).collect(),
        var: state.running_var.iter().map(|v| v.to_f64_lossy()).collect(),
        epsilon: state.epsilon,
    }
}

pub struct BatchNormGrads<S> {
    pub input: Tensor4<S>,
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
}

/// Backward of [`normalize`]. With `batch_coupled` the statistics are
/// treated as functions of the input (train mode); otherwise they are
/// constants (eval mode).
pub fn normalize_backward<S: Scalar>(
    grad_out: &Tensor4<S>,
    input: &Tensor4<S>,
    gamma: &[S],
    stats: &BatchStats,
    batch_coupled: bool,
) -> Result<BatchNormGrads<S>> {
    let d = input.dims();
    if grad_out.dims() != d || gamma.len() != d.c {
        return Err(Error::Internal(format!(
            "batch norm backward: grad {} vs input {d}",
            grad_out.dims()
        )));
    }
    let count = (d.n * d.plane()) as f64;
    let mut grad_in = Tensor4::zeros(d);
    let mut g_gamma = vec![S::zero(); d.c];
    let mut g_beta = vec![S::zero(); d.c];
    for c in 0..d.c {
        let mu = stats.mean[c];
        let inv = stats.inv_std(c);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..d.n {
            for (&dy, &x) in grad_out.plane(n, c).iter().zip(input.plane(n, c)) {
                let dy = dy.to_f64_lossy();
                sum_dy += dy;
                sum_dy_xhat += dy * (x.to_f64_lossy() - mu) * inv;
            }
        }
        g_gamma[c] = S::from_f64_lossy(sum_dy_xhat);
        g_beta[c] = S::from_f64_lossy(sum_dy);
        let k = gamma[c].to_f64_lossy() * inv;
        for n in 0..d.n {
            let src = input.plane(n, c);
            let go = grad_out.plane(n, c);
            let dst = grad_in.plane_mut(n, c);
            for i in 0..src.len() {
                let dy = go[i].to_f64_lossy();
                let v = if batch_coupled {
                    let xhat = (src[i].to_f64_lossy() - mu) * inv;
                    k * (dy - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    k * dy
                };
                dst[i] = S::from_f64_lossy(v);
            }
        }
    }
    Ok(BatchNormGrads {
        input: grad_in,
        gamma: g_gamma,
        beta: g_beta,
    })
}
