use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::{Dims, Tensor4};

/// Fully connected layer `y = x·W + b`.
///
/// `input` is flattened per sample to `F = C·H·W` features; `weights` has
/// dims `(1, 1, F, K)` and `bias` `(1, 1, 1, K)`. The result is `(N, K, 1, 1)`.
pub fn linear<S: Scalar>(
    input: &Tensor4<S>,
    weights: &Tensor4<S>,
    bias: &Tensor4<S>,
) -> Result<Tensor4<S>> {
    let (n, f, k) = check(input.dims(), weights.dims(), bias.dims())?;
    let mut out = Tensor4::zeros(Dims::new(n, k, 1, 1));
    for row in out.data_mut().chunks_mut(k) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        n,
        f,
        k,
        input.data(),
        Layout::Normal,
        weights.data(),
        Layout::Normal,
        S::one(),
        out.data_mut(),
    );
    Ok(out)
}

pub struct LinearGrads<S> {
    pub input: Tensor4<S>,
    pub weights: Tensor4<S>,
    pub bias: Tensor4<S>,
}

pub fn linear_backward<S: Scalar>(
    grad_out: &Tensor4<S>,
    input: &Tensor4<S>,
    weights: &Tensor4<S>,
) -> Result<LinearGrads<S>> {
    let wd = weights.dims();
    let (n, f, k) = check(input.dims(), wd, Dims::new(1, 1, 1, wd.w))?;
    if grad_out.dims() != Dims::new(n, k, 1, 1) {
        return Err(Error::Internal(format!(
            "linear backward: grad {} for {n} samples × {k} outputs",
            grad_out.dims()
        )));
    }
    let mut g_in = Tensor4::zeros(input.dims());
    gemm(
        n,
        k,
        f,
        grad_out.data(),
        Layout::Normal,
        weights.data(),
        Layout::Transposed,
        S::zero(),
        g_in.data_mut(),
    );
    let mut g_w = Tensor4::zeros(wd);
    gemm(
        f,
        n,
        k,
        input.data(),
        Layout::Transposed,
        grad_out.data(),
        Layout::Normal,
        S::zero(),
        g_w.data_mut(),
    );
    let mut g_b = Tensor4::zeros(Dims::new(1, 1, 1, k));
    for row in grad_out.data().chunks(k) {
        for (b, &g) in g_b.data_mut().iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok(LinearGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}

fn check(input: Dims, weights: Dims, bias: Dims) -> Result<(usize, usize, usize)> {
    let f = input.sample();
    if weights.n != 1 || weights.c != 1 || weights.h != f {
        return Err(Error::Config(format!(
            "linear layer expects {f} input features, weights are {weights}"
        )));
    }
    if bias.len() != weights.w {
        return Err(Error::Config(format!(
            "bias {bias} does not match {} outputs",
            weights.w
        )));
    }
    Ok((input.n, f, weights.w))
}
