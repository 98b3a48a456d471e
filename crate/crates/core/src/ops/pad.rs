use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

/// Embeds a `C`-channel tensor into `target` channels; the extra channels
/// are zero.
pub fn channel_pad<S: Scalar>(input: &Tensor4<S>, target: usize) -> Result<Tensor4<S>> {
    let d = input.dims();
    if target < d.c {
        return Err(Error::Config(format!(
            "cannot pad {} channels down to {target}",
            d.c
        )));
    }
    let mut out = Tensor4::zeros(Dims::new(d.n, target, d.h, d.w));
    for n in 0..d.n {
        out.sample_mut(n)[..d.sample()].copy_from_slice(input.sample(n));
    }
    Ok(out)
}

/// Keeps the first `channels` channels of `grad_out`.
pub fn channel_pad_backward<S: Scalar>(grad_out: &Tensor4<S>, channels: usize) -> Tensor4<S> {
    let d = grad_out.dims();
    let in_dims = Dims::new(d.n, channels, d.h, d.w);
    let mut grad_in = Tensor4::zeros(in_dims);
    for n in 0..d.n {
        grad_in
            .sample_mut(n)
            .copy_from_slice(&grad_out.sample(n)[..in_dims.sample()]);
    }
    grad_in
}
