//! 2×2 max pooling and global max pooling.
//!
//! Both record the flat input index of every selected maximum so the
//! backward pass can route gradients. Ties go to the first element in
//! row-major window order.

use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

/// Output of a pooling op together with its argmax routing table.
pub struct Pooled<S> {
    pub output: Tensor4<S>,
    /// For every output element, the flat index of the input element it
    /// was taken from.
    pub argmax: Vec<usize>,
}

/// Spatial size after one 2×2 pool: odd sizes are replicate-padded by one
/// row/column at the bottom/right first.
pub const fn pooled_size(len: usize) -> usize {
    len.div_ceil(2)
}

/// 2×2 stride-2 max pooling. Odd sizes are replicate-padded at the
/// bottom/right, which only ever duplicates an element already in the
/// window.
pub fn maxpool2x2<S: Scalar>(input: &Tensor4<S>) -> Pooled<S> {
    let d = input.dims();
    let (oh, ow) = (pooled_size(d.h), pooled_size(d.w));
    let out_dims = Dims::new(d.n, d.c, oh, ow);
    let mut output = Tensor4::zeros(out_dims);
    let mut argmax = vec![0usize; out_dims.len()];
    let data = input.data();
    let mut o = 0;
    for nc in 0..d.n * d.c {
        let base = nc * d.plane();
        for oy in 0..oh {
            let y0 = 2 * oy;
            let y1 = (2 * oy + 1).min(d.h - 1);
            for ox in 0..ow {
                let x0 = 2 * ox;
                let x1 = (2 * ox + 1).min(d.w - 1);
                let window = [
                    base + y0 * d.w + x0,
                    base + y0 * d.w + x1,
                    base + y1 * d.w + x0,
                    base + y1 * d.w + x1,
                ];
                let mut best = window[0];
                for &i in &window[1..] {
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                output.data_mut()[o] = data[best];
                argmax[o] = best;
                o += 1;
            }
        }
    }
    Pooled { output, argmax }
}

/// Per-channel maximum over all spatial positions; output `(N, C, 1, 1)`.
pub fn global_max_pool<S: Scalar>(input: &Tensor4<S>) -> Pooled<S> {
    let d = input.dims();
    let mut output = Tensor4::zeros(Dims::new(d.n, d.c, 1, 1));
    let mut argmax = vec![0usize; d.n * d.c];
    let data = input.data();
    for nc in 0..d.n * d.c {
        let base = nc * d.plane();
        let mut best = base;
        for i in base + 1..base + d.plane() {
            if data[i] > data[best] {
                best = i;
            }
        }
        output.data_mut()[nc] = data[best];
        argmax[nc] = best;
    }
    Pooled { output, argmax }
}

/// Routes `grad_out` back to the recorded argmax positions.
pub fn pool_backward<S: Scalar>(grad_out: &Tensor4<S>, argmax: &[usize], input_dims: Dims) -> Tensor4<S> {
    assert_eq!(grad_out.len(), argmax.len(), "pool backward: routing table mismatch");
    let mut grad_in = Tensor4::zeros(input_dims);
    let gi = grad_in.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        gi[i] = gi[i] + g;
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_max() {
        let x = Tensor4::<f64>::from_vec(Dims::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2x2(&x);
        assert_eq!(p.output.data(), &[4.0]);
        assert_eq!(p.argmax, vec![3]);
    }

    #[test]
    fn constant_halves() {
        let x = Tensor4::<f32>::full(Dims::new(2, 3, 4, 6), 1.5);
        let p = maxpool2x2(&x);
        assert_eq!(p.output.dims(), Dims::new(2, 3, 2, 3));
        assert!(p.output.data().iter().all(|&v| v == 1.5));
        // ties resolve to the top-left element
        assert_eq!(p.argmax[0], 0);
        assert_eq!(p.argmax[1], 2);
    }

    #[test]
    fn odd_sizes_replicate_pad() {
        let x = Tensor4::<f64>::from_fn(Dims::new(1, 1, 3, 3), |_, _, h, w| (h * 3 + w) as f64);
        let p = maxpool2x2(&x);
        assert_eq!(p.output.dims(), Dims::new(1, 1, 2, 2));
        assert_eq!(p.output.data(), &[4.0, 5.0, 7.0, 8.0]);
        let g = pool_backward(&Tensor4::full(p.output.dims(), 1.0), &p.argmax, x.dims());
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn global_max_per_channel() {
        let x = Tensor4::<f64>::from_vec(
            Dims::new(1, 2, 2, 2),
            vec![1.0, 5.0, 2.0, 0.0, -3.0, -1.0, -2.0, -4.0],
        )
        .unwrap();
        let p = global_max_pool(&x);
        assert_eq!(p.output.data(), &[5.0, -1.0]);
        assert_eq!(p.argmax, vec![1, 5]);
    }
}
