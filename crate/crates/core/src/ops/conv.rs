//! Stride-1 grouped 2D convolution without bias, lowered to im2col + GEMM.

use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::{Dims, Tensor4};

/// Convolution weights of shape `(f_out, f_in / groups, kh, kw)`.
///
/// There is no bias term.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<S> {
    pub weights: Tensor4<S>,
    pub groups: usize,
}

impl<S: Scalar> ConvKernel<S> {
    pub fn new(weights: Tensor4<S>, groups: usize) -> Result<Self> {
        if groups == 0 || weights.dims().n % groups != 0 {
            return Err(Error::Config(format!(
                "{} output channels not divisible into {groups} groups",
                weights.dims().n
            )));
        }
        Ok(ConvKernel { weights, groups })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims().c * self.groups
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        let d = self.weights.dims();
        (d.h, d.w)
    }

    /// Padding that keeps the spatial size unchanged, `((kh-1)/2, (kw-1)/2)`.
    pub fn same_padding(&self) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_hw();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "even kernel {kh}×{kw} has no same-padding"
            )));
        }
        Ok(((kh - 1) / 2, (kw - 1) / 2))
    }
}

/// Shape bookkeeping shared by forward and backward.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    input: Dims,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new<S: Scalar>(input: Dims, kernel: &ConvKernel<S>, padding: (usize, usize)) -> Result<Self> {
        let (kh, kw) = kernel.kernel_hw();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "even kernel {kh}×{kw} has no same-padding"
            )));
        }
        let groups = kernel.groups;
        if input.c != kernel.in_channels() {
            return Err(Error::Config(format!(
                "input has {} channels, kernel expects {} ({} groups × {})",
                input.c,
                kernel.in_channels(),
                groups,
                kernel.weights.dims().c
            )));
        }
        let (ph, pw) = padding;
        if input.h + 2 * ph < kh || input.w + 2 * pw < kw {
            return Err(Error::Config(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                input.h + 2 * ph,
                input.w + 2 * pw
            )));
        }
        Ok(Geometry {
            input,
            groups,
            cin_g: input.c / groups,
            cout_g: kernel.out_channels() / groups,
            kh,
            kw,
            ph,
            pw,
            oh: input.h + 2 * ph + 1 - kh,
            ow: input.w + 2 * pw + 1 - kw,
        })
    }

    fn patch(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    fn valid_span(&self, kx: usize) -> (usize, usize) {
        let shift = kx as isize - self.pw as isize;
        let lo = (-shift).clamp(0, self.ow as isize) as usize;
        let hi = (self.input.w as isize - shift).clamp(lo as isize, self.ow as isize) as usize;
        (lo, hi)
    }

    /// Unfolds the channels of one group of one sample into a
    /// `patch × (oh·ow)` matrix. Out-of-range taps read as zero.
    fn im2col<S: Scalar>(&self, channels: &[S], cols: &mut [S]) {
        let (h, w) = (self.input.h, self.input.w);
        let plane_out = self.out_plane();
        for ci in 0..self.cin_g {
            let src = &channels[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                    for oy in 0..self.oh {
                        let iy = oy as isize + ky as isize - self.ph as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(S::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let (lo, hi) = self.valid_span(kx);
                        let shift = kx as isize - self.pw as isize;
                        line[..lo].fill(S::zero());
                        line[hi..].fill(S::zero());
                        if lo < hi {
                            let start = (lo as isize + shift) as usize;
                            line[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters-adds a column matrix back
    /// onto the channels of one group.
    fn col2im<S: Scalar>(&self, cols: &[S], channels: &mut [S]) {
        let (h, w) = (self.input.h, self.input.w);
        let plane_out = self.out_plane();
        for ci in 0..self.cin_g {
            let dst = &mut channels[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane_out..(row + 1) * plane_out];
                    for oy in 0..self.oh {
                        let iy = oy as isize + ky as isize - self.ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        let (lo, hi) = self.valid_span(kx);
                        if lo < hi {
                            let start = (lo as isize + kx as isize - self.pw as isize) as usize;
                            for (d, &g) in dst_row[start..start + hi - lo].iter_mut().zip(&line[lo..hi]) {
                                *d = *d + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with zero padding `(ph, pw)`.
///
/// Output dims are `(N, f_out, H + 2ph - kh + 1, W + 2pw - kw + 1)`.
pub fn conv2d<S: Scalar>(
    input: &Tensor4<S>,
    kernel: &ConvKernel<S>,
    padding: (usize, usize),
) -> Result<Tensor4<S>> {
    let g = Geometry::new(input.dims(), kernel, padding)?;
    let in_dims = input.dims();
    let out_dims = Dims::new(in_dims.n, kernel.out_channels(), g.oh, g.ow);
    let mut out = Tensor4::zeros(out_dims);
    let patch = g.patch();
    let plane_in = in_dims.plane();
    let plane_out = g.out_plane();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); patch * plane_out]
    };
    let w = kernel.weights.data();
    for n in 0..in_dims.n {
        let sample = input.sample(n);
        let out_sample = out.sample_mut(n);
        for grp in 0..g.groups {
            let channels = &sample[grp * g.cin_g * plane_in..(grp + 1) * g.cin_g * plane_in];
            let rhs: &[S] = if g.is_pointwise() {
                channels
            } else {
                g.im2col(channels, &mut cols);
                &cols
            };
            let w_g = &w[grp * g.cout_g * patch..(grp + 1) * g.cout_g * patch];
            let dst = &mut out_sample[grp * g.cout_g * plane_out..(grp + 1) * g.cout_g * plane_out];
            gemm(
                g.cout_g,
                patch,
                plane_out,
                w_g,
                Layout::Normal,
                rhs,
                Layout::Normal,
                S::zero(),
                dst,
            );
        }
    }
    Ok(out)
}

/// Same-padded convolution; kernel sizes must be odd.
pub fn conv2d_same<S: Scalar>(input: &Tensor4<S>, kernel: &ConvKernel<S>) -> Result<Tensor4<S>> {
    conv2d(input, kernel, kernel.same_padding()?)
}

/// Gradients of [`conv2d`] with respect to its input and weights.
///
/// `grad_input` is skipped (returned as `None`) when `need_input` is false.
pub fn conv2d_backward<S: Scalar>(
    grad_out: &Tensor4<S>,
    input: &Tensor4<S>,
    kernel: &ConvKernel<S>,
    padding: (usize, usize),
    need_input: bool,
) -> Result<(Option<Tensor4<S>>, Tensor4<S>)> {
    let g = Geometry::new(input.dims(), kernel, padding)?;
    let in_dims = input.dims();
    let expected = Dims::new(in_dims.n, kernel.out_channels(), g.oh, g.ow);
    if grad_out.dims() != expected {
        return Err(Error::Internal(format!(
            "conv2d_backward: grad_out {} but forward output was {expected}",
            grad_out.dims()
        )));
    }
    let patch = g.patch();
    let plane_in = in_dims.plane();
    let plane_out = g.out_plane();
    let mut grad_w = Tensor4::zeros(kernel.weights.dims());
    let mut grad_in = need_input.then(|| Tensor4::zeros(in_dims));
    let mut cols = vec![S::zero(); patch * plane_out];
    let mut grad_cols = vec![S::zero(); patch * plane_out];
    let w = kernel.weights.data();
    for n in 0..in_dims.n {
        let sample = input.sample(n);
        let go_sample = grad_out.sample(n);
        for grp in 0..g.groups {
            let channels = &sample[grp * g.cin_g * plane_in..(grp + 1) * g.cin_g * plane_in];
            let go = &go_sample[grp * g.cout_g * plane_out..(grp + 1) * g.cout_g * plane_out];
            let rhs: &[S] = if g.is_pointwise() {
                channels
            } else {
                g.im2col(channels, &mut cols);
                &cols
            };
            // dW_g += dY_g · colsᵀ
            let gw = &mut grad_w.data_mut()[grp * g.cout_g * patch..(grp + 1) * g.cout_g * patch];
            gemm(
                g.cout_g,
                plane_out,
                patch,
                go,
                Layout::Normal,
                rhs,
                Layout::Transposed,
                S::one(),
                gw,
            );
            if let Some(gi) = grad_in.as_mut() {
                // dcols = W_gᵀ · dY_g
                let w_g = &w[grp * g.cout_g * patch..(grp + 1) * g.cout_g * patch];
                let gi_sample = gi.sample_mut(n);
                let dst = &mut gi_sample[grp * g.cin_g * plane_in..(grp + 1) * g.cin_g * plane_in];
                if g.is_pointwise() {
                    gemm(
                        patch,
                        g.cout_g,
                        plane_out,
                        w_g,
                        Layout::Transposed,
                        go,
                        Layout::Normal,
                        S::one(),
                        dst,
                    );
                } else {
                    gemm(
                        patch,
                        g.cout_g,
                        plane_out,
                        w_g,
                        Layout::Transposed,
                        go,
                        Layout::Normal,
                        S::zero(),
                        &mut grad_cols,
                    );
                    g.col2im(&grad_cols, dst);
                }
            }
        }
    }
    Ok((grad_in, grad_w))
}

/// Depthwise `a×b` convolution (groups = channels) followed by a pointwise
/// `1×1` convolution with a single group.
pub fn grouped_conv<S: Scalar>(
    input: &Tensor4<S>,
    depthwise: &ConvKernel<S>,
    pointwise: &ConvKernel<S>,
) -> Result<Tensor4<S>> {
    check_separable(input.dims().c, depthwise, pointwise)?;
    let mid = conv2d_same(input, depthwise)?;
    conv2d(&mid, pointwise, (0, 0))
}

pub(crate) fn check_separable<S: Scalar>(
    channels: usize,
    depthwise: &ConvKernel<S>,
    pointwise: &ConvKernel<S>,
) -> Result<()> {
    if depthwise.groups != channels || depthwise.out_channels() != channels {
        return Err(Error::Config(format!(
            "depthwise stage needs {channels} groups and outputs, got {} groups / {} outputs",
            depthwise.groups,
            depthwise.out_channels()
        )));
    }
    if pointwise.groups != 1 || pointwise.kernel_hw() != (1, 1) {
        return Err(Error::Config(
            "pointwise stage must be a 1×1 kernel with one group".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution; independent of the im2col path.
    fn reference(input: &Tensor4<f64>, kernel: &ConvKernel<f64>, ph: usize, pw: usize) -> Tensor4<f64> {
        let d = input.dims();
        let wd = kernel.weights.dims();
        let (cout_g, cin_g) = (wd.n / kernel.groups, wd.c);
        let oh = d.h + 2 * ph + 1 - wd.h;
        let ow = d.w + 2 * pw + 1 - wd.w;
        let mut out = Tensor4::zeros(Dims::new(d.n, wd.n, oh, ow));
        for n in 0..d.n {
            for o in 0..wd.n {
                let grp = o / cout_g;
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            for ky in 0..wd.h {
                                for kx in 0..wd.w {
                                    let iy = y as isize + ky as isize - ph as isize;
                                    let ix = x as isize + kx as isize - pw as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                                        acc += input.get(n, grp * cin_g + ci, iy as usize, ix as usize)
                                            * kernel.weights.get(o, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set(n, o, y, x, acc);
                    }
                }
            }
        }
        out
    }

    fn max_rel(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor4::<f32>::full(Dims::new(1, 1, 3, 3), 1.0);
        let k = ConvKernel::new(Tensor4::full(Dims::new(1, 1, 1, 1), 1.0), 1).unwrap();
        assert_eq!(conv2d(&x, &k, (0, 0)).unwrap(), x);
    }

    #[test]
    fn all_ones_counts_overlap() {
        let x = Tensor4::<f32>::full(Dims::new(1, 1, 3, 3), 1.0);
        let k = ConvKernel::new(Tensor4::full(Dims::new(1, 1, 3, 3), 1.0), 1).unwrap();
        let y = conv2d(&x, &k, (1, 1)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for groups in [1, 2, 4] {
            let x = Tensor4::<f64>::uniform(Dims::new(2, 4, 8, 8), 1.0, &mut rng);
            let w = Tensor4::uniform(Dims::new(8, 4 / groups, 3, 3), 1.0, &mut rng);
            let k = ConvKernel::new(w, groups).unwrap();
            let got = conv2d(&x, &k, (1, 1)).unwrap();
            assert!(max_rel(&got, &reference(&x, &k, 1, 1)) < 1e-6);
        }
        // non-square kernel
        let x = Tensor4::<f64>::uniform(Dims::new(1, 2, 6, 5), 1.0, &mut rng);
        let k = ConvKernel::new(Tensor4::uniform(Dims::new(3, 2, 3, 5), 1.0, &mut rng), 1).unwrap();
        let got = conv2d_same(&x, &k).unwrap();
        assert_eq!(got.dims(), Dims::new(1, 3, 6, 5));
        assert!(max_rel(&got, &reference(&x, &k, 1, 2)) < 1e-6);
    }

    #[test]
    fn rejects_bad_configs() {
        let x = Tensor4::<f32>::zeros(Dims::new(1, 3, 4, 4));
        let k = ConvKernel::new(Tensor4::zeros(Dims::new(4, 2, 3, 3)), 1).unwrap();
        assert!(matches!(conv2d_same(&x, &k), Err(Error::Config(_))));
        let even = ConvKernel::new(Tensor4::zeros(Dims::new(4, 3, 2, 2)), 1).unwrap();
        assert!(matches!(conv2d(&x, &even, (0, 0)), Err(Error::Config(_))));
        assert!(ConvKernel::new(Tensor4::<f32>::zeros(Dims::new(3, 1, 3, 3)), 2).is_err());
    }

    #[test]
    fn separable_identity() {
        let f = 3;
        let mut dw = Tensor4::<f64>::zeros(Dims::new(f, 1, 3, 3));
        for c in 0..f {
            dw.set(c, 0, 1, 1, 1.0);
        }
        let pw = Tensor4::from_fn(Dims::new(f, f, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let dw = ConvKernel::new(dw, f).unwrap();
        let pw = ConvKernel::new(pw, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::uniform(Dims::new(2, f, 5, 5), 1.0, &mut rng);
        assert_eq!(grouped_conv(&x, &dw, &pw).unwrap(), x);
        assert_eq!(dw.weights.len() + pw.weights.len(), f * 9 + f * f);
    }

    #[test]
    fn backward_of_sum_with_unit_pointwise_kernel() {
        let x = Tensor4::<f64>::full(Dims::new(1, 1, 3, 3), 2.0);
        let k = ConvKernel::new(Tensor4::full(Dims::new(1, 1, 1, 1), 1.0), 1).unwrap();
        let go = Tensor4::full(Dims::new(1, 1, 3, 3), 1.0);
        let (gi, gw) = conv2d_backward(&go, &x, &k, (0, 0), true).unwrap();
        assert!(gi.unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(gw.data(), &[18.0]);
    }
}
