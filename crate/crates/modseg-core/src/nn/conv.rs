//! Dense 3D convolution through im2col + GEMM.

use super::{matmul, Param, ParamFn};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4, Ix1, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// 3D convolution with cubic kernel, symmetric zero padding and isotropic
/// stride. Weights are stored GEMM-ready as `[out, in·k³]`.
#[derive(Debug, Clone)]
pub struct Conv3d<T: Scalar> {
    pub w: Param<T>,
    pub b: Param<T>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl<T: Scalar> Conv3d<T> {
    /// He-normal weight init, zero bias.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Array2::from_shape_fn((out_ch, fan_in), |_| T::c(normal.sample(rng)));
        Self {
            w: Param::new(w.into_dyn()),
            b: Param::new(ndarray::Array1::<T>::zeros(out_ch).into_dyn()),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// Identity-like init: pass-through of the first `min(in, out)` channels.
    /// Used for channel mixers that should start as the identity map.
    pub fn new_identity(in_ch: usize, out_ch: usize) -> Self {
        let mut w = Array2::<T>::zeros((out_ch, in_ch));
        for c in 0..in_ch.min(out_ch) {
            w[(c, c)] = T::one();
        }
        Self {
            w: Param::new(w.into_dyn()),
            b: Param::new(ndarray::Array1::<T>::zeros(out_ch).into_dyn()),
            in_ch,
            out_ch,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn out_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        let f = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(input.0), f(input.1), f(input.2))
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (cin, d, h, w) = x.dim();
        assert_eq!(cin, self.in_ch, "conv input channels");
        let (od, oh, ow) = self.out_shape((d, h, w));
        let volume = od * oh * ow;

        let cols = im2col(x, self.kernel, self.stride, self.pad, (od, oh, ow));
        let mut y = Array2::<T>::zeros((self.out_ch, volume));
        let wv = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        matmul(wv, cols.view(), y.view_mut(), true);

        let bv = self.b.value.view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, bias) in y.outer_iter_mut().zip(bv.iter()) {
            row.mapv_inplace(|v| v + *bias);
        }
        y.into_shape_with_order((self.out_ch, od, oh, ow)).unwrap()
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    /// `x` must be the tensor the forward pass consumed.
    pub fn backward(&mut self, x: &Array4<T>, gy: &Array4<T>) -> Array4<T> {
        let (cin, d, h, w) = x.dim();
        let (oc, od, oh, ow) = gy.dim();
        assert_eq!(oc, self.out_ch);
        let volume = od * oh * ow;
        let gy2 = gy.view().into_shape_with_order((oc, volume)).unwrap();

        // Bias gradient: row sums.
        {
            let mut gb = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for (c, row) in gy2.outer_iter().enumerate() {
                gb[c] += row.sum();
            }
        }

        // Weight gradient: gy · colsᵀ, contracted over output positions.
        let cols = im2col(x, self.kernel, self.stride, self.pad, (od, oh, ow));
        {
            let mut gw = self.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            if volume >= 8192 && rayon::current_num_threads() > 1 {
                let mid = volume / 2;
                let (gy0, gy1) = gy2.split_at(ndarray::Axis(1), mid);
                let (c0, c1) = cols.view().split_at(ndarray::Axis(1), mid);
                let shape = gw.dim();
                let (mut p0, p1) = rayon::join(
                    || {
                        let mut p = Array2::<T>::zeros(shape);
                        ndarray::linalg::general_mat_mul(T::one(), &gy0, &c0.t(), T::zero(), &mut p);
                        p
                    },
                    || {
                        let mut p = Array2::<T>::zeros(shape);
                        ndarray::linalg::general_mat_mul(T::one(), &gy1, &c1.t(), T::zero(), &mut p);
                        p
                    },
                );
                p0 += &p1;
                gw += &p0;
            } else {
                ndarray::linalg::general_mat_mul(T::one(), &gy2, &cols.t(), T::one(), &mut gw);
            }
        }
        drop(cols);

        // Input gradient: wᵀ · gy scattered back through col2im.
        let wv = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut gcols = Array2::<T>::zeros((self.in_ch * self.kernel.pow(3), volume));
        matmul(wv.t(), gy2.view(), gcols.view_mut(), true);
        col2im(
            &gcols,
            (cin, d, h, w),
            self.kernel,
            self.stride,
            self.pad,
            (od, oh, ow),
        )
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Lower a padded/strided volume into a `[in·k³, out_volume]` matrix.
fn im2col<T: Scalar>(
    x: &Array4<T>,
    k: usize,
    stride: usize,
    pad: usize,
    out: (usize, usize, usize),
) -> Array2<T> {
    let (cin, d, h, w) = x.dim();
    let (od, oh, ow) = out;
    let volume = od * oh * ow;
    let mut cols = Array2::<T>::zeros((cin * k * k * k, volume));
    let xs = x.as_slice().expect("contiguous");
    let cs = cols.as_slice_mut().expect("contiguous");

    for c in 0..cin {
        let xc = &xs[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let dst = &mut cs[row * volume..(row + 1) * volume];
                    // Valid output range along the innermost axis.
                    let ow_lo = if pad > kw { (pad - kw).div_ceil(stride) } else { 0 };
                    let ow_hi = ((w + pad).saturating_sub(kw + 1) / stride + 1).min(ow);
                    for odi in 0..od {
                        let id = (odi * stride + kd) as isize - pad as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src_base = (id as usize * h + ih as usize) * w;
                            let dst_base = (odi * oh + ohi) * ow;
                            if stride == 1 {
                                let iw0 = ow_lo + kw - pad;
                                let n = ow_hi - ow_lo;
                                dst[dst_base + ow_lo..dst_base + ow_lo + n]
                                    .copy_from_slice(&xc[src_base + iw0..src_base + iw0 + n]);
                            } else {
                                for owi in ow_lo..ow_hi {
                                    let iw = owi * stride + kw - pad;
                                    dst[dst_base + owi] = xc[src_base + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Transpose of [`im2col`]: scatter-add columns back onto the input grid.
fn col2im<T: Scalar>(
    cols: &Array2<T>,
    in_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    out: (usize, usize, usize),
) -> Array4<T> {
    let (cin, d, h, w) = in_shape;
    let (od, oh, ow) = out;
    let volume = od * oh * ow;
    let mut x = Array4::<T>::zeros(in_shape);
    let xs = x.as_slice_mut().expect("contiguous");
    let cs = cols.as_slice().expect("contiguous");

    for c in 0..cin {
        let xc = &mut xs[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let src = &cs[row * volume..(row + 1) * volume];
                    let ow_lo = if pad > kw { (pad - kw).div_ceil(stride) } else { 0 };
                    let ow_hi = ((w + pad).saturating_sub(kw + 1) / stride + 1).min(ow);
                    for odi in 0..od {
                        let id = (odi * stride + kd) as isize - pad as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src_base = (odi * oh + ohi) * ow;
                            let dst_base = (id as usize * h + ih as usize) * w;
                            for owi in ow_lo..ow_hi {
                                let iw = owi * stride + kw - pad;
                                xs_add(xc, dst_base + iw, src[src_base + owi]);
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn xs_add<T: Scalar>(xs: &mut [T], idx: usize, v: T) {
    xs[idx] += v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution, the oracle for the im2col path.
    fn conv_naive(
        x: &Array4<f64>,
        w: &Array2<f64>,
        b: &[f64],
        k: usize,
        stride: usize,
        pad: usize,
        out_ch: usize,
    ) -> Array4<f64> {
        let (cin, d, h, ww) = x.dim();
        let f = |n: usize| (n + 2 * pad - k) / stride + 1;
        let (od, oh, ow) = (f(d), f(h), f(ww));
        let mut y = Array4::<f64>::zeros((out_ch, od, oh, ow));
        for co in 0..out_ch {
            for odi in 0..od {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = (odi * stride + kd) as isize - pad as isize;
                                        let ih = (ohi * stride + kh) as isize - pad as isize;
                                        let iw = (owi * stride + kw) as isize - pad as isize;
                                        if id < 0
                                            || ih < 0
                                            || iw < 0
                                            || id >= d as isize
                                            || ih >= h as isize
                                            || iw >= ww as isize
                                        {
                                            continue;
                                        }
                                        let widx = ((ci * k + kd) * k + kh) * k + kw;
                                        acc += w[(co, widx)]
                                            * x[(ci, id as usize, ih as usize, iw as usize)];
                                    }
                                }
                            }
                        }
                        y[(co, odi, ohi, owi)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0)] {
            let conv = Conv3d::<f64>::new(3, 4, k, stride, pad, &mut rng);
            let x = Array4::from_shape_fn((3, 6, 5, 7), |_| rng.gen::<f64>() - 0.5);
            let got = conv.forward(&x);
            let wv = conv.w.value.view().into_dimensionality::<Ix2>().unwrap();
            let bv: Vec<f64> = conv.b.value.iter().copied().collect();
            let want = conv_naive(&x, &wv.to_owned(), &bv, k, stride, pad, 4);
            let max_err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err <= 1e-12, "k={k} s={stride} p={pad}: {max_err}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv3d::<f64>::new(2, 3, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((2, 4, 4, 4), |_| rng.gen::<f64>() - 0.5);
        let y = conv.forward(&x);
        // Loss = Σ y ⊙ r for a fixed random r, so gy = r.
        let r = Array4::from_shape_fn(y.dim(), |_| rng.gen::<f64>() - 0.5);
        let gx = conv.backward(&x, &r);

        let h = 1e-6;
        // Input gradient.
        for idx in [(0, 0, 0, 0), (1, 2, 3, 1), (0, 3, 1, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let up = (&conv.forward(&xp) * &r).sum();
            xp[idx] -= 2.0 * h;
            let dn = (&conv.forward(&xp) * &r).sum();
            let fd = (up - dn) / (2.0 * h);
            assert!((gx[idx] - fd).abs() <= 1e-6, "gx {:?}: {} vs {}", idx, gx[idx], fd);
        }
        // Weight and bias gradients.
        for widx in [(0usize, 0usize), (2, 17), (1, 33)] {
            let orig = conv.w.value[[widx.0, widx.1]];
            conv.w.value[[widx.0, widx.1]] = orig + h;
            let up = (&conv.forward(&x) * &r).sum();
            conv.w.value[[widx.0, widx.1]] = orig - h;
            let dn = (&conv.forward(&x) * &r).sum();
            conv.w.value[[widx.0, widx.1]] = orig;
            let fd = (up - dn) / (2.0 * h);
            let got = conv.w.grad[[widx.0, widx.1]];
            assert!((got - fd).abs() <= 1e-6, "gw {:?}: {} vs {}", widx, got, fd);
        }
        let orig = conv.b.value[[1]];
        conv.b.value[[1]] = orig + h;
        let up = (&conv.forward(&x) * &r).sum();
        conv.b.value[[1]] = orig - h;
        let dn = (&conv.forward(&x) * &r).sum();
        conv.b.value[[1]] = orig;
        let fd = (up - dn) / (2.0 * h);
        assert!((conv.b.grad[[1]] - fd).abs() <= 1e-6);
    }

    #[test]
    fn identity_init_passes_channels_through() {
        let conv = Conv3d::<f64>::new_identity(3, 3);
        let x = Array4::from_shape_fn((3, 2, 2, 2), |(c, d, h, w)| {
            (c * 8 + d * 4 + h * 2 + w) as f64
        });
        let y = conv.forward(&x);
        assert_eq!(x, y);
    }
}
