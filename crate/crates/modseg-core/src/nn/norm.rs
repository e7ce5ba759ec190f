//! Group normalization over `[C, D, H, W]` blocks.

use super::{Param, ParamFn};
use crate::scalar::Scalar;
use ndarray::{Array4, Ix1};

#[derive(Debug, Clone)]
pub struct GroupNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    channels: usize,
    groups: usize,
    eps: T,
}

#[derive(Debug)]
pub struct GroupNormCache<T: Scalar> {
    xhat: Array4<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(
            channels % groups == 0,
            "channels {channels} not divisible by groups {groups}"
        );
        Self {
            gamma: Param::new(ndarray::Array1::from_elem(channels, T::one()).into_dyn()),
            beta: Param::new(ndarray::Array1::<T>::zeros(channels).into_dyn()),
            channels,
            groups,
            eps: T::c(1e-5),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, GroupNormCache<T>) {
        let (c, d, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let spatial = d * h * w;
        let per_group = c / self.groups;
        let n = T::c((per_group * spatial) as f64);

        let xs = x.as_slice().expect("contiguous");
        let mut xhat = Array4::<T>::zeros((c, d, h, w));
        let xh = xhat.as_slice_mut().expect("contiguous");
        let mut inv_std = vec![T::zero(); self.groups];

        for g in 0..self.groups {
            let lo = g * per_group * spatial;
            let hi = lo + per_group * spatial;
            let mut mean = T::zero();
            for v in &xs[lo..hi] {
                mean += *v;
            }
            mean /= n;
            let mut var = T::zero();
            for v in &xs[lo..hi] {
                let e = *v - mean;
                var += e * e;
            }
            var /= n;
            let inv = (var + self.eps).sqrt().recip();
            inv_std[g] = inv;
            for (dst, src) in xh[lo..hi].iter_mut().zip(&xs[lo..hi]) {
                *dst = (*src - mean) * inv;
            }
        }

        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xhat.clone();
        let ys = y.as_slice_mut().expect("contiguous");
        for ch in 0..c {
            let (gm, bt) = (gamma[ch], beta[ch]);
            for v in &mut ys[ch * spatial..(ch + 1) * spatial] {
                *v = *v * gm + bt;
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache<T>, gy: &Array4<T>) -> Array4<T> {
        let (c, d, h, w) = gy.dim();
        let spatial = d * h * w;
        let per_group = c / self.groups;
        let n = T::c((per_group * spatial) as f64);

        let gys = gy.as_slice().expect("contiguous");
        let xh = cache.xhat.as_slice().expect("contiguous");
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();

        // Parameter gradients.
        {
            let mut ggamma = self
                .gamma
                .grad
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            let mut gbeta = self
                .beta
                .grad
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            for ch in 0..c {
                let mut sg = T::zero();
                let mut sb = T::zero();
                for i in ch * spatial..(ch + 1) * spatial {
                    sg += gys[i] * xh[i];
                    sb += gys[i];
                }
                ggamma[ch] += sg;
                gbeta[ch] += sb;
            }
        }

        // Input gradient: per group,
        // gx = inv_std · (gxhat − mean(gxhat) − xhat · mean(gxhat ⊙ xhat)).
        let mut gx = Array4::<T>::zeros((c, d, h, w));
        let gxs = gx.as_slice_mut().expect("contiguous");
        for g in 0..self.groups {
            let lo = g * per_group * spatial;
            let hi = lo + per_group * spatial;
            let mut sum_gxhat = T::zero();
            let mut sum_gxhat_xhat = T::zero();
            for ch in g * per_group..(g + 1) * per_group {
                let gm = gamma[ch];
                for i in ch * spatial..(ch + 1) * spatial {
                    let gxh = gys[i] * gm;
                    sum_gxhat += gxh;
                    sum_gxhat_xhat += gxh * xh[i];
                }
            }
            let m1 = sum_gxhat / n;
            let m2 = sum_gxhat_xhat / n;
            let inv = cache.inv_std[g];
            for ch in g * per_group..(g + 1) * per_group {
                let gm = gamma[ch];
                for i in ch * spatial..(ch + 1) * spatial {
                    let gxh = gys[i] * gm;
                    gxs[i] = inv * (gxh - m1 - xh[i] * m2);
                }
            }
            let _ = (lo, hi);
        }
        gx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}
