//! Residual blocks, activations and resampling helpers.

use super::conv::Conv3d;
use super::norm::{GroupNorm, GroupNormCache};
use super::ParamFn;
use crate::scalar::Scalar;
use ndarray::Array4;
use rand::Rng;

pub fn relu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of ReLU given the forward *output* (y > 0 ⟺ x > 0).
pub fn relu_backward<T: Scalar>(y: &Array4<T>, gy: &Array4<T>) -> Array4<T> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, v| {
        if *v <= T::zero() {
            *g = T::zero();
        }
    });
    gx
}

/// Channelwise softmax at every voxel of a `[C, D, H, W]` block.
pub fn softmax_channels<T: Scalar>(z: &Array4<T>) -> Array4<T> {
    let (c, d, h, w) = z.dim();
    let volume = d * h * w;
    let zs = z.as_slice().expect("contiguous");
    let mut p = Array4::<T>::zeros((c, d, h, w));
    let ps = p.as_slice_mut().expect("contiguous");
    for v in 0..volume {
        let mut m = T::neg_infinity();
        for ch in 0..c {
            m = m.max(zs[ch * volume + v]);
        }
        let mut sum = T::zero();
        for ch in 0..c {
            let e = (zs[ch * volume + v] - m).exp();
            ps[ch * volume + v] = e;
            sum += e;
        }
        for ch in 0..c {
            ps[ch * volume + v] /= sum;
        }
    }
    p
}

/// Backward of [`softmax_channels`]: gz = p ⊙ (gp − Σ_c p·gp).
pub fn softmax_channels_backward<T: Scalar>(p: &Array4<T>, gp: &Array4<T>) -> Array4<T> {
    let (c, d, h, w) = p.dim();
    let volume = d * h * w;
    let ps = p.as_slice().expect("contiguous");
    let gs = gp.as_slice().expect("contiguous");
    let mut gz = Array4::<T>::zeros((c, d, h, w));
    let out = gz.as_slice_mut().expect("contiguous");
    for v in 0..volume {
        let mut dot = T::zero();
        for ch in 0..c {
            dot += ps[ch * volume + v] * gs[ch * volume + v];
        }
        for ch in 0..c {
            let i = ch * volume + v;
            out[i] = ps[i] * (gs[i] - dot);
        }
    }
    gz
}

/// Nearest-neighbour ×2 upsampling along all three spatial axes.
pub fn upsample2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (c, d, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((c, d * 2, h * 2, w * 2));
    for ((ci, di, hi, wi), &v) in x.indexed_iter() {
        for dd in 0..2 {
            for dh in 0..2 {
                for dw in 0..2 {
                    y[(ci, di * 2 + dd, hi * 2 + dh, wi * 2 + dw)] = v;
                }
            }
        }
    }
    y
}

/// Backward of [`upsample2`]: each source voxel collects its 8 children.
pub fn upsample2_backward<T: Scalar>(gy: &Array4<T>) -> Array4<T> {
    let (c, d2, h2, w2) = gy.dim();
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    let mut gx = Array4::<T>::zeros((c, d, h, w));
    for ((ci, di, hi, wi), &v) in gy.indexed_iter() {
        gx[(ci, di / 2, hi / 2, wi / 2)] += v;
    }
    gx
}

/// Two 3×3×3 convolutions with group norm and ReLU, plus a shortcut that is
/// the identity when channel counts match and a 1×1×1 projection otherwise:
/// y = relu(gn2(conv2(relu(gn1(conv1(x))))) + shortcut(x)).
#[derive(Debug, Clone)]
pub struct ResBlock<T: Scalar> {
    conv1: Conv3d<T>,
    gn1: GroupNorm<T>,
    conv2: Conv3d<T>,
    gn2: GroupNorm<T>,
    shortcut: Option<Conv3d<T>>,
}

#[derive(Debug)]
pub struct ResBlockCache<T: Scalar> {
    x: Array4<T>,
    gn1: GroupNormCache<T>,
    r1: Array4<T>,
    gn2: GroupNormCache<T>,
    y: Array4<T>,
}

impl<T: Scalar> ResBlockCache<T> {
    /// The block's forward output.
    pub fn output(&self) -> &Array4<T> {
        &self.y
    }

    /// The input the block consumed.
    pub fn input(&self) -> &Array4<T> {
        &self.x
    }
}

impl<T: Scalar> ResBlock<T> {
    pub fn new(in_ch: usize, out_ch: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv3d::new(in_ch, out_ch, 3, 1, 1, rng),
            gn1: GroupNorm::new(out_ch, groups),
            conv2: Conv3d::new(out_ch, out_ch, 3, 1, 1, rng),
            gn2: GroupNorm::new(out_ch, groups),
            shortcut: (in_ch != out_ch).then(|| Conv3d::new(in_ch, out_ch, 1, 1, 0, rng)),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ResBlockCache<T>) {
        let a1 = self.conv1.forward(x);
        let (n1, gn1c) = self.gn1.forward(&a1);
        let r1 = relu(&n1);
        let a2 = self.conv2.forward(&r1);
        let (mut n2, gn2c) = self.gn2.forward(&a2);
        drop(a2);
        match &self.shortcut {
            Some(proj) => n2 += &proj.forward(x),
            None => n2 += x,
        }
        let y = relu(&n2);
        let cache = ResBlockCache {
            x: x.clone(),
            gn1: gn1c,
            r1,
            gn2: gn2c,
            y: y.clone(),
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &ResBlockCache<T>, gy: &Array4<T>) -> Array4<T> {
        let gsum = relu_backward(&cache.y, gy);
        let ga2 = self.gn2.backward(&cache.gn2, &gsum);
        let gr1 = self.conv2.backward(&cache.r1, &ga2);
        let gn1_out = relu_backward(&cache.r1, &gr1);
        let ga1 = self.gn1.backward(&cache.gn1, &gn1_out);
        let mut gx = self.conv1.backward(&cache.x, &ga1);
        match &mut self.shortcut {
            Some(proj) => gx += &proj.backward(&cache.x, &gsum),
            None => gx += &gsum,
        }
        gx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.gn1.visit_params(&format!("{prefix}.gn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.gn2.visit_params(&format!("{prefix}.gn2"), f);
        if let Some(proj) = &mut self.shortcut {
            proj.visit_params(&format!("{prefix}.shortcut"), f);
        }
    }
}
