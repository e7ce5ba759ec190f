//! Minimal 3D CNN layer zoo with explicit forward/backward passes.
//!
//! Layers cache whatever their backward pass needs and accumulate parameter
//! gradients in place; the optimizer walks parameters through
//! [`visit_params`](Conv3d::visit_params)-style visitors in a fixed order.

mod block;
mod conv;
mod norm;

pub use block::{
    relu, relu_backward, softmax_channels, softmax_channels_backward, upsample2,
    upsample2_backward, ResBlock, ResBlockCache,
};
pub use conv::Conv3d;
pub use norm::{GroupNorm, GroupNormCache};

use crate::scalar::Scalar;
use ndarray::{Array4, ArrayD, ArrayView2, ArrayViewMut2};

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.len() == 0
    }
}

/// Visitor over named parameters; visitation order is fixed by construction
/// so optimizer state and checkpoints stay aligned.
pub type ParamFn<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;

/// `c += a · b` (or `c = a · b` when `overwrite`), splitting the output
/// columns across threads when large. The split point depends only on the
/// shape, so results are bit-reproducible.
pub(crate) fn matmul<T: Scalar>(
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    mut c: ArrayViewMut2<'_, T>,
    overwrite: bool,
) {
    use ndarray::linalg::general_mat_mul;
    let beta = if overwrite { T::zero() } else { T::one() };
    let cols = b.ncols();
    if cols >= 8192 && rayon::current_num_threads() > 1 {
        let mid = cols / 2;
        let (b0, b1) = b.split_at(ndarray::Axis(1), mid);
        let (c0, c1) = c.view_mut().split_at(ndarray::Axis(1), mid);
        rayon::join(
            || {
                let mut c0 = c0;
                general_mat_mul(T::one(), &a, &b0, beta, &mut c0);
            },
            || {
                let mut c1 = c1;
                general_mat_mul(T::one(), &a, &b1, beta, &mut c1);
            },
        );
    } else {
        general_mat_mul(T::one(), &a, &b, beta, &mut c);
    }
}

/// Elementwise mean of equally shaped blocks.
pub(crate) fn mean_of<T: Scalar>(blocks: &[&Array4<T>]) -> Array4<T> {
    assert!(!blocks.is_empty());
    let mut acc = blocks[0].clone();
    for b in &blocks[1..] {
        acc += *b;
    }
    acc.mapv_inplace(|v| v / T::c(blocks.len() as f64));
    acc
}
