//! Differentiable training objectives.
//!
//! Three terms, combined by [`total_loss`] as
//! `dice + λ1·feature_transfer + λ2·holder`:
//!
//! * [`dice_loss`] — soft multi-class Dice between a probability field and an
//!   integer label grid (squared-denominator form).
//! * [`holder_seg_loss`] — mean per-voxel Hölder divergence between the
//!   prediction and the label's one-hot field.
//! * [`mi_transfer_loss`] — negative Gaussian log-likelihood of full-modality
//!   features under a variational conditional with heteroscedastic mean
//!   μ(d_sub) and homoscedastic per-channel variance σ_c², which lower-bounds
//!   the mutual information between the two feature paths. The additive
//!   ½·log(2π) constant is dropped (it has zero gradient).

use crate::divergence::{DivergenceKind, HolderExponent};
use crate::error::{Error, Result};
use crate::field::{batched_divergence, batched_divergence_grad, LabelField, ProbabilityField};
use crate::nn::{Conv3d, Param, ParamFn};
use crate::scalar::Scalar;
use ndarray::{Array4, Ix1};
use serde::{Deserialize, Serialize};

const DICE_SMOOTH: f64 = 1e-6;

/// Channel × depth × height × width feature block from one network level.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeature<T: Scalar> {
    values: Array4<T>,
}

impl<T: Scalar> LatentFeature<T> {
    pub fn new(values: Array4<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(
                "latent feature contains non-finite entries".into(),
            ));
        }
        Ok(Self { values })
    }

    pub(crate) fn from_values_unchecked(values: Array4<T>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array4<T> {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }
}

/// Weights of the feature-transfer and Hölder terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1.is_finite() && lambda2.is_finite()) || lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got λ1={lambda1} λ2={lambda2}"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }
}

impl Default for LossWeights {
    /// The transfer term sums over every feature element, so its raw value is
    /// orders of magnitude above the Dice term; the default weight brings the
    /// contributions to the same scale on desk-size feature blocks.
    fn default() -> Self {
        Self {
            lambda1: 1e-4,
            lambda2: 1.0,
        }
    }
}

/// Soft multi-class Dice loss in [0, 1]:
/// 1 − (1/J) Σ_j (2 Σ_i Ŷ_ij Y_ij + s) / (Σ_i Ŷ_ij² + Σ_i Y_ij² + s).
///
/// The smoothing term `s = 1e-6` makes the empty-class 0/0 case evaluate to a
/// perfect match and keeps the loss differentiable everywhere.
pub fn dice_loss<T: Scalar>(pred: &ProbabilityField<T>, label: &LabelField) -> Result<T> {
    Ok(dice_loss_with_grad(pred, label, false)?.0)
}

/// Dice loss together with its gradient with respect to `pred`.
pub fn dice_loss_grad<T: Scalar>(
    pred: &ProbabilityField<T>,
    label: &LabelField,
) -> Result<(T, Array4<T>)> {
    let (loss, grad) = dice_loss_with_grad(pred, label, true)?;
    Ok((loss, grad.expect("grad requested")))
}

fn dice_loss_with_grad<T: Scalar>(
    pred: &ProbabilityField<T>,
    label: &LabelField,
    want_grad: bool,
) -> Result<(T, Option<Array4<T>>)> {
    let j = pred.n_classes();
    if pred.grid_shape() != label.grid_shape() {
        return Err(Error::Dimension(format!(
            "prediction grid {:?} vs label grid {:?}",
            pred.grid_shape(),
            label.grid_shape()
        )));
    }
    label.check_classes(j)?;

    let (d, h, w) = pred.grid_shape();
    let volume = d * h * w;
    let p = pred.values().as_slice().expect("contiguous");
    let classes = label.classes().as_slice().expect("contiguous");
    let smooth = T::c(DICE_SMOOTH);

    // Per class: intersection Σ Ŷ·Y and denominator Σ Ŷ² + Σ Y².
    let mut inter = vec![T::zero(); j];
    let mut denom = vec![T::zero(); j];
    for c in 0..j {
        let pc = &p[c * volume..(c + 1) * volume];
        let mut i_acc = T::zero();
        let mut sq_acc = T::zero();
        let mut count = 0usize;
        for (v, x) in pc.iter().enumerate() {
            sq_acc += *x * *x;
            if classes[v] as usize == c {
                i_acc += *x;
                count += 1;
            }
        }
        inter[c] = i_acc;
        denom[c] = sq_acc + T::c(count as f64);
    }

    let two = T::c(2.0);
    let inv_j = T::one() / T::c(j as f64);
    let mut loss = T::one();
    for c in 0..j {
        loss -= inv_j * (two * inter[c] + smooth) / (denom[c] + smooth);
    }

    let grad = if want_grad {
        let mut g = Array4::<T>::zeros((j, d, h, w));
        let gs = g.as_slice_mut().expect("contiguous");
        for c in 0..j {
            let den = denom[c] + smooth;
            let num = two * inter[c] + smooth;
            let pc = &p[c * volume..(c + 1) * volume];
            let gc = &mut gs[c * volume..(c + 1) * volume];
            for (v, x) in pc.iter().enumerate() {
                let y = if classes[v] as usize == c { T::one() } else { T::zero() };
                // d/dŶ of −(1/J)(2I+s)/(D+s): quotient rule.
                gc[v] = -inv_j * (two * y * den - num * two * *x) / (den * den);
            }
        }
        Some(g)
    } else {
        None
    };
    Ok((loss, grad))
}

/// Mean per-voxel Hölder divergence between the prediction and the label's
/// one-hot probability field (ε-floored inside the divergence).
pub fn holder_seg_loss<T: Scalar>(
    pred: &ProbabilityField<T>,
    label: &LabelField,
    exp: &HolderExponent,
) -> Result<T> {
    let target = ProbabilityField::from_label(label, pred.n_classes())?;
    batched_divergence(pred, &target, &DivergenceKind::Holder(*exp))
}

/// Hölder segmentation loss together with its gradient w.r.t. `pred`.
pub fn holder_seg_loss_grad<T: Scalar>(
    pred: &ProbabilityField<T>,
    label: &LabelField,
    exp: &HolderExponent,
) -> Result<(T, Array4<T>)> {
    let target = ProbabilityField::from_label(label, pred.n_classes())?;
    let kind = DivergenceKind::Holder(*exp);
    let loss = batched_divergence(pred, &target, &kind)?;
    let grad = batched_divergence_grad(pred, &target, &kind)?;
    Ok((loss, grad))
}

/// Variational conditional q(d_full | d_sub) per level: a 1×1×1 channel-mixing
/// mean regressor μ(·), a per-channel log-σ vector, and non-decreasing layer
/// weights γ_k.
#[derive(Debug, Clone)]
pub struct MIHead<T: Scalar> {
    mean_regressors: Vec<Conv3d<T>>,
    log_sigma: Vec<Param<T>>,
    layer_weights: Vec<f64>,
}

/// Gradients of the transfer loss with respect to the per-level subset
/// features (parameter gradients accumulate inside the head itself).
pub struct MiBackward<T: Scalar> {
    pub grad_sub: Vec<Array4<T>>,
}

impl<T: Scalar> MIHead<T> {
    /// One regressor per level; `channels[k]` is the feature width at level k.
    /// μ starts as the identity map and σ_c = 1, so the loss begins as a
    /// plain scaled squared error. Layer weights follow γ_k = k/K.
    pub fn new(channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("transfer head needs at least one level".into()));
        }
        let k_total = channels.len() as f64;
        let layer_weights = (1..=channels.len()).map(|k| k as f64 / k_total).collect();
        Self::with_layer_weights(channels, layer_weights)
    }

    pub fn with_layer_weights(channels: &[usize], layer_weights: Vec<f64>) -> Result<Self> {
        if layer_weights.len() != channels.len() {
            return Err(Error::Config(format!(
                "{} layer weights for {} levels",
                layer_weights.len(),
                channels.len()
            )));
        }
        if layer_weights.windows(2).any(|w| w[1] < w[0]) || layer_weights.iter().any(|g| *g <= 0.0)
        {
            return Err(Error::Config(
                "layer weights must be positive and non-decreasing".into(),
            ));
        }
        Ok(Self {
            mean_regressors: channels
                .iter()
                .map(|&c| Conv3d::new_identity(c, c))
                .collect(),
            log_sigma: channels
                .iter()
                .map(|&c| Param::new(ndarray::Array1::<T>::zeros(c).into_dyn()))
                .collect(),
            layer_weights,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.mean_regressors.len()
    }

    pub fn layer_weights(&self) -> &[f64] {
        &self.layer_weights
    }

    /// σ_c per level (positive by construction).
    pub fn sigmas(&self, level: usize) -> Vec<T> {
        self.log_sigma[level]
            .value
            .iter()
            .map(|s| s.exp())
            .collect()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        for (k, reg) in self.mean_regressors.iter_mut().enumerate() {
            reg.visit_params(&format!("{prefix}.mu{k}"), f);
        }
        for (k, ls) in self.log_sigma.iter_mut().enumerate() {
            f(&format!("{prefix}.log_sigma{k}"), ls);
        }
    }

    fn check_levels(&self, full: &[LatentFeature<T>], sub: &[LatentFeature<T>]) -> Result<()> {
        if full.len() != self.n_levels() || sub.len() != self.n_levels() {
            return Err(Error::Config(format!(
                "feature lists of length {}/{} for a {}-level head",
                full.len(),
                sub.len(),
                self.n_levels()
            )));
        }
        for (k, (f, s)) in full.iter().zip(sub).enumerate() {
            if f.values().dim() != s.values().dim() {
                return Err(Error::Dimension(format!(
                    "level {k}: full feature {:?} vs subset feature {:?}",
                    f.values().dim(),
                    s.values().dim()
                )));
            }
            if f.channels() != self.mean_regressors[k].in_channels() {
                return Err(Error::Dimension(format!(
                    "level {k}: {} channels for a {}-channel regressor",
                    f.channels(),
                    self.mean_regressors[k].in_channels()
                )));
            }
        }
        Ok(())
    }

    /// Σ_k γ_k Σ_{c,d,h,w} [ log σ_c + (full − μ(sub))² / (2σ_c²) ].
    pub fn loss(&self, full: &[LatentFeature<T>], sub: &[LatentFeature<T>]) -> Result<T> {
        self.check_levels(full, sub)?;
        let mut total = T::zero();
        for k in 0..self.n_levels() {
            let mu = self.mean_regressors[k].forward(sub[k].values());
            let sigmas = self.sigmas(k);
            let log_sigma = &self.log_sigma[k].value;
            let (_, d, h, w) = mu.dim();
            let spatial = T::c((d * h * w) as f64);
            let gamma = T::c(self.layer_weights[k]);

            let mut level = T::zero();
            for (c, sigma) in sigmas.iter().enumerate() {
                let inv_two_var = (T::c(2.0) * *sigma * *sigma).recip();
                let full_c = full[k].values().index_axis(ndarray::Axis(0), c);
                let mu_c = mu.index_axis(ndarray::Axis(0), c);
                let mut acc = T::zero();
                for (fv, mv) in full_c.iter().zip(mu_c.iter()) {
                    let r = *fv - *mv;
                    acc += r * r;
                }
                level += log_sigma[[c]] * spatial + acc * inv_two_var;
            }
            total += gamma * level;
        }
        Ok(total)
    }

    /// Loss plus gradients. Parameter gradients (μ's weights/bias, log σ) are
    /// scaled by `scale` and accumulated in place; the returned `grad_sub`
    /// carries ∂(scale·loss)/∂d_sub per level. Full-modality features are
    /// treated as the (constant) transfer target.
    pub fn loss_and_backward(
        &mut self,
        full: &[LatentFeature<T>],
        sub: &[LatentFeature<T>],
        scale: T,
    ) -> Result<(T, MiBackward<T>)> {
        self.check_levels(full, sub)?;
        let mut total = T::zero();
        let mut grad_sub = Vec::with_capacity(self.n_levels());
        for k in 0..self.n_levels() {
            let mu = self.mean_regressors[k].forward(sub[k].values());
            let sigmas = self.sigmas(k);
            let (cch, d, h, w) = mu.dim();
            let spatial_n = d * h * w;
            let spatial = T::c(spatial_n as f64);
            let gamma = T::c(self.layer_weights[k]);

            let mut level = T::zero();
            let mut gmu = Array4::<T>::zeros((cch, d, h, w));
            {
                let Param {
                    value: log_sigma,
                    grad: log_sigma_grad,
                } = &mut self.log_sigma[k];
                let mut gls = log_sigma_grad
                    .view_mut()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                for c in 0..cch {
                    let sigma = sigmas[c];
                    let inv_var = (sigma * sigma).recip();
                    let inv_two_var = T::c(0.5) * inv_var;
                    let full_c = full[k].values().index_axis(ndarray::Axis(0), c);
                    let mu_c = mu.index_axis(ndarray::Axis(0), c);
                    let mut gmu_c = gmu.index_axis_mut(ndarray::Axis(0), c);
                    let mut sq_acc = T::zero();
                    ndarray::Zip::from(&full_c)
                        .and(&mu_c)
                        .and(&mut gmu_c)
                        .for_each(|fv, mv, g| {
                            let r = *fv - *mv;
                            sq_acc += r * r;
                            // ∂/∂μ of r²/(2σ²) = −r/σ².
                            *g = -(gamma * scale) * r * inv_var;
                        });
                    level += log_sigma[[c]] * spatial + sq_acc * inv_two_var;
                    // ∂/∂s of [spatial·s + (Σr²)/2·e^{−2s}] = spatial − Σr²/σ².
                    gls[c] += gamma * scale * (spatial - sq_acc * inv_var);
                }
            }
            total += gamma * level;
            grad_sub.push(self.mean_regressors[k].backward(sub[k].values(), &gmu));
        }
        Ok((total, MiBackward { grad_sub }))
    }
}

/// Variational feature-transfer loss (free-function form of [`MIHead::loss`]).
pub fn mi_transfer_loss<T: Scalar>(
    full_feats: &[LatentFeature<T>],
    sub_feats: &[LatentFeature<T>],
    head: &MIHead<T>,
) -> Result<T> {
    head.loss(full_feats, sub_feats)
}

/// Weighted total objective: dice + λ1·transfer + λ2·holder.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    pred: &ProbabilityField<T>,
    label: &LabelField,
    full_feats: &[LatentFeature<T>],
    sub_feats: &[LatentFeature<T>],
    head: &MIHead<T>,
    weights: &LossWeights,
    exp: &HolderExponent,
) -> Result<T> {
    let dice = dice_loss(pred, label)?;
    let mi = if weights.lambda1 > 0.0 {
        mi_transfer_loss(full_feats, sub_feats, head)?
    } else {
        T::zero()
    };
    let hd = if weights.lambda2 > 0.0 {
        holder_seg_loss(pred, label, exp)?
    } else {
        T::zero()
    };
    Ok(dice + T::c(weights.lambda1) * mi + T::c(weights.lambda2) * hd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn label_half(shape: (usize, usize, usize)) -> LabelField {
        // First half of the voxels class 0, second half class 1.
        let volume = shape.0 * shape.1 * shape.2;
        let mut classes = Array3::zeros(shape);
        for (i, c) in classes.iter_mut().enumerate() {
            *c = if i < volume / 2 { 0 } else { 1 };
        }
        LabelField::from_classes(classes)
    }

    #[test]
    fn dice_perfect_prediction_is_zero() {
        let label = label_half((2, 2, 1));
        let pred = ProbabilityField::<f64>::from_label(&label, 2).unwrap();
        let loss = dice_loss(&pred, &label).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn dice_fully_disjoint_is_one() {
        let label = label_half((2, 2, 1));
        // Predict the opposite class everywhere.
        let mut flipped = label.classes().clone();
        flipped.mapv_inplace(|c| 1 - c);
        let pred =
            ProbabilityField::<f64>::from_label(&LabelField::from_classes(flipped), 2).unwrap();
        let loss = dice_loss(&pred, &label).unwrap();
        assert!((loss - 1.0).abs() <= 1e-5, "got {loss}");
    }

    #[test]
    fn dice_uniform_prediction_hand_value() {
        // J=2, 4 voxels, pred 0.5 everywhere, label half/half → 1/3.
        let label = label_half((4, 1, 1));
        let pred = ProbabilityField::<f64>::uniform(2, (4, 1, 1));
        let loss = dice_loss(&pred, &label).unwrap();
        assert!((loss - 1.0 / 3.0).abs() <= 1e-6, "got {loss}");
    }

    #[test]
    fn dice_range_and_class_mismatch() {
        let label = label_half((2, 2, 2));
        let pred = ProbabilityField::<f64>::uniform(2, (2, 2, 4));
        assert!(matches!(
            dice_loss(&pred, &label),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn holder_seg_single_voxel_matches_scalar_example() {
        // pred=[0.8,0.2], label one-hot class 0, α=2 — same value as the
        // scalar divergence example by symmetry of α=2.
        let mut values = Array4::<f64>::zeros((2, 1, 1, 1));
        values[(0, 0, 0, 0)] = 0.8;
        values[(1, 0, 0, 0)] = 0.2;
        let pred = ProbabilityField::new(values).unwrap();
        let label = LabelField::from_classes(Array3::zeros((1, 1, 1)));
        let exp = HolderExponent::new(2.0).unwrap();
        let loss = holder_seg_loss(&pred, &label, &exp).unwrap();
        assert!((loss - 0.030312310907967421).abs() <= 1e-9, "got {loss}");
    }

    #[test]
    fn holder_seg_invariant_under_grid_doubling() {
        let mut values = Array4::<f64>::zeros((2, 1, 1, 1));
        values[(0, 0, 0, 0)] = 0.7;
        values[(1, 0, 0, 0)] = 0.3;
        let pred1 = ProbabilityField::new(values).unwrap();
        let label1 = LabelField::from_classes(Array3::zeros((1, 1, 1)));

        let mut values2 = Array4::zeros((2, 2, 1, 1));
        for d in 0..2 {
            values2[(0, d, 0, 0)] = 0.7;
            values2[(1, d, 0, 0)] = 0.3;
        }
        let pred2 = ProbabilityField::new(values2).unwrap();
        let label2 = LabelField::from_classes(Array3::zeros((2, 1, 1)));

        let exp = HolderExponent::new(1.1).unwrap();
        let a = holder_seg_loss(&pred1, &label1, &exp).unwrap();
        let b = holder_seg_loss(&pred2, &label2, &exp).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn permutation_equivariance_of_dice_and_holder() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let j = 3;
        let shape = (3, 2, 2);
        let mut values = Array4::zeros((j, shape.0, shape.1, shape.2));
        let mut classes = Array3::zeros(shape);
        for d in 0..shape.0 {
            for h in 0..shape.1 {
                for w in 0..shape.2 {
                    let mut v: Vec<f64> = (0..j).map(|_| rng.gen::<f64>() + 0.01).collect();
                    let s: f64 = v.iter().sum();
                    v.iter_mut().for_each(|x| *x /= s);
                    for c in 0..j {
                        values[(c, d, h, w)] = v[c];
                    }
                    classes[(d, h, w)] = rng.gen_range(0..j as u8);
                }
            }
        }
        let pred = ProbabilityField::new(values.clone()).unwrap();
        let label = LabelField::from_classes(classes.clone());

        // Relabel classes by the cycle 0→2, 1→0, 2→1.
        let perm = [2u8, 0, 1];
        let mut pvalues = Array4::zeros((j, shape.0, shape.1, shape.2));
        for c in 0..j {
            pvalues
                .index_axis_mut(ndarray::Axis(0), perm[c] as usize)
                .assign(&values.index_axis(ndarray::Axis(0), c));
        }
        let pclasses = classes.mapv(|c| perm[c as usize]);
        let ppred = ProbabilityField::new(pvalues).unwrap();
        let plabel = LabelField::from_classes(pclasses);

        let exp = HolderExponent::new(1.1).unwrap();
        let d0 = dice_loss(&pred, &label).unwrap();
        let d1 = dice_loss(&ppred, &plabel).unwrap();
        assert!((d0 - d1).abs() <= 1e-12);
        let h0 = holder_seg_loss(&pred, &label, &exp).unwrap();
        let h1 = holder_seg_loss(&ppred, &plabel, &exp).unwrap();
        assert!((h0 - h1).abs() <= 1e-12);
    }

    fn feat(values: Array4<f64>) -> LatentFeature<f64> {
        LatentFeature::new(values).unwrap()
    }

    #[test]
    fn transfer_loss_zero_at_perfect_match() {
        // Identity μ, σ=1: full == sub gives log 1 + 0 = 0.
        let head = MIHead::<f64>::new(&[2]).unwrap();
        let x = Array4::from_elem((2, 2, 2, 2), 0.7);
        let loss = head.loss(&[feat(x.clone())], &[feat(x)]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn transfer_loss_single_element_value() {
        // One element, full=1.0, μ(sub)=0.5, σ=1, γ=1 → 0.125.
        let head = MIHead::<f64>::new(&[1]).unwrap();
        let full = feat(Array4::from_elem((1, 1, 1, 1), 1.0));
        let sub = feat(Array4::from_elem((1, 1, 1, 1), 0.5));
        let loss = head.loss(&[full], &[sub]).unwrap();
        assert!((loss - 0.125).abs() <= 1e-15, "got {loss}");
    }

    #[test]
    fn transfer_loss_residual_scaling_is_quadratic() {
        let head = MIHead::<f64>::new(&[1]).unwrap();
        let sub = feat(Array4::from_elem((1, 1, 1, 1), 0.0));
        let l1 = head
            .loss(&[feat(Array4::from_elem((1, 1, 1, 1), 0.5))], &[sub.clone()])
            .unwrap();
        let l2 = head
            .loss(&[feat(Array4::from_elem((1, 1, 1, 1), 1.0))], &[sub])
            .unwrap();
        assert!((l2 - 4.0 * l1).abs() <= 1e-12);
    }

    #[test]
    fn transfer_loss_monotone_in_deepest_weight() {
        let channels = [2usize, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let full: Vec<_> = (0..2)
            .map(|_| feat(Array4::from_shape_fn((2, 2, 2, 2), |_| rng.gen::<f64>())))
            .collect();
        let sub: Vec<_> = (0..2)
            .map(|_| feat(Array4::from_shape_fn((2, 2, 2, 2), |_| rng.gen::<f64>())))
            .collect();
        let base = MIHead::<f64>::with_layer_weights(&channels, vec![0.5, 1.0]).unwrap();
        let boosted = MIHead::<f64>::with_layer_weights(&channels, vec![0.5, 2.0]).unwrap();
        let l0 = base.loss(&full, &sub).unwrap();
        let l1 = boosted.loss(&full, &sub).unwrap();
        assert!(l1 > l0);
    }

    #[test]
    fn transfer_head_rejects_decreasing_weights() {
        assert!(MIHead::<f64>::with_layer_weights(&[2, 2], vec![1.0, 0.5]).is_err());
        assert!(MIHead::<f64>::with_layer_weights(&[2, 2], vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn transfer_level_mismatch_is_config_error() {
        let head = MIHead::<f64>::new(&[2, 2]).unwrap();
        let x = feat(Array4::from_elem((2, 1, 1, 1), 0.0));
        assert!(matches!(
            head.loss(&[x.clone()], &[x]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn transfer_loss_lower_bound() {
        // Bounded below by Σ_k γ_k·(elements)·min_c log σ_c.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut head = MIHead::<f64>::new(&[3]).unwrap();
        head.log_sigma[0]
            .value
            .iter_mut()
            .for_each(|s| *s = rng.gen::<f64>() - 0.5);
        let full = feat(Array4::from_shape_fn((3, 2, 2, 2), |_| rng.gen::<f64>()));
        let sub = feat(Array4::from_shape_fn((3, 2, 2, 2), |_| rng.gen::<f64>()));
        let loss = head.loss(&[full], &[sub]).unwrap();
        let min_log_sigma = head.log_sigma[0]
            .value
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let bound = 1.0 * (3.0 * 8.0) * min_log_sigma;
        assert!(loss >= bound);
    }

    #[test]
    fn total_loss_degenerate_weights_equal_dice() {
        let label = label_half((2, 2, 2));
        let pred = ProbabilityField::<f64>::uniform(2, (2, 2, 2));
        let head = MIHead::<f64>::new(&[2]).unwrap();
        let x = feat(Array4::from_elem((2, 1, 1, 1), 0.3));
        let w = LossWeights::new(0.0, 0.0).unwrap();
        let exp = HolderExponent::new(1.1).unwrap();
        let total = total_loss(&pred, &label, &[x.clone()], &[x], &head, &w, &exp).unwrap();
        let dice = dice_loss(&pred, &label).unwrap();
        assert_eq!(total, dice);
    }

    #[test]
    fn total_loss_is_sum_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let j = 4;
        let shape = (4, 4, 4);
        let mut values = Array4::zeros((j, shape.0, shape.1, shape.2));
        let mut classes = Array3::zeros(shape);
        for d in 0..shape.0 {
            for h in 0..shape.1 {
                for w in 0..shape.2 {
                    let mut v: Vec<f64> = (0..j).map(|_| rng.gen::<f64>() + 0.01).collect();
                    let s: f64 = v.iter().sum();
                    v.iter_mut().for_each(|x| *x /= s);
                    for c in 0..j {
                        values[(c, d, h, w)] = v[c];
                    }
                    classes[(d, h, w)] = rng.gen_range(0..j as u8);
                }
            }
        }
        let pred = ProbabilityField::new(values).unwrap();
        let label = LabelField::from_classes(classes);
        let head = MIHead::<f64>::new(&[2]).unwrap();
        let full = feat(Array4::from_shape_fn((2, 2, 2, 2), |_| rng.gen::<f64>()));
        let sub = feat(Array4::from_shape_fn((2, 2, 2, 2), |_| rng.gen::<f64>()));
        let w = LossWeights::new(1.0, 1.0).unwrap();
        let exp = HolderExponent::new(1.1).unwrap();

        let total = total_loss(&pred, &label, &[full.clone()], &[sub.clone()], &head, &w, &exp)
            .unwrap();
        let dice = dice_loss(&pred, &label).unwrap();
        let mi = mi_transfer_loss(&[full], &[sub], &head).unwrap();
        let hd = holder_seg_loss(&pred, &label, &exp).unwrap();
        assert!((total - (dice + mi + hd)).abs() <= 1e-9);
    }
}
