//! Per-voxel probability fields and integer label grids.

use crate::divergence::{divergence_grad_on_slices, divergence_on_slices, DivergenceKind};
use crate::error::{Error, Result};
use crate::scalar::{sum_tolerance, Scalar};
use ndarray::{Array3, Array4};

/// Per-voxel class distributions on a 3D grid, stored `[classes, d, h, w]`.
/// Every voxel's class vector sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField<T: Scalar> {
    values: Array4<T>,
}

impl<T: Scalar> ProbabilityField<T> {
    /// Validates voxel sums (tolerance 1e-6, floored at machine precision)
    /// and the [0, 1] entry range.
    pub fn new(values: Array4<T>) -> Result<Self> {
        let (j, d, h, w) = values.dim();
        if j < 2 {
            return Err(Error::Dimension(format!(
                "probability field needs at least 2 classes, got {j}"
            )));
        }
        let tol = T::c(sum_tolerance::<T>(1e-6));
        let volume = d * h * w;
        let data = values
            .as_slice()
            .expect("probability field storage is contiguous");
        for v in 0..volume {
            let mut sum = T::zero();
            for c in 0..j {
                let x = data[c * volume + v];
                if x < -tol || x > T::one() + tol || !x.is_finite() {
                    return Err(Error::DegenerateInput(format!(
                        "probability entry {x} outside [0, 1]"
                    )));
                }
                sum += x;
            }
            if (sum - T::one()).abs() > tol {
                return Err(Error::DegenerateInput(format!(
                    "voxel distribution sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { values })
    }

    /// Trusted constructor for values produced by a softmax or a convex
    /// combination of valid fields.
    pub(crate) fn from_normalized(values: Array4<T>) -> Self {
        debug_assert!(values.as_slice().is_some());
        Self { values }
    }

    /// Uniform distribution at every voxel.
    pub fn uniform(n_classes: usize, shape: (usize, usize, usize)) -> Self {
        let p = T::one() / T::c(n_classes as f64);
        Self {
            values: Array4::from_elem((n_classes, shape.0, shape.1, shape.2), p),
        }
    }

    /// One-hot field of a label grid (exact zeros and ones; consumers that
    /// need strictly positive entries apply their own flooring).
    pub fn from_label(label: &LabelField, n_classes: usize) -> Result<Self> {
        label.check_classes(n_classes)?;
        let (d, h, w) = label.classes().dim();
        let mut values = Array4::zeros((n_classes, d, h, w));
        for ((x, y, z), &c) in label.classes().indexed_iter() {
            values[(c as usize, x, y, z)] = T::one();
        }
        Ok(Self { values })
    }

    pub fn n_classes(&self) -> usize {
        self.values.dim().0
    }

    pub fn grid_shape(&self) -> (usize, usize, usize) {
        let (_, d, h, w) = self.values.dim();
        (d, h, w)
    }

    pub fn values(&self) -> &Array4<T> {
        &self.values
    }

    pub fn into_values(self) -> Array4<T> {
        self.values
    }

    /// Class map by per-voxel argmax; ties break to the lowest class index.
    pub fn argmax_labels(&self) -> LabelField {
        let (j, d, h, w) = self.values.dim();
        let volume = d * h * w;
        let data = self.values.as_slice().expect("contiguous");
        let mut out = Array3::zeros((d, h, w));
        let flat = out.as_slice_mut().expect("contiguous");
        for v in 0..volume {
            let mut best = 0usize;
            let mut best_val = data[v];
            for c in 1..j {
                let x = data[c * volume + v];
                if x > best_val {
                    best_val = x;
                    best = c;
                }
            }
            flat[v] = best as u8;
        }
        LabelField::from_classes(out)
    }
}

/// Integer class assignments on a 3D grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelField {
    classes: Array3<u8>,
}

impl LabelField {
    pub fn from_classes(classes: Array3<u8>) -> Self {
        Self { classes }
    }

    pub fn classes(&self) -> &Array3<u8> {
        &self.classes
    }

    pub fn grid_shape(&self) -> (usize, usize, usize) {
        self.classes.dim()
    }

    /// Errors unless every voxel's class is below `n_classes`.
    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        if let Some(&bad) = self.classes.iter().find(|&&c| (c as usize) >= n_classes) {
            return Err(Error::DegenerateInput(format!(
                "label class {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(())
    }
}

fn check_field_shapes<T: Scalar>(a: &ProbabilityField<T>, b: &ProbabilityField<T>) -> Result<()> {
    if a.values().dim() != b.values().dim() {
        return Err(Error::Dimension(format!(
            "probability fields of shape {:?} vs {:?}",
            a.values().dim(),
            b.values().dim()
        )));
    }
    Ok(())
}

/// Mean per-voxel divergence between two fields of equal shape:
/// (1/(D·H·W)) Σ_voxels D(p_voxel : q_voxel).
pub fn batched_divergence<T: Scalar>(
    predicted: &ProbabilityField<T>,
    target: &ProbabilityField<T>,
    kind: &DivergenceKind,
) -> Result<T> {
    check_field_shapes(predicted, target)?;
    let j = predicted.n_classes();
    let (d, h, w) = predicted.grid_shape();
    let volume = d * h * w;
    let p = predicted.values().as_slice().expect("contiguous");
    let q = target.values().as_slice().expect("contiguous");

    let mut pv = vec![T::zero(); j];
    let mut qv = vec![T::zero(); j];
    let mut acc = T::zero();
    for v in 0..volume {
        for c in 0..j {
            pv[c] = p[c * volume + v];
            qv[c] = q[c * volume + v];
        }
        acc += divergence_on_slices(kind, &pv, &qv);
    }
    Ok(acc / T::c(volume as f64))
}

/// Gradient of [`batched_divergence`] with respect to `predicted`'s raw
/// entries (the 1/volume averaging factor included).
pub fn batched_divergence_grad<T: Scalar>(
    predicted: &ProbabilityField<T>,
    target: &ProbabilityField<T>,
    kind: &DivergenceKind,
) -> Result<Array4<T>> {
    check_field_shapes(predicted, target)?;
    let j = predicted.n_classes();
    let (d, h, w) = predicted.grid_shape();
    let volume = d * h * w;
    let p = predicted.values().as_slice().expect("contiguous");
    let q = target.values().as_slice().expect("contiguous");

    let mut grad = Array4::zeros((j, d, h, w));
    let g = grad.as_slice_mut().expect("contiguous");
    let scale = T::one() / T::c(volume as f64);
    let mut pv = vec![T::zero(); j];
    let mut qv = vec![T::zero(); j];
    for v in 0..volume {
        for c in 0..j {
            pv[c] = p[c * volume + v];
            qv[c] = q[c * volume + v];
        }
        let gv = divergence_grad_on_slices(kind, &pv, &qv);
        for c in 0..j {
            g[c * volume + v] = gv[c] * scale;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{holder_on_slices, DivergenceKind, HolderExponent};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn random_field(
        rng: &mut impl Rng,
        j: usize,
        shape: (usize, usize, usize),
    ) -> ProbabilityField<f64> {
        let mut values = Array4::zeros((j, shape.0, shape.1, shape.2));
        for d in 0..shape.0 {
            for h in 0..shape.1 {
                for w in 0..shape.2 {
                    let mut v: Vec<f64> = (0..j).map(|_| rng.gen::<f64>() + 1e-3).collect();
                    let s: f64 = v.iter().sum();
                    v.iter_mut().for_each(|x| *x /= s);
                    for (c, x) in v.into_iter().enumerate() {
                        values[(c, d, h, w)] = x;
                    }
                }
            }
        }
        ProbabilityField::new(values).unwrap()
    }

    #[test]
    fn validates_voxel_sums() {
        let mut values = Array4::from_elem((2, 1, 1, 1), 0.5f64);
        values[(0, 0, 0, 0)] = 0.9;
        assert!(ProbabilityField::new(values).is_err());
    }

    #[test]
    fn uniform_field_self_divergence_is_zero() {
        let f = ProbabilityField::<f64>::uniform(4, (2, 2, 2));
        let kind = DivergenceKind::holder(1.1).unwrap();
        let d = batched_divergence(&f, &f, &kind).unwrap();
        assert!(d.abs() <= 1e-9, "got {d}");
    }

    #[test]
    fn two_voxel_field_averages_scalar_values() {
        // Voxel 0: ([1,0], [0.8,0.2]); voxel 1: ([0.9,0.1], [0.9,0.1]).
        let mut p = Array4::zeros((2, 2, 1, 1));
        let mut q = Array4::zeros((2, 2, 1, 1));
        p[(0, 0, 0, 0)] = 1.0;
        p[(1, 0, 0, 0)] = 0.0;
        q[(0, 0, 0, 0)] = 0.8;
        q[(1, 0, 0, 0)] = 0.2;
        p[(0, 1, 0, 0)] = 0.9;
        p[(1, 1, 0, 0)] = 0.1;
        q[(0, 1, 0, 0)] = 0.9;
        q[(1, 1, 0, 0)] = 0.1;
        let p = ProbabilityField::new(p).unwrap();
        let q = ProbabilityField::new(q).unwrap();

        let e2 = HolderExponent::new(2.0).unwrap();
        let s0 = holder_on_slices(&[1.0f64, 0.0], &[0.8, 0.2], &e2);
        let s1 = holder_on_slices(&[0.9, 0.1], &[0.9, 0.1], &e2);
        let batched = batched_divergence(&p, &q, &DivergenceKind::Holder(e2)).unwrap();
        assert!((batched - 0.5 * (s0 + s1)).abs() <= 1e-12);
    }

    #[test]
    fn batched_equals_per_voxel_loop_on_random_fields() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = random_field(&mut rng, 4, (4, 4, 4));
        let q = random_field(&mut rng, 4, (4, 4, 4));
        let kind = DivergenceKind::holder(1.1).unwrap();

        // Brute-force per-voxel oracle.
        let mut acc = 0.0;
        for d in 0..4 {
            for h in 0..4 {
                for w in 0..4 {
                    let pv: Vec<f64> = (0..4).map(|c| p.values()[(c, d, h, w)]).collect();
                    let qv: Vec<f64> = (0..4).map(|c| q.values()[(c, d, h, w)]).collect();
                    acc += crate::divergence::divergence_on_slices(&kind, &pv, &qv);
                }
            }
        }
        let oracle = acc / 64.0;
        let got = batched_divergence(&p, &q, &kind).unwrap();
        assert!((got - oracle).abs() <= 1e-9, "got {got} oracle {oracle}");
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = ProbabilityField::<f64>::uniform(2, (2, 2, 2));
        let b = ProbabilityField::<f64>::uniform(2, (2, 2, 4));
        let kind = DivergenceKind::KullbackLeibler;
        assert!(matches!(
            batched_divergence(&a, &b, &kind),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn one_hot_round_trip_through_argmax() {
        let mut classes = Array3::zeros((2, 2, 2));
        classes[(0, 0, 0)] = 3;
        classes[(1, 1, 1)] = 1;
        let label = LabelField::from_classes(classes);
        let field = ProbabilityField::<f64>::from_label(&label, 4).unwrap();
        assert_eq!(field.argmax_labels(), label);
    }

    #[test]
    fn argmax_ties_break_to_lowest_class() {
        let f = ProbabilityField::<f64>::uniform(3, (1, 1, 1));
        assert_eq!(f.argmax_labels().classes()[(0, 0, 0)], 0);
    }

    #[test]
    fn label_class_range_checked() {
        let mut classes = Array3::zeros((1, 1, 1));
        classes[(0, 0, 0)] = 7;
        let label = LabelField::from_classes(classes);
        assert!(label.check_classes(4).is_err());
        assert!(label.check_classes(8).is_ok());
    }
}
