//! Hölder pseudo-divergence and the comparison f-divergence family over
//! discrete probability vectors.
//!
//! For conjugate exponents α > 1, β = α/(α−1), the Hölder statistical
//! pseudo-divergence between discrete distributions p, q is the logarithmic
//! gap in the Hölder inequality:
//!
//! D_α(p:q) = −log( Σ_j p_j q_j / (‖p‖_α ‖q‖_β) ),   ‖p‖_α = (Σ_j p_j^α)^{1/α}
//!
//! Non-negative by Hölder's inequality, zero iff p^α ∝ q^β, and asymmetric in
//! general (a *pseudo*-divergence: D(p:p) > 0 unless p is uniform). α = β = 2
//! recovers the Cauchy–Schwarz divergence.
//!
//! All norms and the final log are evaluated in log space via log-sum-exp:
//! β grows like 1/(α−1) (α = 1.05 ⇒ β = 21), so q_j^β underflows long before
//! the divergence itself is extreme. Inputs are ε-floored at 1e-12 and
//! renormalized first, which keeps one-hot targets inside the domain of every
//! divergence here.

use crate::error::{Error, Result};
use crate::scalar::{sum_tolerance, Scalar};
use serde::{Deserialize, Serialize};

/// Entries are clamped to at least this value before powers and logs.
pub const FLOOR_EPS: f64 = 1e-12;

/// A probability vector over a finite support (length ≥ 2, entries ≥ 0,
/// summing to one).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution<T: Scalar> {
    weights: Vec<T>,
}

impl<T: Scalar> DiscreteDistribution<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::DegenerateInput(format!(
                "distribution needs at least 2 classes, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| *w < T::zero() || !w.is_finite()) {
            return Err(Error::DegenerateInput(
                "distribution entries must be finite and non-negative".into(),
            ));
        }
        let sum = weights.iter().copied().sum::<T>().as_f64();
        let tol = sum_tolerance::<T>(1e-9);
        if (sum - 1.0).abs() > tol {
            return Err(Error::DegenerateInput(format!(
                "distribution must sum to 1 (got {sum}, tolerance {tol})"
            )));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Conjugate Hölder exponents: α > 1 and β = α/(α−1), so 1/α + 1/β = 1.
///
/// The reverse-Hölder regime 0 < α < 1 (where β < 0) is rejected at
/// construction time; only α > 1 is supported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct HolderExponent {
    alpha: f64,
    beta: f64,
}

impl HolderExponent {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 1.0 {
            return Err(Error::Config(format!(
                "Hölder exponent alpha must be finite and > 1, got {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            beta: alpha / (alpha - 1.0),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl TryFrom<f64> for HolderExponent {
    type Error = Error;
    fn try_from(alpha: f64) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<HolderExponent> for f64 {
    fn from(e: HolderExponent) -> f64 {
        e.alpha
    }
}

/// Which divergence to evaluate between per-voxel class distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "alpha")]
pub enum DivergenceKind {
    Holder(HolderExponent),
    TotalVariation,
    SquaredHellinger,
    KullbackLeibler,
    NeymanChi2,
    JensenShannon,
}

impl DivergenceKind {
    pub fn holder(alpha: f64) -> Result<Self> {
        Ok(DivergenceKind::Holder(HolderExponent::new(alpha)?))
    }

    /// Short stable name used in report rows.
    pub fn label(&self) -> String {
        match self {
            DivergenceKind::Holder(e) => format!("holder[{}]", e.alpha()),
            DivergenceKind::TotalVariation => "total_variation".into(),
            DivergenceKind::SquaredHellinger => "squared_hellinger".into(),
            DivergenceKind::KullbackLeibler => "kullback_leibler".into(),
            DivergenceKind::NeymanChi2 => "neyman_chi2".into(),
            DivergenceKind::JensenShannon => "jensen_shannon".into(),
        }
    }
}

fn check_same_len<T: Scalar>(p: &[T], q: &[T]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "distributions of length {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

fn check_not_all_zero<T: Scalar>(w: &[T], side: &str) -> Result<()> {
    if w.iter().all(|x| *x <= T::zero()) {
        return Err(Error::DegenerateInput(format!(
            "{side} distribution has no positive mass"
        )));
    }
    Ok(())
}

/// Clamp to `FLOOR_EPS` and renormalize, returning log-probabilities.
fn floored_log<T: Scalar>(w: &[T]) -> Vec<T> {
    let eps = T::c(FLOOR_EPS);
    let mut sum = T::zero();
    let mut out: Vec<T> = w
        .iter()
        .map(|x| {
            let v = if *x > eps { *x } else { eps };
            sum += v;
            v
        })
        .collect();
    let log_sum = sum.ln();
    for v in &mut out {
        *v = v.ln() - log_sum;
    }
    out
}

/// Clamp to `FLOOR_EPS` and renormalize.
fn floored<T: Scalar>(w: &[T]) -> Vec<T> {
    let eps = T::c(FLOOR_EPS);
    let mut out: Vec<T> = w.iter().map(|x| if *x > eps { *x } else { eps }).collect();
    let sum = out.iter().copied().sum::<T>();
    for v in &mut out {
        *v /= sum;
    }
    out
}

fn log_sum_exp<T: Scalar>(vals: &[T]) -> T {
    let m = vals.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return T::neg_infinity();
    }
    let s = vals.iter().map(|v| (*v - m).exp()).sum::<T>();
    m + s.ln()
}

/// Hölder pseudo-divergence on raw slices (callers guarantee equal lengths
/// and some positive mass on each side).
pub(crate) fn holder_on_slices<T: Scalar>(p: &[T], q: &[T], exp: &HolderExponent) -> T {
    let alpha = T::c(exp.alpha());
    let beta = T::c(exp.beta());
    let lp = floored_log(p);
    let lq = floored_log(q);

    let cross: Vec<T> = lp.iter().zip(&lq).map(|(a, b)| *a + *b).collect();
    let log_cross = log_sum_exp(&cross);

    let pa: Vec<T> = lp.iter().map(|a| *a * alpha).collect();
    let qb: Vec<T> = lq.iter().map(|b| *b * beta).collect();
    let log_norm_p = log_sum_exp(&pa) / alpha;
    let log_norm_q = log_sum_exp(&qb) / beta;

    log_norm_p + log_norm_q - log_cross
}

/// Hölder statistical pseudo-divergence D_α(p:q) ≥ 0.
pub fn holder_divergence<T: Scalar>(
    p: &DiscreteDistribution<T>,
    q: &DiscreteDistribution<T>,
    exp: &HolderExponent,
) -> Result<T> {
    check_same_len(p.weights(), q.weights())?;
    check_not_all_zero(p.weights(), "left")?;
    check_not_all_zero(q.weights(), "right")?;
    Ok(holder_on_slices(p.weights(), q.weights(), exp))
}

/// Divergence of `kind` on raw slices after ε-flooring. KL in nats.
pub(crate) fn divergence_on_slices<T: Scalar>(kind: &DivergenceKind, p: &[T], q: &[T]) -> T {
    if let DivergenceKind::Holder(exp) = kind {
        return holder_on_slices(p, q, exp);
    }
    let pf = floored(p);
    let qf = floored(q);
    let half = T::c(0.5);
    match kind {
        DivergenceKind::Holder(_) => unreachable!(),
        // ½ Σ |p − q|
        DivergenceKind::TotalVariation => {
            half * pf
                .iter()
                .zip(&qf)
                .map(|(a, b)| (*a - *b).abs())
                .sum::<T>()
        }
        // 1 − Σ √(p q)
        DivergenceKind::SquaredHellinger => {
            T::one()
                - pf.iter()
                    .zip(&qf)
                    .map(|(a, b)| (*a * *b).sqrt())
                    .sum::<T>()
        }
        // Σ p ln(p/q)
        DivergenceKind::KullbackLeibler => pf
            .iter()
            .zip(&qf)
            .map(|(a, b)| *a * (*a / *b).ln())
            .sum::<T>(),
        // Σ (p − q)² / p
        DivergenceKind::NeymanChi2 => pf
            .iter()
            .zip(&qf)
            .map(|(a, b)| {
                let d = *a - *b;
                d * d / *a
            })
            .sum::<T>(),
        // ½ KL(p‖m) + ½ KL(q‖m), m = (p+q)/2
        DivergenceKind::JensenShannon => {
            let mut acc = T::zero();
            for (a, b) in pf.iter().zip(&qf) {
                let m = half * (*a + *b);
                acc += half * (*a * (*a / m).ln() + *b * (*b / m).ln());
            }
            acc
        }
    }
}

/// Standard divergence of the named kind between two distributions.
pub fn f_divergence<T: Scalar>(
    kind: &DivergenceKind,
    p: &DiscreteDistribution<T>,
    q: &DiscreteDistribution<T>,
) -> Result<T> {
    check_same_len(p.weights(), q.weights())?;
    check_not_all_zero(p.weights(), "left")?;
    check_not_all_zero(q.weights(), "right")?;
    Ok(divergence_on_slices(kind, p.weights(), q.weights()))
}

/// Gradient of `divergence_on_slices(kind, p, q)` with respect to the raw
/// (pre-flooring) entries of `p`.
///
/// The flooring/renormalization step p̃ = max(p,ε)/Σ max(p,ε) is part of the
/// forward computation, so its Jacobian is chained in: entries at or below
/// the floor receive zero gradient, and the renormalization projects out the
/// mean component.
pub(crate) fn divergence_grad_on_slices<T: Scalar>(
    kind: &DivergenceKind,
    p: &[T],
    q: &[T],
) -> Vec<T> {
    let eps = T::c(FLOOR_EPS);
    let clamped: Vec<T> = p.iter().map(|x| if *x > eps { *x } else { eps }).collect();
    let raw_sum = clamped.iter().copied().sum::<T>();
    let pf: Vec<T> = clamped.iter().map(|x| *x / raw_sum).collect();
    let qf = floored(q);

    // dD/dp̃
    let g_tilde: Vec<T> = match kind {
        DivergenceKind::Holder(exp) => {
            let alpha = T::c(exp.alpha());
            let cross = pf.iter().zip(&qf).map(|(a, b)| *a * *b).sum::<T>();
            // Σ p̃^α in log space for small α−1 stability.
            let lp: Vec<T> = pf.iter().map(|x| x.ln()).collect();
            let pa: Vec<T> = lp.iter().map(|a| *a * alpha).collect();
            let log_sum_pa = log_sum_exp(&pa);
            pf.iter()
                .zip(&qf)
                .zip(&lp)
                .map(|((_, b), la)| {
                    // p̃^{α−1} / Σ p̃^α  −  q̃ / Σ p̃ q̃
                    ((alpha - T::one()) * *la - log_sum_pa).exp() - *b / cross
                })
                .collect()
        }
        DivergenceKind::TotalVariation => {
            let half = T::c(0.5);
            pf.iter()
                .zip(&qf)
                .map(|(a, b)| {
                    if *a > *b {
                        half
                    } else if *a < *b {
                        -half
                    } else {
                        T::zero()
                    }
                })
                .collect()
        }
        DivergenceKind::SquaredHellinger => {
            let half = T::c(0.5);
            pf.iter()
                .zip(&qf)
                .map(|(a, b)| -half * (*b / *a).sqrt())
                .collect()
        }
        DivergenceKind::KullbackLeibler => pf
            .iter()
            .zip(&qf)
            .map(|(a, b)| (*a / *b).ln() + T::one())
            .collect(),
        DivergenceKind::NeymanChi2 => pf
            .iter()
            .zip(&qf)
            .map(|(a, b)| T::one() - (*b * *b) / (*a * *a))
            .collect(),
        DivergenceKind::JensenShannon => {
            let half = T::c(0.5);
            pf.iter()
                .zip(&qf)
                .map(|(a, b)| {
                    let m = half * (*a + *b);
                    half * (*a / m).ln()
                })
                .collect()
        }
    };

    // Chain through p̃_j = w_j / S: dD/dw_k = (g̃_k − Σ_j g̃_j p̃_j) / S,
    // then through w = max(p, ε).
    let dot = g_tilde
        .iter()
        .zip(&pf)
        .map(|(g, x)| *g * *x)
        .sum::<T>();
    p.iter()
        .zip(&g_tilde)
        .map(|(raw, g)| {
            if *raw > eps {
                (*g - dot) / raw_sum
            } else {
                T::zero()
            }
        })
        .collect()
}
