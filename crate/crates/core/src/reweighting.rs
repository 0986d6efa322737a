//! Per-minibatch instance weights on the probability simplex.
//!
//! Each weight vector minimizes `Σ w_i L_i` subject to a divergence budget against the
//! uniform distribution. The budget is relaxed with a tunable multiplier `λ`, which gives
//! closed forms:
//!
//! | divergence | `w_i ∝` |
//! |---|---|
//! | KL(w, u) | `exp(−L_i / λ)` |
//! | KL(u, w) | `1 / (L_i + λ)` |
//! | α (α ∉ {0, 1}) | `[(1 − α) L_i + λ]_+^{1/(α − 1)}` |
//!
//! The α family recovers the reverse KL form at α = 0 and the KL form as α → 1.
//! Weights are computed from loss *values*; no gradient flows through them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Non-negative weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Normalize non-negative masses. Fails if nothing is positive.
    fn from_masses(masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Domain(format!(
                "weight masses do not normalize (sum = {total})"
            )));
        }
        Ok(Self(masses.into_iter().map(|m| m / total).collect()))
    }

    /// Softmax of log-masses, shifted by the maximum so nothing overflows.
    fn from_log_masses(logs: &[f64]) -> Result<Self> {
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Domain("log weights are not finite".into()));
        }
        Self::from_masses(logs.iter().map(|l| (l - max).exp()).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(0.0, f64::max)
    }

    /// `true` when every entry equals `1/n` exactly.
    pub fn is_exactly_uniform(&self) -> bool {
        let u = 1.0 / self.0.len() as f64;
        self.0.iter().all(|&w| w == u)
    }

    /// `Σ w_i x_i`
    pub fn dot(&self, values: &[f64]) -> f64 {
        self.0.iter().zip(values).map(|(w, x)| w * x).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    #[serde(alias = "kl")]
    Kl,
    #[serde(rename = "rkl", alias = "reverse_kl")]
    ReverseKl,
    Alpha,
}

impl std::str::FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Self::Kl),
            "rkl" | "reverse_kl" | "reverse-kl" => Ok(Self::ReverseKl),
            "alpha" => Ok(Self::Alpha),
            other => Err(Error::arg(format!(
                "unknown divergence {other:?}; expected kl, rkl or alpha"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSpec {
    pub kind: DivergenceKind,
    /// Only read when `kind` is [`DivergenceKind::Alpha`].
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for DivergenceSpec {
    fn default() -> Self {
        Self {
            kind: DivergenceKind::Alpha,
            alpha: 0.1,
            lambda: 0.1,
        }
    }
}

impl DivergenceSpec {
    pub fn kl(lambda: f64) -> Self {
        Self {
            kind: DivergenceKind::Kl,
            alpha: 1.0,
            lambda,
        }
    }

    pub fn reverse_kl(lambda: f64) -> Self {
        Self {
            kind: DivergenceKind::ReverseKl,
            alpha: 0.0,
            lambda,
        }
    }

    pub fn alpha(alpha: f64, lambda: f64) -> Self {
        Self {
            kind: DivergenceKind::Alpha,
            alpha,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::arg(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.kind == DivergenceKind::Alpha && (self.alpha == 0.0 || self.alpha == 1.0) {
            return Err(Error::arg(format!(
                "alpha = {} is a named special case; use the rkl (0) or kl (1) divergence",
                self.alpha
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::arg("alpha must be finite"));
        }
        Ok(())
    }

    /// Dispatch to the matching closed form.
    pub fn weights(&self, losses: &[f64]) -> Result<WeightVector> {
        self.validate()?;
        match self.kind {
            DivergenceKind::Kl => weights_kl(losses, self.lambda),
            DivergenceKind::ReverseKl => weights_reverse_kl(losses, self.lambda),
            DivergenceKind::Alpha => weights_alpha(losses, self.alpha, self.lambda),
        }
    }
}

fn check_losses(losses: &[f64]) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::arg("cannot weight an empty batch"));
    }
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::arg(format!("loss value {bad} is not finite")));
    }
    Ok(())
}

/// `w_i ∝ exp(−L_i / λ)`
pub fn weights_kl(losses: &[f64], lambda: f64) -> Result<WeightVector> {
    check_losses(losses)?;
    if !(lambda > 0.0) {
        return Err(Error::arg(format!("lambda must be positive, got {lambda}")));
    }
    let logs: Vec<f64> = losses.iter().map(|l| -l / lambda).collect();
    WeightVector::from_log_masses(&logs)
}

/// `w_i ∝ 1 / (L_i + λ)`; every `L_i + λ` must be positive.
pub fn weights_reverse_kl(losses: &[f64], lambda: f64) -> Result<WeightVector> {
    check_losses(losses)?;
    if let Some(l) = losses.iter().find(|&&l| !(l + lambda > 0.0)) {
        return Err(Error::Domain(format!(
            "reverse-KL weights need L + lambda > 0, got L = {l}, lambda = {lambda}"
        )));
    }
    WeightVector::from_masses(losses.iter().map(|l| 1.0 / (l + lambda)).collect())
}

/// `w_i ∝ [(1 − α) L_i + λ]_+^{1/(α−1)}`, evaluated in the log domain.
///
/// For α > 1 clamped entries get zero weight, and if every entry clamps the result falls
/// back to uniform with a warning. For α < 1 the exponent is negative, so a non-positive
/// bracket has no finite weight and is a domain error.
pub fn weights_alpha(losses: &[f64], alpha: f64, lambda: f64) -> Result<WeightVector> {
    check_losses(losses)?;
    if alpha == 0.0 || alpha == 1.0 {
        return Err(Error::arg(format!(
            "alpha = {alpha} is a named special case; use weights_reverse_kl or weights_kl"
        )));
    }
    let exponent = 1.0 / (alpha - 1.0);
    let brackets: Vec<f64> = losses.iter().map(|l| (1.0 - alpha) * l + lambda).collect();
    let weights = if alpha < 1.0 {
        if let Some(b) = brackets.iter().find(|&&b| !(b > 0.0)) {
            return Err(Error::Domain(format!(
                "alpha = {alpha} < 1 needs (1 - alpha) L + lambda > 0, got {b}"
            )));
        }
        let logs: Vec<f64> = brackets.iter().map(|b| exponent * b.ln()).collect();
        WeightVector::from_log_masses(&logs)?
    } else if brackets.iter().all(|&b| b <= 0.0) {
        log::warn!("every alpha-divergence bracket clamps to zero; using uniform weights");
        WeightVector::uniform(losses.len())
    } else {
        let logs: Vec<f64> = brackets
            .iter()
            .map(|&b| if b > 0.0 { exponent * b.ln() } else { f64::NEG_INFINITY })
            .collect();
        WeightVector::from_log_masses(&logs)?
    };
    if weights.len() > 2 && weights.max() > 0.5 {
        log::warn!(
            "alpha-divergence weights are concentrated: max weight {:.3} over {} samples",
            weights.max(),
            weights.len()
        );
    }
    Ok(weights)
}

/// The reweighted minibatch objective and the weights behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct ReweightedObjective {
    pub value: f64,
    pub w1: WeightVector,
    pub w2: WeightVector,
}

/// `Σ_i w1_i l_soft_i + w2_i l_bce_i + mean_i l_seg_i`, with `w1` computed from `l_soft`
/// and `w2` from `l_bce`.
pub fn reweighted_objective(
    l_soft: &[f64],
    l_bce: &[f64],
    l_seg: &[f64],
    spec: &DivergenceSpec,
) -> Result<ReweightedObjective> {
    let n = l_soft.len();
    if l_bce.len() != n || l_seg.len() != n {
        return Err(Error::arg(format!(
            "loss vectors differ in length: {} / {} / {}",
            n,
            l_bce.len(),
            l_seg.len()
        )));
    }
    let w1 = spec.weights(l_soft)?;
    let w2 = spec.weights(l_bce)?;
    let seg = l_seg.iter().sum::<f64>() / n as f64;
    Ok(ReweightedObjective {
        value: w1.dot(l_soft) + w2.dot(l_bce) + seg,
        w1,
        w2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn kl_examples() {
        let w = weights_kl(&[0.7; 5], 0.1).unwrap();
        assert!(close(w.as_slice(), &[0.2; 5], 1e-15));
        let w = weights_kl(&[0.0, std::f64::consts::LN_2], 1.0).unwrap();
        assert!(close(w.as_slice(), &[2.0 / 3.0, 1.0 / 3.0], 1e-12));
        let w = weights_kl(&[0.0, 1.0, 5.0, 3.0], 1e6).unwrap();
        assert!(close(w.as_slice(), &[0.25; 4], 1e-5));
        assert!(weights_kl(&[1.0], 0.0).is_err());
        // no overflow for extreme temperatures
        let w = weights_kl(&[0.0, 1000.0], 1e-3).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn reverse_kl_examples() {
        let w = weights_reverse_kl(&[3.0; 4], 0.1).unwrap();
        assert!(close(w.as_slice(), &[0.25; 4], 1e-15));
        let w = weights_reverse_kl(&[1.0, 2.0], 0.0).unwrap();
        assert!(close(w.as_slice(), &[2.0 / 3.0, 1.0 / 3.0], 1e-12));
        let w = weights_reverse_kl(&[0.0, 1.0], 1.0).unwrap();
        assert!(close(w.as_slice(), &[2.0 / 3.0, 1.0 / 3.0], 1e-12));
        assert!(matches!(weights_reverse_kl(&[-1.0, 2.0], 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn alpha_examples() {
        let w = weights_alpha(&[1.0, 2.0], 0.5, 0.0).unwrap();
        assert!(close(w.as_slice(), &[0.8, 0.2], 1e-12));
        let w = weights_alpha(&[0.4; 3], 0.1, 0.1).unwrap();
        assert!(close(w.as_slice(), &[1.0 / 3.0; 3], 1e-15));
        let w = weights_alpha(&[1.0, 2.0], 2.0, 0.5).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
        assert!(weights_alpha(&[1.0], 0.0, 0.1).is_err());
        assert!(weights_alpha(&[1.0], 1.0, 0.1).is_err());
        assert!(matches!(weights_alpha(&[-1.0, 0.0], 0.5, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn alpha_above_one_zeroes_clamped_entries() {
        // α = 2: brackets −L + 1.5 → [0.5, −0.5]; second clamps to 0
        let w = weights_alpha(&[1.0, 2.0], 2.0, 1.5).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn objective_examples() {
        let ln2 = std::f64::consts::LN_2;
        let obj = reweighted_objective(&[0.0, ln2], &[ln2, 0.0], &[0.0, 0.0], &DivergenceSpec::kl(1.0)).unwrap();
        assert!((obj.value - 2.0 * ln2 / 3.0).abs() < 1e-12);
        let obj = reweighted_objective(&[0.3], &[0.2], &[0.1], &DivergenceSpec::default()).unwrap();
        assert_eq!(obj.w1.as_slice(), &[1.0]);
        assert_eq!(obj.w2.as_slice(), &[1.0]);
        let (a, b, c) = ([0.1, 0.9, 0.4], [0.5, 0.2, 0.3], [0.05, 0.02, 0.08]);
        let obj = reweighted_objective(&a, &b, &c, &DivergenceSpec::kl(1e9)).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((obj.value - (mean(&a) + mean(&b) + mean(&c))).abs() < 1e-8);
        assert!(reweighted_objective(&a, &b[..2], &c, &DivergenceSpec::default()).is_err());
    }

    #[test]
    fn spec_validation_and_parsing() {
        assert!(DivergenceSpec::alpha(0.0, 0.1).validate().is_err());
        assert!(DivergenceSpec::alpha(1.0, 0.1).validate().is_err());
        assert!(DivergenceSpec::kl(0.0).validate().is_err());
        assert!(DivergenceSpec::default().validate().is_ok());
        assert_eq!("rkl".parse::<DivergenceKind>().unwrap(), DivergenceKind::ReverseKl);
        assert!("js".parse::<DivergenceKind>().is_err());
    }
}
