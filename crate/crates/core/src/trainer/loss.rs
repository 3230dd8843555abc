use serde::{Deserialize, Serialize};

use super::config::LossWeights;
use crate::error::{Error, Result};

/// Summed loss components of one step and the counts that normalise them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Σ supervised detection loss over labeled images.
    pub sup: f64,
    /// Σ masked-consistency detection loss over unlabeled images.
    pub mic: f64,
    /// Σ image-level adversarial loss over all images.
    pub adv_img: f64,
    /// Σ instance-level adversarial loss over all images.
    pub adv_ins: f64,
    /// Σ image-level consistency loss over all images.
    pub cons_img: f64,
    /// Σ instance-level consistency loss over all images.
    pub cons_ins: f64,
    pub n_s: usize,
    pub n_t: usize,
    /// Value of the objective as evaluated by the training graph.
    pub total: f64,
}

impl LossBreakdown {
    pub fn adversarial(&self) -> f64 {
        self.adv_img + self.adv_ins
    }

    pub fn consistency(&self) -> f64 {
        self.cons_img + self.cons_ins
    }

    pub fn is_finite(&self) -> bool {
        [
            self.sup,
            self.mic,
            self.adv_img,
            self.adv_ins,
            self.cons_img,
            self.cons_ins,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Coefficients that multiply each summed component in the objective.
pub fn term_coefficients(w: &LossWeights, n_s: usize, n_t: usize) -> [f64; 6] {
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let shared = inv(n_s + n_t);
    [
        inv(n_s),
        w.m * inv(n_t),
        w.a_img * shared,
        w.a_ins * shared,
        w.c_img * shared,
        w.c_ins * shared,
    ]
}

/// `ΣL_S / N_s + λ_M ΣL_M / N_t + Σ(λ_A·L_A + λ_C·L_C) / (N_s + N_t)`, with
/// the adversarial and consistency weights applied per level.
pub fn total_loss(b: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    let parts = [b.sup, b.mic, b.adv_img, b.adv_ins, b.cons_img, b.cons_ins];
    if b.n_s == 0 && b.sup != 0.0 {
        return Err(Error::Config(
            "supervised loss without labeled images".into(),
        ));
    }
    if b.n_t == 0 && b.mic != 0.0 {
        return Err(Error::Config(
            "masked-consistency loss without unlabeled images".into(),
        ));
    }
    if b.n_s + b.n_t == 0 && parts[2..].iter().any(|&v| v != 0.0) {
        return Err(Error::Config("domain losses without images".into()));
    }
    let c = term_coefficients(w, b.n_s, b.n_t);
    Ok(parts.iter().zip(c).map(|(v, k)| v * k).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n_s: usize, n_t: usize) -> LossBreakdown {
        LossBreakdown {
            sup: 1.0,
            mic: 1.0,
            adv_img: 1.0,
            adv_ins: 1.0,
            cons_img: 1.0,
            cons_ins: 1.0,
            n_s,
            n_t,
            total: 0.0,
        }
    }

    #[test]
    fn all_zero_components_give_zero() {
        let b = LossBreakdown {
            n_s: 2,
            n_t: 3,
            ..Default::default()
        };
        assert_eq!(total_loss(&b, &LossWeights::default()).unwrap(), 0.0);
    }

    #[test]
    fn supervised_plus_masked_only() {
        let b = LossBreakdown {
            sup: 1.0,
            mic: 1.0,
            n_s: 1,
            n_t: 1,
            ..Default::default()
        };
        assert_eq!(total_loss(&b, &LossWeights::default()).unwrap(), 1.5);
    }

    #[test]
    fn unit_components_with_reference_weights() {
        let v = total_loss(&unit(1, 1), &LossWeights::default()).unwrap();
        assert!((v - 1.56875).abs() < 1e-15);
    }

    #[test]
    fn zero_denominators() {
        let mut b = unit(0, 1);
        assert!(total_loss(&b, &LossWeights::default()).is_err());
        b.sup = 0.0;
        assert!(total_loss(&b, &LossWeights::default()).is_ok());
    }
}
