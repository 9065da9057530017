use super::Real;
use crate::error::{Error, Result};

pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLossParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl FocalLossParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) || !(gamma >= 0.0) {
            return Err(Error::Config(format!("focal loss needs alpha in (0,1) and gamma >= 0, got {alpha}, {gamma}")));
        }
        Ok(FocalLossParams { alpha, gamma })
    }
}

impl Default for FocalLossParams {
    fn default() -> Self {
        FocalLossParams { alpha: 0.75, gamma: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsTarget {
    Negative,
    Positive,
    Ignore,
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// Focal loss summed over non-ignored pixels, and its gradient with respect
/// to the probabilities. The gradient is evaluated at the clamped
/// probability.
pub fn focal_loss<T: Real>(p: &[T], target: &[ClsTarget], params: FocalLossParams) -> Result<(f64, Vec<T>)> {
    if p.len() != target.len() {
        return Err(Error::ShapeMismatch(format!("focal loss: {} probabilities, {} targets", p.len(), target.len())));
    }
    let FocalLossParams { alpha, gamma } = params;
    let mut loss = 0.0;
    let mut grad = vec![T::ZERO; p.len()];
    for ((&pi, &t), g) in p.iter().zip(target).zip(&mut grad) {
        let p = clamp_p(pi.to_f64());
        match t {
            ClsTarget::Ignore => {}
            ClsTarget::Positive => {
                let q = 1.0 - p;
                let w = q.powf(gamma);
                loss -= alpha * w * p.ln();
                let dw = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
                *g = T::from_f64(alpha * (dw * p.ln() - w / p));
            }
            ClsTarget::Negative => {
                let q = 1.0 - p;
                let w = p.powf(gamma);
                loss -= (1.0 - alpha) * w * q.ln();
                let dw = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
                *g = T::from_f64((1.0 - alpha) * (w / q - dw * q.ln()));
            }
        }
    }
    Ok((loss, grad))
}

/// Smooth L1 (transition at 1) summed over masked elements.
pub fn smooth_l1<T: Real>(pred: &[T], target: &[T], mask: &[bool]) -> Result<(f64, Vec<T>)> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "smooth L1: {} predictions, {} targets, {} mask entries",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![T::ZERO; pred.len()];
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let d = pred[i].to_f64() - target[i].to_f64();
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            grad[i] = T::from_f64(d);
        } else {
            loss += d.abs() - 0.5;
            grad[i] = T::from_f64(d.signum());
        }
    }
    Ok((loss, grad))
}

/// Binary cross-entropy on probabilities, summed over masked pixels
/// (all pixels when `mask` is `None`).
pub fn bce_loss<T: Real>(p: &[T], target: &[f32], mask: Option<&[bool]>) -> Result<(f64, Vec<T>)> {
    if p.len() != target.len() || mask.is_some_and(|m| m.len() != p.len()) {
        return Err(Error::ShapeMismatch(format!("bce: {} probabilities, {} targets", p.len(), target.len())));
    }
    let mut loss = 0.0;
    let mut grad = vec![T::ZERO; p.len()];
    for i in 0..p.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let q = clamp_p(p[i].to_f64());
        let t = target[i] as f64;
        loss -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        grad[i] = T::from_f64((1.0 - t) / (1.0 - q) - t / q);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let (l, _) = focal_loss(&[0.5f64], &[ClsTarget::Positive], FocalLossParams { alpha: 1.0, gamma: 0.0 }).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_example_value() {
        let (l, _) = focal_loss(&[0.5f64], &[ClsTarget::Positive], FocalLossParams::new(0.75, 0.5).unwrap()).unwrap();
        assert!((l - 0.75 * 0.5f64.sqrt() * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.3676).abs() < 1e-4);
    }

    #[test]
    fn focal_all_ignored() {
        let (l, g) = focal_loss(&[0.2f64, 0.9], &[ClsTarget::Ignore; 2], FocalLossParams::default()).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn focal_params_validated() {
        assert!(FocalLossParams::new(1.0, 0.5).is_err());
        assert!(FocalLossParams::new(0.5, -1.0).is_err());
    }

    #[test]
    fn focal_finite_at_saturation() {
        let (l, g) = focal_loss(&[0.0f32, 1.0], &[ClsTarget::Positive, ClsTarget::Negative], FocalLossParams::default())
            .unwrap();
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn smooth_l1_examples() {
        let (l, _) = smooth_l1(&[0.5f64], &[0.0], &[true]).unwrap();
        assert_eq!(l, 0.125);
        let (l, g) = smooth_l1(&[2.0f64], &[0.0], &[true]).unwrap();
        assert_eq!((l, g[0]), (1.5, 1.0));
        let (l, g) = smooth_l1(&[2.0f64, -3.0], &[0.0, 0.0], &[false, false]).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
        assert!(smooth_l1(&[1.0f64], &[0.0, 1.0], &[true]).is_err());
    }

    #[test]
    fn bce_value() {
        let (l, _) = bce_loss(&[0.25f64, 0.25], &[1.0, 0.0], None).unwrap();
        assert!((l - (-(0.25f64.ln()) - 0.75f64.ln())).abs() < 1e-12);
    }

    fn fd_check(f: impl Fn(f64) -> f64, g: f64, p: f64) {
        let eps = 1e-6;
        let fd = (f(p + eps) - f(p - eps)) / (2.0 * eps);
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
        assert!(rel < 1e-4, "fd {fd} analytic {g}");
    }

    proptest! {
        #[test]
        fn focal_gradient_matches_fd(p in 0.01f64..0.99, alpha in 0.05f64..0.95, gamma in 0.0f64..3.0, pos in any::<bool>()) {
            let t = if pos { ClsTarget::Positive } else { ClsTarget::Negative };
            let fp = FocalLossParams { alpha, gamma };
            let (_, g) = focal_loss(&[p], &[t], fp).unwrap();
            fd_check(|q| focal_loss(&[q], &[t], fp).unwrap().0, g[0], p);
        }

        #[test]
        fn smooth_l1_gradient_matches_fd(d in -3.0f64..3.0) {
            prop_assume!((d.abs() - 1.0).abs() > 1e-3);
            let (_, g) = smooth_l1(&[d], &[0.0], &[true]).unwrap();
            fd_check(|q| smooth_l1(&[q], &[0.0], &[true]).unwrap().0, g[0], d);
        }

        #[test]
        fn bce_gradient_matches_fd(p in 0.01f64..0.99, t in 0.0f32..1.0) {
            let (_, g) = bce_loss(&[p], &[t], None).unwrap();
            fd_check(|q| bce_loss(&[q], &[t], None).unwrap().0, g[0], p);
        }
    }
}
