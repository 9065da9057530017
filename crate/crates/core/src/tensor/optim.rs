use super::{Grads, Network, Real, Tensor};
use crate::error::{Error, Result};

/// Classical momentum: `v <- momentum v + g`, `p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Tensor<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates raw parameter tensors in place. Entries without a gradient
    /// are left untouched.
    pub fn step_tensors<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!("{} params, {} grads", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            if g.shape != p.shape || v.shape != p.shape {
                return Err(Error::ShapeMismatch(format!("gradient {:?} for parameter {:?}", g.shape, p.shape)));
            }
            for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                *vv = self.momentum * *vv + gv.to_f64();
                *pv = T::from_f64(pv.to_f64() - self.lr * *vv);
            }
        }
        Ok(())
    }

    pub fn step<T: Real>(&mut self, net: &mut Network<T>, grads: &Grads<T>) -> Result<()> {
        self.step_tensors(&mut net.params, &grads.params)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_tensors<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!("{} params, {} grads", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            if g.shape != p.shape || m.shape != p.shape {
                return Err(Error::ShapeMismatch(format!("gradient {:?} for parameter {:?}", g.shape, p.shape)));
            }
            for (((pv, gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                let g = gv.to_f64();
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let step = self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                *pv = T::from_f64(pv.to_f64() - step);
            }
        }
        Ok(())
    }

    pub fn step<T: Real>(&mut self, net: &mut Network<T>, grads: &Grads<T>) -> Result<()> {
        self.step_tensors(&mut net.params, &grads.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_vec(&[1], vec![v])]
    }

    #[test]
    fn plain_step() {
        let mut p = one(1.0);
        let mut opt = SgdMomentum::new(0.1, 0.0);
        opt.step_tensors(&mut p, &[Some(one(1.0).remove(0))]).unwrap();
        assert!((p[0].data[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = one(0.0);
        let mut opt = SgdMomentum::new(1.0, 0.9);
        for _ in 0..2 {
            opt.step_tensors(&mut p, &[Some(one(1.0).remove(0))]).unwrap();
        }
        assert!((p[0].data[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn velocity_decays_without_gradient() {
        let mut p = one(0.0);
        let mut opt = SgdMomentum::new(1.0, 0.9);
        opt.step_tensors(&mut p, &[Some(one(1.0).remove(0))]).unwrap();
        let mut prev = opt.velocity[0].data[0];
        for _ in 0..50 {
            opt.step_tensors(&mut p, &[Some(one(0.0).remove(0))]).unwrap();
            let v = opt.velocity[0].data[0];
            assert!((v - 0.9 * prev).abs() < 1e-15);
            prev = v;
        }
        // geometric series: total displacement approaches 1 / (1 - 0.9)
        assert!((p[0].data[0] + 10.0).abs() < 0.1);
    }

    #[test]
    fn shape_checked() {
        let mut p = one(0.0);
        let mut opt = SgdMomentum::new(1.0, 0.9);
        let g = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        assert!(opt.step_tensors(&mut p, &[Some(g)]).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // bias correction makes the first step lr * sign(g)
        for g in [1e-6, 3.0, -250.0] {
            let mut p = one(1.0);
            let mut opt = Adam::new(0.01);
            opt.step_tensors(&mut p, &[Some(one(g).remove(0))]).unwrap();
            assert!((p[0].data[0] - (1.0 - 0.01 * f64::signum(g))).abs() < 1e-4);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = one(5.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..2000 {
            let g = 2.0 * (p[0].data[0] - 2.0);
            opt.step_tensors(&mut p, &[Some(one(g).remove(0))]).unwrap();
        }
        assert!((p[0].data[0] - 2.0).abs() < 1e-3);
    }
}
