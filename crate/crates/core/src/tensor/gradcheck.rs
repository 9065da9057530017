//! Central finite-difference checks of analytic gradients, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bce_loss, focal_loss, smooth_l1, ClsTarget, FocalLossParams, NetSpec, Network, Tensor};
use crate::error::Result;

pub const FD_EPS: f64 = 1e-3;

/// `|a - f| / max(|a|, |f|, 1e-3)`: relative error with a small floor so
/// entries that are zero up to rounding do not dominate.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Scalar objective on a network output: value and gradient w.r.t. the
/// output.
pub type Objective<'a> = dyn Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> + 'a;

fn objective_value(net: &Network<f64>, x: &Tensor<f64>, obj: &Objective) -> Result<f64> {
    let cache = net.forward(x, true)?;
    Ok(obj(&cache.outputs[net.spec.output])?.0)
}

/// Max relative error between backprop and central differences over the
/// input and every learnable parameter (train-mode batch norm).
pub fn check_network(net: &mut Network<f64>, x: &Tensor<f64>, obj: &Objective, eps: f64) -> Result<f64> {
    let cache = net.forward(x, true)?;
    let (_, d_out) = obj(&cache.outputs[net.spec.output])?;
    let grads = net.backward(&cache, &d_out, true)?;
    let mut worst = 0f64;
    let mut xp = x.clone();
    let gin = grads.input.expect("input gradient requested");
    for i in 0..x.len() {
        let v = xp.data[i];
        xp.data[i] = v + eps;
        let fp = objective_value(net, &xp, obj)?;
        xp.data[i] = v - eps;
        let fm = objective_value(net, &xp, obj)?;
        xp.data[i] = v;
        worst = worst.max(rel_err(gin.data[i], (fp - fm) / (2.0 * eps)));
    }
    for p in 0..net.params.len() {
        let Some(g) = &grads.params[p] else { continue };
        for i in 0..net.params[p].len() {
            let v = net.params[p].data[i];
            net.params[p].data[i] = v + eps;
            let fp = objective_value(net, x, obj)?;
            net.params[p].data[i] = v - eps;
            let fm = objective_value(net, x, obj)?;
            net.params[p].data[i] = v;
            worst = worst.max(rel_err(g.data[i], (fp - fm) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Linear probe `sum(w * y)` with fixed random weights.
pub fn linear_probe(shape: &[usize], seed: u64) -> impl Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    move |y: &Tensor<f64>| {
        let v = y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum();
        Ok((v, w.clone()))
    }
}

/// Random input whose values are pairwise separated by at least 0.01 and
/// stay 0.005 away from zero, so max pooling and ReLU are differentiable
/// within the finite-difference step.
pub fn separated_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let half = (n / 2) as f64;
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - half) * 0.02 + 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape, vals)
}

fn primitive_net(kind: &str, c: usize, rng: &mut ChaCha8Rng) -> NetSpec {
    let mut s = NetSpec::new();
    let x = s.input(c);
    let cout = rng.random_range(1..4);
    match kind {
        "conv3x3" => {
            s.conv("c", x, cout, 3, true);
        }
        "conv1x1" => {
            s.conv("c", x, cout, 1, true);
        }
        "batchnorm" => {
            s.batchnorm("bn", x);
        }
        "relu" => {
            s.relu(x);
        }
        "sigmoid" => {
            s.sigmoid(x, (0..c).filter(|ch| ch % 2 == 0).collect());
        }
        "maxpool" => {
            s.maxpool(x);
        }
        "resize-down" => {
            let p = s.maxpool(x);
            // only the resize path carries gradient into x besides the pool
            let r = s.resize_like(x, p);
            s.concat(&[p, r]);
        }
        "resize-up" => {
            let p = s.maxpool(x);
            s.resize_like(p, x);
        }
        "concat" => {
            let a = s.conv("c", x, cout, 1, false);
            s.concat(&[a, x]);
        }
        other => panic!("unknown primitive {other}"),
    }
    s
}

pub const PRIMITIVES: [&str; 9] = [
    "conv3x3",
    "conv1x1",
    "batchnorm",
    "relu",
    "sigmoid",
    "maxpool",
    "resize-down",
    "resize-up",
    "concat",
];

/// Runs `configs` random configurations (batch, channels and spatial size
/// vary) of each primitive; returns the worst relative error per primitive.
pub fn primitive_suite(configs: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (k, kind) in PRIMITIVES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 7919));
        let mut worst = 0f64;
        for cfg in 0..configs {
            let n = rng.random_range(1..3);
            let c = rng.random_range(1..4);
            let h = rng.random_range(3..7);
            let w = rng.random_range(3..7);
            let spec = primitive_net(kind, c, &mut rng);
            let mut net: Network<f64> = Network::new(spec, rng.random());
            // non-trivial batch norm affine parameters
            for p in 0..net.params.len() {
                if net.param_kind(p).learnable() && net.params[p].shape.len() == 1 {
                    for v in &mut net.params[p].data {
                        *v = rng.random_range(0.5..1.5);
                    }
                }
            }
            let x = separated_input(&[n, c, h, w], &mut rng);
            let (oc, oh, ow) = net.spec.infer_shape(c, h, w)?;
            let probe = linear_probe(&[n, oc, oh, ow], seed ^ cfg as u64);
            worst = worst.max(check_network(&mut net, &x, &probe, FD_EPS)?);
        }
        out.push((*kind, worst));
    }
    Ok(out)
}

/// FD checks of the three losses at random points; returns worst relative
/// error per loss.
pub fn loss_suite(configs: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0f64; 3];
    // scalar losses are cheap to evaluate and strongly curved near the
    // clamps, so a finer step is used than for the layer checks
    let eps = 1e-5;
    let fd = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + eps) - f(x - eps)) / (2.0 * eps);
    for _ in 0..configs {
        let p: f64 = rng.random_range(0.05..0.95);
        let params = FocalLossParams::new(rng.random_range(0.1..0.9), rng.random_range(0.0..3.0))?;
        let t = if rng.random::<bool>() {
            ClsTarget::Positive
        } else {
            ClsTarget::Negative
        };
        let g = focal_loss(&[p], &[t], params)?.1[0];
        let num = fd(&|q| focal_loss(&[q], &[t], params).unwrap().0, p);
        worst[0] = worst[0].max(rel_err(g, num));

        let mut d: f64 = rng.random_range(-3.0..3.0);
        if (d.abs() - 1.0).abs() < 2.0 * eps {
            d += 0.1;
        }
        let g = smooth_l1(&[d], &[0.0], &[true])?.1[0];
        let num = fd(&|q| smooth_l1(&[q], &[0.0], &[true]).unwrap().0, d);
        worst[1] = worst[1].max(rel_err(g, num));

        let t: f32 = rng.random();
        let g = bce_loss(&[p], &[t], None)?.1[0];
        let num = fd(&|q| bce_loss(&[q], &[t], None).unwrap().0, p);
        worst[2] = worst[2].max(rel_err(g, num));
    }
    Ok(vec![("focal", worst[0]), ("smooth-l1", worst[1]), ("bce", worst[2])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_fd() {
        for (name, err) in primitive_suite(8, 1).unwrap() {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn conv_fd_on_reference_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = NetSpec::new();
        let x = s.input(2);
        s.conv("c", x, 3, 3, true);
        let mut net: Network<f64> = Network::new(s, 4);
        let input = separated_input(&[1, 2, 5, 5], &mut rng);
        let probe = linear_probe(&[1, 3, 5, 5], 5);
        assert!(check_network(&mut net, &input, &probe, FD_EPS).unwrap() < 1e-4);
    }

    #[test]
    fn batchnorm_fd_on_reference_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = NetSpec::new();
        let x = s.input(3);
        s.batchnorm("bn", x);
        let mut net: Network<f64> = Network::new(s, 7);
        let input = separated_input(&[2, 3, 4, 4], &mut rng);
        let probe = linear_probe(&[2, 3, 4, 4], 8);
        assert!(check_network(&mut net, &input, &probe, FD_EPS).unwrap() < 1e-4);
    }

    #[test]
    fn losses_pass_fd() {
        for (name, err) in loss_suite(100, 2).unwrap() {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
