use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

fn shape_err(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

/// Returns `NonFinite` when `t` holds NaN/Inf.
pub fn check_finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Unfolds one `c x h x w` image for a stride-1 `k x k` convolution with
/// `k / 2` zero padding into a `(c k k) x (h w)` matrix.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // valid output columns: 0 <= x + dx < w
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    out[..x0.min(w)].fill(T::ZERO);
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                    out[x1.max(x0).min(w)..].fill(T::ZERO);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image gradient.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let ddx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ddx).max(0) as usize;
                    let x1 = (w as isize - ddx).min(w as isize).max(0) as usize;
                    if x1 <= x0 {
                        continue;
                    }
                    let s0 = (x0 as isize + ddx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, wd) = x.dims4();
    if w.shape.len() != 4 || w.shape[1] != c || w.shape[2] != w.shape[3] || w.shape[2] % 2 == 0 {
        return Err(shape_err(format!(
            "conv weight {:?} incompatible with input {:?}",
            w.shape, x.shape
        )));
    }
    Ok((n, c, h, wd, w.shape[0], w.shape[2]))
}

/// Stride-1 "same" convolution. `w` is `[out, in, k, k]` with odd `k`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, c, h, wd, cout, k) = conv_dims(x, w)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(shape_err(format!("conv bias {:?} for {cout} outputs", b.shape)));
        }
    }
    let hw = h * wd;
    let ckk = c * k * k;
    let items: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x.data[i * c * hw..(i + 1) * c * hw];
            let mut out = vec![T::ZERO; cout * hw];
            if let Some(b) = bias {
                for (o, row) in out.chunks_exact_mut(hw).enumerate() {
                    row.fill(b.data[o]);
                }
            }
            let beta = if bias.is_some() { T::ONE } else { T::ZERO };
            let mut cols_buf;
            let cols: &[T] = if k == 1 {
                xi
            } else {
                cols_buf = vec![T::ZERO; ckk * hw];
                im2col(xi, c, h, wd, k, &mut cols_buf);
                &cols_buf
            };
            unsafe {
                T::gemm(
                    cout,
                    ckk,
                    hw,
                    T::ONE,
                    w.data.as_ptr(),
                    ckk as isize,
                    1,
                    cols.as_ptr(),
                    hw as isize,
                    1,
                    beta,
                    out.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            out
        })
        .collect();
    let mut data = Vec::with_capacity(n * cout * hw);
    for item in items {
        data.extend_from_slice(&item);
    }
    let y = Tensor::from_vec(&[n, cout, h, wd], data);
    check_finite(&y, "conv2d")?;
    Ok(y)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Result<ConvGrads<T>> {
    let (n, c, h, wd, cout, k) = conv_dims(x, w)?;
    if dy.shape != [n, cout, h, wd] {
        return Err(shape_err(format!("conv upstream {:?} vs output [{n},{cout},{h},{wd}]", dy.shape)));
    }
    let hw = h * wd;
    let ckk = c * k * k;
    let per_item: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x.data[i * c * hw..(i + 1) * c * hw];
            let dyi = &dy.data[i * cout * hw..(i + 1) * cout * hw];
            let mut cols_buf;
            let cols: &[T] = if k == 1 {
                xi
            } else {
                cols_buf = vec![T::ZERO; ckk * hw];
                im2col(xi, c, h, wd, k, &mut cols_buf);
                &cols_buf
            };
            let mut dw = vec![T::ZERO; cout * ckk];
            unsafe {
                // dW = dY cols^T
                T::gemm(
                    cout,
                    hw,
                    ckk,
                    T::ONE,
                    dyi.as_ptr(),
                    hw as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    hw as isize,
                    T::ZERO,
                    dw.as_mut_ptr(),
                    ckk as isize,
                    1,
                );
            }
            let db: Vec<T> = dyi
                .chunks_exact(hw)
                .map(|row| T::from_f64(row.iter().map(|v| v.to_f64()).sum()))
                .collect();
            let dx = need_dx.then(|| {
                let mut dcols = vec![T::ZERO; ckk * hw];
                unsafe {
                    // dcols = W^T dY
                    T::gemm(
                        ckk,
                        cout,
                        hw,
                        T::ONE,
                        w.data.as_ptr(),
                        1,
                        ckk as isize,
                        dyi.as_ptr(),
                        hw as isize,
                        1,
                        T::ZERO,
                        dcols.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
                if k == 1 {
                    dcols
                } else {
                    let mut dxi = vec![T::ZERO; c * hw];
                    col2im(&dcols, c, h, wd, k, &mut dxi);
                    dxi
                }
            });
            (dw, db, dx)
        })
        .collect();
    // fixed-order reduction over batch items
    let mut dw = Tensor::zeros(&w.shape);
    let mut db = Tensor::zeros(&[cout]);
    let mut dx_data = if need_dx { Vec::with_capacity(x.len()) } else { Vec::new() };
    for (dwi, dbi, dxi) in per_item {
        for (a, b) in dw.data.iter_mut().zip(&dwi) {
            *a += *b;
        }
        for (a, b) in db.data.iter_mut().zip(&dbi) {
            *a += *b;
        }
        if let Some(d) = dxi {
            dx_data.extend_from_slice(&d);
        }
    }
    let dx = need_dx.then(|| Tensor::from_vec(&x.shape, dx_data));
    Ok(ConvGrads { dx, dw, db })
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect(),
    }
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: y.shape.clone(),
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
            .collect(),
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    let x = v.to_f64();
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    T::from_f64(s)
}

/// Applies the logistic function to the listed channels; others pass through.
pub fn sigmoid_forward<T: Real>(x: &Tensor<T>, channels: &[usize]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4();
    if let Some(&bad) = channels.iter().find(|&&ch| ch >= c) {
        return Err(shape_err(format!("sigmoid channel {bad} of {c}")));
    }
    let mut y = x.clone();
    let hw = h * w;
    for i in 0..n {
        for &ch in channels {
            let off = (i * c + ch) * hw;
            for v in &mut y.data[off..off + hw] {
                *v = sigmoid(*v);
            }
        }
    }
    Ok(y)
}

pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, channels: &[usize]) -> Tensor<T> {
    let (n, c, h, w) = y.dims4();
    let hw = h * w;
    let mut dx = dy.clone();
    for i in 0..n {
        for &ch in channels {
            let off = (i * c + ch) * hw;
            for (g, &p) in dx.data[off..off + hw].iter_mut().zip(&y.data[off..off + hw]) {
                *g *= p * (T::ONE - p);
            }
        }
    }
    dx
}

/// Output extent of the 3x3 / stride 2 / pad 1 max pool.
pub fn pool_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

/// 3x3 max pooling with stride 2 and one pixel of (ignored) padding.
/// Returns the output and the flat input index of each maximum.
pub fn maxpool_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (pool_out(h), pool_out(w));
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let y0 = (2 * oy).saturating_sub(1);
            let y1 = (2 * oy + 2).min(h);
            for ox in 0..ow {
                let x0 = (2 * ox).saturating_sub(1);
                let x1 = (2 * ox + 2).min(w);
                let mut best = y0 * w + x0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let idx = yy * w + xx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                y.data[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Real>(in_shape: &[usize], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (_, _, oh, ow) = dy.dims4();
    let mut dx = Tensor::zeros(in_shape);
    for p in 0..n * c {
        for o in 0..oh * ow {
            let src = p * oh * ow + o;
            dx.data[p * h * w + arg[src] as usize] += dy.data[src];
        }
    }
    dx
}

/// Source index pair and weight along one axis, align-corners = false:
/// `src = (dst + 0.5) * in / out - 0.5`, clamped at the low edge.
fn resize_taps(inp: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `out_h x out_w` (align-corners = false).
pub fn resize_bilinear_forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut y = Tensor::zeros(&[n, c, out_h, out_w]);
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = (1.0 - ly) * ((1.0 - lx) * src[y0 * w + x0].to_f64() + lx * src[y0 * w + x1].to_f64())
                    + ly * ((1.0 - lx) * src[y1 * w + x0].to_f64() + lx * src[y1 * w + x1].to_f64());
                dst[oy * out_w + ox] = T::from_f64(v);
            }
        }
    }
    y
}

pub fn resize_bilinear_backward<T: Real>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (_, _, out_h, out_w) = dy.dims4();
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut acc = vec![0f64; h * w];
    let mut dx = Tensor::zeros(in_shape);
    for p in 0..n * c {
        acc.fill(0.0);
        let g = &dy.data[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox].to_f64();
                acc[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                acc[y0 * w + x1] += (1.0 - ly) * lx * v;
                acc[y1 * w + x0] += ly * (1.0 - lx) * v;
                acc[y1 * w + x1] += ly * lx * v;
            }
        }
        for (d, a) in dx.data[p * h * w..(p + 1) * h * w].iter_mut().zip(&acc) {
            *d = T::from_f64(*a);
        }
    }
    dx
}

/// Concatenates along the channel axis.
pub fn concat_forward<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (n, _, h, w) = xs[0].dims4();
    for x in xs {
        let (n2, _, h2, w2) = x.dims4();
        if (n2, h2, w2) != (n, h, w) {
            return Err(shape_err(format!("concat {:?} with {:?}", xs[0].shape, x.shape)));
        }
    }
    let ctot: usize = xs.iter().map(|x| x.shape[1]).sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * ctot * hw);
    for i in 0..n {
        for x in xs {
            let c = x.shape[1];
            data.extend_from_slice(&x.data[i * c * hw..(i + 1) * c * hw]);
        }
    }
    Ok(Tensor::from_vec(&[n, ctot, h, w], data))
}

pub fn concat_backward<T: Real>(channels: &[usize], dy: &Tensor<T>) -> Vec<Tensor<T>> {
    let (n, ctot, h, w) = dy.dims4();
    let hw = h * w;
    let mut outs: Vec<Vec<T>> = channels.iter().map(|c| Vec::with_capacity(n * c * hw)).collect();
    for i in 0..n {
        let mut off = i * ctot * hw;
        for (k, &c) in channels.iter().enumerate() {
            outs[k].extend_from_slice(&dy.data[off..off + c * hw]);
            off += c * hw;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec(&[n, c, h, w], d))
        .collect()
}

/// Saved state of a training-mode batch-norm forward pass.
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization with batch statistics over `(N, H, W)`.
pub fn batchnorm_train_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, BnCache<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            let off = (i * c + ch) * hw;
            s += x.data[off..off + hw].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for i in 0..n {
            let off = (i * c + ch) * hw;
            ss += x.data[off..off + hw]
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(&x.shape);
    let mut y = Tensor::zeros(&x.shape);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let g = gamma.data[ch].to_f64();
            let b = beta.data[ch].to_f64();
            for j in off..off + hw {
                let xh = (x.data[j].to_f64() - mean[ch]) * inv_std[ch];
                xhat.data[j] = T::from_f64(xh);
                y.data[j] = T::from_f64(g * xh + b);
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Batch normalization with stored running statistics.
pub fn batchnorm_eval_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut y = Tensor::zeros(&x.shape);
    for ch in 0..c {
        let scale = gamma.data[ch].to_f64() / (running_var.data[ch].to_f64() + eps).sqrt();
        let shift = beta.data[ch].to_f64() - running_mean.data[ch].to_f64() * scale;
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                y.data[j] = T::from_f64(x.data[j].to_f64() * scale + shift);
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)` for the training-mode forward pass.
pub fn batchnorm_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = dy.dims4();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(&dy.shape);
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                let g = dy.data[j].to_f64();
                sum_dy += g;
                sum_dy_xhat += g * cache.xhat.data[j].to_f64();
            }
        }
        dgamma.data[ch] = T::from_f64(sum_dy_xhat);
        dbeta.data[ch] = T::from_f64(sum_dy);
        let k = gamma.data[ch].to_f64() * cache.inv_std[ch] / m;
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                let g = dy.data[j].to_f64();
                let xh = cache.xhat.data[j].to_f64();
                dx.data[j] = T::from_f64(k * (m * g - sum_dy - xh * sum_dy_xhat));
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = random(&[2, 3, 5, 4], 1);
        let mut w = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            w.data[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        assert_eq!(conv2d_forward(&x, &w, None).unwrap(), x);
        let mut w1 = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w1.data[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d_forward(&x, &w1, None).unwrap(), x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = random(&[1, 2, 4, 5], 2);
        let w = random(&[3, 2, 3, 3], 3);
        let b = random(&[3], 4);
        let y = conv2d_forward(&x, &w, Some(&b)).unwrap();
        for o in 0..3 {
            for yy in 0..4 {
                for xx in 0..5 {
                    let mut s = b.data[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sy < 4 && sx >= 0 && sx < 5 {
                                    s += w.data[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x.data[(c * 4 + sy as usize) * 5 + sx as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data[(o * 4 + yy) * 5 + xx] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = random(&[1, 2, 4, 4], 0);
        let w = random(&[3, 4, 3, 3], 0);
        assert!(matches!(conv2d_forward(&x, &w, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn maxpool_shapes() {
        assert_eq!((pool_out(176), pool_out(200)), (88, 100));
        assert_eq!((pool_out(88), pool_out(44), pool_out(5)), (44, 22, 3));
        let x: Tensor<f32> = Tensor::zeros(&[1, 1, 176, 200]);
        let (y, _) = maxpool_forward(&x);
        assert_eq!(y.shape, vec![1, 1, 88, 100]);
    }

    #[test]
    fn bilinear_upsample_preserves_mean() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let y = resize_bilinear_forward(&x, 4, 4);
        let mean: f64 = y.data.iter().sum::<f64>() / 16.0;
        assert!((mean - 1.5).abs() < 1e-12);
        // align-corners=false: first output row samples src row 0 clamped
        assert_eq!(y.data[0], 0.0);
        assert!((y.data[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn bilinear_halving_is_box_average() {
        let x = random(&[1, 1, 4, 6], 9);
        let y = resize_bilinear_forward(&x, 2, 3);
        let avg = (x.data[0] + x.data[1] + x.data[6] + x.data[7]) / 4.0;
        assert!((y.data[0] - avg).abs() < 1e-12);
    }

    #[test]
    fn relu_gradient() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![-1.0, 2.0]);
        let y = relu_forward(&x);
        let g = relu_backward(&y, &Tensor::from_vec(&[1, 1, 1, 2], vec![5.0, 7.0]));
        assert_eq!(g.data, vec![0.0, 7.0]);
    }

    #[test]
    fn batchnorm_eval_inverts() {
        let x = random(&[2, 3, 4, 4], 5);
        let gamma = Tensor::from_vec(&[3], vec![1.5, -0.5, 2.0]);
        let beta = Tensor::from_vec(&[3], vec![0.1, 0.2, -0.3]);
        let rm = Tensor::from_vec(&[3], vec![0.3, -0.1, 0.0]);
        let rv = Tensor::from_vec(&[3], vec![0.5, 2.0, 1.0]);
        let y = batchnorm_eval_forward(&x, &gamma, &beta, &rm, &rv, 1e-5);
        for i in 0..2 {
            for c in 0..3 {
                let scale = gamma.data[c] / (rv.data[c] + 1e-5).sqrt();
                for j in 0..16 {
                    let idx = (i * 3 + c) * 16 + j;
                    let back = (y.data[idx] - beta.data[c]) / scale + rm.data[c];
                    assert!((back - x.data[idx]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv_is_linear() {
        let x = random(&[1, 2, 5, 5], 11).cast::<f32>();
        let z = random(&[1, 2, 5, 5], 12).cast::<f32>();
        let w = random(&[2, 2, 3, 3], 13).cast::<f32>();
        let y1 = conv2d_forward(&x, &w, None).unwrap();
        let mut x3 = x.clone();
        x3.scale(3.0);
        let y3 = conv2d_forward(&x3, &w, None).unwrap();
        let mut xz = x.clone();
        xz.add_assign(&z);
        let yxz = conv2d_forward(&xz, &w, None).unwrap();
        let yz = conv2d_forward(&z, &w, None).unwrap();
        for i in 0..y1.len() {
            let tol = 1e-6 * (1.0 + y1.data[i].abs().max(yz.data[i].abs()));
            assert!((y3.data[i] - 3.0 * y1.data[i]).abs() <= 3.0 * tol);
            assert!((yxz.data[i] - y1.data[i] - yz.data[i]).abs() <= 2.0 * tol);
        }
    }
}
