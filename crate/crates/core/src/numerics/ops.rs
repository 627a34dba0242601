//! Differentiable primitive operations with hand-written vector-Jacobian
//! products. No general autodiff graph: the op set is small and closed.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::parallel;

/// 1x1 convolution: mixes channels at every pixel with no spatial extent.
///
/// `x` is `[..., Cin]`, `w` is `[Cin, Cout]`, `b` is `[Cout]`; the output is
/// `[..., Cout]`.
pub fn pointwise_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (pixels, cin, cout) = conv_dims(x, w, b)?;
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = cout;
    let mut out = Tensor::zeros(&out_shape);

    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    parallel::for_each_row_chunk(out.data_mut(), cout, |first, chunk| {
        for (p, row) in chunk.chunks_mut(cout).enumerate() {
            let xp = &xd[(first + p) * cin..(first + p + 1) * cin];
            row.copy_from_slice(bd);
            for (ci, &xv) in xp.iter().enumerate() {
                let wrow = &wd[ci * cout..(ci + 1) * cout];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    });
    debug_assert!(out.all_finite());
    let _ = pixels;
    Ok(out)
}

/// Pullback of `pointwise_conv`: returns `(dx, dw, db)`.
pub fn pointwise_conv_vjp(x: &Tensor, w: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let cin = *x.shape().last().ok_or_else(|| Error::dimension("pointwise_conv_vjp", "scalar input"))?;
    let cout = w.shape()[1];
    if w.shape()[0] != cin {
        return Err(Error::dimension("pointwise_conv_vjp", "weight rows != input channels"));
    }
    let pixels = x.len() / cin;
    if upstream.len() != pixels * cout {
        return Err(Error::dimension("pointwise_conv_vjp", "upstream shape mismatch"));
    }

    let xd = x.data();
    let wd = w.data();
    let ud = upstream.data();

    let mut dx = Tensor::zeros(x.shape());
    parallel::for_each_row_chunk(dx.data_mut(), cin, |first, chunk| {
        for (p, row) in chunk.chunks_mut(cin).enumerate() {
            let up = &ud[(first + p) * cout..(first + p + 1) * cout];
            for (ci, o) in row.iter_mut().enumerate() {
                let wrow = &wd[ci * cout..(ci + 1) * cout];
                let mut acc = 0.0;
                for (&uv, &wv) in up.iter().zip(wrow) {
                    acc += uv * wv;
                }
                *o = acc;
            }
        }
    });

    let dwb = parallel::map_reduce_rows(pixels, cin * cout + cout, |range, acc| {
        let (dw, db) = acc.split_at_mut(cin * cout);
        for p in range {
            let xp = &xd[p * cin..(p + 1) * cin];
            let up = &ud[p * cout..(p + 1) * cout];
            for (ci, &xv) in xp.iter().enumerate() {
                let row = &mut dw[ci * cout..(ci + 1) * cout];
                for (o, &uv) in row.iter_mut().zip(up) {
                    *o += xv * uv;
                }
            }
            for (o, &uv) in db.iter_mut().zip(up) {
                *o += uv;
            }
        }
    });
    let dw = Tensor::from_vec(w.shape(), dwb[..cin * cout].to_vec())?;
    let db = Tensor::from_vec(&[cout], dwb[cin * cout..].to_vec())?;
    Ok((dx, dw, db))
}

fn conv_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let cin = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dimension("pointwise_conv", "input must have a channel axis"))?;
    if w.shape().len() != 2 {
        return Err(Error::dimension("pointwise_conv", "weights must be [Cin, Cout]"));
    }
    let (wc_in, cout) = (w.shape()[0], w.shape()[1]);
    if wc_in != cin {
        return Err(Error::dimension(
            "pointwise_conv",
            format!("input channels {} != weight rows {}", cin, wc_in),
        ));
    }
    if b.shape() != [cout] {
        return Err(Error::dimension("pointwise_conv", "bias length != output channels"));
    }
    Ok((x.len() / cin, cin, cout))
}

/// Normalize the channel vector at every pixel to zero mean / unit variance
/// (eps-regularized), then apply per-channel gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = norm_dims(x, gain, bias, eps)?;
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    parallel::for_each_row_chunk(out.data_mut(), c, |first, chunk| {
        for (p, row) in chunk.chunks_mut(c).enumerate() {
            let xp = &xd[(first + p) * c..(first + p + 1) * c];
            let (mean, var) = mean_var(xp);
            let inv = 1.0 / (var + eps).sqrt();
            for ((o, &xv), (&g, &b)) in row.iter_mut().zip(xp).zip(gd.iter().zip(bd)) {
                *o = (xv - mean) * inv * g + b;
            }
        }
    });
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Pullback of `layer_norm`: returns `(dx, dgain, dbias)`.
pub fn layer_norm_vjp(x: &Tensor, gain: &Tensor, eps: f64, upstream: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let c = *x.shape().last().unwrap();
    if upstream.shape() != x.shape() {
        return Err(Error::dimension("layer_norm_vjp", "upstream shape mismatch"));
    }
    let pixels = x.len() / c;
    let xd = x.data();
    let gd = gain.data();
    let ud = upstream.data();

    let mut dx = Tensor::zeros(x.shape());
    parallel::for_each_row_chunk(dx.data_mut(), c, |first, chunk| {
        let n = c as f64;
        for (p, row) in chunk.chunks_mut(c).enumerate() {
            let base = (first + p) * c;
            let xp = &xd[base..base + c];
            let up = &ud[base..base + c];
            let (mean, var) = mean_var(xp);
            let inv = 1.0 / (var + eps).sqrt();
            // dxhat = upstream * gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for i in 0..c {
                let dxh = up[i] * gd[i];
                let xh = (xp[i] - mean) * inv;
                s1 += dxh;
                s2 += dxh * xh;
            }
            s1 /= n;
            s2 /= n;
            for i in 0..c {
                let dxh = up[i] * gd[i];
                let xh = (xp[i] - mean) * inv;
                row[i] = inv * (dxh - s1 - xh * s2);
            }
        }
    });

    let dgb = parallel::map_reduce_rows(pixels, 2 * c, |range, acc| {
        let (dg, db) = acc.split_at_mut(c);
        for p in range {
            let xp = &xd[p * c..(p + 1) * c];
            let up = &ud[p * c..(p + 1) * c];
            let (mean, var) = mean_var(xp);
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..c {
                dg[i] += up[i] * (xp[i] - mean) * inv;
                db[i] += up[i];
            }
        }
    });
    let dgain = Tensor::from_vec(&[c], dgb[..c].to_vec())?;
    let dbias = Tensor::from_vec(&[c], dgb[c..].to_vec())?;
    Ok((dx, dgain, dbias))
}

fn norm_dims(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<usize> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dimension("layer_norm", "input must have a channel axis"))?;
    if c == 0 || eps <= 0.0 {
        return Err(Error::dimension("layer_norm", "need C >= 1 and eps > 0"));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::dimension("layer_norm", "gain/bias length != channels"));
    }
    Ok(c)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Exponential linear unit: `x` for positive inputs, `exp(x) - 1` otherwise.
pub fn elu(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    parallel::for_each_row_chunk(out.data_mut(), 1, |first, chunk| {
        for (i, o) in chunk.iter_mut().enumerate() {
            *o = elu_scalar(xd[first + i]);
        }
    });
    out
}

/// Pullback of `elu`.
pub fn elu_vjp(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if upstream.shape() != x.shape() {
        return Err(Error::dimension("elu_vjp", "upstream shape mismatch"));
    }
    let mut dx = Tensor::zeros(x.shape());
    let xd = x.data();
    let ud = upstream.data();
    parallel::for_each_row_chunk(dx.data_mut(), 1, |first, chunk| {
        for (i, o) in chunk.iter_mut().enumerate() {
            let v = xd[first + i];
            let d = if v > 0.0 { 1.0 } else { v.exp() };
            *o = ud[first + i] * d;
        }
    });
    Ok(dx)
}

pub fn elu_scalar(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        // exp(v) - 1 without cancellation near zero
        v.exp_m1()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
