//! Small trainable layers composed by the detector: pointwise convs with
//! their parameters, layer norm, horizontal-only pooling/upsampling, a
//! 3x3x3 convolution over pooled box grids, and a fully connected layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ops, Param, Tensor};
use crate::rcd::he_init;

#[derive(Debug, Clone)]
pub struct PConvLayer {
    pub w: Param,
    pub b: Param,
}

impl PConvLayer {
    pub fn init(cin: usize, cout: usize, rng: &mut impl Rng) -> PConvLayer {
        PConvLayer { w: Param::new(he_init(&[cin, cout], rng)), b: Param::new(Tensor::zeros(&[cout])) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::pointwise_conv(x, &self.w.value, &self.b.value)
    }

    /// Returns dx and accumulates dw/db into the layer's grads.
    pub fn vjp_accumulate(&mut self, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let (dx, dw, db) = ops::pointwise_conv_vjp(x, &self.w.value, upstream)?;
        add_into(&mut self.w.grad, &dw);
        add_into(&mut self.b.grad, &db);
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gain: Param,
    pub bias: Param,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn init(channels: usize) -> LayerNormLayer {
        LayerNormLayer {
            gain: Param::new(Tensor::filled(&[channels], 1.0)),
            bias: Param::new(Tensor::zeros(&[channels])),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gain.value, &self.bias.value, self.eps)
    }

    pub fn vjp_accumulate(&mut self, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let (dx, dg, db) = ops::layer_norm_vjp(x, &self.gain.value, self.eps, upstream)?;
        add_into(&mut self.gain.grad, &dg);
        add_into(&mut self.bias.grad, &db);
        Ok(dx)
    }
}

pub fn add_into(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Horizontal max-pool with stride 2: `[H, W, C] -> [H, W/2, C]`.
/// Ties pick the left column, so the gradient routing is deterministic.
pub fn hpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<u8>)> {
    let shape = x.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if w % 2 != 0 {
        return Err(Error::dimension("hpool2", "width must be even"));
    }
    let mut out = Tensor::zeros(&[h, w / 2, c]);
    let mut argmax = vec![0u8; h * (w / 2) * c];
    let xd = x.data();
    let od = out.data_mut();
    for row in 0..h {
        for oc in 0..w / 2 {
            let left = (row * w + 2 * oc) * c;
            let right = left + c;
            let obase = (row * (w / 2) + oc) * c;
            for ch in 0..c {
                let (lv, rv) = (xd[left + ch], xd[right + ch]);
                if rv > lv {
                    od[obase + ch] = rv;
                    argmax[obase + ch] = 1;
                } else {
                    od[obase + ch] = lv;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn hpool2_vjp(upstream: &Tensor, argmax: &[u8], in_shape: &[usize]) -> Tensor {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let mut dx = Tensor::zeros(in_shape);
    let ud = upstream.data();
    let dd = dx.data_mut();
    for row in 0..h {
        for oc in 0..w / 2 {
            let obase = (row * (w / 2) + oc) * c;
            let left = (row * w + 2 * oc) * c;
            for ch in 0..c {
                let pick = argmax[obase + ch] as usize;
                dd[left + pick * c + ch] += ud[obase + ch];
            }
        }
    }
    dx
}

/// Nearest-neighbor horizontal upsample by `k`: `[H, W, C] -> [H, W*k, C]`.
pub fn hupsample_forward(x: &Tensor, k: usize) -> Tensor {
    let shape = x.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(&[h, w * k, c]);
    let xd = x.data();
    let od = out.data_mut();
    for row in 0..h {
        for col in 0..w {
            let src = (row * w + col) * c;
            for rep in 0..k {
                let dst = (row * w * k + col * k + rep) * c;
                od[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    out
}

pub fn hupsample_vjp(upstream: &Tensor, k: usize) -> Tensor {
    let shape = upstream.shape();
    let (h, wk, c) = (shape[0], shape[1], shape[2]);
    let w = wk / k;
    let mut dx = Tensor::zeros(&[h, w, c]);
    let ud = upstream.data();
    let dd = dx.data_mut();
    for row in 0..h {
        for col in 0..w {
            let dst = (row * w + col) * c;
            for rep in 0..k {
                let src = (row * wk + col * k + rep) * c;
                for ch in 0..c {
                    dd[dst + ch] += ud[src + ch];
                }
            }
        }
    }
    dx
}

/// Horizontal max-pool of a range plane by `k`; invalid pixels carry range 0
/// and lose to any return, so pooled pixels favor the farthest valid return.
pub fn hpool_range(range: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let wo = w / k;
    let mut out = vec![0.0; h * wo];
    for row in 0..h {
        for oc in 0..wo {
            let mut m = 0.0f64;
            for i in 0..k {
                m = m.max(range[row * w + oc * k + i]);
            }
            out[row * wo + oc] = m;
        }
    }
    out
}

/// 3x3x3 convolution over a dense `[d0, d1, d2, Cin]` grid with zero padding.
/// Cells whose entire 27-cell neighborhood is empty produce just the bias,
/// so the cost scales with occupancy rather than grid volume.
#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    /// `[27 * Cin, Cout]`: tap-major ((dz*3+dy)*3+dx order), then channel.
    pub w: Param,
    pub b: Param,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3dLayer {
    pub fn init(cin: usize, cout: usize, rng: &mut impl Rng) -> Conv3dLayer {
        Conv3dLayer {
            w: Param::new(he_init(&[27 * cin, cout], rng)),
            b: Param::new(Tensor::zeros(&[cout])),
            cin,
            cout,
        }
    }

    pub fn forward(&self, grid: &[f64], dims: [usize; 3], occupied: &[usize]) -> Vec<f64> {
        let cells = dims[0] * dims[1] * dims[2];
        let mut out = vec![0.0; cells * self.cout];
        let bd = self.b.value.data();
        for cell in 0..cells {
            out[cell * self.cout..(cell + 1) * self.cout].copy_from_slice(bd);
        }
        let wd = self.w.value.data();
        // scatter each occupied input cell into the outputs it influences
        for &cell in occupied {
            let (c0, rem) = (cell / (dims[1] * dims[2]), cell % (dims[1] * dims[2]));
            let (c1, c2) = (rem / dims[2], rem % dims[2]);
            let xin = &grid[cell * self.cin..(cell + 1) * self.cin];
            for (t0, o0) in neighbor_range(c0, dims[0]) {
                for (t1, o1) in neighbor_range(c1, dims[1]) {
                    for (t2, o2) in neighbor_range(c2, dims[2]) {
                        let tap = (t0 * 3 + t1) * 3 + t2;
                        let ocell = (o0 * dims[1] + o1) * dims[2] + o2;
                        let obase = ocell * self.cout;
                        for (ci, &xv) in xin.iter().enumerate() {
                            let wrow = &wd[(tap * self.cin + ci) * self.cout
                                ..(tap * self.cin + ci + 1) * self.cout];
                            for (co, &wv) in wrow.iter().enumerate() {
                                out[obase + co] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the gradient for the input grid and accumulates weight/bias
    /// gradients.
    pub fn vjp_accumulate(
        &mut self,
        grid: &[f64],
        dims: [usize; 3],
        occupied: &[usize],
        upstream: &[f64],
    ) -> Vec<f64> {
        let cells = dims[0] * dims[1] * dims[2];
        let mut dgrid = vec![0.0; cells * self.cin];
        let wd = self.w.value.data();
        let dwd = self.w.grad.data_mut();
        for &cell in occupied {
            let (c0, rem) = (cell / (dims[1] * dims[2]), cell % (dims[1] * dims[2]));
            let (c1, c2) = (rem / dims[2], rem % dims[2]);
            let xin = &grid[cell * self.cin..(cell + 1) * self.cin];
            let dxin_base = cell * self.cin;
            for (t0, o0) in neighbor_range(c0, dims[0]) {
                for (t1, o1) in neighbor_range(c1, dims[1]) {
                    for (t2, o2) in neighbor_range(c2, dims[2]) {
                        let tap = (t0 * 3 + t1) * 3 + t2;
                        let ocell = (o0 * dims[1] + o1) * dims[2] + o2;
                        let up = &upstream[ocell * self.cout..(ocell + 1) * self.cout];
                        for ci in 0..self.cin {
                            let wbase = (tap * self.cin + ci) * self.cout;
                            let mut acc = 0.0;
                            for (co, &uv) in up.iter().enumerate() {
                                acc += uv * wd[wbase + co];
                                dwd[wbase + co] += xin[ci] * uv;
                            }
                            dgrid[dxin_base + ci] += acc;
                        }
                    }
                }
            }
        }
        let dbd = self.b.grad.data_mut();
        for cell in 0..cells {
            let up = &upstream[cell * self.cout..(cell + 1) * self.cout];
            for (co, &uv) in up.iter().enumerate() {
                dbd[co] += uv;
            }
        }
        dgrid
    }
}

/// (kernel tap index, neighbor output coordinate) pairs for one axis: the
/// input cell at `c` contributes to outputs `c-1`, `c`, `c+1` through taps
/// 2, 1, 0 respectively (a correlation-style kernel).
fn neighbor_range(c: usize, dim: usize) -> impl Iterator<Item = (usize, usize)> {
    let lo = if c == 0 { 1 } else { 0 };
    let hi = if c + 1 == dim { 1 } else { 2 };
    (lo..=hi).map(move |t| (2 - t, c + t - 1))
}

/// 2x2x2 max-pool with stride 2 for even grid dims; returns output plus the
/// argmax child index per output value.
pub fn maxpool3d_forward(
    grid: &[f64],
    dims: [usize; 3],
    channels: usize,
) -> (Vec<f64>, Vec<u8>, [usize; 3]) {
    let od = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let cells = od[0] * od[1] * od[2];
    let mut out = vec![f64::NEG_INFINITY; cells * channels];
    let mut argmax = vec![0u8; cells * channels];
    for z0 in 0..od[0] {
        for y0 in 0..od[1] {
            for x0 in 0..od[2] {
                let ocell = (z0 * od[1] + y0) * od[2] + x0;
                for child in 0..8usize {
                    let (dz, dy, dx) = (child >> 2 & 1, child >> 1 & 1, child & 1);
                    let icell = ((2 * z0 + dz) * dims[1] + 2 * y0 + dy) * dims[2] + 2 * x0 + dx;
                    for ch in 0..channels {
                        let v = grid[icell * channels + ch];
                        if v > out[ocell * channels + ch] {
                            out[ocell * channels + ch] = v;
                            argmax[ocell * channels + ch] = child as u8;
                        }
                    }
                }
            }
        }
    }
    (out, argmax, od)
}

pub fn maxpool3d_vjp(upstream: &[f64], argmax: &[u8], dims: [usize; 3], channels: usize) -> Vec<f64> {
    let od = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let mut dgrid = vec![0.0; dims[0] * dims[1] * dims[2] * channels];
    for z0 in 0..od[0] {
        for y0 in 0..od[1] {
            for x0 in 0..od[2] {
                let ocell = (z0 * od[1] + y0) * od[2] + x0;
                for ch in 0..channels {
                    let child = argmax[ocell * channels + ch] as usize;
                    let (dz, dy, dx) = (child >> 2 & 1, child >> 1 & 1, child & 1);
                    let icell = ((2 * z0 + dz) * dims[1] + 2 * y0 + dy) * dims[2] + 2 * x0 + dx;
                    dgrid[icell * channels + ch] += upstream[ocell * channels + ch];
                }
            }
        }
    }
    dgrid
}

/// Dense layer over a flat vector.
#[derive(Debug, Clone)]
pub struct FcLayer {
    pub w: Param,
    pub b: Param,
}

impl FcLayer {
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> FcLayer {
        FcLayer { w: Param::new(he_init(&[input, output], rng)), b: Param::new(Tensor::zeros(&[output])) }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.w.value.shape()[0], self.w.value.shape()[1]);
        debug_assert_eq!(x.len(), n_in);
        let wd = self.w.value.data();
        let mut out = self.b.value.data().to_vec();
        for (i, &xv) in x.iter().enumerate() {
            let wrow = &wd[i * n_out..(i + 1) * n_out];
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
        out
    }

    pub fn vjp_accumulate(&mut self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.w.value.shape()[0], self.w.value.shape()[1]);
        let wd = self.w.value.data();
        let dwd = self.w.grad.data_mut();
        let mut dx = vec![0.0; n_in];
        for i in 0..n_in {
            let wrow = &wd[i * n_out..(i + 1) * n_out];
            let dwrow = &mut dwd[i * n_out..(i + 1) * n_out];
            let mut acc = 0.0;
            for ((&uv, &wv), dw) in upstream.iter().zip(wrow).zip(dwrow.iter_mut()) {
                acc += uv * wv;
                *dw += x[i] * uv;
            }
            dx[i] = acc;
        }
        for (db, &uv) in self.b.grad.data_mut().iter_mut().zip(upstream) {
            *db += uv;
        }
        dx
    }
}

/// Elementwise ELU over a flat buffer, with its pullback.
pub fn elu_flat(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| ops::elu_scalar(v)).collect()
}

pub fn elu_flat_vjp(x: &[f64], upstream: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(upstream)
        .map(|(&v, &u)| if v > 0.0 { u } else { u * v.exp() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hpool2_picks_max_and_routes_gradient() {
        let x = Tensor::from_vec(&[1, 4, 1], vec![1.0, 5.0, 7.0, 2.0]).unwrap();
        let (y, argmax) = hpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let up = Tensor::from_vec(&[1, 2, 1], vec![10.0, 20.0]).unwrap();
        let dx = hpool2_vjp(&up, &argmax, &[1, 4, 1]);
        assert_eq!(dx.data(), &[0.0, 10.0, 20.0, 0.0]);
    }

    #[test]
    fn upsample_repeats_and_vjp_sums() {
        let x = Tensor::from_vec(&[1, 2, 1], vec![3.0, 4.0]).unwrap();
        let y = hupsample_forward(&x, 2);
        assert_eq!(y.data(), &[3.0, 3.0, 4.0, 4.0]);
        let up = Tensor::from_vec(&[1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dx = hupsample_vjp(&up, 2);
        assert_eq!(dx.data(), &[3.0, 7.0]);
    }

    #[test]
    fn range_pool_prefers_the_farthest_valid_return() {
        let pooled = hpool_range(&[0.0, 12.0, 7.0, 5.0], 1, 4, 2);
        assert_eq!(pooled, vec![12.0, 7.0]);
    }

    #[test]
    fn conv3d_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [4, 4, 2];
        let (cin, cout) = (3, 2);
        let layer = Conv3dLayer::init(cin, cout, &mut rng);
        let cells = dims[0] * dims[1] * dims[2];
        use rand::Rng;
        let grid: Vec<f64> = (0..cells * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let occupied: Vec<usize> = (0..cells).collect();
        let out = layer.forward(&grid, dims, &occupied);

        // plain quintuple-loop reference
        let wd = layer.w.value.data();
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    for co in 0..cout {
                        let mut acc = layer.b.value.data()[co];
                        for tz in 0..3usize {
                            for ty in 0..3usize {
                                for tx in 0..3usize {
                                    let iz = z as isize + tz as isize - 1;
                                    let iy = y as isize + ty as isize - 1;
                                    let ix = x as isize + tx as isize - 1;
                                    if iz < 0 || iy < 0 || ix < 0 {
                                        continue;
                                    }
                                    let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                    if iz >= dims[0] || iy >= dims[1] || ix >= dims[2] {
                                        continue;
                                    }
                                    let icell = (iz * dims[1] + iy) * dims[2] + ix;
                                    let tap = (tz * 3 + ty) * 3 + tx;
                                    for ci in 0..cin {
                                        acc += grid[icell * cin + ci]
                                            * wd[(tap * cin + ci) * cout + co];
                                    }
                                }
                            }
                        }
                        let ocell = (z * dims[1] + y) * dims[2] + x;
                        let got = out[ocell * cout + co];
                        assert!((got - acc).abs() < 1e-10, "{} vs {}", got, acc);
                    }
                }
            }
        }
    }

    #[test]
    fn conv3d_sparse_occupancy_only_biases_elsewhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = [4, 4, 4];
        let layer = Conv3dLayer::init(2, 3, &mut rng);
        let cells = 64;
        let mut grid = vec![0.0; cells * 2];
        grid[0] = 1.5; // only cell 0 occupied
        grid[1] = -0.5;
        let out = layer.forward(&grid, dims, &[0]);
        // far corner sees only the bias
        let far = (3 * 4 + 3) * 4 + 3;
        for co in 0..3 {
            assert_eq!(out[far * 3 + co], layer.b.value.data()[co]);
        }
    }

    #[test]
    fn maxpool3d_routes_to_argmax() {
        let dims = [2, 2, 2];
        let mut grid = vec![0.0; 8];
        grid[5] = 9.0; // child (dz=1, dy=0, dx=1)
        let (out, argmax, od) = maxpool3d_forward(&grid, dims, 1);
        assert_eq!(od, [1, 1, 1]);
        assert_eq!(out, vec![9.0]);
        let dg = maxpool3d_vjp(&[2.0], &argmax, dims, 1);
        assert_eq!(dg[5], 2.0);
        assert_eq!(dg.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn composed_layer_gradients_check_out() {
        use crate::numerics::gradcheck::{grad_check, Differentiable};
        // conv3d -> elu -> pool -> fc as a flat function of all inputs
        struct Net {
            conv: Conv3dLayer,
            fc: FcLayer,
            dims: [usize; 3],
        }
        impl Net {
            fn sizes(&self) -> (usize, usize, usize) {
                let cells = self.dims[0] * self.dims[1] * self.dims[2];
                let cw = self.conv.w.value.len() + self.conv.b.value.len();
                let fw = self.fc.w.value.len() + self.fc.b.value.len();
                (cells * self.conv.cin, cw, fw)
            }
            fn run(&mut self, x: &[f64], upstream: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
                let (nx, _, _) = self.sizes();
                let grid = &x[..nx];
                let mut off = nx;
                for p in [&mut self.conv.w, &mut self.conv.b, &mut self.fc.w, &mut self.fc.b] {
                    let n = p.value.len();
                    p.value.data_mut().copy_from_slice(&x[off..off + n]);
                    p.zero_grad();
                    off += n;
                }
                let occupied: Vec<usize> = (0..self.dims[0] * self.dims[1] * self.dims[2]).collect();
                let conv = self.conv.forward(grid, self.dims, &occupied);
                let act = elu_flat(&conv);
                let (pooled, argmax, _) = maxpool3d_forward(&act, self.dims, self.conv.cout);
                let out = self.fc.forward(&pooled);
                let Some(up) = upstream else { return (out, Vec::new()) };
                let dpooled = self.fc.vjp_accumulate(&pooled, up);
                let dact = maxpool3d_vjp(&dpooled, &argmax, self.dims, self.conv.cout);
                let dconv = elu_flat_vjp(&conv, &dact);
                let dgrid = self.conv.vjp_accumulate(grid, self.dims, &occupied, &dconv);
                let mut flat = dgrid;
                for p in [&self.conv.w, &self.conv.b, &self.fc.w, &self.fc.b] {
                    flat.extend(p.grad.data());
                }
                (out, flat)
            }
        }
        struct NetFn(std::cell::RefCell<Net>);
        impl Differentiable for NetFn {
            fn input_len(&self) -> usize {
                let (a, b, c) = self.0.borrow().sizes();
                a + b + c
            }
            fn output_len(&self) -> usize {
                self.0.borrow().fc.b.value.len()
            }
            fn eval(&self, x: &[f64]) -> Vec<f64> {
                self.0.borrow_mut().run(x, None).0
            }
            fn vjp(&self, x: &[f64], up: &[f64]) -> Vec<f64> {
                self.0.borrow_mut().run(x, Some(up)).1
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = [2, 2, 4];
        let conv = Conv3dLayer::init(2, 3, &mut rng);
        let fc = FcLayer::init((dims[0] / 2) * (dims[1] / 2) * (dims[2] / 2) * 3, 5, &mut rng);
        let net = NetFn(std::cell::RefCell::new(Net { conv, fc, dims }));
        use rand::Rng;
        let x: Vec<f64> = (0..net.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(&net, &x, 11, 1e-5).unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }
}
