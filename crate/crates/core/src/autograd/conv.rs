//! Channels-last convolution, pooling and trilinear resampling.
//!
//! 2D convolutions run through the 3D kernel with a unit depth axis.

use super::Var;
use crate::tensor::Tensor;

/// Kernel, stride and zero padding per spatial axis `(D, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Cubic kernel of odd size `k`, stride 1, shape-preserving padding.
    pub fn same3d(k: usize) -> Self {
        Self { kernel: [k; 3], stride: [1; 3], pad: [k / 2; 3] }
    }

    /// Square 2D kernel of odd size `k` with the given stride.
    pub fn conv2d(k: usize, stride: usize) -> Self {
        Self { kernel: [1, k, k], stride: [1, stride, stride], pad: [0, k / 2, k / 2] }
    }

    pub fn pointwise() -> Self {
        Self { kernel: [1; 3], stride: [1; 3], pad: [0; 3] }
    }

    pub fn is_pointwise(&self) -> bool {
        *self == Self::pointwise()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            assert!(padded >= self.kernel[a], "kernel larger than padded input on axis {a}");
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }
}

/// `C = A * B` (or `C += A * B` with `beta = 1`) for row-major operands,
/// either of which may be read transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn spatial(shape: &[usize]) -> ([usize; 3], usize) {
    match *shape {
        [d, h, w, c] => ([d, h, w], c),
        _ => panic!("expected [D, H, W, C], got {shape:?}"),
    }
}

fn im2col(x: &[f64], dims: [usize; 3], cin: usize, geom: &ConvGeom, out: [usize; 3]) -> Vec<f64> {
    let k = geom.taps() * cin;
    let mut cols = vec![0.0; out.iter().product::<usize>() * k];
    for_each_tap(dims, geom, out, |row, tap, src| {
        let dst = row * k + tap * cin;
        cols[dst..dst + cin].copy_from_slice(&x[src * cin..(src + 1) * cin]);
    });
    cols
}

fn col2im(cols: &[f64], dims: [usize; 3], cin: usize, geom: &ConvGeom, out: [usize; 3]) -> Vec<f64> {
    let k = geom.taps() * cin;
    let mut x = vec![0.0; dims.iter().product::<usize>() * cin];
    for_each_tap(dims, geom, out, |row, tap, src| {
        let from = row * k + tap * cin;
        for (d, s) in x[src * cin..(src + 1) * cin].iter_mut().zip(&cols[from..from + cin]) {
            *d += s;
        }
    });
    x
}

/// Calls `f(output_row, tap_index, input_voxel)` for every in-bounds tap.
fn for_each_tap(dims: [usize; 3], geom: &ConvGeom, out: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [kd, kh, kw] = geom.kernel;
    let mut row = 0;
    for oz in 0..out[0] {
        for oy in 0..out[1] {
            for ox in 0..out[2] {
                for tz in 0..kd {
                    let iz = (oz * geom.stride[0] + tz) as isize - geom.pad[0] as isize;
                    if iz < 0 || iz >= dims[0] as isize {
                        continue;
                    }
                    for ty in 0..kh {
                        let iy = (oy * geom.stride[1] + ty) as isize - geom.pad[1] as isize;
                        if iy < 0 || iy >= dims[1] as isize {
                            continue;
                        }
                        for tx in 0..kw {
                            let ix = (ox * geom.stride[2] + tx) as isize - geom.pad[2] as isize;
                            if ix < 0 || ix >= dims[2] as isize {
                                continue;
                            }
                            let src = (iz as usize * dims[1] + iy as usize) * dims[2] + ix as usize;
                            f(row, (tz * kh + ty) * kw + tx, src);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl<'g> Var<'g> {
    /// Convolution of a `[D, H, W, Cin]` grid with a `[kd, kh, kw, Cin, Cout]`
    /// kernel and optional `[Cout]` bias.
    pub fn conv(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, geom: ConvGeom) -> Var<'g> {
        let xv = self.value();
        let wv = weight.value();
        let (dims, cin) = spatial(xv.shape());
        let ws = wv.shape();
        assert_eq!(ws.len(), 5, "kernel must be [kd, kh, kw, Cin, Cout]");
        assert_eq!(&ws[..3], &geom.kernel, "kernel extent disagrees with geometry");
        assert_eq!(ws[3], cin, "kernel input channels {} vs input {}", ws[3], cin);
        let cout = ws[4];
        let out_dims = geom.output_dims(dims);
        let n_out: usize = out_dims.iter().product();
        let k = geom.taps() * cin;

        let cols = if geom.is_pointwise() { None } else { Some(im2col(xv.data(), dims, cin, &geom, out_dims)) };
        let mut out = vec![0.0; n_out * cout];
        let beta = match bias {
            Some(b) => {
                let bv = b.value();
                assert_eq!(bv.shape(), &[cout], "bias shape");
                for row in out.chunks_mut(cout) {
                    row.copy_from_slice(bv.data());
                }
                1.0
            }
            None => 0.0,
        };
        gemm(n_out, k, cout, cols.as_deref().unwrap_or(xv.data()), false, wv.data(), false, &mut out, beta);

        let out_shape = vec![out_dims[0], out_dims[1], out_dims[2], cout];
        let mut parents = vec![*self, *weight];
        parents.extend(bias.copied());
        let has_bias = bias.is_some();
        self.graph.record(Tensor::new(out_shape, out), &parents, Box::new(move |g, inp, _, needs| {
            let (x, w) = (inp[0], inp[1]);
            let gy = g.data();
            let cols = cols.as_deref().unwrap_or(x.data());
            let gx = needs[0].then(|| {
                let mut gcols = vec![0.0; n_out * k];
                gemm(n_out, cout, k, gy, false, w.data(), true, &mut gcols, 0.0);
                let gx = if geom.is_pointwise() { gcols } else { col2im(&gcols, dims, cin, &geom, out_dims) };
                Tensor::new(x.shape().to_vec(), gx)
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; k * cout];
                gemm(k, n_out, cout, cols, true, gy, false, &mut gw, 0.0);
                Tensor::new(w.shape().to_vec(), gw)
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![0.0; cout];
                    for row in gy.chunks(cout) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::new(vec![cout], gb)
                }));
            }
            grads
        }))
    }

    /// 2D convolution of an `[H, W, Cin]` map with a `[k, k, Cin, Cout]` kernel.
    pub fn conv2d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, stride: usize) -> Var<'g> {
        let xs = self.shape();
        let ws = weight.shape();
        let &[h, w, c] = xs.as_slice() else { panic!("conv2d expects [H, W, C], got {xs:?}") };
        let &[kh, kw, ci, co] = ws.as_slice() else { panic!("conv2d kernel must be [k, k, Cin, Cout]") };
        assert_eq!(kh, kw, "square kernels only");
        let x4 = self.reshape(&[1, h, w, c]);
        let w5 = weight.reshape(&[1, kh, kw, ci, co]);
        let y = x4.conv(&w5, bias, ConvGeom::conv2d(kh, stride));
        let ys = y.shape();
        y.reshape(&ys[1..])
    }

    /// Non-overlapping mean pooling by `factor` on every spatial axis of `[D, H, W, C]`.
    pub fn avg_pool3d(&self, factor: usize) -> Var<'g> {
        let (dims, c) = spatial(&self.shape());
        assert!(dims.iter().all(|&n| n % factor == 0), "pool factor {factor} does not divide {dims:?}");
        let out = dims.map(|n| n / factor);
        let w = 1.0 / (factor * factor * factor) as f64;
        let mut taps = Vec::with_capacity(out.iter().product());
        for z in 0..out[0] {
            for y in 0..out[1] {
                for x in 0..out[2] {
                    let mut t = Vec::with_capacity(factor.pow(3));
                    for dz in 0..factor {
                        for dy in 0..factor {
                            for dx in 0..factor {
                                let idx = ((z * factor + dz) * dims[1] + y * factor + dy) * dims[2] + x * factor + dx;
                                t.push((idx, w));
                            }
                        }
                    }
                    taps.push(t);
                }
            }
        }
        self.reshape(&[dims.iter().product(), c]).gather_weighted(taps).reshape(&[out[0], out[1], out[2], c])
    }

    /// Trilinear resampling of `[D, H, W, C]` to new spatial extents
    /// (half-pixel centers, edge-clamped).
    pub fn resize_trilinear(&self, out: [usize; 3]) -> Var<'g> {
        let (dims, c) = spatial(&self.shape());
        if dims == out {
            return *self;
        }
        let axes: Vec<Vec<[(usize, f64); 2]>> = (0..3).map(|a| linear_taps(dims[a], out[a])).collect();
        let mut taps = Vec::with_capacity(out.iter().product());
        for z in 0..out[0] {
            for y in 0..out[1] {
                for x in 0..out[2] {
                    let mut t = Vec::with_capacity(8);
                    for &(iz, wz) in &axes[0][z] {
                        for &(iy, wy) in &axes[1][y] {
                            for &(ix, wx) in &axes[2][x] {
                                let w = wz * wy * wx;
                                if w != 0.0 {
                                    t.push(((iz * dims[1] + iy) * dims[2] + ix, w));
                                }
                            }
                        }
                    }
                    taps.push(t);
                }
            }
        }
        self.reshape(&[dims.iter().product(), c]).gather_weighted(taps).reshape(&[out[0], out[1], out[2], c])
    }
}

/// 1D linear interpolation taps from `n_in` samples onto `n_out`.
pub(crate) fn linear_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 2]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            [(i0, 1.0 - l), (i1, l)]
        })
        .collect()
}
