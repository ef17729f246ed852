//! Elementwise, structural and loss-specific operations on [`Var`].

use super::{Graph, Var};
use crate::tensor::Tensor;

fn same_shape(a: &Var<'_>, b: &Var<'_>) {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa, sb, "operand shapes differ");
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

impl<'g> Var<'g> {
    pub fn add(&self, other: &Var<'g>) -> Var<'g> {
        same_shape(self, other);
        let out = zip_map(&self.value(), &other.value(), |a, b| a + b);
        self.graph.record(out, &[*self, *other], Box::new(|g, _, _, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&self, other: &Var<'g>) -> Var<'g> {
        same_shape(self, other);
        let out = zip_map(&self.value(), &other.value(), |a, b| a - b);
        self.graph.record(out, &[*self, *other], Box::new(|g, _, _, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|x| -x))]
        }))
    }

    pub fn mul(&self, other: &Var<'g>) -> Var<'g> {
        same_shape(self, other);
        let out = zip_map(&self.value(), &other.value(), |a, b| a * b);
        self.graph.record(out, &[*self, *other], Box::new(|g, inp, _, needs| {
            vec![
                needs[0].then(|| zip_map(g, inp[1], |g, b| g * b)),
                needs[1].then(|| zip_map(g, inp[0], |g, a| g * a)),
            ]
        }))
    }

    pub fn scale(&self, k: f64) -> Var<'g> {
        let out = self.value().map(|x| k * x);
        self.graph.record(out, &[*self], Box::new(move |g, _, _, _| vec![Some(g.map(|x| k * x))]))
    }

    pub fn relu(&self) -> Var<'g> {
        let v = self.value();
        self.graph.note_branches(&v, |x| (x > 0.0) as u64);
        let out = v.map(|x| x.max(0.0));
        self.graph.record(out, &[*self], Box::new(|g, inp, _, _| {
            vec![Some(zip_map(g, inp[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
        }))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let out = self.value().map(sigmoid);
        self.graph.record(out, &[*self], Box::new(|g, _, out, _| {
            vec![Some(zip_map(g, out, |g, s| g * s * (1.0 - s)))]
        }))
    }

    pub fn square(&self) -> Var<'g> {
        let out = self.value().map(|x| x * x);
        self.graph.record(out, &[*self], Box::new(|g, inp, _, _| {
            vec![Some(zip_map(g, inp[0], |g, x| 2.0 * g * x))]
        }))
    }

    pub fn abs(&self) -> Var<'g> {
        let v = self.value();
        self.graph.note_branches(&v, |x| (x > 0.0) as u64 | ((x < 0.0) as u64) << 1);
        let out = v.map(f64::abs);
        self.graph.record(out, &[*self], Box::new(|g, inp, _, _| {
            vec![Some(zip_map(g, inp[0], |g, x| g * x.signum() * (x != 0.0) as u8 as f64))]
        }))
    }

    pub fn sum(&self) -> Var<'g> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let out = Tensor::scalar(v.sum());
        self.graph.record(out, &[*self], Box::new(move |g, _, _, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        }))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let v = self.value();
        let old = v.shape().to_vec();
        let out = (*v).clone().reshape(shape.to_vec());
        self.graph.record(out, &[*self], Box::new(move |g, _, _, _| vec![Some(g.clone().reshape(old.clone()))]))
    }

    /// Softmax along the trailing axis.
    pub fn softmax_last(&self) -> Var<'g> {
        let v = self.value();
        let c = v.channels();
        let mut out = (*v).clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.graph.record(out, &[*self], Box::new(move |g, _, out, _| {
            let mut gi = g.clone();
            for (gr, yr) in gi.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (gx, y) in gr.iter_mut().zip(yr) {
                    *gx = y * (*gx - dot);
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Channels `[start, start + len)` of the trailing axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Var<'g> {
        let v = self.value();
        let c = v.channels();
        assert!(start + len <= c, "channel slice out of range");
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let data = v.data().chunks(c).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let in_shape = v.shape().to_vec();
        self.graph.record(Tensor::new(shape, data), &[*self], Box::new(move |g, _, _, _| {
            let mut gi = Tensor::zeros(in_shape.clone());
            for (dst, src) in gi.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                dst[start..start + len].copy_from_slice(src);
            }
            vec![Some(gi)]
        }))
    }

    /// `[D, H, W, C] -> [H, W, D * C]`; output channel `d * C + c` holds level `d`, channel `c`.
    pub fn vertical_flatten(&self) -> Var<'g> {
        let v = self.value();
        let &[d, h, w, c] = v.shape() else { panic!("vertical_flatten expects [D, H, W, C], got {:?}", v.shape()) };
        let hw = h * w;
        let mut out = vec![0.0; v.len()];
        let src = v.data();
        for z in 0..d {
            for p in 0..hw {
                let s = (z * hw + p) * c;
                let t = p * d * c + z * c;
                out[t..t + c].copy_from_slice(&src[s..s + c]);
            }
        }
        self.graph.record(Tensor::new(vec![h, w, d * c], out), &[*self], Box::new(move |g, _, _, _| {
            let mut gi = vec![0.0; g.len()];
            let gs = g.data();
            for z in 0..d {
                for p in 0..hw {
                    let s = (z * hw + p) * c;
                    let t = p * d * c + z * c;
                    gi[s..s + c].copy_from_slice(&gs[t..t + c]);
                }
            }
            vec![Some(Tensor::new(vec![d, h, w, c], gi))]
        }))
    }

    /// Rows of a `[.., C]` tensor picked by flat row index, giving `[indices.len(), C]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Var<'g> {
        let taps: Vec<Vec<(usize, f64)>> = indices.iter().map(|&i| vec![(i, 1.0)]).collect();
        self.gather_weighted(taps)
    }

    /// Each output row is a weighted sum of input rows: `out[n] = sum_k w_k * x[i_k]`.
    pub fn gather_weighted(&self, taps: Vec<Vec<(usize, f64)>>) -> Var<'g> {
        let v = self.value();
        let c = v.channels();
        let rows = v.rows();
        let src = v.data();
        let mut out = vec![0.0; taps.len() * c];
        for (n, tap) in taps.iter().enumerate() {
            let dst = &mut out[n * c..(n + 1) * c];
            for &(i, w) in tap {
                assert!(i < rows, "gather index {i} out of {rows}");
                for (d, s) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *d += w * s;
                }
            }
        }
        let in_shape = v.shape().to_vec();
        let n_out = taps.len();
        self.graph.record(Tensor::new(vec![n_out, c], out), &[*self], Box::new(move |g, _, _, _| {
            let mut gi = Tensor::zeros(in_shape.clone());
            let gd = gi.data_mut();
            for (n, tap) in taps.iter().enumerate() {
                let go = &g.data()[n * c..(n + 1) * c];
                for &(i, w) in tap {
                    for (d, s) in gd[i * c..(i + 1) * c].iter_mut().zip(go) {
                        *d += w * s;
                    }
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Pairwise cosine similarity of the rows of an `[N, C]` tensor.
    pub fn cosine_matrix(&self) -> Var<'g> {
        const EPS: f64 = 1e-12;
        let v = self.value();
        let &[n, c] = v.shape() else { panic!("cosine_matrix expects [N, C]") };
        let x = v.data();
        let norms: Vec<f64> = x.chunks(c).map(|r| (r.iter().map(|a| a * a).sum::<f64>() + EPS).sqrt()).collect();
        let unit: Vec<f64> = x.chunks(c).zip(&norms).flat_map(|(r, &nr)| r.iter().map(move |a| a / nr)).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..c).map(|k| unit[i * c + k] * unit[j * c + k]).sum();
            }
        }
        self.graph.record(Tensor::new(vec![n, n], out), &[*self], Box::new(move |g, _, _, _| {
            let gs = g.data();
            // d/du_i of sum_ij g_ij u_i.u_j, then through u = x / |x|.
            let mut gu = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..n {
                    let gij = gs[i * n + j];
                    for k in 0..c {
                        gu[i * c + k] += gij * unit[j * c + k];
                        gu[j * c + k] += gij * unit[i * c + k];
                    }
                }
            }
            let mut gx = vec![0.0; n * c];
            for i in 0..n {
                let u = &unit[i * c..(i + 1) * c];
                let gr = &gu[i * c..(i + 1) * c];
                let dot: f64 = u.iter().zip(gr).map(|(a, b)| a * b).sum();
                for k in 0..c {
                    gx[i * c + k] = (gr[k] - u[k] * dot) / norms[i];
                }
            }
            vec![Some(Tensor::new(vec![n, c], gx))]
        }))
    }

    /// Soft-target focal loss summed over all entries of a probability map:
    /// `sum |t - p|^2 * BCE(p, t)`. Zero exactly where `p == t`.
    pub fn soft_focal_loss(&self, target: &Tensor) -> Var<'g> {
        const EPS: f64 = 1e-12;
        let v = self.value();
        assert_eq!(v.shape(), target.shape(), "focal loss target shape");
        let loss: f64 = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = p - t;
                if d == 0.0 {
                    return 0.0;
                }
                let pc = p.clamp(EPS, 1.0 - EPS);
                d * d * -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum();
        let target = target.clone();
        self.graph.record(Tensor::scalar(loss), &[*self], Box::new(move |g, inp, _, _| {
            let go = g.item();
            let gi = zip_map(inp[0], &target, |p, t| {
                let d = p - t;
                if d == 0.0 {
                    return 0.0;
                }
                let inside = p > EPS && p < 1.0 - EPS;
                let pc = p.clamp(EPS, 1.0 - EPS);
                let bce = -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
                let dbce = if inside { -t / pc + (1.0 - t) / (1.0 - pc) } else { 0.0 };
                go * (2.0 * d * bce + d * d * dbce)
            });
            vec![Some(gi)]
        }))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Concatenation along the trailing axis; all leading axes must agree.
pub fn concat_last<'g>(parts: &[Var<'g>]) -> Var<'g> {
    assert!(!parts.is_empty());
    let graph = parts[0].graph;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let lead = &values[0].shape()[..values[0].ndim() - 1];
    let widths: Vec<usize> = values.iter().map(|v| v.channels()).collect();
    for v in &values {
        assert_eq!(&v.shape()[..v.ndim() - 1], lead, "concat leading shapes differ");
    }
    let total: usize = widths.iter().sum();
    let rows = values[0].rows();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let in_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    graph.record(Tensor::new(shape, out), parts, Box::new(move |g, _, _, needs| {
        let mut offset = 0;
        let mut grads = Vec::with_capacity(widths.len());
        for ((&w, s), &need) in widths.iter().zip(&in_shapes).zip(needs) {
            if need {
                let mut gi = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    gi.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                }
                grads.push(Some(Tensor::new(s.clone(), gi)));
            } else {
                grads.push(None);
            }
            offset += w;
        }
        grads
    }))
}

/// Gated mixture `out[.., c] = sum_j weights[.., j] * inputs[j][.., c]`.
///
/// `weights` has trailing size `inputs.len()`; every input shares the
/// leading axes of `weights`.
pub fn mix<'g>(weights: Var<'g>, inputs: &[Var<'g>]) -> Var<'g> {
    let graph = weights.graph;
    let wv = weights.value();
    let j = wv.channels();
    assert_eq!(j, inputs.len(), "one gate channel per input");
    let xs: Vec<_> = inputs.iter().map(|x| x.value()).collect();
    let shape = xs[0].shape().to_vec();
    let c = xs[0].channels();
    let rows = xs[0].rows();
    assert_eq!(rows, wv.rows(), "gate and input grids differ");
    for x in &xs {
        assert_eq!(x.shape(), shape.as_slice(), "mixed inputs differ in shape");
    }
    let mut out = vec![0.0; rows * c];
    for r in 0..rows {
        for (k, x) in xs.iter().enumerate() {
            let w = wv.data()[r * j + k];
            for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(&x.data()[r * c..(r + 1) * c]) {
                *o += w * v;
            }
        }
    }
    let mut parents = vec![weights];
    parents.extend_from_slice(inputs);
    graph.record(Tensor::new(shape.clone(), out), &parents, Box::new(move |g, inp, _, needs| {
        let w = inp[0];
        let mut grads = Vec::with_capacity(j + 1);
        grads.push(needs[0].then(|| {
            let mut gw = vec![0.0; rows * j];
            for r in 0..rows {
                let go = &g.data()[r * c..(r + 1) * c];
                for k in 0..j {
                    let x = &inp[k + 1].data()[r * c..(r + 1) * c];
                    gw[r * j + k] = go.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            Tensor::new(w.shape().to_vec(), gw)
        }));
        for k in 0..j {
            grads.push(needs[k + 1].then(|| {
                let mut gx = g.clone();
                for (r, row) in gx.data_mut().chunks_mut(c).enumerate() {
                    let wk = w.data()[r * j + k];
                    row.iter_mut().for_each(|v| *v *= wk);
                }
                gx
            }));
        }
        grads
    }))
}

/// Sum of several single-element vars.
pub fn add_all<'g>(graph: &'g Graph, terms: &[Var<'g>]) -> Var<'g> {
    match terms.split_first() {
        None => graph.constant(Tensor::scalar(0.0)),
        Some((first, rest)) => rest.iter().fold(*first, |acc, t| acc.add(t)),
    }
}

/// Precomputed scatter of frustum samples into voxels.
///
/// Sample `(p, d)` is pixel `p` at depth bin `d`; `targets[p * n_depth + d]`
/// is the voxel it lands in, or `None` outside the grid. Each voxel receives
/// the mean of the samples that land in it.
#[derive(Clone, Debug)]
pub struct LiftMap {
    pub n_pixels: usize,
    pub n_depth: usize,
    pub n_voxels: usize,
    pub targets: Vec<Option<u32>>,
}

impl LiftMap {
    pub fn counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.n_voxels];
        for t in self.targets.iter().flatten() {
            counts[*t as usize] += 1;
        }
        counts
    }
}

/// Mean-scatter of `depth[p, d] * context[p, c]` into `[n_voxels, C]`.
pub fn lift_scatter<'g>(depth: Var<'g>, context: Var<'g>, map: std::sync::Arc<LiftMap>) -> Var<'g> {
    let graph = depth.graph;
    let dv = depth.value();
    let cv = context.value();
    let nd = map.n_depth;
    let c = cv.channels();
    assert_eq!(dv.shape(), &[map.n_pixels, nd], "depth shape");
    assert_eq!(cv.shape(), &[map.n_pixels, c], "context shape");
    let counts = map.counts();
    let inv: Vec<f64> = counts.iter().map(|&n| if n > 0 { 1.0 / n as f64 } else { 0.0 }).collect();
    let mut out = vec![0.0; map.n_voxels * c];
    for p in 0..map.n_pixels {
        let ctx = &cv.data()[p * c..(p + 1) * c];
        for d in 0..nd {
            let Some(t) = map.targets[p * nd + d] else { continue };
            let t = t as usize;
            let w = dv.data()[p * nd + d] * inv[t];
            for (o, x) in out[t * c..(t + 1) * c].iter_mut().zip(ctx) {
                *o += w * x;
            }
        }
    }
    graph.record(Tensor::new(vec![map.n_voxels, c], out), &[depth, context], Box::new(move |g, inp, _, needs| {
        let (dv, cv) = (inp[0], inp[1]);
        let gs = g.data();
        let mut gd = needs[0].then(|| vec![0.0; map.n_pixels * nd]);
        let mut gc = needs[1].then(|| vec![0.0; map.n_pixels * c]);
        for p in 0..map.n_pixels {
            let ctx = &cv.data()[p * c..(p + 1) * c];
            for d in 0..nd {
                let Some(t) = map.targets[p * nd + d] else { continue };
                let t = t as usize;
                let go = &gs[t * c..(t + 1) * c];
                if let Some(gd) = gd.as_mut() {
                    gd[p * nd + d] = inv[t] * go.iter().zip(ctx).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(gc) = gc.as_mut() {
                    let w = dv.data()[p * nd + d] * inv[t];
                    for (o, x) in gc[p * c..(p + 1) * c].iter_mut().zip(go) {
                        *o += w * x;
                    }
                }
            }
        }
        vec![gd.map(|v| Tensor::new(vec![map.n_pixels, nd], v)), gc.map(|v| Tensor::new(vec![map.n_pixels, c], v))]
    }))
}
