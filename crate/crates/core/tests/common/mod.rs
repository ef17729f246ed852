//! Explicit-loop reference implementations shared by the integration tests.
//!
//! Everything here works on plain `Vec<f64>` buffers with hand-written index
//! arithmetic, never on the library's tensor kernels.

#![allow(dead_code)]

use promptdet::aha::{AhaParams, ScaleGate};
use promptdet::cmki::ImitationParams;
use promptdet::detector::{Detection, Targets};
use promptdet::evalkit::{ClassAp, EvalReport, MatchCounts};
use promptdet::nn::{Conv, ParamStore};
use promptdet::scene::Box3D;
use promptdet::voxelizer::GridSpec;
use promptdet::Tensor;

/// Dense channels-last volume `[d][h][w][c]`.
#[derive(Clone, Debug)]
pub struct Vol {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Vol {
    pub fn zeros(d: usize, h: usize, w: usize, c: usize) -> Self {
        Self { d, h, w, c, v: vec![0.0; d * h * w * c] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        let (d, h, w, c) = match s.len() {
            4 => (s[0], s[1], s[2], s[3]),
            3 => (1, s[0], s[1], s[2]),
            _ => panic!("unsupported shape {s:?}"),
        };
        Self { d, h, w, c, v: t.data().to_vec() }
    }

    pub fn get(&self, z: usize, y: usize, x: usize, ch: usize) -> f64 {
        self.v[((z * self.h + y) * self.w + x) * self.c + ch]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, ch: usize, val: f64) {
        let i = ((z * self.h + y) * self.w + x) * self.c + ch;
        self.v[i] = val;
    }

    pub fn max_abs_diff(&self, t: &Tensor) -> f64 {
        assert_eq!(self.v.len(), t.len(), "oracle and library sizes differ");
        self.v.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Convolution with a `[kd, kh, kw, cin, cout]` kernel, stride 1, zero padding `k / 2`.
pub fn conv(store: &ParamStore, layer: &Conv, x: &Vol) -> Vol {
    let w = store.get(layer.weight);
    let s = w.shape();
    let (kd, kh, kw, ci, co) = (s[0], s[1], s[2], s[3], s[4]);
    assert_eq!(ci, x.c);
    let bias = layer.bias.map(|b| store.get(b).data().to_vec()).unwrap_or_else(|| vec![0.0; co]);
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let mut out = Vol::zeros(x.d, x.h, x.w, co);
    for z in 0..x.d {
        for y in 0..x.h {
            for xx in 0..x.w {
                for o in 0..co {
                    let mut acc = bias[o];
                    for a in 0..kd {
                        for b in 0..kh {
                            for cc in 0..kw {
                                let (sz, sy, sx) = (z + a, y + b, xx + cc);
                                if sz < pd || sy < ph || sx < pw {
                                    continue;
                                }
                                let (sz, sy, sx) = (sz - pd, sy - ph, sx - pw);
                                if sz >= x.d || sy >= x.h || sx >= x.w {
                                    continue;
                                }
                                for i in 0..ci {
                                    acc += x.get(sz, sy, sx, i) * w.at(&[a, b, cc, i, o]);
                                }
                            }
                        }
                    }
                    out.set(z, y, xx, o, acc);
                }
            }
        }
    }
    out
}

fn concat(parts: &[&Vol]) -> Vol {
    let p0 = parts[0];
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut out = Vol::zeros(p0.d, p0.h, p0.w, c);
    for z in 0..p0.d {
        for y in 0..p0.h {
            for x in 0..p0.w {
                let mut o = 0;
                for p in parts {
                    for ch in 0..p.c {
                        out.set(z, y, x, o, p.get(z, y, x, ch));
                        o += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn softmax_channels(x: &Vol) -> Vol {
    let mut out = x.clone();
    for cell in out.v.chunks_mut(x.c) {
        let m = cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = cell.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for (dst, v) in cell.iter_mut().zip(e) {
            *dst = v / s;
        }
    }
    out
}

/// `sum_k W_k * inputs[k]` with per-cell gate weights.
fn weighted_sum(weights: &Vol, inputs: &[&Vol]) -> Vol {
    let f = inputs[0];
    let mut out = Vol::zeros(f.d, f.h, f.w, f.c);
    for z in 0..f.d {
        for y in 0..f.h {
            for x in 0..f.w {
                for ch in 0..f.c {
                    let v = inputs.iter().enumerate().map(|(k, inp)| weights.get(z, y, x, k) * inp.get(z, y, x, ch)).sum();
                    out.set(z, y, x, ch, v);
                }
            }
        }
    }
    out
}

/// Per-scale gated fusion; returns the fused volume and the gate.
pub fn fuse_scale(store: &ParamStore, gate: &ScaleGate, f_l: &Vol, f_c: &Vol) -> (Vol, Vol) {
    let a = conv(store, &gate.conv_l, f_l);
    let b = conv(store, &gate.conv_c, f_c);
    let w = softmax_channels(&conv(store, &gate.gate, &concat(&[&a, &b])));
    (weighted_sum(&w, &[f_l, f_c]), w)
}

fn lerp_axis(n_in: usize, n_out: usize, o: usize) -> (usize, usize, f64) {
    let mut src = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    if src < 0.0 {
        src = 0.0;
    }
    let mut i0 = src.floor() as usize;
    if i0 > n_in - 1 {
        i0 = n_in - 1;
    }
    let i1 = if i0 + 1 < n_in { i0 + 1 } else { n_in - 1 };
    (i0, i1, src - i0 as f64)
}

/// Trilinear resampling with half-pixel centers and edge clamping.
pub fn resize(x: &Vol, d: usize, h: usize, w: usize) -> Vol {
    let mut out = Vol::zeros(d, h, w, x.c);
    for z in 0..d {
        let (z0, z1, tz) = lerp_axis(x.d, d, z);
        for y in 0..h {
            let (y0, y1, ty) = lerp_axis(x.h, h, y);
            for xx in 0..w {
                let (x0, x1, tx) = lerp_axis(x.w, w, xx);
                for ch in 0..x.c {
                    let mut v = 0.0;
                    for (zi, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                        for (yi, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                            for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                                v += wz * wy * wx * x.get(zi, yi, xi, ch);
                            }
                        }
                    }
                    out.set(z, y, xx, ch, v);
                }
            }
        }
    }
    out
}

/// `[D, H, W, C]` to `[1, H, W, D * C]`, channel `d * C + c`.
pub fn flatten_height(x: &Vol) -> Vol {
    let mut out = Vol::zeros(1, x.h, x.w, x.d * x.c);
    for z in 0..x.d {
        for y in 0..x.h {
            for xx in 0..x.w {
                for ch in 0..x.c {
                    out.set(0, y, xx, z * x.c + ch, x.get(z, y, xx, ch));
                }
            }
        }
    }
    out
}

/// Cross-scale mixture at the scale-1 grid followed by flatten and reduction.
pub fn aggregate(store: &ParamStore, aha: &AhaParams, levels: &[Vol; 3]) -> (Vol, Vol) {
    let (d, h, w) = (levels[1].d, levels[1].h, levels[1].w);
    let resized: Vec<Vol> = levels.iter().map(|l| resize(l, d, h, w)).collect();
    let feats: Vec<Vol> = resized.iter().zip(&aha.level_convs).map(|(l, c)| conv(store, c, l)).collect();
    let weights = softmax_channels(&conv(store, &aha.level_gate, &concat(&[&feats[0], &feats[1], &feats[2]])));
    let mixed = weighted_sum(&weights, &[&resized[0], &resized[1], &resized[2]]);
    (conv(store, &aha.reducer, &flatten_height(&mixed)), weights)
}

pub fn imitation(store: &ParamStore, imi: &ImitationParams, f_c1: &Vol) -> Vol {
    conv(store, &imi.conv2d, &flatten_height(&conv(store, &imi.conv3d, f_c1)))
}

fn bev_position(grid: &GridSpec, x: f64, y: f64) -> (f64, f64) {
    let [ch, cw] = grid.bev_cell();
    ((y - grid.origin[1]) / ch, (x - grid.origin[0]) / cw)
}

/// Cells whose center lies in some box's axis-aligned footprint, plus each
/// box's center cell.
pub fn foreground_mask(boxes: &[Box3D], grid: &GridSpec) -> Vec<bool> {
    let [h, w] = grid.bev_dims();
    let [ch, cw] = grid.bev_cell();
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (grid.origin[0] + (c as f64 + 0.5) * cw, grid.origin[1] + (r as f64 + 0.5) * ch);
            for b in boxes {
                let (lo, hi) = b.aabb();
                if x >= lo[0] && x <= hi[0] && y >= lo[1] && y <= hi[1] {
                    mask[r * w + c] = true;
                }
                let (br, bc) = bev_position(grid, b.center[0], b.center[1]);
                if br.floor() == r as f64 && bc.floor() == c as f64 {
                    mask[r * w + c] = true;
                }
            }
        }
    }
    mask
}

pub fn fea_loss(f: &Tensor, c: &Tensor, boxes: &[Box3D], grid: &GridSpec) -> f64 {
    let mask = foreground_mask(boxes, grid);
    let ch = f.channels();
    let mut sum = 0.0;
    let mut n = 0;
    for (cell, &m) in mask.iter().enumerate() {
        if m {
            n += 1;
            for k in 0..ch {
                let d = f.data()[cell * ch + k] - c.data()[cell * ch + k];
                sum += d * d;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Bilinear sample of an `[H, W, C]` map at continuous cell coordinates,
/// values at cell centers, clamped to the border.
pub fn sample(map: &Tensor, r: f64, c: f64) -> Vec<f64> {
    let s = map.shape();
    let (h, w, ch) = (s[0], s[1], s[2]);
    let clamp = |v: f64, n: usize| (v - 0.5).max(0.0).min((n - 1) as f64);
    let (u, v) = (clamp(r, h), clamp(c, w));
    let (r0, c0) = (u.floor() as usize, v.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (tr, tc) = (u - r0 as f64, v - c0 as f64);
    (0..ch)
        .map(|k| {
            let at = |rr: usize, cc: usize| map.data()[(rr * w + cc) * ch + k];
            (1.0 - tr) * ((1.0 - tc) * at(r0, c0) + tc * at(r0, c1)) + tr * ((1.0 - tc) * at(r1, c0) + tc * at(r1, c1))
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = (a.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    let nb = (b.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    dot / (na * nb)
}

pub fn rel_loss(f: &Tensor, c: &Tensor, boxes: &[Box3D], grid: &GridSpec) -> f64 {
    let mut pts = Vec::new();
    for b in boxes {
        pts.push(bev_position(grid, b.center[0], b.center[1]));
        let (lo, hi) = b.aabb();
        for (x, y) in [(lo[0], lo[1]), (hi[0], lo[1]), (hi[0], hi[1]), (lo[0], hi[1])] {
            pts.push(bev_position(grid, x, y));
        }
    }
    let n = pts.len();
    if n < 2 {
        return 0.0;
    }
    let sf: Vec<Vec<f64>> = pts.iter().map(|&(r, cc)| sample(f, r, cc)).collect();
    let sc: Vec<Vec<f64>> = pts.iter().map(|&(r, cc)| sample(c, r, cc)).collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += (cosine(&sf[i], &sf[j]) - cosine(&sc[i], &sc[j])).abs();
        }
    }
    total / (n * n) as f64
}

pub fn resp_loss(heat_f: &Tensor, reg_f: &Tensor, heat_c: &Tensor, reg_c: &Tensor, targets: &Targets) -> f64 {
    let k = targets.heat.channels();
    let r = reg_f.channels();
    let cells = targets.heat.len() / k;
    let mut num = 0.0;
    let mut mass = 0.0;
    for cell in 0..cells {
        let mut w: f64 = 0.0;
        for j in 0..k {
            w = w.max(targets.heat.data()[cell * k + j]);
        }
        mass += w;
        for j in 0..k {
            let d = heat_f.data()[cell * k + j] - heat_c.data()[cell * k + j];
            num += w * d * d;
        }
        for j in 0..r {
            let d = reg_f.data()[cell * r + j] - reg_c.data()[cell * r + j];
            num += w * d * d;
        }
    }
    if mass == 0.0 {
        0.0
    } else {
        num / (mass * (k + r) as f64)
    }
}

/// Interpolated AP from its definition: at every true positive, the best
/// precision reached at that rank or deeper, averaged over all ground truths.
pub fn brute_ap(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let prec: Vec<f64> = (0..flags.len()).map(|k| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64).collect();
    let mut ap = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            ap += prec[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    ap / n_gt as f64
}

/// Matching by repeated selection: take the highest-scoring unprocessed
/// prediction (earliest scene and index on ties), assign it the nearest
/// free ground truth of its class within the threshold (earliest on ties).
pub fn brute_match(preds: &[Vec<Detection>], gts: &[Vec<Box3D>], class_id: usize, thr: f64) -> (Vec<bool>, Vec<f64>) {
    let mut pending: Vec<(usize, usize)> = Vec::new();
    for (s, list) in preds.iter().enumerate() {
        for (i, d) in list.iter().enumerate() {
            if d.bbox.class_id == class_id {
                pending.push((s, i));
            }
        }
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut flags, mut dists) = (Vec::new(), Vec::new());
    while !pending.is_empty() {
        let mut best = 0;
        for k in 1..pending.len() {
            let (s, i) = pending[k];
            let (bs, bi) = pending[best];
            if preds[s][i].score > preds[bs][bi].score {
                best = k;
            }
        }
        let (s, i) = pending.remove(best);
        let p = &preds[s][i].bbox;
        let mut pick: Option<(usize, f64)> = None;
        for (j, g) in gts[s].iter().enumerate() {
            if g.class_id != class_id || used[s][j] {
                continue;
            }
            let d = ((p.center[0] - g.center[0]).powi(2) + (p.center[1] - g.center[1]).powi(2)).sqrt();
            if d <= thr && pick.is_none_or(|(_, bd)| d < bd) {
                pick = Some((j, d));
            }
        }
        match pick {
            Some((j, d)) => {
                used[s][j] = true;
                flags.push(true);
                dists.push(d);
            }
            None => flags.push(false),
        }
    }
    (flags, dists)
}

pub fn brute_report(preds: &[Vec<Detection>], gts: &[Vec<Box3D>], thresholds: &[f64], names: &[String]) -> EvalReport {
    let mut classes = Vec::new();
    let mut counts = vec![MatchCounts::default(); thresholds.len()];
    let mut last_dists = Vec::new();
    for (class_id, name) in names.iter().enumerate() {
        let n_gt = gts.iter().map(|g| g.iter().filter(|b| b.class_id == class_id).count()).sum::<usize>();
        let mut ap = Vec::new();
        for (t, &thr) in thresholds.iter().enumerate() {
            let (flags, dists) = brute_match(preds, gts, class_id, thr);
            let tp = flags.iter().filter(|&&f| f).count();
            counts[t].tp += tp;
            counts[t].fp += flags.len() - tp;
            counts[t].fn_ += n_gt - tp;
            ap.push(brute_ap(&flags, n_gt));
            if t == thresholds.len() - 1 {
                last_dists.extend(dists);
            }
        }
        if n_gt > 0 {
            classes.push(ClassAp { class_id, name: name.clone(), n_gt, ap });
        }
    }
    let all: Vec<f64> = classes.iter().flat_map(|c| c.ap.iter().cloned()).collect();
    let map = if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 };
    let mean_translation_error = if last_dists.is_empty() { None } else { Some(last_dists.iter().sum::<f64>() / last_dists.len() as f64) };
    EvalReport {
        version: promptdet::evalkit::REPORT_VERSION,
        thresholds: thresholds.to_vec(),
        classes,
        map,
        mean_translation_error,
        counts,
        n_scenes: gts.len(),
    }
}

/// Reports agree when every count matches exactly and every float to `tol`.
pub fn reports_agree(a: &EvalReport, b: &EvalReport, tol: f64) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= tol;
    a.counts == b.counts
        && a.n_scenes == b.n_scenes
        && close(a.map, b.map)
        && a.classes.len() == b.classes.len()
        && a.classes.iter().zip(&b.classes).all(|(x, y)| {
            x.class_id == y.class_id && x.n_gt == y.n_gt && x.ap.iter().zip(&y.ap).all(|(p, q)| close(*p, *q))
        })
        && match (a.mean_translation_error, b.mean_translation_error) {
            (None, None) => true,
            (Some(x), Some(y)) => close(x, y),
            _ => false,
        }
}

pub mod fixtures {
    use super::*;
    use promptdet::cmki::{fea_distill, rel_distill, resp_distill};
    use promptdet::detector::{build_targets, Response, REG_CHANNELS};
    use promptdet::nn::Binding;
    use promptdet::scene::WorldSpec;
    use promptdet::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scale 0 is 8x8x8, scale 1 is 4x4x4, scale 2 is 2x2x2.
    pub fn small_grid(channels: usize) -> GridSpec {
        let world = WorldSpec { xy_range: [-4.0, 4.0], z_range: [-4.0, 4.0], ..WorldSpec::default() };
        GridSpec::from_world(&world, [1.0; 3], channels).unwrap()
    }

    pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::uniform(shape, -0.6, 0.6, rng);
        }
    }

    pub fn random_boxes(grid: &GridSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<Box3D> {
        let half = -grid.origin[0];
        (0..n)
            .map(|_| Box3D {
                center: [rng.gen_range(-half..half), rng.gen_range(-half..half), 0.0],
                size: [rng.gen_range(0.5..3.0), rng.gen_range(0.5..2.0), 1.5],
                yaw: rng.gen_range(-3.1..3.1),
                class_id: rng.gen_range(0..3),
            })
            .collect()
    }

    /// Largest absolute oracle deviation per checked function:
    /// `[fuse_scale, aggregate, imitation, fea, rel, resp]`.
    pub fn oracle_deviation(seed: u64) -> [f64; 6] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = small_grid(3);
        let mut store = ParamStore::new();
        let aha = AhaParams::new(&mut store, &grid, &mut rng);
        let imi = ImitationParams::new(&mut store, &grid, &mut rng);
        randomize(&mut store, &mut rng);
        let lidar: Vec<Tensor> = (0..3).map(|i| Tensor::uniform(grid.level_shape(i), -1.0, 1.0, &mut rng)).collect();
        let camera: Vec<Tensor> = (0..3).map(|i| Tensor::uniform(grid.level_shape(i), -1.0, 1.0, &mut rng)).collect();

        let g = Graph::inference();
        let b = Binding::new(&g, &store);
        let mut out = [0.0f64; 6];
        for s in 0..3 {
            let lib = aha.fuse_scale(&b, g.constant(lidar[s].clone()), g.constant(camera[s].clone()), s);
            let (o, w) = fuse_scale(&store, &aha.scales[s], &Vol::from_tensor(&lidar[s]), &Vol::from_tensor(&camera[s]));
            out[0] = out[0].max(o.max_abs_diff(&lib.output.value())).max(w.max_abs_diff(&lib.weights.value()));
        }
        let levels = std::array::from_fn(|s| g.constant(lidar[s].clone()));
        let lib = aha.aggregate(&b, levels);
        let (o, w) = aggregate(&store, &aha, &std::array::from_fn(|s| Vol::from_tensor(&lidar[s])));
        out[1] = o.max_abs_diff(&lib.output.value()).max(w.max_abs_diff(&lib.weights.value()));
        let lib = imi.forward(&b, g.constant(camera[1].clone()));
        out[2] = imitation(&store, &imi, &Vol::from_tensor(&camera[1])).max_abs_diff(&lib.value());

        let [h, w] = grid.bev_dims();
        let boxes = random_boxes(&grid, rng.gen_range(1..4), &mut rng);
        let ff = Tensor::uniform(vec![h, w, 5], -1.0, 1.0, &mut rng);
        let fc = Tensor::uniform(vec![h, w, 5], -1.0, 1.0, &mut rng);
        let lib = fea_distill(g.constant(ff.clone()), g.constant(fc.clone()), &boxes, &grid).item();
        out[3] = (lib - fea_loss(&ff, &fc, &boxes, &grid)).abs();
        let lib = rel_distill(g.constant(ff.clone()), g.constant(fc.clone()), &boxes, &grid).item();
        out[4] = (lib - rel_loss(&ff, &fc, &boxes, &grid)).abs();
        let targets = build_targets(&boxes, &grid, 3);
        let t = |c: usize, rng: &mut ChaCha8Rng| Tensor::uniform(vec![h, w, c], 0.0, 1.0, rng);
        let (hf, rf, hc, rc) = (t(3, &mut rng), t(REG_CHANNELS, &mut rng), t(3, &mut rng), t(REG_CHANNELS, &mut rng));
        let rf_ = Response { heat: g.constant(hf.clone()), reg: g.constant(rf.clone()) };
        let rc_ = Response { heat: g.constant(hc.clone()), reg: g.constant(rc.clone()) };
        out[5] = (resp_distill(&rf_, &rc_, &targets).item() - resp_loss(&hf, &rf, &hc, &rc, &targets)).abs();
        out
    }

    /// Largest `|sum_k W_k - 1|` over every location of both gates, on random
    /// weights and inputs.
    pub fn gate_sum_deviation(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = small_grid(4);
        let mut store = ParamStore::new();
        let aha = AhaParams::new(&mut store, &grid, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::uniform(shape, -3.0, 3.0, &mut rng);
        }
        let g = Graph::inference();
        let b = Binding::new(&g, &store);
        let input = |s: usize, rng: &mut ChaCha8Rng| g.constant(Tensor::uniform(grid.level_shape(s), -5.0, 5.0, rng));
        let mut gates = Vec::new();
        let mut fused = Vec::new();
        for s in 0..3 {
            let r = aha.fuse_scale(&b, input(s, &mut rng), input(s, &mut rng), s);
            gates.push(r.weights.value());
            fused.push(r.output);
        }
        gates.push(aha.aggregate(&b, [fused[0], fused[1], fused[2]]).weights.value());
        let mut worst: f64 = 0.0;
        for w in &gates {
            for cell in w.data().chunks(w.channels()) {
                worst = worst.max((cell.iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }

    fn micro_box(rng: &mut ChaCha8Rng, class_id: usize) -> Box3D {
        let q = |rng: &mut ChaCha8Rng| rng.gen_range(-8i32..=8) as f64 * 0.25;
        Box3D { center: [q(rng), q(rng), 0.0], size: [1.0, 1.0, 1.0], yaw: 0.0, class_id }
    }

    /// One randomized matching case: a few scenes with ground truth and
    /// noisy, partly duplicated predictions; scores are quantized so ties occur.
    pub fn micro_case(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<Box3D>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_scenes = rng.gen_range(1..=3);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..n_scenes {
            let g: Vec<Box3D> = (0..rng.gen_range(0..=4)).map(|_| {
                let c = rng.gen_range(0..3);
                micro_box(&mut rng, c)
            }).collect();
            let mut p = Vec::new();
            for _ in 0..rng.gen_range(0..=6) {
                let mut bbox = if !g.is_empty() && rng.gen_bool(0.7) {
                    let mut b = g[rng.gen_range(0..g.len())].clone();
                    b.center[0] += rng.gen_range(-1.5..1.5);
                    b.center[1] += rng.gen_range(-1.5..1.5);
                    b
                } else {
                    let c = rng.gen_range(0..3);
                    micro_box(&mut rng, c)
                };
                if rng.gen_bool(0.1) {
                    bbox.class_id = rng.gen_range(0..3);
                }
                p.push(Detection { bbox, score: rng.gen_range(1..=8) as f64 / 8.0 });
            }
            preds.push(p);
            gts.push(g);
        }
        (preds, gts)
    }

    pub fn class_names() -> Vec<String> {
        ["car", "pedestrian", "cyclist"].iter().map(|s| s.to_string()).collect()
    }
}
