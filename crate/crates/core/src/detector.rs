//! Shared BEV encoder, center-heatmap head, training targets and decoding.

use rand::Rng;

use crate::autograd::{add_all, Var};
use crate::nn::{Binding, Conv, ParamGroup, ParamId, ParamStore};
use crate::scene::Box3D;
use crate::tensor::Tensor;
use crate::voxelizer::GridSpec;

pub const ENCODER_CHANNELS: usize = 64;
/// `(dx, dy, z, log ext_x, log ext_y, log h)`.
pub const REG_CHANNELS: usize = 6;
/// Heatmap bias so the initial foreground probability is about 0.1.
pub const HEAT_PRIOR_BIAS: f64 = -2.19;

/// `relu(x + conv2(relu(conv1(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv::conv2d(store, &format!("{name}.conv1"), ParamGroup::Base, c, c, 3, 1, rng),
            conv2: Conv::conv2d(store, &format!("{name}.conv2"), ParamGroup::Base, c, c, 3, 1, rng),
        }
    }

    fn forward<'g>(&self, p: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        let y = self.conv2.forward(p, self.conv1.forward(p, x).relu());
        x.add(&y).relu()
    }

    fn param_ids(&self) -> Vec<ParamId> {
        [&self.conv1, &self.conv2].iter().flat_map(|c| c.param_ids()).collect()
    }
}

/// Three-stage residual encoder with a top-down merge back to full BEV resolution.
#[derive(Clone, Debug)]
pub struct BevEncoder {
    pub stem: Conv,
    pub stages: [ResBlock; 3],
    pub downs: [Conv; 2],
    pub laterals: [Conv; 3],
}

impl BevEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_channels: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Base;
        let w = [ENCODER_CHANNELS / 2, ENCODER_CHANNELS, 2 * ENCODER_CHANNELS];
        Self {
            stem: Conv::conv2d(store, "bev.stem", g, in_channels, w[0], 3, 1, rng),
            stages: std::array::from_fn(|i| ResBlock::new(store, &format!("bev.res{i}"), w[i], rng)),
            downs: std::array::from_fn(|i| Conv::conv2d(store, &format!("bev.down{i}"), g, w[i], w[i + 1], 3, 2, rng)),
            laterals: std::array::from_fn(|i| Conv::pointwise(store, &format!("bev.lat{i}"), g, w[i], ENCODER_CHANNELS, rng)),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stem.param_ids();
        ids.extend(self.stages.iter().flat_map(ResBlock::param_ids));
        ids.extend(self.downs.iter().flat_map(Conv::param_ids));
        ids.extend(self.laterals.iter().flat_map(Conv::param_ids));
        ids
    }

    /// `[H, W, C] -> [H, W, C_en]`; `H` and `W` must be multiples of 4.
    pub fn forward<'g>(&self, p: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        let s0 = self.stages[0].forward(p, self.stem.forward(p, x).relu());
        let s1 = self.stages[1].forward(p, self.downs[0].forward(p, s0).relu());
        let s2 = self.stages[2].forward(p, self.downs[1].forward(p, s1).relu());
        let top = self.laterals[2].forward(p, s2);
        let mid = self.laterals[1].forward(p, s1).add(&upsample2(top));
        self.laterals[0].forward(p, s0).add(&upsample2(mid)).relu()
    }
}

/// Nearest-neighbour 2x upsampling of an `[H, W, C]` map.
pub fn upsample2<'g>(x: Var<'g>) -> Var<'g> {
    let &[h, w, c] = x.shape().as_slice() else { panic!("upsample2 expects [H, W, C]") };
    let idx: Vec<usize> = (0..2 * h).flat_map(|r| (0..2 * w).map(move |q| (r / 2) * w + q / 2)).collect();
    x.reshape(&[h * w, c]).gather_rows(&idx).reshape(&[2 * h, 2 * w, c])
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub heat: Conv,
    pub reg: Conv,
}

/// Sigmoid class heatmaps `[H, W, K]` and regression maps `[H, W, 6]`.
#[derive(Clone, Copy, Debug)]
pub struct Response<'g> {
    pub heat: Var<'g>,
    pub reg: Var<'g>,
}

impl<'g> Response<'g> {
    pub fn detach(&self) -> Self {
        Self { heat: self.heat.detach(), reg: self.reg.detach() }
    }

    pub fn to_map(&self) -> ResponseMap {
        ResponseMap { heat: (*self.heat.value()).clone(), reg: (*self.reg.value()).clone() }
    }
}

/// Response values outside a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub heat: Tensor,
    pub reg: Tensor,
}

#[derive(Clone, Debug)]
pub struct DetectorParams {
    pub encoder: BevEncoder,
    pub head: DetectionHead,
    pub n_classes: usize,
}

impl DetectorParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_channels: usize, n_classes: usize, rng: &mut R) -> Self {
        let encoder = BevEncoder::new(store, in_channels, rng);
        let head = DetectionHead {
            heat: Conv::pointwise(store, "head.heat", ParamGroup::Base, ENCODER_CHANNELS, n_classes, rng),
            reg: Conv::pointwise(store, "head.reg", ParamGroup::Base, ENCODER_CHANNELS, REG_CHANNELS, rng),
        };
        store.get_mut(head.heat.bias.unwrap()).data_mut().fill(HEAT_PRIOR_BIAS);
        Self { encoder, head, n_classes }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend(self.head.heat.param_ids());
        ids.extend(self.head.reg.param_ids());
        ids
    }

    pub fn encode<'g>(&self, p: &Binding<'g, '_>, bev: Var<'g>) -> Var<'g> {
        self.encoder.forward(p, bev)
    }

    pub fn head<'g>(&self, p: &Binding<'g, '_>, encoded: Var<'g>) -> Response<'g> {
        Response { heat: self.head.heat.forward(p, encoded).sigmoid(), reg: self.head.reg.forward(p, encoded) }
    }
}

/// Center cell of a box and its regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterTarget {
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    pub reg: [f64; REG_CHANNELS],
}

/// Splatted heatmap target and per-box regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub heat: Tensor,
    pub centers: Vec<CenterTarget>,
}

/// Continuous BEV cell coordinates `(row, col)` of a world `(x, y)`.
pub fn bev_coords(grid: &GridSpec, x: f64, y: f64) -> (f64, f64) {
    let [ch, cw] = grid.bev_cell();
    ((y - grid.origin[1]) / ch, (x - grid.origin[0]) / cw)
}

/// Gaussian radius in cells: half the smaller footprint extent, at least 1.
pub fn gaussian_radius(b: &Box3D, grid: &GridSpec) -> usize {
    let [hx, hy] = b.half_extents_xy();
    let [ch, cw] = grid.bev_cell();
    let cells = (2.0 * hx / cw).min(2.0 * hy / ch);
    ((cells / 2.0).floor() as usize).max(1)
}

pub fn build_targets(boxes: &[Box3D], grid: &GridSpec, n_classes: usize) -> Targets {
    let [h, w] = grid.bev_dims();
    let mut heat = Tensor::zeros(vec![h, w, n_classes]);
    let mut centers = Vec::with_capacity(boxes.len());
    for b in boxes {
        let (fr, fc) = bev_coords(grid, b.center[0], b.center[1]);
        if !(fr >= 0.0 && fc >= 0.0 && fr < h as f64 && fc < w as f64) {
            continue;
        }
        let (row, col) = (fr.floor() as usize, fc.floor() as usize);
        let r = gaussian_radius(b, grid) as isize;
        let sigma = (2 * r + 1) as f64 / 6.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (row as isize + dy, col as isize + dx);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let off = heat.offset(&[y as usize, x as usize, b.class_id]);
                let cell = &mut heat.data_mut()[off];
                *cell = cell.max(v);
            }
        }
        let [hx, hy] = b.half_extents_xy();
        let reg = [fc - (col as f64 + 0.5), fr - (row as f64 + 0.5), b.center[2], (2.0 * hx).ln(), (2.0 * hy).ln(), b.size[2].ln()];
        centers.push(CenterTarget { row, col, class_id: b.class_id, reg });
    }
    Targets { heat, centers }
}

/// Heatmap and regression terms of the detection loss.
pub struct DetectionLoss<'g> {
    pub heat: Var<'g>,
    pub reg: Var<'g>,
}

impl<'g> DetectionLoss<'g> {
    pub fn total(&self) -> Var<'g> {
        self.heat.add(&self.reg)
    }
}

/// Soft-target focal loss on the heatmaps plus L1 regression at center
/// cells, both normalized by the number of boxes (at least 1).
pub fn detection_loss<'g>(resp: &Response<'g>, targets: &Targets) -> DetectionLoss<'g> {
    let graph = resp.heat.graph();
    let norm = 1.0 / targets.centers.len().max(1) as f64;
    let heat = resp.heat.soft_focal_loss(&targets.heat).scale(norm);
    let reg = if targets.centers.is_empty() {
        graph.constant(Tensor::scalar(0.0))
    } else {
        let &[_, w, c] = resp.reg.shape().as_slice() else { panic!("regression map must be [H, W, 6]") };
        let rows: Vec<usize> = targets.centers.iter().map(|t| t.row * w + t.col).collect();
        let want: Vec<f64> = targets.centers.iter().flat_map(|t| t.reg).collect();
        let picked = resp.reg.reshape(&[resp.reg.value().len() / c, c]).gather_rows(&rows);
        let diff = picked.sub(&graph.constant(Tensor::new(vec![rows.len(), c], want)));
        add_all(graph, &[diff.abs().sum()]).scale(norm)
    };
    DetectionLoss { heat, reg }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// 3x3 local maxima above `score_thresh`, best first, at most `max_dets`.
///
/// Equal scores are ordered by flat index `(row * W + col) * K + class`.
pub fn decode(resp: &ResponseMap, grid: &GridSpec, score_thresh: f64, max_dets: usize) -> Vec<Detection> {
    let &[h, w, k] = resp.heat.shape() else { panic!("heatmap must be [H, W, K]") };
    let heat = resp.heat.data();
    let mut peaks: Vec<(f64, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            for cls in 0..k {
                let flat = (r * w + c) * k + cls;
                let v = heat[flat];
                if !(v > score_thresh) {
                    continue;
                }
                let is_max = (r.saturating_sub(1)..(r + 2).min(h))
                    .all(|y| (c.saturating_sub(1)..(c + 2).min(w)).all(|x| heat[(y * w + x) * k + cls] <= v));
                if is_max {
                    peaks.push((v, flat));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    peaks.truncate(max_dets);
    let [ch, cw] = grid.bev_cell();
    peaks
        .into_iter()
        .map(|(score, flat)| {
            let (cell, class_id) = (flat / k, flat % k);
            let (r, c) = (cell / w, cell % w);
            let g = &resp.reg.data()[cell * REG_CHANNELS..(cell + 1) * REG_CHANNELS];
            let x = grid.origin[0] + (c as f64 + 0.5 + g[0]) * cw;
            let y = grid.origin[1] + (r as f64 + 0.5 + g[1]) * ch;
            let bbox = Box3D { center: [x, y, g[2]], size: [g[3].exp(), g[4].exp(), g[5].exp()], yaw: 0.0, class_id };
            Detection { bbox, score }
        })
        .collect()
}
