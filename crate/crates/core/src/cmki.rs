//! Cross-modal knowledge injection: the imitation module and the three
//! distillation losses pulling camera features toward fusion features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::detector::{bev_coords, Response, Targets};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv, ParamGroup, ParamId, ParamStore};
use crate::scene::Box3D;
use crate::tensor::Tensor;
use crate::voxelizer::GridSpec;

/// `C_imi^2D(Flatten(C_imi^3D(F_c^1)))`.
#[derive(Clone, Debug)]
pub struct ImitationParams {
    pub conv3d: Conv,
    pub conv2d: Conv,
}

impl ImitationParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, grid: &GridSpec, rng: &mut R) -> Self {
        let c = grid.channels;
        let g = ParamGroup::Prompter;
        Self {
            conv3d: Conv::conv3d(store, "imitation.conv3d", g, c, c, 3, rng),
            conv2d: Conv::pointwise(store, "imitation.conv2d", g, grid.dims_at(1)[0] * c, c, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv3d.param_ids();
        ids.extend(self.conv2d.param_ids());
        ids
    }

    pub fn forward<'g>(&self, p: &Binding<'g, '_>, f_c1: Var<'g>) -> Var<'g> {
        self.conv2d.forward(p, self.conv3d.forward(p, f_c1).vertical_flatten())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub fea: f64,
    pub rel: f64,
    pub resp: f64,
}

impl DistillWeights {
    pub const ZERO: Self = Self { fea: 0.0, rel: 0.0, resp: 0.0 };

    /// Named presets: `a` is the default.
    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "a" => Some(Self { fea: 1.1, rel: 8.0, resp: 2.0 }),
            "b" => Some(Self { fea: 1.5, rel: 10.0, resp: 2.5 }),
            "c" => Some(Self { fea: 8.0, rel: 25.0, resp: 10.0 }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.fea, self.rel, self.resp].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("distillation weights must be finite and nonnegative, got {self:?}")))
        }
    }

    pub fn is_zero(&self) -> bool {
        self.fea == 0.0 && self.rel == 0.0 && self.resp == 0.0
    }
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self::profile("a").unwrap()
    }
}

/// Flat BEV cells `row * W + col` whose centers lie inside a box footprint,
/// plus every box's center cell. Sorted, without duplicates.
pub fn foreground_cells(boxes: &[Box3D], grid: &GridSpec) -> Vec<usize> {
    let [h, w] = grid.bev_dims();
    let [ch, cw] = grid.bev_cell();
    let mut mask = vec![false; h * w];
    for b in boxes {
        let [hx, hy] = b.half_extents_xy();
        for r in 0..h {
            let y = grid.origin[1] + (r as f64 + 0.5) * ch;
            if (y - b.center[1]).abs() > hy {
                continue;
            }
            for c in 0..w {
                let x = grid.origin[0] + (c as f64 + 0.5) * cw;
                if (x - b.center[0]).abs() <= hx {
                    mask[r * w + c] = true;
                }
            }
        }
        let (fr, fc) = bev_coords(grid, b.center[0], b.center[1]);
        if fr >= 0.0 && fc >= 0.0 && fr < h as f64 && fc < w as f64 {
            mask[fr.floor() as usize * w + fc.floor() as usize] = true;
        }
    }
    (0..h * w).filter(|&i| mask[i]).collect()
}

fn zero(graph: &crate::autograd::Graph) -> Var<'_> {
    graph.constant(Tensor::scalar(0.0))
}

fn as_rows<'g>(x: Var<'g>) -> Var<'g> {
    let s = x.shape();
    let c = *s.last().unwrap();
    x.reshape(&[s.iter().product::<usize>() / c, c])
}

/// Squared L2 difference per foreground cell, averaged over those cells.
pub fn fea_distill<'g>(f_f: Var<'g>, f_c: Var<'g>, boxes: &[Box3D], grid: &GridSpec) -> Var<'g> {
    assert_eq!(f_f.shape(), f_c.shape(), "BEV features differ in shape");
    let cells = foreground_cells(boxes, grid);
    if cells.is_empty() {
        return zero(f_c.graph());
    }
    let d = as_rows(f_f).gather_rows(&cells).sub(&as_rows(f_c).gather_rows(&cells));
    d.square().sum().scale(1.0 / cells.len() as f64)
}

/// Continuous BEV keypoints per box: center, then the four footprint corners.
pub fn keypoints(boxes: &[Box3D], grid: &GridSpec) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(5 * boxes.len());
    for b in boxes {
        pts.push(bev_coords(grid, b.center[0], b.center[1]));
        for [x, y] in b.bev_corners() {
            pts.push(bev_coords(grid, x, y));
        }
    }
    pts
}

/// Bilinear taps at continuous cell coordinates, cell values sitting at
/// cell centers, clamped to the border.
pub fn bilinear_taps(points: &[(f64, f64)], h: usize, w: usize) -> Vec<Vec<(usize, f64)>> {
    let axis = |v: f64, n: usize| {
        let s = (v - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let t = s - i0 as f64;
        [(i0, 1.0 - t), (i1, t)]
    };
    points
        .iter()
        .map(|&(r, c)| {
            let mut taps = Vec::with_capacity(4);
            for (ri, wr) in axis(r, h) {
                for (ci, wc) in axis(c, w) {
                    if wr * wc != 0.0 {
                        taps.push((ri * w + ci, wr * wc));
                    }
                }
            }
            taps
        })
        .collect()
}

/// Mean absolute difference between the keypoint cosine-similarity
/// matrices of the two encoded maps.
pub fn rel_distill<'g>(en_f: Var<'g>, en_c: Var<'g>, boxes: &[Box3D], grid: &GridSpec) -> Var<'g> {
    assert_eq!(en_f.shape(), en_c.shape(), "encoded features differ in shape");
    let pts = keypoints(boxes, grid);
    if pts.len() < 2 {
        return zero(en_c.graph());
    }
    let s = en_c.shape();
    let taps = bilinear_taps(&pts, s[0], s[1]);
    let sf = as_rows(en_f).gather_weighted(taps.clone()).cosine_matrix();
    let sc = as_rows(en_c).gather_weighted(taps).cosine_matrix();
    sf.sub(&sc).abs().sum().scale(1.0 / (pts.len() * pts.len()) as f64)
}

fn broadcast_cells(weights: &[f64], shape: Vec<usize>) -> Tensor {
    let c = *shape.last().unwrap();
    Tensor::new(shape, weights.iter().flat_map(|&w| std::iter::repeat_n(w, c)).collect())
}

/// Squared response difference weighted per cell by the peak Gaussian target,
/// averaged over weight mass and channels.
pub fn resp_distill<'g>(resp_f: &Response<'g>, resp_c: &Response<'g>, targets: &Targets) -> Var<'g> {
    assert_eq!(resp_f.heat.shape(), resp_c.heat.shape(), "heatmaps differ in shape");
    let heat_t = &targets.heat;
    let k = heat_t.channels();
    let cell_w: Vec<f64> = heat_t.data().chunks(k).map(|r| r.iter().fold(0.0f64, |a, &b| a.max(b))).collect();
    let mass: f64 = cell_w.iter().sum();
    let graph = resp_c.heat.graph();
    if mass == 0.0 {
        return zero(graph);
    }
    let n_reg = resp_c.reg.shape()[2];
    let wh = graph.constant(broadcast_cells(&cell_w, resp_c.heat.shape()));
    let wr = graph.constant(broadcast_cells(&cell_w, resp_c.reg.shape()));
    let heat = resp_f.heat.sub(&resp_c.heat).square().mul(&wh).sum();
    let reg = resp_f.reg.sub(&resp_c.reg).square().mul(&wr).sum();
    heat.add(&reg).scale(1.0 / (mass * (k + n_reg) as f64))
}

/// Features and responses of both branches for one scene.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutputs<'g> {
    pub bev: Var<'g>,
    pub encoded: Var<'g>,
    pub resp: Response<'g>,
}

impl<'g> BranchOutputs<'g> {
    pub fn detach(&self) -> Self {
        Self { bev: self.bev.detach(), encoded: self.encoded.detach(), resp: self.resp.detach() }
    }
}

/// Unweighted distillation terms and their weighted sum.
pub struct CmkiLoss<'g> {
    pub fea: Var<'g>,
    pub rel: Var<'g>,
    pub resp: Var<'g>,
    pub total: Var<'g>,
}

/// `λ1 L_fea + λ2 L_rel + λ3 L_resp`. Terms with zero weight are left out of
/// the total entirely. With `detach_fusion`, no gradient reaches the fusion side.
pub fn cmki_loss<'g>(
    fusion: &BranchOutputs<'g>,
    camera: &BranchOutputs<'g>,
    boxes: &[Box3D],
    targets: &Targets,
    grid: &GridSpec,
    weights: DistillWeights,
    detach_fusion: bool,
) -> CmkiLoss<'g> {
    let fusion = if detach_fusion { fusion.detach() } else { *fusion };
    let fea = fea_distill(fusion.bev, camera.bev, boxes, grid);
    let rel = rel_distill(fusion.encoded, camera.encoded, boxes, grid);
    let resp = resp_distill(&fusion.resp, &camera.resp, targets);
    let graph = camera.bev.graph();
    let terms: Vec<Var<'g>> = [(weights.fea, fea), (weights.rel, rel), (weights.resp, resp)]
        .into_iter()
        .filter(|(w, _)| *w != 0.0)
        .map(|(w, t)| t.scale(w))
        .collect();
    let total = crate::autograd::add_all(graph, &terms);
    CmkiLoss { fea, rel, resp, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::detector::build_targets;
    use crate::gradcheck;
    use crate::scene::WorldSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridSpec {
        GridSpec::from_world(&WorldSpec::default(), [1.0; 3], 8).unwrap()
    }

    fn car(x: f64, y: f64) -> Box3D {
        Box3D { center: [x, y, -1.1], size: [4.0, 2.0, 1.6], yaw: 0.0, class_id: 0 }
    }

    #[test]
    fn imitation_shape_and_linearity() {
        let g = grid();
        let mut store = ParamStore::new();
        let imi = ImitationParams::new(&mut store, &g, &mut ChaCha8Rng::seed_from_u64(0));
        let graph = Graph::inference();
        let b = Binding::new(&graph, &store);
        let out = imi.forward(&b, graph.constant(Tensor::zeros(g.level_shape(1))));
        assert_eq!(out.shape(), vec![16, 16, 8]);
        assert_eq!(out.value().max_abs(), 0.0);
        assert!(imi.param_ids().iter().all(|&id| store.entry(id).group == ParamGroup::Prompter));
    }

    #[test]
    fn foreground_of_car() {
        let g = grid();
        // 4 x 2 m car centered at (1, 1): cell centers at x in {-1, 1, 3}, y = 1.
        let cells = foreground_cells(&[car(1.0, 1.0)], &g);
        let want: Vec<usize> = [7, 8, 9].iter().map(|c| 8 * 16 + c).collect();
        assert_eq!(cells, want);
        assert!(foreground_cells(&[], &g).is_empty());
        // A small box covering no cell center still contributes its center cell.
        let ped = Box3D { center: [0.3, 0.3, -1.0], size: [0.6, 0.6, 1.7], yaw: 0.0, class_id: 1 };
        assert_eq!(foreground_cells(&[ped], &g), vec![8 * 16 + 8]);
    }

    #[test]
    fn degenerate_and_identical_cases_are_zero() {
        let g = grid();
        let graph = Graph::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = graph.constant(Tensor::uniform(vec![16, 16, 8], -1.0, 1.0, &mut rng));
        let other = graph.constant(Tensor::uniform(vec![16, 16, 8], -1.0, 1.0, &mut rng));
        let boxes = [car(3.0, -5.0), car(-7.0, 6.0)];
        assert_eq!(fea_distill(f, f, &boxes, &g).item(), 0.0);
        assert_eq!(fea_distill(f, other, &[], &g).item(), 0.0);
        assert!(fea_distill(f, other, &boxes, &g).item() > 0.0);
        assert_eq!(rel_distill(f, f, &boxes, &g).item(), 0.0);
        assert_eq!(rel_distill(f, other, &[], &g).item(), 0.0);
        assert!(rel_distill(f, other, &boxes[..1], &g).item().is_finite());

        let t = build_targets(&boxes, &g, 3);
        let heat = graph.constant(Tensor::uniform(vec![16, 16, 3], 0.0, 1.0, &mut rng));
        let reg = graph.constant(Tensor::uniform(vec![16, 16, 6], -1.0, 1.0, &mut rng));
        let r = Response { heat, reg };
        assert_eq!(resp_distill(&r, &r, &t).item(), 0.0);
        let r2 = Response { heat: heat.scale(0.5), reg };
        assert_eq!(resp_distill(&r, &r2, &build_targets(&[], &g, 3)).item(), 0.0);
        assert!(resp_distill(&r, &r2, &t).item() > 0.0);
    }

    #[test]
    fn hand_computed_feature_loss() {
        // 4x4 BEV over [-4, 4] with cell centers at -3, -1, 1, 3: a 4 x 2 m box
        // at (0, -1) covers x in {-1, 1} on row y = -1, i.e. cells 5 and 6.
        let world = WorldSpec { xy_range: [-4.0, 4.0], ..WorldSpec::default() };
        let g = GridSpec::from_world(&world, [1.0; 3], 1).unwrap();
        let b = car(0.0, -1.0);
        assert_eq!(foreground_cells(&[b.clone()], &g), vec![5, 6]);
        let graph = Graph::inference();
        let mut ff = Tensor::zeros(vec![4, 4, 1]);
        let mut fc = Tensor::zeros(vec![4, 4, 1]);
        ff.data_mut()[5] = 2.0;
        fc.data_mut()[6] = -1.0;
        ff.data_mut()[0] = 100.0;
        let loss = fea_distill(graph.constant(ff), graph.constant(fc), &[b], &g).item();
        assert!((loss - (4.0 + 1.0) / 2.0).abs() < 1e-15);

        let mut ff = Tensor::zeros(vec![4, 4, 2]);
        ff.data_mut()[10..12].copy_from_slice(&[1.0, 2.0]);
        let fc = Tensor::zeros(vec![4, 4, 2]);
        let loss = fea_distill(graph.constant(ff), graph.constant(fc), &[car(0.0, -1.0)], &g).item();
        assert!((loss - (1.0 + 4.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn profiles_and_validation() {
        assert_eq!(DistillWeights::default(), DistillWeights { fea: 1.1, rel: 8.0, resp: 2.0 });
        assert_eq!(DistillWeights::profile("c").unwrap().rel, 25.0);
        assert!(DistillWeights::profile("z").is_none());
        assert!(DistillWeights { fea: -1.0, ..DistillWeights::default() }.validate().is_err());
    }

    fn branches<'g>(graph: &'g Graph, vals: &[Tensor]) -> (BranchOutputs<'g>, BranchOutputs<'g>) {
        let v: Vec<Var<'g>> = vals.iter().map(|t| graph.leaf(t.clone())).collect();
        let f = BranchOutputs { bev: v[0], encoded: v[1], resp: Response { heat: v[2], reg: v[3] } };
        let c = BranchOutputs { bev: v[4], encoded: v[5], resp: Response { heat: v[6], reg: v[7] } };
        (f, c)
    }

    fn random_branch_values(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let shapes = [vec![16, 16, 8], vec![16, 16, 4], vec![16, 16, 3], vec![16, 16, 6]];
        let mut out = Vec::new();
        for _ in 0..2 {
            for s in &shapes {
                let t = Tensor::uniform(s.clone(), -1.0, 1.0, rng);
                out.push(if s[2] == 3 { t.map(|v| 0.5 + 0.4 * v) } else { t });
            }
        }
        out
    }

    #[test]
    fn detach_blocks_fusion_gradients() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals = random_branch_values(&mut rng);
        let boxes = [car(3.0, -5.0), car(-7.0, 6.0)];
        let t = build_targets(&boxes, &g, 3);
        for detach in [true, false] {
            let graph = Graph::new();
            let (f, c) = branches(&graph, &vals);
            let loss = cmki_loss(&f, &c, &boxes, &t, &g, DistillWeights::default(), detach);
            let grads = graph.backward(loss.total);
            let fusion_touched = [f.bev, f.encoded, f.resp.heat, f.resp.reg]
                .iter()
                .any(|v| grads.get(*v).is_some_and(|g| g.max_abs() > 0.0));
            assert_eq!(fusion_touched, !detach);
            assert!(grads.get(c.bev).unwrap().max_abs() > 0.0);
        }
        let graph = Graph::new();
        let (f, c) = branches(&graph, &vals);
        assert_eq!(cmki_loss(&f, &c, &boxes, &t, &g, DistillWeights::ZERO, true).total.item(), 0.0);
        let same = cmki_loss(&c, &c, &boxes, &t, &g, DistillWeights::default(), true);
        assert_eq!(same.total.item(), 0.0);
    }

    #[test]
    fn distill_gradients_match_finite_differences() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals = random_branch_values(&mut rng);
        let boxes = [car(3.3, -5.2), car(-7.0, 6.5)];
        let t = build_targets(&boxes, &g, 3);
        let camera = vals[4..].to_vec();
        let results = gradcheck::check(&camera, 1e-6, 200, |graph, vars| {
            let f = BranchOutputs {
                bev: graph.constant(vals[0].clone()),
                encoded: graph.constant(vals[1].clone()),
                resp: Response { heat: graph.constant(vals[2].clone()), reg: graph.constant(vals[3].clone()) },
            };
            let c = BranchOutputs { bev: vars[0], encoded: vars[1], resp: Response { heat: vars[2], reg: vars[3] } };
            cmki_loss(&f, &c, &boxes, &t, &g, DistillWeights::default(), true).total
        });
        for r in results {
            assert!(r.rel_error < 1e-4, "input {} rel error {}", r.input, r.rel_error);
        }
    }
}
