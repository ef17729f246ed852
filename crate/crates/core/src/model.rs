//! The camera base detector with its LiDAR-assisted prompter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aha::AhaParams;
use crate::autograd::{Graph, Var};
use crate::camera_lift::CameraLift;
use crate::cmki::{cmki_loss, BranchOutputs, DistillWeights, ImitationParams};
use crate::detector::{build_targets, decode, detection_loss, Detection, DetectorParams, ResponseMap};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv, ParamGroup, ParamId, ParamStore};
use crate::scene::Scene;
use crate::tensor::Tensor;
use crate::voxelizer::{GridSpec, LidarEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Fusion and camera branches, hybrid supervision and CMKI.
    #[serde(rename = "promptdet")]
    PromptDet,
    /// Fusion branch only, no camera loss and no CMKI.
    #[serde(rename = "fusion_only")]
    FusionOnly,
    /// The plain camera detector without a prompter.
    #[serde(rename = "camera_baseline")]
    CameraBaseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::PromptDet => "promptdet",
            Mode::FusionOnly => "fusion_only",
            Mode::CameraBaseline => "camera_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "promptdet" => Ok(Mode::PromptDet),
            "fusion_only" => Ok(Mode::FusionOnly),
            "camera_baseline" => Ok(Mode::CameraBaseline),
            _ => Err(Error::Config(format!("unknown mode `{s}` (promptdet, fusion_only, camera_baseline)"))),
        }
    }

    pub fn has_prompter(self) -> bool {
        self != Mode::CameraBaseline
    }
}

#[derive(Clone, Debug)]
pub struct Prompter {
    pub lidar: LidarEncoder,
    pub aha: AhaParams,
    pub imitation: ImitationParams,
}

#[derive(Clone, Debug)]
pub struct PromptDetModel {
    pub mode: Mode,
    pub grid: GridSpec,
    pub n_classes: usize,
    pub store: ParamStore,
    pub camera: CameraLift,
    pub detector: DetectorParams,
    /// Learned vertical flatten of the base model; replaced by the imitation module when a prompter exists.
    pub base_flatten: Option<Conv>,
    pub prompter: Option<Prompter>,
}

impl PromptDetModel {
    pub fn new(mode: Mode, grid: GridSpec, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let camera = CameraLift::new(&mut store, &grid, &mut rng);
        let detector = DetectorParams::new(&mut store, grid.channels, n_classes, &mut rng);
        let (base_flatten, prompter) = if mode.has_prompter() {
            let lidar = LidarEncoder::new(&mut store, &grid, &mut rng);
            let aha = AhaParams::new(&mut store, &grid, &mut rng);
            let imitation = ImitationParams::new(&mut store, &grid, &mut rng);
            (None, Some(Prompter { lidar, aha, imitation }))
        } else {
            let c = grid.channels;
            (Some(Conv::pointwise(&mut store, "cam.flatten", ParamGroup::Base, grid.dims_at(1)[0] * c, c, &mut rng)), None)
        };
        Self { mode, grid, n_classes, store, camera, detector, base_flatten, prompter }
    }

    pub fn aha_param_ids(&self) -> Vec<ParamId> {
        self.prompter.as_ref().map(|p| p.aha.param_ids()).unwrap_or_default()
    }

    pub fn lidar_param_ids(&self) -> Vec<ParamId> {
        self.prompter.as_ref().map(|p| p.lidar.layers.iter().flatten().flat_map(Conv::param_ids).collect()).unwrap_or_default()
    }

    /// Camera BEV feature `F_c` from `F_c^1`.
    fn camera_bev<'g>(&self, p: &Binding<'g, '_>, f_c1: Var<'g>) -> Var<'g> {
        match (&self.prompter, &self.base_flatten) {
            (Some(pr), _) => pr.imitation.forward(p, f_c1),
            (None, Some(flat)) => flat.forward(p, f_c1.vertical_flatten()),
            (None, None) => unreachable!("model without a flatten path"),
        }
    }

    /// Fusion BEV feature `F_f` and the camera pyramid it was built from.
    fn fusion_bev<'g>(&self, p: &Binding<'g, '_>, scene: &Scene) -> Result<(Var<'g>, Var<'g>)> {
        let pr = self.prompter.as_ref().ok_or_else(|| Error::Mode("camera_baseline model has no LiDAR path".into()))?;
        let camera = self.camera.lift_views(p, &scene.views, &self.grid);
        let lidar = pr.lidar.forward(p, &scene.points, &self.grid);
        Ok((pr.aha.forward(p, &lidar, &camera), camera[1]))
    }

    fn branch<'g>(&self, p: &Binding<'g, '_>, bev: Var<'g>) -> BranchOutputs<'g> {
        let encoded = self.detector.encode(p, bev);
        BranchOutputs { bev, encoded, resp: self.detector.head(p, encoded) }
    }

    /// Inference outputs of one branch. The camera path never reads `scene.points`.
    pub fn infer(&self, scene: &Scene, use_lidar: bool) -> Result<Inference> {
        let graph = Graph::inference();
        let p = Binding::new(&graph, &self.store);
        let bev = if use_lidar {
            self.fusion_bev(&p, scene)?.0
        } else {
            let f0 = self.camera.lift(&p, &scene.views, &self.grid);
            self.camera_bev(&p, self.camera.pooled(&p, f0, 1))
        };
        let out = self.branch(&p, bev);
        Ok(Inference { bev: (*out.bev.value()).clone(), encoded: (*out.encoded.value()).clone(), resp: out.resp.to_map() })
    }

    pub fn predict(&self, scene: &Scene, use_lidar: bool, score_thresh: f64, max_dets: usize) -> Result<Vec<Detection>> {
        let out = self.infer(scene, use_lidar)?;
        Ok(decode(&out.resp, &self.grid, score_thresh, max_dets))
    }

    /// Builds the training graph of one scene with the loss terms of its mode.
    pub fn forward_train<'g>(&self, p: &Binding<'g, '_>, scene: &Scene, objective: &Objective) -> Result<TrainForward<'g>> {
        let graph = p.graph();
        let targets = build_targets(&scene.boxes, &self.grid, self.n_classes);
        let zero = || graph.constant(Tensor::scalar(0.0));
        let mut parts = LossParts { det_fusion: zero(), det_camera: zero(), fea: zero(), rel: zero(), resp: zero() };
        let mut raw = [0.0; 3];
        let mut distance = None;

        let fusion = match self.mode {
            Mode::CameraBaseline => None,
            _ => {
                let (f_f, f_c1) = self.fusion_bev(p, scene)?;
                let out = self.branch(p, f_f);
                parts.det_fusion = detection_loss(&out.resp, &targets).total();
                Some((out, f_c1))
            }
        };
        if self.mode != Mode::FusionOnly {
            let f_c1 = match &fusion {
                Some((_, f_c1)) => *f_c1,
                None => {
                    let f0 = self.camera.lift(p, &scene.views, &self.grid);
                    self.camera.pooled(p, f0, 1)
                }
            };
            let cam = self.branch(p, self.camera_bev(p, f_c1));
            parts.det_camera = detection_loss(&cam.resp, &targets).total();
            if let Some((fus, _)) = &fusion {
                let l = cmki_loss(fus, &cam, &scene.boxes, &targets, &self.grid, objective.weights, objective.detach_fusion);
                raw = [l.fea.item(), l.rel.item(), l.resp.item()];
                parts.fea = l.fea.scale(objective.weights.fea);
                parts.rel = l.rel.scale(objective.weights.rel);
                parts.resp = l.resp.scale(objective.weights.resp);
                let (f, c) = (fus.bev.value(), cam.bev.value());
                let fg = crate::cmki::foreground_cells(&scene.boxes, &self.grid);
                distance = Some(FeatureDistance {
                    foreground: (!fg.is_empty()).then(|| mean_cell_distance(&f, &c, Some(&fg))),
                    all: mean_cell_distance(&f, &c, None),
                });
            }
        }

        let components = parts.values();
        for (name, v) in LossComponents::NAMES.iter().zip(components.as_array()) {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        let w = objective.weights;
        let mut terms = vec![];
        match self.mode {
            Mode::CameraBaseline => terms.push(parts.det_camera),
            Mode::FusionOnly => terms.push(parts.det_fusion),
            Mode::PromptDet => {
                terms.extend([parts.det_fusion, parts.det_camera]);
                terms.extend([(w.fea, parts.fea), (w.rel, parts.rel), (w.resp, parts.resp)].iter().filter(|(l, _)| *l != 0.0).map(|t| t.1));
            }
        }
        let loss = crate::autograd::add_all(graph, &terms);
        Ok(TrainForward { loss, parts, components, raw_distill: raw, feature_distance: distance })
    }
}

/// Outputs of one inference pass, as plain tensors.
#[derive(Clone, Debug)]
pub struct Inference {
    pub bev: Tensor,
    pub encoded: Tensor,
    pub resp: ResponseMap,
}

/// What to optimize in a training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub weights: DistillWeights,
    pub detach_fusion: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self { weights: DistillWeights::default(), detach_fusion: true }
    }
}

/// Weighted loss terms as graph nodes; absent terms are constant zeros.
#[derive(Clone, Copy)]
pub struct LossParts<'g> {
    pub det_fusion: Var<'g>,
    pub det_camera: Var<'g>,
    pub fea: Var<'g>,
    pub rel: Var<'g>,
    pub resp: Var<'g>,
}

impl LossParts<'_> {
    fn values(&self) -> LossComponents {
        LossComponents {
            det_fusion: self.det_fusion.item(),
            det_camera: self.det_camera.item(),
            fea: self.fea.item(),
            rel: self.rel.item(),
            resp: self.resp.item(),
        }
    }
}

/// Weighted contributions to the total loss. Absent terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub det_fusion: f64,
    pub det_camera: f64,
    pub fea: f64,
    pub rel: f64,
    pub resp: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 5] = ["det_fusion", "det_camera", "fea", "rel", "resp"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.det_fusion, self.det_camera, self.fea, self.rel, self.resp]
    }

    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }

    pub fn detection(&self) -> f64 {
        self.det_fusion + self.det_camera
    }
}

pub struct TrainForward<'g> {
    pub loss: Var<'g>,
    pub parts: LossParts<'g>,
    pub components: LossComponents,
    /// Unweighted `(fea, rel, resp)`.
    pub raw_distill: [f64; 3],
    /// Distance between `F_f` and `F_c`, when both exist.
    pub feature_distance: Option<FeatureDistance>,
}

/// Mean per-cell L2 distance between the fusion and camera BEV features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureDistance {
    /// Over the foreground cells the distillation acts on; `None` without boxes.
    pub foreground: Option<f64>,
    /// Over every BEV cell.
    pub all: f64,
}

/// Mean L2 norm of the channel difference over the given flat cells, or
/// over every cell.
pub fn mean_cell_distance(a: &Tensor, b: &Tensor, cells: Option<&[usize]>) -> f64 {
    let c = a.channels();
    let dist = |i: usize| a.data()[i * c..(i + 1) * c].iter().zip(&b.data()[i * c..(i + 1) * c]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    match cells {
        Some(cells) => cells.iter().map(|&i| dist(i)).sum::<f64>() / cells.len() as f64,
        None => (0..a.rows()).map(dist).sum::<f64>() / a.rows() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{self, WorldSpec};

    fn grid() -> GridSpec {
        GridSpec::from_world(&WorldSpec::default(), [1.0; 3], 8).unwrap()
    }

    #[test]
    fn partition_is_exact() {
        for mode in [Mode::PromptDet, Mode::FusionOnly, Mode::CameraBaseline] {
            let m = PromptDetModel::new(mode, grid(), 3, 0);
            let base = m.store.count(ParamGroup::Base);
            let prompter = m.store.count(ParamGroup::Prompter);
            assert_eq!(base + prompter, m.store.total());
            assert_eq!(prompter == 0, mode == Mode::CameraBaseline);
        }
    }

    #[test]
    fn mode_contracts() {
        let world = WorldSpec::default();
        let s = scene::generate_scene(&world, 1).unwrap();
        let base = PromptDetModel::new(Mode::CameraBaseline, grid(), 3, 0);
        let g = Graph::new();
        let p = Binding::new(&g, &base.store);
        let out = base.forward_train(&p, &s, &Objective::default()).unwrap();
        let c = out.components;
        assert!(c.det_camera > 0.0);
        assert_eq!([c.det_fusion, c.fea, c.rel, c.resp], [0.0; 4]);
        assert!(matches!(base.predict(&s, true, 0.1, 10), Err(Error::Mode(_))));

        let m = PromptDetModel::new(Mode::PromptDet, grid(), 3, 0);
        let g = Graph::new();
        let p = Binding::new(&g, &m.store);
        let zero = Objective { weights: DistillWeights::ZERO, ..Objective::default() };
        let out = m.forward_train(&p, &s, &zero).unwrap();
        assert_eq!(out.loss.item(), out.components.det_fusion + out.components.det_camera);

        let g = Graph::new();
        let p = Binding::new(&g, &m.store);
        let out = m.forward_train(&p, &s, &Objective::default()).unwrap();
        assert!((out.loss.item() - out.components.total()).abs() < 1e-12);
        assert!(out.components.fea > 0.0 && out.components.rel > 0.0 && out.components.resp > 0.0);
    }

    #[test]
    fn camera_path_ignores_points() {
        let world = WorldSpec::default();
        let s = scene::generate_scene(&world, 2).unwrap();
        let mut other = s.clone();
        other.points = scene::generate_scene(&world, 3).unwrap().points;
        let m = PromptDetModel::new(Mode::PromptDet, grid(), 3, 4);
        let a = m.infer(&s, false).unwrap();
        let b = m.infer(&other, false).unwrap();
        assert_eq!(a.resp, b.resp);
        assert_ne!(m.infer(&s, true).unwrap().resp, m.infer(&other, true).unwrap().resp);
    }
}
