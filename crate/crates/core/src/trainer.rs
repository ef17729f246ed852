//! Single-stage joint training of both branches.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint;
use crate::cmki::DistillWeights;
use crate::dataset::{self, Split};
use crate::error::{Error, IoContext, Result};
use crate::geometry::{self, Mat3};
use crate::model::{LossComponents, Mode, Objective, PromptDetModel};
use crate::nn::{Binding, ParamStore};
use crate::scene::{Box3D, CameraView, Scene, WorldSpec};
use crate::tensor::Tensor;
use crate::voxelizer::GridSpec;

pub const LOG_FILE: &str = "log.jsonl";
pub const RESUME_FILE: &str = "resume.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub world: WorldSpec,
    pub grid: GridSpec,
    pub weights: DistillWeights,
    pub mode: Mode,
    pub detach_fusion: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch indices (0-based) at which the rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub seed: u64,
    pub augment: bool,
}

impl TrainConfig {
    /// Default schedule on the default world and grid.
    pub fn toy(mode: Mode) -> Self {
        let world = WorldSpec::default();
        let grid = GridSpec::from_world(&world, [1.0; 3], 8).expect("default grid is valid");
        let weights = if mode == Mode::PromptDet { DistillWeights::default() } else { DistillWeights::ZERO };
        Self {
            world,
            grid,
            weights,
            mode,
            detach_fusion: true,
            epochs: 20,
            batch_size: 4,
            lr: 2e-3,
            lr_decay_epochs: vec![16],
            lr_decay_factor: 0.1,
            weight_decay: 1e-2,
            grad_clip: 10.0,
            seed: 0,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.grid.validate()?;
        self.weights.validate()?;
        if self.mode != Mode::PromptDet && !self.weights.is_zero() {
            return Err(Error::Config(format!("mode {} has no distillation; lambda must be zero", self.mode.name())));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        let finite = [self.lr, self.lr_decay_factor, self.weight_decay, self.grad_clip];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || self.lr == 0.0 {
            return Err(Error::Config("lr, lr_decay_factor, weight_decay and grad_clip must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective { weights: self.weights, detach_fusion: self.detach_fusion }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(n as i32)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }
}

/// One element of the BEV symmetry group: `quarter` right-angle yaw turns
/// after an optional mirror `x -> -x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BevAugment {
    pub quarter: i32,
    pub flip_x: bool,
}

fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    if a >= PI {
        a - TAU
    } else if a < -PI {
        a + TAU
    } else {
        a
    }
}

/// Exact rotation of `(x, y)` by `q` quarter turns.
fn rotate_xy(x: f64, y: f64, q: i32) -> (f64, f64) {
    match q.rem_euclid(4) {
        0 => (x, y),
        1 => (-y, x),
        2 => (-x, -y),
        _ => (y, -x),
    }
}

fn turn_yaw(yaw: f64, q: i32) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    match q.rem_euclid(4) {
        0 => yaw,
        2 => {
            if yaw >= 0.0 {
                yaw - PI
            } else {
                yaw + PI
            }
        }
        r => wrap_angle(yaw + r as f64 * FRAC_PI_2),
    }
}

fn mirror_columns(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        for col in (0..w).rev() {
            out.extend_from_slice(&src[(r * w + col) * c..(r * w + col + 1) * c]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

impl BevAugment {
    pub const IDENTITY: Self = Self { quarter: 0, flip_x: false };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { quarter: rng.gen_range(0..4), flip_x: rng.gen_bool(0.5) }
    }

    /// Applies the transform to points, boxes and camera poses together.
    /// Mirroring also flips every image left-right, which keeps the rig a
    /// proper rotation; this assumes the principal point at the image center.
    pub fn apply(&self, scene: &Scene) -> Scene {
        let q = self.quarter;
        let fx = |x: f64| if self.flip_x { -x } else { x };
        let points = scene
            .points
            .iter()
            .map(|p| {
                let (x, y) = rotate_xy(fx(p[0] as f64), p[1] as f64, q);
                [x as f32, y as f32, p[2], p[3]]
            })
            .collect();
        let boxes = scene
            .boxes
            .iter()
            .map(|b| {
                let yaw = if self.flip_x { wrap_angle(std::f64::consts::PI - b.yaw) } else { b.yaw };
                let (x, y) = rotate_xy(fx(b.center[0]), b.center[1], q);
                Box3D { center: [x, y, b.center[2]], yaw: turn_yaw(yaw, q), ..b.clone() }
            })
            .collect();
        let views = scene
            .views
            .iter()
            .map(|v| {
                let rot = geometry::rotation(&v.pose);
                let t = geometry::translation(&v.pose);
                let cols: Mat3 = std::array::from_fn(|r| {
                    let sign = if self.flip_x && r == 0 { -1.0 } else { 1.0 };
                    std::array::from_fn(|c| sign * rot[r][c] * if self.flip_x && c == 0 { -1.0 } else { 1.0 })
                });
                let new_rot: Mat3 = std::array::from_fn(|r| {
                    std::array::from_fn(|c| {
                        let (x, y) = rotate_xy(cols[0][c], cols[1][c], q);
                        [x, y, cols[2][c]][r]
                    })
                });
                let (tx, ty) = rotate_xy(fx(t[0]), t[1], q);
                let image = if self.flip_x { mirror_columns(&v.image) } else { v.image.clone() };
                CameraView { image, intrinsics: v.intrinsics, pose: geometry::pose_from(&new_rot, [tx, ty, t[2]]) }
            })
            .collect();
        Scene { scene_id: scene.scene_id, boxes, points, views }
    }
}

/// Random synchronous BEV augmentation of one scene.
pub fn augment_bev<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Scene {
    BevAugment::sample(rng).apply(scene)
}

/// AdamW with per-parameter step counts, so parameters outside the loss
/// graph keep untouched moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect();
        Self { m: zeros.clone(), v: zeros, steps: vec![0; store.len()] }
    }

    /// One update. `None` gradients leave the parameter and its state alone.
    /// Weight decay applies only to tensors of rank > 1.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, weight_decay: f64) {
        let (b1, b2) = ADAM_BETAS;
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            let param = store.get_mut(id);
            let decay = if param.ndim() > 1 { 1.0 - lr * weight_decay } else { 1.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in param.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w = *w * decay - lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Unweighted distillation terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawDistill {
    pub fea: f64,
    pub rel: f64,
    pub resp: f64,
}

/// One line of `log.jsonl`: epoch means over the training scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossComponents,
    pub total: f64,
    pub detection: f64,
    pub raw_distill: RawDistill,
    /// Mean per-cell L2 distance between `F_f` and `F_c` over foreground
    /// cells; absent without both branches.
    pub feature_distance: Option<f64>,
    /// The same distance over every BEV cell.
    pub feature_distance_all: Option<f64>,
    pub n_scenes: usize,
    pub seconds: f64,
}

pub struct FitOutcome {
    pub model: PromptDetModel,
    pub history: Vec<EpochRecord>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Trains on the train split of a dataset directory.
pub fn fit(config: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<FitOutcome> {
    fit_logged(config, data_dir, out_dir, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_logged(config: &TrainConfig, data_dir: &Path, out_dir: &Path, on_epoch: impl FnMut(&EpochRecord)) -> Result<FitOutcome> {
    let (manifest, scenes) = dataset::load_split(data_dir, Split::Train)?;
    if manifest.world != config.world {
        return Err(Error::Config("dataset world does not match the training config".into()));
    }
    if scenes.is_empty() {
        return Err(Error::Config("no scenes in the train split".into()));
    }
    fit_scenes(config, &scenes, Some(out_dir), on_epoch)
}

/// Trains on in-memory scenes. With an output directory the run writes
/// `log.jsonl`, a per-epoch resume checkpoint and the final `model.ckpt`,
/// and resumes from `resume.ckpt` when one is present.
pub fn fit_scenes(
    config: &TrainConfig,
    scenes: &[Scene],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    config.validate()?;
    let n_classes = config.world.n_classes();
    let mut model = PromptDetModel::new(config.mode, config.grid.clone(), n_classes, config.seed);
    let mut opt = AdamW::new(&model.store);
    let mut history = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).at(dir)?;
        let resume = dir.join(RESUME_FILE);
        if resume.exists() {
            let ckpt = checkpoint::load(&resume)?;
            // Only the epoch budget may change between an interrupted run and its resumption.
            if (TrainConfig { epochs: config.epochs, ..ckpt.config.clone() }) != *config {
                return Err(Error::Config(format!("{} was written with a different config", resume.display())));
            }
            if ckpt.epoch > config.epochs {
                return Err(Error::Config(format!("{} is already past epoch {}", resume.display(), config.epochs)));
            }
            model = ckpt.model;
            opt = ckpt.optimizer.ok_or_else(|| Error::Format { what: "checkpoint".into(), reason: "resume checkpoint lacks optimizer state".into() })?;
            history = read_log(&dir.join(LOG_FILE))?.into_iter().filter(|r| r.epoch <= ckpt.epoch).collect();
            if history.len() != ckpt.epoch {
                return Err(Error::Format { what: "log".into(), reason: "log does not cover the resumed epochs".into() });
            }
        }
        write_log(&dir.join(LOG_FILE), &history)?;
    }

    let objective = config.objective();
    for epoch in history.len()..config.epochs {
        let start = Instant::now();
        let lr = config.lr_at(epoch);
        let mut rng = config.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0; 5];
        let mut raw = [0.0; 3];
        let (mut dist, mut n_dist, mut dist_all, mut n_all) = (0.0, 0, 0.0, 0);
        let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
        let mut in_batch = 0;
        for (k, &i) in order.iter().enumerate() {
            let scene = if config.augment { augment_bev(&scenes[i], &mut rng) } else { scenes[i].clone() };
            let graph = Graph::new();
            let p = Binding::new(&graph, &model.store);
            let out = model.forward_train(&p, &scene, &objective)?;
            let grads = graph.backward(out.loss);
            for (id, g) in model.store.ids().zip(p.gradients(&grads)) {
                if !p.is_bound(id) {
                    continue;
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", model.store.entry(id).name)));
                }
                match &mut acc[id.index()] {
                    Some(a) => a.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            for (s, v) in sums.iter_mut().zip(out.components.as_array()) {
                *s += v;
            }
            for (s, v) in raw.iter_mut().zip(out.raw_distill) {
                *s += v;
            }
            if let Some(d) = out.feature_distance {
                dist_all += d.all;
                n_all += 1;
                if let Some(f) = d.foreground {
                    dist += f;
                    n_dist += 1;
                }
            }
            in_batch += 1;
            if in_batch == config.batch_size || k + 1 == order.len() {
                let mut batch: Vec<Option<Tensor>> = std::mem::replace(&mut acc, vec![None; model.store.len()]);
                let scale = 1.0 / in_batch as f64;
                let mut norm2 = 0.0;
                for g in batch.iter_mut().flatten() {
                    *g = g.map(|v| v * scale);
                    norm2 += g.data().iter().map(|v| v * v).sum::<f64>();
                }
                let norm = norm2.sqrt();
                if config.grad_clip > 0.0 && norm > config.grad_clip {
                    let c = config.grad_clip / norm;
                    for g in batch.iter_mut().flatten() {
                        *g = g.map(|v| v * c);
                    }
                }
                opt.step(&mut model.store, &batch, lr, config.weight_decay);
                in_batch = 0;
            }
        }

        let n = scenes.len() as f64;
        let [det_fusion, det_camera, fea, rel, resp] = sums.map(|s| s / n);
        let loss = LossComponents { det_fusion, det_camera, fea, rel, resp };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss,
            total: loss.total(),
            detection: loss.detection(),
            raw_distill: RawDistill { fea: raw[0] / n, rel: raw[1] / n, resp: raw[2] / n },
            feature_distance: (n_dist > 0).then(|| dist / n_dist as f64),
            feature_distance_all: (n_all > 0).then(|| dist_all / n_all as f64),
            n_scenes: scenes.len(),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        if let Some(dir) = out_dir {
            append_log(&dir.join(LOG_FILE), &record)?;
            checkpoint::save(&dir.join(RESUME_FILE), config, epoch + 1, &model, Some(&opt))?;
        }
        history.push(record);
    }

    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join(MODEL_FILE);
            checkpoint::save(&path, config, history.len(), &model, None)?;
            Some(path)
        }
        None => None,
    };
    Ok(FitOutcome { model, history, checkpoint })
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = std::fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.at(path)?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).at(path)
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(path).at(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?).at(path)
}
