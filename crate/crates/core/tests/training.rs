use std::path::Path;

use promptdet::checkpoint;
use promptdet::detector::Detection;
use promptdet::model::{Mode, Objective, PromptDetModel};
use promptdet::nn::{Binding, ParamId, ParamStore};
use promptdet::scene::{generate_scene, scene_seed, Scene, WorldSpec};
use promptdet::trainer::{fit_scenes, read_log, EpochRecord, TrainConfig, LOG_FILE, MODEL_FILE, RESUME_FILE};
use promptdet::{Error, Graph, Tensor};

fn scenes(n: u64) -> Vec<Scene> {
    (0..n).map(|i| generate_scene(&WorldSpec::default(), scene_seed(0, i)).unwrap()).collect()
}

fn quick(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 2, ..TrainConfig::toy(mode) }
}

fn params(store: &ParamStore) -> Vec<Tensor> {
    store.ids().map(|id| store.get(id).clone()).collect()
}

fn strip_time(h: &[EpochRecord]) -> Vec<EpochRecord> {
    h.iter().cloned().map(|r| EpochRecord { seconds: 0.0, ..r }).collect()
}

fn same_predictions(a: &[Detection], b: &[Detection]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

#[test]
fn one_epoch_writes_loadable_checkpoint() {
    let data = scenes(4);
    let dir = tempfile::tempdir().unwrap();
    let out = fit_scenes(&quick(Mode::PromptDet, 1), &data, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(out.checkpoint.as_deref(), Some(dir.path().join(MODEL_FILE).as_path()));
    assert!(dir.path().join(RESUME_FILE).exists());
    let log = read_log(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].n_scenes, 4);
    assert!(log[0].feature_distance.is_some() && log[0].feature_distance_all.is_some());

    let ckpt = checkpoint::load(&dir.path().join(MODEL_FILE)).unwrap();
    assert_eq!(ckpt.epoch, 1);
    assert_eq!(params(&ckpt.model.store), params(&out.model.store));
    for use_lidar in [false, true] {
        let a = ckpt.model.predict(&data[0], use_lidar, 0.05, 50).unwrap();
        let b = out.model.predict(&data[0], use_lidar, 0.05, 50).unwrap();
        assert!(same_predictions(&a, &b));
    }
}

#[test]
fn same_seed_is_bit_identical() {
    let data = scenes(4);
    let cfg = quick(Mode::PromptDet, 2);
    let a = fit_scenes(&cfg, &data, None, |_| {}).unwrap();
    let b = fit_scenes(&cfg, &data, None, |_| {}).unwrap();
    assert_eq!(strip_time(&a.history), strip_time(&b.history));
    assert_eq!(a.history.last().unwrap().total.to_bits(), b.history.last().unwrap().total.to_bits());
    assert_eq!(params(&a.model.store), params(&b.model.store));
    let c = fit_scenes(&TrainConfig { seed: 1, ..cfg }, &data, None, |_| {}).unwrap();
    assert_ne!(params(&a.model.store), params(&c.model.store));
}

fn run_in(dir: &Path, cfg: &TrainConfig, data: &[Scene]) -> promptdet::Result<promptdet::trainer::FitOutcome> {
    fit_scenes(cfg, data, Some(dir), |_| {})
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = scenes(4);
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let a = run_in(full.path(), &quick(Mode::PromptDet, 2), &data).unwrap();
    run_in(split.path(), &quick(Mode::PromptDet, 1), &data).unwrap();
    let b = run_in(split.path(), &quick(Mode::PromptDet, 2), &data).unwrap();
    assert_eq!(params(&a.model.store), params(&b.model.store));
    assert_eq!(strip_time(&a.history), strip_time(&b.history));
    assert_eq!(strip_time(&read_log(&split.path().join(LOG_FILE)).unwrap()), strip_time(&a.history));

    let changed = TrainConfig { lr: 1e-3, ..quick(Mode::PromptDet, 3) };
    assert!(matches!(run_in(split.path(), &changed, &data), Err(Error::Config(_))));
    assert!(matches!(run_in(split.path(), &quick(Mode::PromptDet, 1), &data), Err(Error::Config(_))));
}

struct Step {
    grads: Vec<Tensor>,
    bound: Vec<bool>,
}

/// Parameter gradients of one chosen loss node, on a fresh graph.
fn grads_of(model: &PromptDetModel, scene: &Scene, objective: &Objective, pick: &str) -> Step {
    let graph = Graph::new();
    let p = Binding::new(&graph, &model.store);
    let out = model.forward_train(&p, scene, objective).unwrap();
    let node = match pick {
        "total" => out.loss,
        "det_fusion" => out.parts.det_fusion,
        "det_camera" => out.parts.det_camera,
        _ => unreachable!(),
    };
    let g = graph.backward(node);
    Step { grads: p.gradients(&g), bound: model.store.ids().map(|id| p.is_bound(id)).collect() }
}

fn max_abs(step: &Step, ids: &[ParamId]) -> f64 {
    ids.iter().map(|id| step.grads[id.index()].max_abs()).fold(0.0, f64::max)
}

fn max_diff(a: &Step, b: &Step, ids: &[ParamId]) -> f64 {
    ids.iter().map(|id| a.grads[id.index()].max_abs_diff(&b.grads[id.index()])).fold(0.0, f64::max)
}

#[test]
fn both_detection_losses_reach_the_shared_detector() {
    let scene = &scenes(2)[1];
    let model = PromptDetModel::new(Mode::PromptDet, TrainConfig::toy(Mode::PromptDet).grid, 3, 5);
    let det = model.detector.param_ids();
    let obj = Objective::default();
    let f = grads_of(&model, scene, &obj, "det_fusion");
    let c = grads_of(&model, scene, &obj, "det_camera");
    assert!(max_abs(&f, &det) > 0.0);
    assert!(max_abs(&c, &det) > 0.0);
    assert!(max_diff(&f, &c, &det) > 0.0);
}

#[test]
fn detach_keeps_distillation_out_of_the_fusion_path() {
    let scene = &scenes(3)[2];
    assert!(!scene.boxes.is_empty());
    let model = PromptDetModel::new(Mode::PromptDet, TrainConfig::toy(Mode::PromptDet).grid, 3, 6);
    let mut fusion_ids = model.aha_param_ids();
    fusion_ids.extend(model.lidar_param_ids());

    let on = Objective { detach_fusion: true, ..Objective::default() };
    let total = grads_of(&model, scene, &on, "total");
    let det_f = grads_of(&model, scene, &on, "det_fusion");
    assert!(max_abs(&det_f, &fusion_ids) > 0.0);
    assert_eq!(max_diff(&total, &det_f, &fusion_ids), 0.0);

    let off = Objective { detach_fusion: false, ..Objective::default() };
    let total = grads_of(&model, scene, &off, "total");
    let det_f = grads_of(&model, scene, &off, "det_fusion");
    assert!(max_diff(&total, &det_f, &fusion_ids) > 0.0);
}

#[test]
fn fusion_only_never_trains_the_imitation_module() {
    let data = scenes(4);
    let cfg = quick(Mode::FusionOnly, 1);
    let init = PromptDetModel::new(Mode::FusionOnly, cfg.grid.clone(), 3, cfg.seed);
    let imi = init.prompter.as_ref().unwrap().imitation.param_ids();
    let step = grads_of(&init, &data[0], &cfg.objective(), "total");
    for id in &imi {
        assert!(!step.bound[id.index()]);
    }
    let trained = fit_scenes(&cfg, &data, None, |_| {}).unwrap().model;
    for id in &imi {
        assert_eq!(trained.store.get(*id), init.store.get(*id));
    }
    let aha = init.aha_param_ids();
    assert!(aha.iter().any(|id| trained.store.get(*id) != init.store.get(*id)));
}

#[test]
fn objective_terms_follow_the_mode() {
    let scene = &scenes(2)[1];
    let grid = TrainConfig::toy(Mode::PromptDet).grid;
    for (mode, seed) in [(Mode::PromptDet, 1), (Mode::FusionOnly, 2), (Mode::CameraBaseline, 3)] {
        let model = PromptDetModel::new(mode, grid.clone(), 3, seed);
        let obj = TrainConfig::toy(mode).objective();
        let g = Graph::new();
        let p = Binding::new(&g, &model.store);
        let out = model.forward_train(&p, scene, &obj).unwrap();
        let c = out.components;
        assert!((out.loss.item() - c.total()).abs() < 1e-12);
        match mode {
            Mode::CameraBaseline => assert!(c.det_camera > 0.0 && c.det_fusion == 0.0 && c.fea + c.rel + c.resp == 0.0),
            Mode::FusionOnly => assert!(c.det_fusion > 0.0 && c.det_camera == 0.0 && c.fea + c.rel + c.resp == 0.0),
            Mode::PromptDet => assert!(c.as_array().iter().all(|&v| v > 0.0)),
        }
    }
    let model = PromptDetModel::new(Mode::PromptDet, grid, 3, 4);
    let g = Graph::new();
    let p = Binding::new(&g, &model.store);
    let zero = Objective { weights: promptdet::cmki::DistillWeights::ZERO, detach_fusion: true };
    let out = model.forward_train(&p, scene, &zero).unwrap();
    assert_eq!(out.loss.item(), out.parts.det_fusion.add(&out.parts.det_camera).item());
}
