//! `promptdet`: dataset synthesis, training, evaluation and visualization.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use promptdet::checkpoint::{self, Checkpoint};
use promptdet::config::Config;
use promptdet::dataset::{self, Manifest, Split, MANIFEST_FILE};
use promptdet::evalkit::{self, EvalReport};
use promptdet::model::Mode;
use promptdet::trainer::{self, EpochRecord};
use promptdet::Error;

#[derive(Parser)]
#[command(name = "promptdet", version, about = "LiDAR-prompted camera BEV detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on the train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the val split.
    Eval(EvalArgs),
    /// Render top views, heatmaps and feature maps of one scene.
    Viz(VizArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// promptdet, fusion_only or camera_baseline.
    #[arg(long)]
    mode: Option<String>,
    /// Let distillation gradients reach the fusion branch.
    #[arg(long)]
    no_detach: bool,
    /// Named weight profile: a, b or c.
    #[arg(long)]
    lambda_profile: Option<String>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Run the fusion path instead of the camera-only path.
    #[arg(long)]
    use_lidar: bool,
    /// Output directory; defaults to `eval/` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config whose `[eval]` table overrides the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scene_id: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    score_thresh: f64,
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Mode(_) | Error::NotEmpty(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

/// Errors while reading user-supplied inputs are usage errors.
fn input<T>(r: promptdet::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| usage(e.to_string()))
}

type CmdResult = Result<(), Failure>;

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    seed: u64,
    config: serde_json::Value,
    labels: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started_unix: u64,
    finished_unix: u64,
}

pub const RUN_MANIFEST: &str = "run.json";

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn version() -> String {
    format!("{}-{}", env!("CARGO_PKG_VERSION"), env!("PROMPTDET_GIT_DESCRIBE"))
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text).map_err(|e| Failure { code: 1, message: format!("{}: {e}", path.display()) })
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure { code: 1, message: format!("{}: {e}", dir.display()) })
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let config = input(Config::load(&a.config))?;
    let seed = a.seed.unwrap_or(config.seed);
    let manifest = dataset::build_dataset(&config.world, config.dataset.n_scenes, seed, &a.out, a.force)?;
    eprintln!("wrote {} scenes", manifest.scenes.len());
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn apply_train_overrides(config: &mut Config, a: &TrainArgs) -> CmdResult {
    if let Some(m) = &a.mode {
        config.train.mode = input(Mode::parse(m))?;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(p) = &a.lambda_profile {
        config.train.lambda_profile = p.clone();
        config.train.lambda = None;
    }
    let flags = [a.lambda1, a.lambda2, a.lambda3];
    let mode = config.train.mode;
    if mode != Mode::PromptDet {
        if flags.iter().flatten().any(|&v| v != 0.0) {
            return Err(usage(format!("--lambda1/2/3 > 0 contradicts --mode {}", mode.name())));
        }
        if a.lambda_profile.is_some() {
            return Err(usage(format!("--lambda-profile contradicts --mode {}", mode.name())));
        }
        if a.no_detach {
            return Err(usage(format!("--no-detach contradicts --mode {}", mode.name())));
        }
    }
    if flags.iter().any(Option::is_some) {
        let base = input(config.weights())?;
        let cur = [base.fea, base.rel, base.resp];
        config.train.lambda = Some(std::array::from_fn(|i| flags[i].unwrap_or(cur[i])));
    }
    if a.no_detach {
        config.train.detach_fusion = false;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let started = unix_now();
    let mut config = input(Config::load(&a.config))?;
    apply_train_overrides(&mut config, &a)?;
    let tc = input(config.train_config())?;
    let manifest = input(Manifest::load(&a.data))?;
    if manifest.world != tc.world {
        return Err(usage("dataset world does not match the config world"));
    }
    create_dir(&a.out)?;
    let outcome = trainer::fit_logged(&tc, &a.data, &a.out, |r: &EpochRecord| {
        eprintln!(
            "epoch {:>3} lr {:.1e} total {:.4} det {:.4} distill {:.4} dist {} ({:.1}s)",
            r.epoch,
            r.lr,
            r.total,
            r.detection,
            r.loss.fea + r.loss.rel + r.loss.resp,
            r.feature_distance.map_or("-".into(), |d| format!("{d:.4}")),
            r.seconds
        );
    })?;

    let h = &outcome.history;
    let loss_plot = a.out.join("loss_curve.png");
    let series = vec![
        h.iter().map(|r| r.total).collect(),
        h.iter().map(|r| r.loss.det_fusion).collect(),
        h.iter().map(|r| r.loss.det_camera).collect(),
        h.iter().map(|r| r.loss.fea + r.loss.rel + r.loss.resp).collect(),
    ];
    evalkit::save_png(&evalkit::line_plot(&series, 480, 320), &loss_plot)?;
    let mut outputs = vec![outcome.checkpoint.clone().expect("fit with an output directory"), a.out.join(trainer::LOG_FILE), loss_plot];
    if h.iter().any(|r| r.feature_distance.is_some()) {
        let dist_plot = a.out.join("feature_distance.png");
        let series = vec![
            h.iter().map(|r| r.feature_distance.unwrap_or(f64::NAN)).collect(),
            h.iter().map(|r| r.feature_distance_all.unwrap_or(f64::NAN)).collect(),
        ];
        evalkit::save_png(&evalkit::line_plot(&series, 480, 320), &dist_plot)?;
        outputs.push(dist_plot);
    }
    let params = evalkit::param_report(&outcome.model);
    let params_path = a.out.join("params.json");
    write_json(&params_path, &params)?;
    outputs.push(params_path);

    let labels = BTreeMap::from([
        ("mode".to_string(), tc.mode.name().to_string()),
        ("detach_fusion".to_string(), tc.detach_fusion.to_string()),
        ("lambda".to_string(), format!("{}/{}/{}", tc.weights.fea, tc.weights.rel, tc.weights.resp)),
    ]);
    let run = RunManifest {
        command: "train".into(),
        version: version(),
        seed: tc.seed,
        config: serde_json::to_value(&tc).map_err(Error::from)?,
        labels,
        outputs,
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_json(&a.out.join(RUN_MANIFEST), &run)?;
    println!("{}", outcome.checkpoint.unwrap().display());
    eprintln!("params: base {} prompter {} ratio {:.4}", params.base_count, params.prompter_count, params.ratio);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    input(checkpoint::load(path))
}

fn check_world(ckpt: &Checkpoint, manifest: &Manifest) -> CmdResult {
    if manifest.world != ckpt.config.world {
        return Err(usage("checkpoint world/grid does not match the dataset"));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let started = unix_now();
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let eval_cfg = match &a.config {
        Some(p) => input(Config::load(p))?.eval,
        None => promptdet::config::EvalConfig::default(),
    };
    let (manifest, scenes) = input(dataset::load_split(&a.data, Split::Val))?;
    check_world(&ckpt, &manifest)?;
    if scenes.is_empty() {
        return Err(usage("no scenes in the val split"));
    }
    if a.use_lidar && ckpt.config.mode == Mode::CameraBaseline {
        return Err(usage("--use-lidar needs a model with a prompter; this checkpoint is camera_baseline"));
    }
    let model = &ckpt.model;
    let names: Vec<String> = ckpt.config.world.classes.iter().map(|c| c.name.clone()).collect();
    let report: EvalReport =
        evalkit::evaluate(model, &scenes, a.use_lidar, eval_cfg.score_thresh, eval_cfg.max_dets, &eval_cfg.thresholds, &names)?;

    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    create_dir(&out)?;
    let tag = if a.use_lidar { "lc" } else { "c" };
    let report_path = out.join(format!("report_{tag}.json"));
    write_json(&report_path, &report)?;
    let params_path = out.join("params.json");
    write_json(&params_path, &evalkit::param_report(model))?;
    let mut runs = vec![("promptdet_c", model, false)];
    if ckpt.config.mode != Mode::CameraBaseline {
        runs.push(("promptdet_lc", model, true));
    } else {
        runs[0].0 = "camera_baseline";
    }
    let latency = evalkit::latency_report(&runs, &scenes, 20)?;
    let latency_path = out.join("latency.json");
    write_json(&latency_path, &latency)?;

    let run = RunManifest {
        command: format!("eval{}", if a.use_lidar { " --use-lidar" } else { "" }),
        version: version(),
        seed: ckpt.config.seed,
        config: serde_json::json!({ "train": ckpt.config, "eval": eval_cfg }),
        labels: BTreeMap::from([("path".to_string(), tag.to_string()), ("mode".to_string(), ckpt.config.mode.name().to_string())]),
        outputs: vec![report_path.clone(), params_path, latency_path],
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_json(&out.join(RUN_MANIFEST), &run)?;
    println!("mAP {:.4} ({})", report.map, report_path.display());
    Ok(())
}

fn cmd_viz(a: VizArgs) -> CmdResult {
    let started = unix_now();
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = input(Manifest::load(&a.data))?;
    check_world(&ckpt, &manifest)?;
    let dir = dataset::scene_dir(&a.data, &manifest, a.scene_id).ok_or_else(|| usage(format!("unknown scene id {}", a.scene_id)))?;
    let scene = dataset::load_scene(&dir)?;
    create_dir(&a.out)?;
    let model = &ckpt.model;
    let grid = &model.grid;
    let mut paths = Vec::new();
    let mut runs: Vec<(&str, _, bool)> = vec![("c", model, false)];
    if ckpt.config.mode != Mode::CameraBaseline {
        runs.push(("lc", model, true));
    }
    for &(tag, m, lidar) in &runs {
        let out = m.infer(&scene, lidar)?;
        let dets = promptdet::detector::decode(&out.resp, grid, a.score_thresh, 50);
        let bev = a.out.join(format!("bev_{tag}.png"));
        evalkit::save_png(&evalkit::render_bev(grid, &scene, &dets, 8.0), &bev)?;
        let heat = &out.resp.heat;
        let s = heat.shape();
        let peak: Vec<f64> = heat.data().chunks(s[2]).map(|c| c.iter().copied().fold(0.0, f64::max)).collect();
        let mut img = evalkit::field_image(&peak, s[0], s[1], evalkit::FEATURE_UPSCALE);
        for b in &scene.boxes {
            evalkit::draw_box(&mut img, grid, b, evalkit::RED);
        }
        let heat_path = a.out.join(format!("heat_{tag}.png"));
        evalkit::save_png(&img, &heat_path)?;
        paths.extend([bev, heat_path]);
    }
    paths.extend(evalkit::dump_feature_maps(&runs, &scene, &a.out)?);
    let run = RunManifest {
        command: "viz".into(),
        version: version(),
        seed: ckpt.config.seed,
        config: serde_json::to_value(&ckpt.config).map_err(Error::from)?,
        labels: BTreeMap::from([("scene_id".to_string(), a.scene_id.to_string())]),
        outputs: paths.clone(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_json(&a.out.join(RUN_MANIFEST), &run)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Viz(a) => cmd_viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
