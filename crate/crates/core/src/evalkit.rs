//! Center-distance mAP, parameter and latency accounting, and image dumps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{IoContext, Result};
use crate::model::PromptDetModel;
use crate::nn::ParamGroup;
use crate::scene::{Box3D, Scene};
use crate::tensor::Tensor;
use crate::voxelizer::GridSpec;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub n_gt: usize,
    /// One AP per threshold.
    pub ap: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    /// Center-distance thresholds in meters.
    pub thresholds: Vec<f64>,
    /// Classes with at least one ground-truth box; others are excluded from `map`.
    pub classes: Vec<ClassAp>,
    /// Mean of `classes[*].ap` over classes and thresholds; 0 when no class has ground truth.
    pub map: f64,
    /// Mean BEV center distance of true positives at the largest threshold.
    pub mean_translation_error: Option<f64>,
    /// Totals over classes, one entry per threshold.
    pub counts: Vec<MatchCounts>,
    pub n_scenes: usize,
}

fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

/// All-point interpolated area under the precision-recall curve.
pub fn average_precision(is_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let mut tp = 0;
    for (k, &t) in is_tp.iter().enumerate() {
        tp += t as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

/// Greedy matching of one class at one threshold: predictions in descending
/// score (ties by scene, then list order) each take the nearest unmatched
/// ground truth of their scene within `threshold`. Returns the TP flag per
/// ranked prediction and the TP distances.
pub fn greedy_match(preds: &[Vec<Detection>], gts: &[Vec<Box3D>], class_id: usize, threshold: f64) -> (Vec<bool>, Vec<f64>) {
    let mut ranked: Vec<(usize, &Detection)> =
        preds.iter().enumerate().flat_map(|(s, d)| d.iter().map(move |d| (s, d))).filter(|(_, d)| d.bbox.class_id == class_id).collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(ranked.len());
    let mut dists = Vec::new();
    for (s, det) in ranked {
        let best = gts[s]
            .iter()
            .enumerate()
            .filter(|(j, g)| g.class_id == class_id && !taken[s][*j])
            .map(|(j, g)| (j, center_distance(&det.bbox, g)))
            .filter(|&(_, d)| d <= threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, d)) => {
                taken[s][j] = true;
                flags.push(true);
                dists.push(d);
            }
            None => flags.push(false),
        }
    }
    (flags, dists)
}

/// Center-distance AP per class and threshold over a set of scenes.
pub fn match_and_ap(preds: &[Vec<Detection>], gts: &[Vec<Box3D>], thresholds: &[f64], class_names: &[String]) -> EvalReport {
    assert_eq!(preds.len(), gts.len(), "one prediction list per scene");
    assert!(thresholds.windows(2).all(|w| w[0] < w[1]), "thresholds must ascend");
    let mut classes = Vec::new();
    let mut counts = vec![MatchCounts::default(); thresholds.len()];
    let mut tp_dists = Vec::new();
    for (class_id, name) in class_names.iter().enumerate() {
        let n_gt = gts.iter().flatten().filter(|g| g.class_id == class_id).count();
        let mut ap = Vec::with_capacity(thresholds.len());
        for (t, &thr) in thresholds.iter().enumerate() {
            let (flags, dists) = greedy_match(preds, gts, class_id, thr);
            let tp = flags.iter().filter(|&&f| f).count();
            counts[t].tp += tp;
            counts[t].fp += flags.len() - tp;
            counts[t].fn_ += n_gt - tp;
            ap.push(average_precision(&flags, n_gt));
            if t + 1 == thresholds.len() {
                tp_dists.extend(dists);
            }
        }
        if n_gt > 0 {
            classes.push(ClassAp { class_id, name: name.clone(), n_gt, ap });
        }
    }
    let n_ap = classes.len() * thresholds.len();
    let map = if n_ap == 0 { 0.0 } else { classes.iter().flat_map(|c| &c.ap).sum::<f64>() / n_ap as f64 };
    let mean_translation_error = (!tp_dists.is_empty()).then(|| tp_dists.iter().sum::<f64>() / tp_dists.len() as f64);
    EvalReport { version: REPORT_VERSION, thresholds: thresholds.to_vec(), classes, map, mean_translation_error, counts, n_scenes: gts.len() }
}

/// Runs `predict` on every scene and scores the result.
pub fn evaluate(
    model: &PromptDetModel,
    scenes: &[Scene],
    use_lidar: bool,
    score_thresh: f64,
    max_dets: usize,
    thresholds: &[f64],
    class_names: &[String],
) -> Result<EvalReport> {
    let preds = scenes.iter().map(|s| model.predict(s, use_lidar, score_thresh, max_dets)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<Box3D>> = scenes.iter().map(|s| s.boxes.clone()).collect();
    Ok(match_and_ap(&preds, &gts, thresholds, class_names))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub base_count: usize,
    pub prompter_count: usize,
    pub total: usize,
    /// `prompter_count / base_count` as a float.
    pub ratio: f64,
    /// Part of `prompter_count` spent on the learned vertical flatten in AHA.
    /// A parameter-free collapse would remove exactly this many.
    #[serde(default)]
    pub flatten_reducer_count: usize,
}

pub fn param_report(model: &PromptDetModel) -> ParamReport {
    let base_count = model.store.count(ParamGroup::Base);
    let prompter_count = model.store.count(ParamGroup::Prompter);
    let flatten_reducer_count = model
        .prompter
        .as_ref()
        .map_or(0, |p| p.aha.reducer.param_ids().iter().map(|&id| model.store.get(id).len()).sum());
    ParamReport {
        base_count,
        prompter_count,
        total: model.store.total(),
        ratio: prompter_count as f64 / base_count as f64,
        flatten_reducer_count,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub label: String,
    pub use_lidar: bool,
    pub n: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub const LATENCY_WARMUP: usize = 5;

/// Per-scene inference wall time (forward plus decode) of several model
/// paths. Paths are interleaved scene by scene so that every path sees the
/// same machine state. Scenes are cycled until each path has
/// `LATENCY_WARMUP` untimed runs followed by `samples` timed ones.
pub fn latency_report(runs: &[(&str, &PromptDetModel, bool)], scenes: &[Scene], samples: usize) -> Result<Vec<LatencyReport>> {
    assert!(!scenes.is_empty(), "latency needs at least one scene");
    let samples = samples.max(1);
    let mut times = vec![Vec::with_capacity(samples); runs.len()];
    for it in 0..LATENCY_WARMUP + samples {
        let scene = &scenes[it % scenes.len()];
        for (k, (_, model, lidar)) in runs.iter().enumerate() {
            let start = Instant::now();
            let dets = model.predict(scene, *lidar, 0.05, 50)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(dets);
            if it >= LATENCY_WARMUP {
                times[k].push(ms);
            }
        }
    }
    Ok(runs
        .iter()
        .zip(times)
        .map(|((label, _, lidar), mut t)| {
            t.sort_by(f64::total_cmp);
            LatencyReport {
                label: label.to_string(),
                use_lidar: *lidar,
                n: t.len(),
                mean_ms: t.iter().sum::<f64>() / t.len() as f64,
                p50_ms: percentile(&t, 0.5),
                p95_ms: percentile(&t, 0.95),
            }
        })
        .collect())
}

pub const RED: Rgb<u8> = Rgb([230, 40, 40]);
pub const GREEN: Rgb<u8> = Rgb([40, 220, 60]);

/// Channel mean of a `[H, W, C]` map.
pub fn channel_mean(map: &Tensor) -> Vec<f64> {
    map.data().chunks(map.channels()).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// Grayscale image of a `[H, W]` field, min-max normalized, `+y` up, each
/// cell drawn as an `upscale`-sized square. A constant field is mid gray.
pub fn field_image(values: &[f64], h: usize, w: usize, upscale: u32) -> RgbImage {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let u = upscale.max(1);
    RgbImage::from_fn(w as u32 * u, h as u32 * u, |x, y| {
        let (r, c) = (h - 1 - (y / u) as usize, (x / u) as usize);
        let v = if hi > lo { (values[r * w + c] - lo) / (hi - lo) } else { 0.5 };
        let g = (v * 255.0).round() as u8;
        Rgb([g, g, g])
    })
}

/// Pixel of a world point in an image spanning the grid's BEV extent.
fn world_to_pixel(grid: &GridSpec, img: &RgbImage, x: f64, y: f64) -> (f64, f64) {
    let [h, w] = grid.bev_dims();
    let [ch, cw] = grid.bev_cell();
    let sx = img.width() as f64 / (w as f64 * cw);
    let sy = img.height() as f64 / (h as f64 * ch);
    ((x - grid.origin[0]) * sx, img.height() as f64 - (y - grid.origin[1]) * sy)
}

/// Outline of a box footprint.
pub fn draw_box(img: &mut RgbImage, grid: &GridSpec, b: &Box3D, color: Rgb<u8>) {
    let (lo, hi) = b.aabb();
    let (x0, y1) = world_to_pixel(grid, img, lo[0], lo[1]);
    let (x1, y0) = world_to_pixel(grid, img, hi[0], hi[1]);
    let clamp = |v: f64, n: u32| (v.round() as i64).clamp(0, n as i64 - 1) as u32;
    let (x0, x1) = (clamp(x0, img.width()), clamp(x1 - 1.0, img.width()));
    let (y0, y1) = (clamp(y0, img.height()), clamp(y1 - 1.0, img.height()));
    for x in x0..=x1 {
        img.put_pixel(x, y0, color);
        img.put_pixel(x, y1, color);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, color);
        img.put_pixel(x1, y, color);
    }
}

/// Top view: LiDAR points in gray, ground truth in red, detections in green.
pub fn render_bev(grid: &GridSpec, scene: &Scene, dets: &[Detection], px_per_m: f64) -> RgbImage {
    let [h, w] = grid.bev_dims();
    let [ch, cw] = grid.bev_cell();
    let mut img = RgbImage::from_pixel((w as f64 * cw * px_per_m) as u32, (h as f64 * ch * px_per_m) as u32, Rgb([16, 16, 16]));
    for p in &scene.points {
        let (x, y) = world_to_pixel(grid, &img, p[0] as f64, p[1] as f64);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb([110, 110, 110]));
        }
    }
    for b in &scene.boxes {
        draw_box(&mut img, grid, b, RED);
    }
    for d in dets {
        draw_box(&mut img, grid, &d.bbox, GREEN);
    }
    img
}

pub const FEATURE_UPSCALE: u32 = 8;

/// Channel-mean images of the encoder output of each `(label, model,
/// use_lidar)` path, with ground truth in red. Writes `feature_{label}.png`.
pub fn dump_feature_maps(runs: &[(&str, &PromptDetModel, bool)], scene: &Scene, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut paths = Vec::new();
    for (label, model, lidar) in runs {
        let out = model.infer(scene, *lidar)?;
        let s = out.encoded.shape();
        let mut img = field_image(&channel_mean(&out.encoded), s[0], s[1], FEATURE_UPSCALE);
        for b in &scene.boxes {
            draw_box(&mut img, &model.grid, b, RED);
        }
        let path = out_dir.join(format!("feature_{label}.png"));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Line plot of several series on shared axes, each min-max scaled
/// together. No text is drawn; the caller names the file.
pub fn line_plot(series: &[Vec<f64>], width: u32, height: u32) -> RgbImage {
    const COLORS: [Rgb<u8>; 6] =
        [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44]), Rgb([214, 39, 40]), Rgb([148, 103, 189]), Rgb([140, 86, 75])];
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 8u32;
    let (pw, ph) = ((width - 2 * margin) as f64, (height - 2 * margin) as f64);
    for x in margin..width - margin {
        img.put_pixel(x, height - margin, Rgb([0, 0, 0]));
    }
    for y in margin..=height - margin {
        img.put_pixel(margin, y, Rgb([0, 0, 0]));
    }
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (k, s) in series.iter().enumerate() {
        let n = s.len().max(2) - 1;
        let pt = |i: usize| (margin as f64 + pw * i as f64 / n as f64, margin as f64 + ph * (1.0 - (s[i] - lo) / span));
        for i in 0..s.len() {
            let (x1, y1) = pt(i);
            let (x0, y0) = if i == 0 { (x1, y1) } else { pt(i - 1) };
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for t in 0..=steps {
                let f = t as f64 / steps as f64;
                let (x, y) = (x0 + (x1 - x0) * f, y0 + (y1 - y0) * f);
                if (x as u32) < width && (y as u32) < height {
                    img.put_pixel(x as u32, y as u32, COLORS[k % COLORS.len()]);
                }
            }
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)?;
    Ok(())
}
