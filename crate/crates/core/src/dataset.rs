//! On-disk dataset layout.
//!
//! ```text
//! out_dir/
//!   manifest.json
//!   scene_000000/
//!     points.bin     N x 4 little-endian f32, row-major (x, y, z, intensity)
//!     view_0.png     8-bit RGB, one file per camera
//!     labels.json    boxes
//!     calib.json     per-view intrinsics and camera-to-world pose
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::geometry::{Mat3, Mat4};
use crate::scene::{self, Box3D, CameraView, Scene, WorldSpec};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// Every fifth scene (index 4, 9, 14, ...) is held out for validation.
    pub fn for_index(index: u64) -> Self {
        if index % 5 == 4 {
            Split::Val
        } else {
            Split::Train
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_id: u64,
    pub dir: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub world: WorldSpec,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(data_dir: &Path) -> Result<Self> {
        let path = data_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                what: path.display().to_string(),
                reason: format!("manifest version {} (expected {MANIFEST_VERSION})", manifest.version),
            });
        }
        Ok(manifest)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.scenes.iter().filter(move |e| e.split == split)
    }
}

#[derive(Serialize, Deserialize)]
struct Calibration {
    views: Vec<ViewCalibration>,
}

#[derive(Serialize, Deserialize)]
struct ViewCalibration {
    intrinsics: Mat3,
    pose: Mat4,
}

#[derive(Serialize, Deserialize)]
struct Labels {
    scene_id: u64,
    boxes: Vec<Box3D>,
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    Ok(fs::read_dir(dir).at(dir)?.next().is_some())
}

/// Generates `n_scenes` scenes and writes them under `out_dir`.
///
/// Refuses to write into a non-empty directory unless `force` is set, in
/// which case the directory is cleared first.
pub fn build_dataset(spec: &WorldSpec, n_scenes: usize, seed: u64, out_dir: &Path, force: bool) -> Result<Manifest> {
    if n_scenes == 0 {
        return Err(Error::Config("n_scenes must be at least 1".into()));
    }
    spec.validate()?;
    if is_nonempty_dir(out_dir)? {
        if !force {
            return Err(Error::NotEmpty(out_dir.to_path_buf()));
        }
        fs::remove_dir_all(out_dir).at(out_dir)?;
    }
    fs::create_dir_all(out_dir).at(out_dir)?;

    let mut entries = Vec::with_capacity(n_scenes);
    for index in 0..n_scenes as u64 {
        let mut scene = scene::generate_scene(spec, scene::scene_seed(seed, index))?;
        scene.scene_id = index;
        let dir = format!("scene_{index:06}");
        save_scene(&scene, &out_dir.join(&dir))?;
        entries.push(ManifestEntry { scene_id: index, dir, split: Split::for_index(index) });
    }
    let manifest = Manifest { version: MANIFEST_VERSION, seed, world: spec.clone(), scenes: entries };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut bytes = Vec::with_capacity(scene.points.len() * 16);
    for p in &scene.points {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join("points.bin");
    fs::write(&path, bytes).at(&path)?;

    for (i, view) in scene.views.iter().enumerate() {
        let &[h, w, 3] = view.image.shape() else { unreachable!("views are RGB") };
        let pixels: Vec<u8> = view.image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::RgbImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches image size");
        img.save(dir.join(format!("view_{i}.png")))?;
    }

    let labels = Labels { scene_id: scene.scene_id, boxes: scene.boxes.clone() };
    let path = dir.join("labels.json");
    fs::write(&path, serde_json::to_string_pretty(&labels)?).at(&path)?;
    let calib = Calibration {
        views: scene.views.iter().map(|v| ViewCalibration { intrinsics: v.intrinsics, pose: v.pose }).collect(),
    };
    let path = dir.join("calib.json");
    fs::write(&path, serde_json::to_string_pretty(&calib)?).at(&path)?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join("points.bin");
    let bytes = fs::read(&path).at(&path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Format { what: path.display().to_string(), reason: "length is not a multiple of 16".into() });
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| [0, 1, 2, 3].map(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap())))
        .collect();

    let path = dir.join("labels.json");
    let labels: Labels = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
    let path = dir.join("calib.json");
    let calib: Calibration = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;

    let mut views = Vec::with_capacity(calib.views.len());
    for (i, c) in calib.views.into_iter().enumerate() {
        let img = image::open(dir.join(format!("view_{i}.png")))?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        views.push(CameraView { image: Tensor::new(vec![h as usize, w as usize, 3], data), intrinsics: c.intrinsics, pose: c.pose });
    }
    Ok(Scene { scene_id: labels.scene_id, boxes: labels.boxes, points, views })
}

/// Environment variable selecting deterministic mode. Any value other than
/// `0` (or unset) keeps every code path single-threaded.
pub const DETERMINISTIC_ENV: &str = "PROMPTDET_DETERMINISTIC";

/// Scene-loading threads: 1 in deterministic mode, all cores otherwise.
/// Loading is pure, so the loaded scenes are identical either way.
pub fn loader_threads() -> usize {
    match std::env::var(DETERMINISTIC_ENV) {
        Ok(v) if v.trim() == "0" => std::thread::available_parallelism().map_or(1, |n| n.get()),
        _ => 1,
    }
}

/// Loads every scene of one split, in manifest order.
pub fn load_split(data_dir: &Path, split: Split) -> Result<(Manifest, Vec<Scene>)> {
    load_split_with(data_dir, split, loader_threads())
}

pub fn load_split_with(data_dir: &Path, split: Split, threads: usize) -> Result<(Manifest, Vec<Scene>)> {
    let manifest = Manifest::load(data_dir)?;
    let dirs: Vec<PathBuf> = manifest.split(split).map(|e| data_dir.join(&e.dir)).collect();
    let chunk = dirs.len().div_ceil(threads.max(1)).max(1);
    let scenes = std::thread::scope(|s| {
        let handles: Vec<_> =
            dirs.chunks(chunk).map(|part| s.spawn(move || part.iter().map(|d| load_scene(d)).collect::<Result<Vec<_>>>())).collect();
        let mut out = Vec::with_capacity(dirs.len());
        for h in handles {
            out.extend(h.join().expect("scene loader panicked")?);
        }
        Ok::<_, Error>(out)
    })?;
    Ok((manifest, scenes))
}

pub fn scene_dir(data_dir: &Path, manifest: &Manifest, scene_id: u64) -> Option<PathBuf> {
    manifest.scenes.iter().find(|e| e.scene_id == scene_id).map(|e| data_dir.join(&e.dir))
}
