//! Procedural driving scenes: labelled boxes, a surface-sampled LiDAR sweep
//! and class-coloured multi-view camera renders.
//!
//! Boxes stand on a flat ground plane and are axis-aligned up to a quarter
//! turn of yaw, so their BEV footprint is always an axis-aligned rectangle.
//! Scenes are a pure function of `(WorldSpec, seed)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3, Mat4, Vec3};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Mean `(l, w, h)` in meters.
    pub size: [f64; 3],
    /// Linear RGB in `[0, 1]`.
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub xy_range: [f64; 2],
    pub z_range: [f64; 2],
    pub ground_z: f64,
    pub classes: Vec<ClassSpec>,
    /// Relative uniform jitter applied to each size component.
    pub size_jitter: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub empty_scene_prob: f64,
    /// Minimum BEV distance between the sensor rig and any box footprint.
    pub min_sensor_distance: f64,
    /// Minimum BEV gap between two box footprints.
    pub min_box_gap: f64,
    pub points_per_scene: usize,
    pub box_point_fraction: f64,
    /// Standard deviation of the additive LiDAR noise, meters.
    pub lidar_noise: f64,
    pub n_views: usize,
    /// `(height, width)` in pixels.
    pub image_size: [usize; 2],
    pub horizontal_fov_deg: f64,
    pub camera_height: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            xy_range: [-16.0, 16.0],
            z_range: [-2.0, 2.0],
            ground_z: -1.9,
            classes: vec![
                ClassSpec { name: "car".into(), size: [4.0, 2.0, 1.6], color: [0.85, 0.2, 0.2] },
                ClassSpec { name: "pedestrian".into(), size: [0.6, 0.6, 1.7], color: [0.2, 0.8, 0.25] },
                ClassSpec { name: "truck".into(), size: [7.0, 2.6, 2.8], color: [0.2, 0.3, 0.9] },
            ],
            size_jitter: 0.1,
            min_boxes: 1,
            max_boxes: 8,
            empty_scene_prob: 0.0,
            min_sensor_distance: 2.5,
            min_box_gap: 0.5,
            points_per_scene: 4096,
            box_point_fraction: 0.35,
            lidar_noise: 0.02,
            n_views: 4,
            image_size: [48, 96],
            horizontal_fov_deg: 90.0,
            camera_height: 0.0,
        }
    }
}

pub const SKY_GRAY: f64 = 0.6;
pub const GROUND_GRAY: f64 = 0.35;
const BOX_INTENSITY: f64 = 0.6;
const GROUND_INTENSITY: f64 = 0.1;

impl WorldSpec {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if !(self.xy_range[0] < self.xy_range[1]) || !(self.z_range[0] < self.z_range[1]) {
            return cfg(format!("empty world range xy={:?} z={:?}", self.xy_range, self.z_range));
        }
        if self.classes.is_empty() {
            return cfg("at least one class is required".into());
        }
        if self.min_boxes > self.max_boxes || self.max_boxes > 8 {
            return cfg(format!("box count range {}..={} outside 0..=8", self.min_boxes, self.max_boxes));
        }
        if self.n_views == 0 || self.image_size.contains(&0) {
            return cfg("need at least one view of nonzero size".into());
        }
        if !(0.0..=1.0).contains(&self.empty_scene_prob) || !(0.0..=1.0).contains(&self.box_point_fraction) {
            return cfg("probabilities must lie in [0, 1]".into());
        }
        if !(self.z_range[0]..self.z_range[1]).contains(&self.ground_z)
            || !(self.z_range[0]..self.z_range[1]).contains(&self.camera_height)
        {
            return cfg("ground plane and cameras must lie inside the z range".into());
        }
        if !(0.0 < self.horizontal_fov_deg && self.horizontal_fov_deg < 180.0) || self.lidar_noise < 0.0 {
            return cfg("bad camera field of view or lidar noise".into());
        }
        let width = self.xy_range[1] - self.xy_range[0];
        let grow = 1.0 + self.size_jitter;
        for c in &self.classes {
            if c.size.iter().any(|&s| s <= 0.0) || !(0.0..1.0).contains(&self.size_jitter) {
                return cfg(format!("class {} has a non-positive size", c.name));
            }
            if c.size[0].max(c.size[1]) * grow + 2.0 * self.min_box_gap >= width {
                return cfg(format!("class {} does not fit in the xy range", c.name));
            }
            if self.ground_z + c.size[2] * grow >= self.z_range[1] {
                return cfg(format!("class {} does not fit under the z range", c.name));
            }
        }
        Ok(())
    }

    /// Pinhole intrinsics shared by every view.
    pub fn intrinsics(&self) -> Mat3 {
        let [h, w] = self.image_size.map(|v| v as f64);
        let f = 0.5 * w / (0.5 * self.horizontal_fov_deg.to_radians()).tan();
        [[f, 0.0, 0.5 * w], [0.0, f, 0.5 * h], [0.0, 0.0, 1.0]]
    }

    /// Camera-to-world poses of the rig: `n_views` cameras at the origin,
    /// evenly spaced in yaw, looking horizontally (x right, y down, z forward).
    pub fn camera_poses(&self) -> Vec<Mat4> {
        (0..self.n_views)
            .map(|k| {
                let (c, s) = if (4 * k) % self.n_views == 0 {
                    geometry::quarter_turn((4 * k / self.n_views) as i32)
                } else {
                    let a = std::f64::consts::TAU * k as f64 / self.n_views as f64;
                    (a.cos(), a.sin())
                };
                let rot = [[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]];
                geometry::pose_from(&rot, [0.0, 0.0, self.camera_height])
            })
            .collect()
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let [x0, x1] = self.xy_range;
        let [z0, z1] = self.z_range;
        (x0..x1).contains(&p[0]) && (x0..x1).contains(&p[1]) && (z0..z1).contains(&p[2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `(l, w, h)`, with `l` along the heading.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
}

impl Box3D {
    /// Half extents of the axis-aligned BEV footprint along x and y.
    pub fn half_extents_xy(&self) -> [f64; 2] {
        let (c, s) = (self.yaw.cos().abs(), self.yaw.sin().abs());
        let [l, w, _] = self.size;
        [0.5 * (c * l + s * w), 0.5 * (s * l + c * w)]
    }

    pub fn aabb(&self) -> (Vec3, Vec3) {
        let [hx, hy] = self.half_extents_xy();
        let hz = 0.5 * self.size[2];
        let [x, y, z] = self.center;
        ([x - hx, y - hy, z - hz], [x + hx, y + hy, z + hz])
    }

    /// Point containment with the box grown by `margin` on every side.
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        let (lo, hi) = self.aabb();
        (0..3).all(|a| p[a] >= lo[a] - margin && p[a] <= hi[a] + margin)
    }

    /// BEV footprint corners, counter-clockwise from `(min x, min y)`.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (lo, hi) = self.aabb();
        [[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]]
    }

    pub fn bev_iou(&self, other: &Box3D) -> f64 {
        let (a0, a1) = self.aabb();
        let (b0, b1) = other.aabb();
        let ix = (a1[0].min(b1[0]) - a0[0].max(b0[0])).max(0.0);
        let iy = (a1[1].min(b1[1]) - a0[1].max(b0[1])).max(0.0);
        let inter = ix * iy;
        let area = |lo: Vec3, hi: Vec3| (hi[0] - lo[0]) * (hi[1] - lo[1]);
        let union = area(a0, a1) + area(b0, b1) - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn is_valid(&self, n_classes: usize) -> bool {
        self.size.iter().all(|&s| s > 0.0)
            && (-std::f64::consts::PI..std::f64::consts::PI).contains(&self.yaw)
            && self.class_id < n_classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    /// `[H, W, 3]`, values on the 8-bit grid `k / 255`.
    pub image: Tensor,
    pub intrinsics: Mat3,
    /// Camera-to-world, rigid.
    pub pose: Mat4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub boxes: Vec<Box3D>,
    /// `(x, y, z, intensity)` per point.
    pub points: Vec<[f32; 4]>,
    pub views: Vec<CameraView>,
}

/// What the center ray of a pixel hits first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hit {
    Sky,
    Ground,
    Box(usize),
}

pub struct Render {
    pub image: Tensor,
    /// Camera-frame depth of the first hit, `f64::INFINITY` for sky.
    pub depth: Vec<f64>,
    pub hits: Vec<Hit>,
}

pub(crate) fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Ray-casts one view: the nearest surface along each pixel-center ray wins.
pub fn render_view(spec: &WorldSpec, boxes: &[Box3D], intrinsics: &Mat3, pose: &Mat4) -> Render {
    let [h, w] = spec.image_size;
    let k_inv = geometry::mat3_inverse(intrinsics).expect("intrinsics must be invertible");
    let rot = geometry::rotation(pose);
    let origin = geometry::translation(pose);
    let aabbs: Vec<_> = boxes.iter().map(Box3D::aabb).collect();
    let mut image = Tensor::zeros(vec![h, w, 3]);
    let mut depth = vec![f64::INFINITY; h * w];
    let mut hits = vec![Hit::Sky; h * w];
    for v in 0..h {
        for u in 0..w {
            let ray_cam = geometry::mat3_vec(&k_inv, [u as f64 + 0.5, v as f64 + 0.5, 1.0]);
            // Camera-frame z of `ray_cam` is 1, so the ray parameter is the depth.
            let dir = geometry::mat3_vec(&rot, ray_cam);
            let mut best = (f64::INFINITY, Hit::Sky, 0usize);
            if dir[2] < 0.0 {
                let t = (spec.ground_z - origin[2]) / dir[2];
                if t > 0.0 {
                    best = (t, Hit::Ground, 2);
                }
            }
            for (i, (lo, hi)) in aabbs.iter().enumerate() {
                if let Some((t, axis)) = ray_box(origin, dir, *lo, *hi) {
                    if t < best.0 {
                        best = (t, Hit::Box(i), axis);
                    }
                }
            }
            let color = match best.1 {
                Hit::Sky => [SKY_GRAY; 3],
                Hit::Ground => [GROUND_GRAY; 3],
                Hit::Box(i) => {
                    let shade = [0.8, 0.62, 1.0][best.2];
                    spec.classes[boxes[i].class_id].color.map(|c| c * shade)
                }
            };
            let px = v * w + u;
            for (ch, c) in color.iter().enumerate() {
                image.data_mut()[px * 3 + ch] = quantize(*c);
            }
            depth[px] = best.0;
            hits[px] = best.1;
        }
    }
    Render { image, depth, hits }
}

/// Slab test; returns the entry distance and the axis of the entry face.
fn ray_box(o: Vec3, d: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis = a;
        }
        t_far = t_far.min(t1);
    }
    (t_near <= t_far && t_near > 0.0).then_some((t_near, axis))
}

fn place_boxes(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Vec<Box3D> {
    if rng.gen_bool(spec.empty_scene_prob) {
        return Vec::new();
    }
    let n = rng.gen_range(spec.min_boxes..=spec.max_boxes);
    let [lo, hi] = spec.xy_range;
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.gen_range(0..spec.n_classes());
        let mean = spec.classes[class_id].size;
        let size = mean.map(|s| s * rng.gen_range(1.0 - spec.size_jitter..=1.0 + spec.size_jitter));
        let yaw = if rng.gen_bool(0.5) { 0.0 } else { std::f64::consts::FRAC_PI_2 };
        for _attempt in 0..200 {
            let mut candidate = Box3D { center: [0.0, 0.0, spec.ground_z + 0.5 * size[2]], size, yaw, class_id };
            let [hx, hy] = candidate.half_extents_xy();
            candidate.center[0] = rng.gen_range(lo + hx + spec.min_box_gap..hi - hx - spec.min_box_gap);
            candidate.center[1] = rng.gen_range(lo + hy + spec.min_box_gap..hi - hy - spec.min_box_gap);
            let dx = (candidate.center[0].abs() - hx).max(0.0);
            let dy = (candidate.center[1].abs() - hy).max(0.0);
            if dx.hypot(dy) < spec.min_sensor_distance {
                continue;
            }
            let clear = boxes.iter().all(|b| {
                let [bx, by] = b.half_extents_xy();
                (b.center[0] - candidate.center[0]).abs() >= bx + hx + spec.min_box_gap
                    || (b.center[1] - candidate.center[1]).abs() >= by + hy + spec.min_box_gap
            });
            if clear {
                boxes.push(candidate);
                break;
            }
        }
    }
    boxes
}

/// Uniform sample on the top and side faces of a box.
fn sample_box_surface(b: &Box3D, rng: &mut ChaCha8Rng) -> Vec3 {
    let (lo, hi) = b.aabb();
    let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    // top, -x/+x, -y/+y
    let areas = [ext[0] * ext[1], ext[1] * ext[2], ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[2]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    while face < 4 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let mut p = [0, 1, 2].map(|a| rng.gen_range(lo[a]..=hi[a]));
    match face {
        0 => p[2] = hi[2],
        1 => p[0] = lo[0],
        2 => p[0] = hi[0],
        3 => p[1] = lo[1],
        _ => p[1] = hi[1],
    }
    p
}

fn sample_points(spec: &WorldSpec, boxes: &[Box3D], rng: &mut ChaCha8Rng) -> Vec<[f32; 4]> {
    let n_total = spec.points_per_scene;
    let n_box = if boxes.is_empty() { 0 } else { (n_total as f64 * spec.box_point_fraction).round() as usize };
    let noise = Normal::new(0.0, spec.lidar_noise.max(0.0)).expect("finite noise");
    let [lo, hi] = spec.xy_range;
    let areas: Vec<f64> = boxes
        .iter()
        .map(|b| {
            let (l, h) = b.aabb();
            let e = [h[0] - l[0], h[1] - l[1], h[2] - l[2]];
            e[0] * e[1] + 2.0 * e[2] * (e[0] + e[1])
        })
        .collect();
    let area_total: f64 = areas.iter().sum();

    let mut points = Vec::with_capacity(n_total);
    while points.len() < n_total {
        let on_box = points.len() < n_box;
        let (surface, base_intensity) = if on_box {
            let mut pick = rng.gen_range(0.0..area_total);
            let mut i = 0;
            while i + 1 < boxes.len() && pick >= areas[i] {
                pick -= areas[i];
                i += 1;
            }
            (sample_box_surface(&boxes[i], rng), BOX_INTENSITY)
        } else {
            let p = [rng.gen_range(lo..hi), rng.gen_range(lo..hi), spec.ground_z];
            if boxes.iter().any(|b| b.contains([p[0], p[1], b.center[2]], 0.0)) {
                continue;
            }
            (p, GROUND_INTENSITY)
        };
        let p = surface.map(|v| v + noise.sample(rng));
        let intensity = base_intensity + rng.gen_range(-0.05..0.05);
        let q = [p[0] as f32, p[1] as f32, p[2] as f32, intensity as f32];
        if spec.contains([q[0] as f64, q[1] as f64, q[2] as f64]) {
            points.push(q);
        }
    }
    points
}

/// Generates one scene. Identical `(spec, seed)` give bit-identical scenes.
pub fn generate_scene(spec: &WorldSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = place_boxes(spec, &mut rng);
    let mut points = sample_points(spec, &boxes, &mut rng);
    points.shuffle(&mut rng);
    let intrinsics = spec.intrinsics();
    let views = spec
        .camera_poses()
        .into_iter()
        .map(|pose| CameraView { image: render_view(spec, &boxes, &intrinsics, &pose).image, intrinsics, pose })
        .collect();
    Ok(Scene { scene_id: seed, boxes, points, views })
}

/// Per-scene seed used by dataset builders.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.gen()
}
