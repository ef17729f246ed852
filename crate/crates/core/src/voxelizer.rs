//! Dynamic voxelization and the LiDAR voxel feature pyramid.
//!
//! Grids are indexed `(d, h, w)` = `(z, y, x)` and stored channels-last as
//! `[D, H, W, C]`. Scale `i` halves every extent `i` times.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv, ParamGroup, ParamStore};
use crate::scene::WorldSpec;
use crate::tensor::Tensor;

pub const N_SCALES: usize = 3;
/// Raw per-point feature: offsets to the voxel center and intensity.
pub const RAW_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// World coordinates of the grid corner, `(x, y, z)`.
    pub origin: [f64; 3],
    /// Scale-0 voxel size `(S_D, S_H, S_W)` in meters.
    pub voxel_size: [f64; 3],
    /// Scale-0 extents `(D, H, W)`.
    pub dims: [usize; 3],
    pub channels: usize,
}

impl GridSpec {
    /// Grid covering the world ranges with the given voxel sizes `(S_D, S_H, S_W)`.
    pub fn from_world(world: &WorldSpec, voxel_size: [f64; 3], channels: usize) -> Result<Self> {
        let extent = [
            world.z_range[1] - world.z_range[0],
            world.xy_range[1] - world.xy_range[0],
            world.xy_range[1] - world.xy_range[0],
        ];
        let mut dims = [0; 3];
        for a in 0..3 {
            let n = (extent[a] / voxel_size[a]).round();
            if !(voxel_size[a] > 0.0) || n < 1.0 || (n * voxel_size[a] - extent[a]).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "voxel size {} does not tile the world extent {} on axis {a}",
                    voxel_size[a], extent[a]
                )));
            }
            dims[a] = n as usize;
        }
        let grid = Self { origin: [world.xy_range[0], world.xy_range[0], world.z_range[0]], voxel_size, dims, channels };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0 || n % 4 != 0) {
            return Err(Error::Config(format!("grid extents {:?} must be positive multiples of 4", self.dims)));
        }
        if self.channels == 0 || self.voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("grid needs positive voxel sizes and channels".into()));
        }
        Ok(())
    }

    /// Extents `(D, H, W)` at `scale`.
    pub fn dims_at(&self, scale: usize) -> [usize; 3] {
        self.dims.map(|n| n >> scale)
    }

    pub fn voxel_size_at(&self, scale: usize) -> [f64; 3] {
        self.voxel_size.map(|s| s * (1 << scale) as f64)
    }

    pub fn n_voxels(&self, scale: usize) -> usize {
        self.dims_at(scale).iter().product()
    }

    /// Shape `[D, H, W, C]` of level `scale`.
    pub fn level_shape(&self, scale: usize) -> Vec<usize> {
        let [d, h, w] = self.dims_at(scale);
        vec![d, h, w, self.channels]
    }

    /// BEV grid `(rows, cols)`: the scale-1 horizontal extents.
    pub fn bev_dims(&self) -> [usize; 2] {
        let [_, h, w] = self.dims_at(1);
        [h, w]
    }

    /// BEV cell size `(y, x)` in meters.
    pub fn bev_cell(&self) -> [f64; 2] {
        let [_, sh, sw] = self.voxel_size_at(1);
        [sh, sw]
    }

    /// Voxel `(d, h, w)` containing world point `p` at `scale`, if inside the grid.
    pub fn voxel_of(&self, p: [f64; 3], scale: usize) -> Option<[usize; 3]> {
        let size = self.voxel_size_at(scale);
        let dims = self.dims_at(scale);
        let rel = [p[2] - self.origin[2], p[1] - self.origin[1], p[0] - self.origin[0]];
        let mut idx = [0; 3];
        for a in 0..3 {
            let f = (rel[a] / size[a]).floor();
            if !(f >= 0.0 && f < dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    /// World `(x, y, z)` of a voxel center.
    pub fn voxel_center(&self, idx: [usize; 3], scale: usize) -> [f64; 3] {
        let size = self.voxel_size_at(scale);
        [
            self.origin[0] + (idx[2] as f64 + 0.5) * size[2],
            self.origin[1] + (idx[1] as f64 + 0.5) * size[1],
            self.origin[2] + (idx[0] as f64 + 0.5) * size[0],
        ]
    }

    pub fn flat_index(&self, idx: [usize; 3], scale: usize) -> usize {
        let [_, h, w] = self.dims_at(scale);
        (idx[0] * h + idx[1]) * w + idx[2]
    }

    pub fn unflatten(&self, flat: usize, scale: usize) -> [usize; 3] {
        let [_, h, w] = self.dims_at(scale);
        [flat / (h * w), (flat / w) % h, flat % w]
    }
}

/// One occupied voxel with the mean raw feature of its points.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelEntry {
    pub index: [usize; 3],
    pub feature: [f64; RAW_FEATURES],
    pub n_points: usize,
}

/// Groups in-range points by voxel at `scale`, without a per-voxel point cap.
///
/// Entries come out in ascending flat voxel index. Within a voxel the point
/// features are summed in a canonical order, so the result does not depend
/// on input order.
pub fn dynamic_voxelize(points: &[[f32; 4]], grid: &GridSpec, scale: usize) -> Vec<VoxelEntry> {
    let mut keyed: Vec<(usize, [f64; RAW_FEATURES])> = points
        .iter()
        .filter_map(|p| {
            let xyz = [p[0] as f64, p[1] as f64, p[2] as f64];
            let idx = grid.voxel_of(xyz, scale)?;
            let c = grid.voxel_center(idx, scale);
            Some((grid.flat_index(idx, scale), [xyz[0] - c[0], xyz[1] - c[1], xyz[2] - c[2], p[3] as f64]))
        })
        .collect();
    keyed.sort_unstable_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            a.1.iter().zip(&b.1).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let mut out: Vec<VoxelEntry> = Vec::new();
    let mut start = 0;
    while start < keyed.len() {
        let flat = keyed[start].0;
        let end = start + keyed[start..].iter().take_while(|k| k.0 == flat).count();
        let n = end - start;
        let mut feature = [0.0; RAW_FEATURES];
        for (_, f) in &keyed[start..end] {
            for (acc, v) in feature.iter_mut().zip(f) {
                *acc += v;
            }
        }
        feature.iter_mut().for_each(|v| *v /= n as f64);
        out.push(VoxelEntry { index: grid.unflatten(flat, scale), feature, n_points: n });
        start = end;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Lidar,
    Camera,
}

/// Dense three-level voxel feature pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelPyramid {
    pub levels: [Tensor; N_SCALES],
    pub modality: Modality,
}

impl VoxelPyramid {
    pub fn from_vars(levels: &[Var<'_>; N_SCALES], modality: Modality) -> Self {
        Self { levels: levels.each_ref().map(|v| (*v.value()).clone()), modality }
    }

    pub fn is_consistent(&self, grid: &GridSpec) -> bool {
        self.levels.iter().enumerate().all(|(i, l)| l.shape() == grid.level_shape(i).as_slice() && l.all_finite())
    }
}

/// Scatters `[n_occupied, C]` rows into a dense `[D, H, W, C]` grid, zero elsewhere.
pub fn scatter_dense<'g>(rows: Var<'g>, flat_indices: &[usize], dims: [usize; 3]) -> Var<'g> {
    let n: usize = dims.iter().product();
    let c = *rows.shape().last().unwrap();
    let mut taps = vec![Vec::new(); n];
    for (k, &f) in flat_indices.iter().enumerate() {
        taps[f].push((k, 1.0));
    }
    rows.gather_weighted(taps).reshape(&[dims[0], dims[1], dims[2], c])
}

/// Per-scale two-layer point-feature encoder for occupied voxels.
#[derive(Clone, Debug)]
pub struct LidarEncoder {
    pub layers: Vec<[Conv; 2]>,
}

impl LidarEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, grid: &GridSpec, rng: &mut R) -> Self {
        let c = grid.channels;
        let layers = (0..N_SCALES)
            .map(|i| {
                [
                    Conv::pointwise(store, &format!("lidar.s{i}.fc1"), ParamGroup::Prompter, RAW_FEATURES, c, rng),
                    Conv::pointwise(store, &format!("lidar.s{i}.fc2"), ParamGroup::Prompter, c, c, rng),
                ]
            })
            .collect();
        Self { layers }
    }

    /// LiDAR pyramid `F_l^0..F_l^2`.
    pub fn forward<'g>(&self, p: &Binding<'g, '_>, points: &[[f32; 4]], grid: &GridSpec) -> [Var<'g>; N_SCALES] {
        let graph = p.graph();
        std::array::from_fn(|i| {
            let dims = grid.dims_at(i);
            let entries = dynamic_voxelize(points, grid, i);
            if entries.is_empty() {
                return graph.constant(Tensor::zeros(grid.level_shape(i)));
            }
            let feats: Vec<f64> = entries.iter().flat_map(|e| e.feature).collect();
            let x = graph.constant(Tensor::new(vec![entries.len(), RAW_FEATURES], feats));
            let [fc1, fc2] = &self.layers[i];
            let h = fc2.forward(p, fc1.forward(p, x).relu());
            let flat: Vec<usize> = entries.iter().map(|e| grid.flat_index(e.index, i)).collect();
            scatter_dense(h, &flat, dims)
        })
    }
}
