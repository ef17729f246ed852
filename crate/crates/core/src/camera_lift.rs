//! Image backbone and depth-distribution lifting into camera pseudo-voxels.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{lift_scatter, LiftMap, Var};
use crate::geometry::{self, Mat3, Mat4};
use crate::nn::{Binding, Conv, ParamGroup, ParamStore};
use crate::scene::CameraView;
use crate::tensor::Tensor;
use crate::voxelizer::{GridSpec, N_SCALES};

pub const IMAGE_CHANNELS: usize = 32;
pub const N_DEPTH: usize = 24;
pub const DEPTH_RANGE: [f64; 2] = [0.5, 24.0];
/// Total downsampling of the backbone.
pub const FEATURE_STRIDE: usize = 4;

pub fn depth_bins() -> Vec<f64> {
    let [lo, hi] = DEPTH_RANGE;
    (0..N_DEPTH).map(|k| lo + (hi - lo) * k as f64 / (N_DEPTH - 1) as f64).collect()
}

/// Four 3x3 conv blocks (two with stride 2) and a 1x1 depth/context head.
#[derive(Clone, Debug)]
pub struct CameraBackbone {
    pub convs: [Conv; 4],
    pub head: Conv,
    pub context_channels: usize,
}

impl CameraBackbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, context_channels: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Base;
        let c = IMAGE_CHANNELS;
        let convs = [
            Conv::conv2d(store, "cam.conv1", g, 3, c / 4, 3, 2, rng),
            Conv::conv2d(store, "cam.conv2", g, c / 4, c / 2, 3, 2, rng),
            Conv::conv2d(store, "cam.conv3", g, c / 2, c, 3, 1, rng),
            Conv::conv2d(store, "cam.conv4", g, c, c, 3, 1, rng),
        ];
        let head = Conv::pointwise(store, "cam.head", g, c, N_DEPTH + context_channels, rng);
        Self { convs, head, context_channels }
    }

    /// Per feature pixel: softmax depth `[P, N_DEPTH]` and context `[P, C]`,
    /// pixels ordered `(view, row, col)`.
    pub fn forward<'g>(&self, p: &Binding<'g, '_>, views: &[CameraView]) -> (Var<'g>, Var<'g>) {
        let &[h, w, _] = views[0].image.shape() else { panic!("views must be [H, W, 3]") };
        let mut data = Vec::with_capacity(views.len() * h * w * 3);
        for v in views {
            assert_eq!(v.image.shape(), &[h, w, 3], "views differ in size");
            data.extend_from_slice(v.image.data());
        }
        let mut x = p.graph().constant(Tensor::new(vec![views.len(), h, w, 3], data));
        for conv in &self.convs {
            x = conv.forward(p, x).relu();
        }
        let y = self.head.forward(p, x);
        let s = y.shape();
        let rows = y.reshape(&[s[0] * s[1] * s[2], s[3]]);
        (rows.slice_last(0, N_DEPTH).softmax_last(), rows.slice_last(N_DEPTH, self.context_channels))
    }
}

/// Feature-map extents `(rows, cols)` for an image of `(h, w)` pixels.
pub fn feature_dims(image: [usize; 2]) -> [usize; 2] {
    let down = |n: usize| n.div_ceil(2).div_ceil(2);
    [down(image[0]), down(image[1])]
}

/// Scale-0 voxel of every `(feature pixel, depth bin)` frustum sample.
pub fn build_lift_map(calib: &[(Mat3, Mat4)], image: [usize; 2], grid: &GridSpec) -> LiftMap {
    let [fh, fw] = feature_dims(image);
    let bins = depth_bins();
    let n_pixels = calib.len() * fh * fw;
    let mut targets = Vec::with_capacity(n_pixels * N_DEPTH);
    for (k, pose) in calib {
        let k_inv = geometry::mat3_inverse(k).expect("intrinsics must be invertible");
        for r in 0..fh {
            for c in 0..fw {
                let u = (c as f64 + 0.5) * FEATURE_STRIDE as f64;
                let v = (r as f64 + 0.5) * FEATURE_STRIDE as f64;
                let ray = geometry::mat3_vec(&k_inv, [u, v, 1.0]);
                for &d in &bins {
                    let world = geometry::to_world(pose, ray.map(|x| x * d));
                    targets.push(grid.voxel_of(world, 0).map(|idx| grid.flat_index(idx, 0) as u32));
                }
            }
        }
    }
    LiftMap { n_pixels, n_depth: N_DEPTH, n_voxels: grid.n_voxels(0), targets }
}

/// Backbone, lift and the pooled camera pyramid `F_c^0..F_c^2`.
#[derive(Clone, Debug)]
pub struct CameraLift {
    pub backbone: CameraBackbone,
    /// Pointwise convs after pooling for scales 1 and 2.
    pub poolers: [Conv; 2],
}

impl CameraLift {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, grid: &GridSpec, rng: &mut R) -> Self {
        let c = grid.channels;
        let backbone = CameraBackbone::new(store, c, rng);
        let poolers = [
            Conv::pointwise(store, "cam.pool1", ParamGroup::Base, c, c, rng),
            Conv::pointwise(store, "cam.pool2", ParamGroup::Base, c, c, rng),
        ];
        Self { backbone, poolers }
    }

    /// Scale-0 camera pseudo-voxels `F_c^0`.
    pub fn lift<'g>(&self, p: &Binding<'g, '_>, views: &[CameraView], grid: &GridSpec) -> Var<'g> {
        let calib: Vec<_> = views.iter().map(|v| (v.intrinsics, v.pose)).collect();
        let &[h, w, _] = views[0].image.shape() else { panic!("views must be [H, W, 3]") };
        let map = Arc::new(build_lift_map(&calib, [h, w], grid));
        let (depth, context) = self.backbone.forward(p, views);
        lift_scatter(depth, context, map).reshape(&grid.level_shape(0))
    }

    /// `F_c^i` for `i > 0` from `F_c^0`.
    pub fn pooled<'g>(&self, p: &Binding<'g, '_>, f0: Var<'g>, scale: usize) -> Var<'g> {
        self.poolers[scale - 1].forward(p, f0.avg_pool3d(1 << scale))
    }

    pub fn lift_views<'g>(&self, p: &Binding<'g, '_>, views: &[CameraView], grid: &GridSpec) -> [Var<'g>; N_SCALES] {
        let f0 = self.lift(p, views, grid);
        [f0, self.pooled(p, f0, 1), self.pooled(p, f0, 2)]
    }

    pub fn param_ids(&self) -> Vec<crate::nn::ParamId> {
        let mut ids: Vec<_> = self.backbone.convs.iter().flat_map(Conv::param_ids).collect();
        ids.extend(self.backbone.head.param_ids());
        ids.extend(self.poolers.iter().flat_map(Conv::param_ids));
        ids
    }
}
