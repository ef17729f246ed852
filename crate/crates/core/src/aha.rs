//! Adaptive hierarchical aggregation of LiDAR and camera voxel pyramids.
//!
//! Per scale, a two-way softmax gate mixes `F_l^i` and `F_c^i`. The three
//! mixed levels are resampled to scale 1, mixed again by a three-way gate,
//! then flattened over height into a BEV map.

use rand::Rng;

use crate::autograd::{concat_last, mix, Var};
use crate::nn::{Binding, Conv, ParamGroup, ParamId, ParamStore};
use crate::voxelizer::{GridSpec, N_SCALES};

#[derive(Clone, Debug)]
pub struct ScaleGate {
    pub conv_l: Conv,
    pub conv_c: Conv,
    /// `2C -> 2`, zero-initialized.
    pub gate: Conv,
}

#[derive(Clone, Debug)]
pub struct AhaParams {
    pub scales: [ScaleGate; N_SCALES],
    pub level_convs: [Conv; N_SCALES],
    /// `3C -> 3`, zero-initialized.
    pub level_gate: Conv,
    /// Pointwise `(D/2)·C -> C` after the vertical flatten.
    pub reducer: Conv,
}

/// Mixed output and the softmax gate that produced it.
pub struct Gated<'g> {
    pub output: Var<'g>,
    pub weights: Var<'g>,
}

impl AhaParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, grid: &GridSpec, rng: &mut R) -> Self {
        let c = grid.channels;
        let g = ParamGroup::Prompter;
        let scales = std::array::from_fn(|i| {
            let gate = Conv::pointwise(store, &format!("aha.s{i}.gate"), g, 2 * c, 2, rng);
            gate.zero(store);
            ScaleGate {
                conv_l: Conv::conv3d(store, &format!("aha.s{i}.conv_l"), g, c, c, 3, rng),
                conv_c: Conv::conv3d(store, &format!("aha.s{i}.conv_c"), g, c, c, 3, rng),
                gate,
            }
        });
        let level_convs = std::array::from_fn(|i| Conv::conv3d(store, &format!("aha.level{i}"), g, c, c, 3, rng));
        let level_gate = Conv::pointwise(store, "aha.level_gate", g, 3 * c, 3, rng);
        level_gate.zero(store);
        let reducer = Conv::pointwise(store, "aha.reducer", g, grid.dims_at(1)[0] * c, c, rng);
        Self { scales, level_convs, level_gate, reducer }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.scales {
            for conv in [&s.conv_l, &s.conv_c, &s.gate] {
                ids.extend(conv.param_ids());
            }
        }
        ids.extend(self.level_convs.iter().flat_map(Conv::param_ids));
        ids.extend(self.level_gate.param_ids());
        ids.extend(self.reducer.param_ids());
        ids
    }

    /// Gated fusion of one scale: `W = softmax(C_lc([C_l(F_l), C_c(F_c)]))`,
    /// `F_lc = W_0 F_l + W_1 F_c`.
    pub fn fuse_scale<'g>(&self, p: &Binding<'g, '_>, f_l: Var<'g>, f_c: Var<'g>, scale: usize) -> Gated<'g> {
        assert_eq!(f_l.shape(), f_c.shape(), "fuse_scale operands differ in shape");
        let s = &self.scales[scale];
        let logits = s.gate.forward(p, concat_last(&[s.conv_l.forward(p, f_l), s.conv_c.forward(p, f_c)]));
        let weights = logits.softmax_last();
        Gated { output: mix(weights, &[f_l, f_c]), weights }
    }

    /// Cross-scale mixture at the scale-1 grid, before flattening.
    pub fn mix_levels<'g>(&self, p: &Binding<'g, '_>, levels: [Var<'g>; N_SCALES]) -> Gated<'g> {
        let s1 = levels[1].shape();
        let target = [s1[0], s1[1], s1[2]];
        let resized = levels.map(|l| l.resize_trilinear(target));
        let feats: Vec<_> = resized.iter().zip(&self.level_convs).map(|(l, conv)| conv.forward(p, *l)).collect();
        let weights = self.level_gate.forward(p, concat_last(&feats)).softmax_last();
        Gated { output: mix(weights, &resized), weights }
    }

    /// Fusion BEV feature `F_f` of shape `[H/2, W/2, C]`.
    pub fn aggregate<'g>(&self, p: &Binding<'g, '_>, levels: [Var<'g>; N_SCALES]) -> Gated<'g> {
        let mixed = self.mix_levels(p, levels);
        Gated { output: self.reducer.forward(p, mixed.output.vertical_flatten()), weights: mixed.weights }
    }

    /// Full prompter fusion from the two pyramids.
    pub fn forward<'g>(&self, p: &Binding<'g, '_>, lidar: &[Var<'g>; N_SCALES], camera: &[Var<'g>; N_SCALES]) -> Var<'g> {
        let fused = std::array::from_fn(|i| self.fuse_scale(p, lidar[i], camera[i], i).output);
        self.aggregate(p, fused).output
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{add_all, Graph};
    use crate::gradcheck;
    use crate::scene::WorldSpec;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (GridSpec, ParamStore, AhaParams, ChaCha8Rng) {
        let world = WorldSpec { xy_range: [-2.0, 2.0], z_range: [-2.0, 2.0], ..WorldSpec::default() };
        let grid = GridSpec::from_world(&world, [1.0; 3], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let aha = AhaParams::new(&mut store, &grid, &mut rng);
        (grid, store, aha, rng)
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::uniform(shape, -0.5, 0.5, rng);
        }
    }

    #[test]
    fn zero_gate_averages() {
        let (grid, store, aha, mut rng) = small();
        let g = Graph::inference();
        let b = Binding::new(&g, &store);
        let fl = g.constant(Tensor::uniform(grid.level_shape(0), -1.0, 1.0, &mut rng));
        let fc = g.constant(Tensor::uniform(grid.level_shape(0), -1.0, 1.0, &mut rng));
        let out = aha.fuse_scale(&b, fl, fc, 0);
        assert!(out.weights.value().data().iter().all(|&w| w == 0.5));
        let want = fl.add(&fc).scale(0.5).value();
        assert!(out.output.value().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn equal_operands_pass_through() {
        let (grid, mut store, aha, mut rng) = small();
        randomize(&mut store, &mut rng);
        let g = Graph::inference();
        let b = Binding::new(&g, &store);
        let x = g.constant(Tensor::uniform(grid.level_shape(1), -1.0, 1.0, &mut rng));
        let out = aha.fuse_scale(&b, x, x, 1).output.value();
        assert!(out.max_abs_diff(&x.value()) < 1e-12);
    }

    #[test]
    fn constant_levels_mix_to_constant() {
        let (grid, mut store, aha, mut rng) = small();
        randomize(&mut store, &mut rng);
        let g = Graph::inference();
        let b = Binding::new(&g, &store);
        let levels = std::array::from_fn(|i| g.constant(Tensor::full(grid.level_shape(i), 0.75)));
        let mixed = aha.mix_levels(&b, levels);
        assert!(mixed.output.value().data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
        for row in mixed.weights.value().data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_are_normalized_and_convex() {
        let (grid, mut store, aha, mut rng) = small();
        randomize(&mut store, &mut rng);
        let g = Graph::inference();
        let b = Binding::new(&g, &store);
        let fl = g.constant(Tensor::uniform(grid.level_shape(0), -3.0, 3.0, &mut rng));
        let fc = g.constant(Tensor::uniform(grid.level_shape(0), -3.0, 3.0, &mut rng));
        let out = aha.fuse_scale(&b, fl, fc, 0);
        for row in out.weights.value().data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12 && row.iter().all(|&w| w >= 0.0));
        }
        let (a, c, o) = (fl.value(), fc.value(), out.output.value());
        for ((x, y), z) in a.data().iter().zip(c.data()).zip(o.data()) {
            assert!(*z >= x.min(*y) - 1e-12 && *z <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn aha_gradients_match_finite_differences() {
        let (grid, mut store, aha, mut rng) = small();
        randomize(&mut store, &mut rng);
        let ids = aha.param_ids();
        assert_eq!(ids.len(), store.len());
        let lidar: Vec<Tensor> = (0..N_SCALES).map(|i| Tensor::uniform(grid.level_shape(i), -1.0, 1.0, &mut rng)).collect();
        let camera: Vec<Tensor> = (0..N_SCALES).map(|i| Tensor::uniform(grid.level_shape(i), -1.0, 1.0, &mut rng)).collect();
        let probe = Tensor::uniform(vec![2, 2, 3], -1.0, 1.0, &mut rng);
        let inputs: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
        let results = gradcheck::check(&inputs, 1e-6, 40, |g, vars| {
            let b = Binding::with_vars(g, &store, ids.iter().copied().zip(vars.iter().copied()));
            let l = std::array::from_fn(|i| g.constant(lidar[i].clone()));
            let c = std::array::from_fn(|i| g.constant(camera[i].clone()));
            let f = aha.forward(&b, &l, &c);
            add_all(g, &[f.mul(&g.constant(probe.clone())).sum()])
        });
        for r in results {
            assert!(r.rel_error < 1e-4, "param {} rel error {}", store.entry(ids[r.input]).name, r.rel_error);
        }
    }

    #[test]
    fn all_params_are_prompter() {
        let (_, store, aha, _) = small();
        for id in aha.param_ids() {
            assert_eq!(store.entry(id).group, ParamGroup::Prompter);
        }
        assert_eq!(store.count(ParamGroup::Base), 0);
    }
}
