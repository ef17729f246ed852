//! Named parameters and the layer building blocks shared by every branch.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Which half of the model a parameter belongs to.
///
/// The camera base detector is `Base`; everything that only exists to
/// consume LiDAR or to inject fused knowledge is `Prompter`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Prompter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar parameter count of one group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.value.len()).sum()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Lazily binds store parameters as leaves of one graph.
pub struct Binding<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g, 's> Binding<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self { graph, store, vars: RefCell::new(vec![None; store.len()]) }
    }

    /// Binding whose listed parameters are the given vars instead of fresh leaves.
    pub fn with_vars(graph: &'g Graph, store: &'s ParamStore, vars: impl IntoIterator<Item = (ParamId, Var<'g>)>) -> Self {
        let b = Self::new(graph, store);
        for (id, v) in vars {
            b.vars.borrow_mut()[id.0] = Some(v);
        }
        b
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.graph.leaf(self.store.get(id).clone()))
    }

    /// Gradient per parameter, zero for parameters the loss never touched.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let vars = self.vars.borrow();
        self.store
            .ids()
            .map(|id| {
                vars[id.0]
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape().to_vec()))
            })
            .collect()
    }

    /// Whether the graph reached this parameter during the forward pass.
    pub fn is_bound(&self, id: ParamId) -> bool {
        self.vars.borrow()[id.0].is_some()
    }
}

/// Convolution layer with channels-last kernel `[kd, kh, kw, Cin, Cout]`.
///
/// Accepts `[D, H, W, C]` grids, `[H, W, C]` maps (2D kernels only) and
/// `[N, C]` rows (pointwise only).
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        geom: ConvGeom,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let [kd, kh, kw] = geom.kernel;
        let fan_in = (kd * kh * kw * cin) as f64;
        let weight = Tensor::randn(vec![kd, kh, kw, cin, cout], (2.0 / fan_in).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), group, weight);
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(vec![cout]));
        Self { weight, bias: Some(bias), geom }
    }

    pub fn conv3d<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, group: ParamGroup, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self::build(store, name, group, ConvGeom::same3d(k), cin, cout, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, group, ConvGeom::conv2d(k, stride), cin, cout, rng)
    }

    pub fn pointwise<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, group: ParamGroup, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::build(store, name, group, ConvGeom::pointwise(), cin, cout, rng)
    }

    pub fn in_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[3]
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[4]
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn forward<'g>(&self, p: &Binding<'g, '_>, x: Var<'g>) -> Var<'g> {
        let w = p.var(self.weight);
        let b = self.bias.map(|b| p.var(b));
        let shape = x.shape();
        match shape.len() {
            4 => x.conv(&w, b.as_ref(), self.geom),
            3 => {
                assert_eq!(self.geom.kernel[0], 1, "3D kernel applied to a 2D map");
                let y = x.reshape(&[1, shape[0], shape[1], shape[2]]).conv(&w, b.as_ref(), self.geom);
                let ys = y.shape();
                y.reshape(&ys[1..])
            }
            2 => {
                assert!(self.geom.is_pointwise(), "only pointwise layers accept row input");
                let y = x.reshape(&[shape[0], 1, 1, shape[1]]).conv(&w, b.as_ref(), self.geom);
                let cout = y.shape()[3];
                y.reshape(&[shape[0], cout])
            }
            _ => panic!("unsupported conv input shape {shape:?}"),
        }
    }
}
