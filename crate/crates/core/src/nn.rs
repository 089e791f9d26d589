//! Neural building blocks over the autodiff tape: parameter storage with
//! named groups, linear/normalization/attention layers, token-grid geometry
//! (window partitioning, cyclic shifts, patch regrouping), and an Adam-style
//! optimizer with group freezing.

use crate::autodiff::{Gradients, Scalar, Tape, Var};
use crate::seeding::derive_seed;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Parameter store.
// ---------------------------------------------------------------------------

/// The six trainable parameter groups of the system: shared semantic encoder,
/// shared channel encoder, and per-user channel/semantic decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Semantic encoder (including target embeddings).
    Alpha,
    /// Channel encoder (noise fusion + rate heads).
    Beta,
    /// Channel decoder of user `0` or `1`.
    Phi(u8),
    /// Semantic decoder of user `0` or `1`.
    Theta(u8),
}

impl ParamGroup {
    pub fn label(self) -> String {
        match self {
            ParamGroup::Alpha => "alpha".into(),
            ParamGroup::Beta => "beta".into(),
            ParamGroup::Phi(u) => format!("phi_{u}"),
            ParamGroup::Theta(u) => format!("theta_{u}"),
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        match label {
            "alpha" => Some(ParamGroup::Alpha),
            "beta" => Some(ParamGroup::Beta),
            "phi_0" => Some(ParamGroup::Phi(0)),
            "phi_1" => Some(ParamGroup::Phi(1)),
            "theta_0" => Some(ParamGroup::Theta(0)),
            "theta_1" => Some(ParamGroup::Theta(1)),
            _ => None,
        }
    }
}

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct ParamEntry<T> {
    name: String,
    group: ParamGroup,
    value: ArrayD<T>,
}

/// Named, grouped model parameters with deterministic ordering.
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// All ids in allocation order (deterministic across runs).
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    /// Total element count over one group.
    pub fn group_element_count(&self, group: ParamGroup) -> usize {
        self.ids_in_group(group)
            .iter()
            .map(|&id| self.value(id).len())
            .sum()
    }

    /// Byte-exact snapshot of one group's tensors, for freezing checks.
    pub fn group_snapshot(&self, group: ParamGroup) -> Vec<ArrayD<T>> {
        self.ids_in_group(group)
            .iter()
            .map(|&id| self.value(id).clone())
            .collect()
    }
}

/// Seeded initializer that owns the store while a model is being built.
pub struct Init<'s, T: Scalar> {
    pub store: &'s mut ParamStore<T>,
    rng: ChaCha12Rng,
    std: f64,
}

impl<'s, T: Scalar> Init<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha12Rng::seed_from_u64(derive_seed(seed, "param-init", &[])),
            std: 0.02,
        }
    }

    fn normal(&mut self, shape: &[usize]) -> ArrayD<T> {
        let std = self.std;
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            T::from_f64(n * std)
        })
    }

    pub fn weight(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> ParamId {
        let value = self.normal(shape);
        self.store.insert(name, group, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.store.insert(name, group, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.store
            .insert(name, group, ArrayD::from_elem(IxDyn(shape), T::one()))
    }
}

// ---------------------------------------------------------------------------
// Binding parameters onto a tape for one forward pass.
// ---------------------------------------------------------------------------

/// Lazily binds store parameters as tape leaves for one forward/backward
/// pass, remembering which leaf belongs to which parameter.
pub struct ParamTape<'a, T: Scalar> {
    pub store: &'a ParamStore<T>,
    pub tape: &'a Tape<T>,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Scalar> ParamTape<'a, T> {
    pub fn new(store: &'a ParamStore<T>, tape: &'a Tape<T>) -> Self {
        ParamTape {
            store,
            tape,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Tape leaf holding the current value of `id` (bound at most once).
    pub fn var(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = bound[id.index()] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone());
        bound[id.index()] = Some(v);
        v
    }

    /// All `(parameter, leaf)` pairs bound during this pass.
    pub fn bound_pairs(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), var)))
            .collect()
    }

    /// Extracts gradients for every bound parameter after a backward pass.
    pub fn collect_gradients(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, ArrayD<T>)> {
        self.bound_pairs()
            .into_iter()
            .filter_map(|(id, var)| grads.take(var).map(|g| (id, g)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Layers.
// ---------------------------------------------------------------------------

/// Fully connected layer `y = x W + b` over token rows.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = init.weight(format!("{name}.w"), group, &[in_dim, out_dim]);
        let b = bias.then(|| init.zeros(format!("{name}.b"), group, &[out_dim]));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, pt: &ParamTape<'_, T>, x: Var) -> Var {
        let y = pt.tape.matmul(x, pt.var(self.w));
        match self.b {
            Some(b) => pt.tape.add_row(y, pt.var(b)),
            None => y,
        }
    }
}

/// Per-row layer normalization with learned gain and bias.
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, group: ParamGroup, dim: usize) -> Self {
        LayerNorm {
            gain: init.ones(format!("{name}.gain"), group, &[dim]),
            bias: init.zeros(format!("{name}.bias"), group, &[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, pt: &ParamTape<'_, T>, x: Var) -> Var {
        pt.tape
            .layer_norm(x, pt.var(self.gain), pt.var(self.bias), T::from_f64(self.eps))
    }
}

/// Two-layer feed-forward block with GELU, expansion ratio 4.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, group: ParamGroup, dim: usize) -> Self {
        Mlp {
            fc1: Linear::new(init, &format!("{name}.fc1"), group, dim, 4 * dim, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), group, 4 * dim, dim, true),
        }
    }

    pub fn forward<T: Scalar>(&self, pt: &ParamTape<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(pt, x);
        let h = pt.tape.gelu(h);
        self.fc2.forward(pt, h)
    }
}

// ---------------------------------------------------------------------------
// Token-grid geometry.
// ---------------------------------------------------------------------------

/// Row permutation that groups an `(h, w)` raster into `window`-sided square
/// windows, window by window in raster order.
pub fn window_partition_indices(h: usize, w: usize, window: usize) -> Vec<usize> {
    assert!(h % window == 0 && w % window == 0, "window must tile the grid");
    let mut idx = Vec::with_capacity(h * w);
    for wy in 0..h / window {
        for wx in 0..w / window {
            for iy in 0..window {
                for ix in 0..window {
                    idx.push((wy * window + iy) * w + (wx * window + ix));
                }
            }
        }
    }
    idx
}

/// Row permutation realizing a cyclic roll: output `(r, c)` reads input
/// `((r + dy) mod h, (c + dx) mod w)`.
pub fn cyclic_shift_indices(h: usize, w: usize, dy: usize, dx: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            idx.push(((r + dy) % h) * w + (c + dx) % w);
        }
    }
    idx
}

/// Inverse of a permutation given as `out[i] = in[p[i]]` index form.
pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; p.len()];
    for (i, &src) in p.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

/// Additive attention mask for shifted windows: `0` where two tokens of a
/// window come from the same pre-shift region, a large negative value where
/// they do not (those pairs must not attend to each other).
pub fn shifted_window_mask<T: Scalar>(h: usize, w: usize, window: usize, shift: usize) -> Array3<T> {
    assert!(shift > 0 && shift < window);
    // Region ids on the rolled canvas, built from the three standard spans
    // per axis: the bulk, the seam of width `window - shift`, and the wrapped
    // seam of width `shift`.
    let spans = |n: usize| {
        vec![
            (0, n - window),
            (n - window, n - shift),
            (n - shift, n),
        ]
    };
    let mut region = vec![0usize; h * w];
    let mut next = 0usize;
    for (y0, y1) in spans(h) {
        for (x0, x1) in spans(w) {
            for y in y0..y1 {
                for x in x0..x1 {
                    region[y * w + x] = next;
                }
            }
            next += 1;
        }
    }
    let partition = window_partition_indices(h, w, window);
    let windows = (h / window) * (w / window);
    let wlen = window * window;
    let neg = T::from_f64(-1e4);
    let mut mask = Array3::<T>::zeros((windows, wlen, wlen));
    for wi in 0..windows {
        for i in 0..wlen {
            for j in 0..wlen {
                let ri = region[partition[wi * wlen + i]];
                let rj = region[partition[wi * wlen + j]];
                if ri != rj {
                    mask[(wi, i, j)] = neg;
                }
            }
        }
    }
    mask
}

/// Precomputed geometry for one attention layer on a fixed token grid.
pub struct WindowGrid<T: Scalar> {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
    /// Composed roll + partition permutation applied before attention.
    gather: Arc<Vec<usize>>,
    /// Inverse permutation applied after attention.
    scatter: Arc<Vec<usize>>,
    mask: Option<Arc<Array3<T>>>,
}

impl<T: Scalar> WindowGrid<T> {
    /// Builds the geometry for a grid, clamping the shift to zero when the
    /// window covers the whole grid (shifting would be a no-op roll).
    pub fn new(h: usize, w: usize, window: usize, shifted: bool) -> Self {
        assert!(h % window == 0 && w % window == 0, "window must tile the grid");
        let shift = if shifted && window < h.min(w) {
            window / 2
        } else {
            0
        };
        let partition = window_partition_indices(h, w, window);
        let gather: Vec<usize> = if shift > 0 {
            let roll = cyclic_shift_indices(h, w, shift, shift);
            partition.iter().map(|&p| roll[p]).collect()
        } else {
            partition
        };
        let scatter = invert_permutation(&gather);
        let mask = (shift > 0).then(|| Arc::new(shifted_window_mask::<T>(h, w, window, shift)));
        WindowGrid {
            h,
            w,
            window,
            shift,
            gather: Arc::new(gather),
            scatter: Arc::new(scatter),
            mask,
        }
    }

    pub fn windows(&self) -> usize {
        (self.h / self.window) * (self.w / self.window)
    }

    pub fn window_len(&self) -> usize {
        self.window * self.window
    }
}

/// Multi-head self-attention within (optionally shifted) windows.
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub channels: usize,
}

impl WindowAttention {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        group: ParamGroup,
        channels: usize,
        heads: usize,
    ) -> Self {
        assert!(channels % heads == 0, "channels must divide into heads");
        WindowAttention {
            qkv: Linear::new(init, &format!("{name}.qkv"), group, channels, 3 * channels, true),
            proj: Linear::new(init, &format!("{name}.proj"), group, channels, channels, true),
            heads,
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, pt: &ParamTape<'_, T>, x: Var, grid: &WindowGrid<T>) -> Var {
        let tape = pt.tape;
        let grouped = tape.gather_rows(x, Arc::clone(&grid.gather));
        let qkv = self.qkv.forward(pt, grouped);
        let c = self.channels;
        let q = tape.slice_cols(qkv, 0, c);
        let k = tape.slice_cols(qkv, c, 2 * c);
        let v = tape.slice_cols(qkv, 2 * c, 3 * c);
        let attended = tape.window_attention(
            q,
            k,
            v,
            grid.windows(),
            grid.window_len(),
            self.heads,
            grid.mask.clone(),
        );
        let projected = self.proj.forward(pt, attended);
        tape.gather_rows(projected, Arc::clone(&grid.scatter))
    }
}

/// One transformer block: windowed attention and a feed-forward layer, each
/// behind layer normalization and a residual connection. An optional
/// conditioning row is added to every token right after the attention output.
pub struct SwinBlock<T: Scalar> {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub grid: WindowGrid<T>,
}

impl<T: Scalar> SwinBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init<'_, T>,
        name: &str,
        group: ParamGroup,
        channels: usize,
        heads: usize,
        grid_h: usize,
        grid_w: usize,
        window: usize,
        shifted: bool,
    ) -> Self {
        SwinBlock {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), group, channels),
            attn: WindowAttention::new(init, &format!("{name}.attn"), group, channels, heads),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), group, channels),
            mlp: Mlp::new(init, &format!("{name}.mlp"), group, channels),
            grid: WindowGrid::new(grid_h, grid_w, window, shifted),
        }
    }

    pub fn forward(&self, pt: &ParamTape<'_, T>, x: Var, inject: Option<Var>) -> Var {
        let tape = pt.tape;
        let h = self.norm1.forward(pt, x);
        let h = self.attn.forward(pt, h, &self.grid);
        let h = match inject {
            Some(row) => tape.add_row(h, row),
            None => h,
        };
        let x = tape.add(x, h);
        let f = self.norm2.forward(pt, x);
        let f = self.mlp.forward(pt, f);
        tape.add(x, f)
    }
}

// ---------------------------------------------------------------------------
// Pixel/token regrouping tables.
// ---------------------------------------------------------------------------

/// For a stride-`p` regrouping of an `(h, w)` raster: `p*p` index lists, one
/// per intra-patch offset, each listing source rows in output raster order.
pub fn patch_group_indices(h: usize, w: usize, p: usize) -> Vec<Vec<usize>> {
    assert!(h % p == 0 && w % p == 0, "patch must tile the grid");
    let (oh, ow) = (h / p, w / p);
    let mut groups = Vec::with_capacity(p * p);
    for dy in 0..p {
        for dx in 0..p {
            let mut idx = Vec::with_capacity(oh * ow);
            for y in 0..oh {
                for x in 0..ow {
                    idx.push((y * p + dy) * w + (x * p + dx));
                }
            }
            groups.push(idx);
        }
    }
    groups
}

/// Permutation that reassembles `p*p` stacked offset-planes (each `oh*ow`
/// rows, stacked in [`patch_group_indices`] order) back into an
/// `(oh*p, ow*p)` raster: `out[i] = stacked[perm[i]]`.
pub fn patch_ungroup_permutation(oh: usize, ow: usize, p: usize) -> Vec<usize> {
    let plane = oh * ow;
    let (h, w) = (oh * p, ow * p);
    let mut perm = vec![0usize; h * w];
    for (out_row, slot) in perm.iter_mut().enumerate() {
        let (y, x) = (out_row / w, out_row % w);
        let (dy, dx) = (y % p, x % p);
        let (sy, sx) = (y / p, x / p);
        *slot = (dy * p + dx) * plane + sy * ow + sx;
    }
    perm
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

/// Accumulates per-parameter gradients over a batch in fixed order.
pub struct GradAccumulator<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        GradAccumulator {
            grads: vec![None; store.len()],
        }
    }

    pub fn add(&mut self, id: ParamId, grad: ArrayD<T>) {
        match &mut self.grads[id.index()] {
            Some(acc) => *acc += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn add_all(&mut self, pairs: Vec<(ParamId, ArrayD<T>)>) {
        for (id, g) in pairs {
            self.add(id, g);
        }
    }

    /// Scales every accumulated gradient (e.g. by 1/batch).
    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.grads[id.index()].as_ref()
    }

    /// Euclidean norm over one group's gradients (0 if none present).
    pub fn group_norm(&self, store: &ParamStore<T>, group: ParamGroup) -> f64 {
        let mut total = 0.0f64;
        for id in store.ids_in_group(group) {
            if let Some(g) = self.get(id) {
                total += g.iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>();
            }
        }
        total.sqrt()
    }
}

/// Adam optimizer over a [`ParamStore`], with per-parameter moments and
/// support for freezing whole groups.
///
/// Frozen groups are excluded from both the update and the moment/step
/// advancement, so unfreezing resumes exactly where the group left off.
/// Parameters without a gradient this step (paths not engaged by the batch)
/// are likewise left untouched.
pub struct Adam<T: Scalar> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    steps: Vec<u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, learning_rate: f64) -> Self {
        let m = store
            .ids()
            .map(|id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        let v = store
            .ids()
            .map(|id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            steps: vec![0; store.len()],
        }
    }

    /// Applies one update from accumulated gradients, skipping `frozen`
    /// groups entirely.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &GradAccumulator<T>,
        frozen: &[ParamGroup],
    ) {
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let lr = T::from_f64(self.learning_rate);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        for id in store.ids().collect::<Vec<_>>() {
            if frozen.contains(&store.group(id)) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as f64;
            let bc1 = T::from_f64(1.0 - self.beta1.powf(t));
            let bc2 = T::from_f64(1.0 - self.beta2.powf(t));
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let value = store.value_mut(id);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }

    /// Number of updates a parameter has received.
    pub fn step_count(&self, id: ParamId) -> u64 {
        self.steps[id.index()]
    }
}
