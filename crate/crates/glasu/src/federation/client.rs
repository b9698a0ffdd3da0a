//! Client-side state and computation: per-round inputs, the joint-inference
//! forward cursor, and the purely local stale update.

use crate::error::{GlasuError, Result};
use crate::graph::{bipartite_adjacency, NormalizedAdj};
use crate::linalg::{add, matmul, scale, sub, Matrix};
use crate::model::{
    classify, layer_backward, layer_forward, loss_and_grad, ClientModel, LayerKind, TapeEntry,
};
use crate::sampling::LayerPlan;

use super::{extract, local_compose, AggKind, CacheEntry, LabelMode, StaleCache};

/// Immutable per-client training context.
#[derive(Clone, Debug)]
pub struct ClientCtx {
    pub id: usize,
    pub m_total: usize,
    pub adj: NormalizedAdj,
    /// This client's contiguous feature block.
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub plan: LayerPlan,
    pub kind: LayerKind,
    pub agg: AggKind,
    pub hidden: usize,
    pub label_mode: LabelMode,
}

impl ClientCtx {
    pub fn owns_labels(&self) -> bool {
        self.label_mode == LabelMode::AllClients || self.id == 0
    }

    fn agg_out_width(&self) -> usize {
        self.agg.out_width(self.hidden)
    }

    /// Input width of layer `l` given which layers aggregate.
    fn in_width(&self, l: usize) -> usize {
        if l == 0 {
            return match self.kind {
                LayerKind::Gcn => self.features.cols(),
                LayerKind::Gcnii { .. } => self.hidden,
            };
        }
        if self.plan.is_agg(l - 1) {
            self.agg_out_width()
        } else {
            self.hidden
        }
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.plan.num_layers()).map(|l| (self.in_width(l), self.hidden)).collect()
    }

    pub fn input_proj_dims(&self) -> Option<(usize, usize)> {
        matches!(self.kind, LayerKind::Gcnii { .. }).then(|| (self.features.cols(), self.hidden))
    }

    pub fn classifier_dims(&self) -> Option<(usize, usize)> {
        if !self.owns_labels() {
            return None;
        }
        let top = self.plan.num_layers() - 1;
        let w = if self.plan.is_agg(top) { self.agg_out_width() } else { self.hidden };
        Some((w, self.num_classes))
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        if let LayerKind::Gcnii { .. } = self.kind {
            // GCNII layers need width-preserving inputs: a concat-aggregated
            // output may only feed the classifier.
            if self.agg_out_width() != self.hidden && self.plan.num_agg_layers() > 1 {
                return Err(GlasuError::Config(
                    "gcnii with concat aggregation requires a single aggregation layer \
                     (the concatenated width only fits the classifier)"
                        .into(),
                ));
            }
        }
        if self.label_mode == LabelMode::SingleHolder {
            self.plan.validate_single_holder()?;
        }
        Ok(())
    }
}

/// Per-round, per-client prepared inputs: the schedule's index sets, the
/// densified bipartite blocks, the gathered feature rows, and batch labels.
#[derive(Clone, Debug)]
pub struct RoundInputs {
    pub sets: Vec<Vec<u32>>,
    pub bips: Vec<Matrix>,
    pub x0: Matrix,
    pub batch_labels: Vec<u32>,
}

fn gather_feature_rows(features: &Matrix, ids: &[u32]) -> Matrix {
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    crate::linalg::gather_rows(features, &idx)
}

/// Positions of `sub` inside `base`; both sorted ascending, sub ⊆ base.
fn positions_in(sub: &[u32], base: &[u32]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sub.len());
    let mut b = 0;
    for &x in sub {
        while base[b] < x {
            b += 1;
        }
        debug_assert_eq!(base[b], x, "schedule nesting violated");
        out.push(b);
        b += 1;
    }
    out
}

pub fn build_round_inputs(ctx: &ClientCtx, sets: Vec<Vec<u32>>) -> Result<RoundInputs> {
    let l_total = ctx.plan.num_layers();
    let mut bips = Vec::with_capacity(l_total);
    for l in 0..l_total {
        bips.push(bipartite_adjacency(&ctx.adj, &sets[l + 1], &sets[l])?);
    }
    let x0 = gather_feature_rows(&ctx.features, &sets[0]);
    let batch_labels = sets[l_total].iter().map(|&i| ctx.labels[i as usize]).collect();
    Ok(RoundInputs { sets, bips, x0, batch_labels })
}

/// Initial hidden state for the layer stack: raw features for GCN, the
/// projected features H0 = X * W_in for GCNII (also the residual anchor).
fn initial_state(ctx: &ClientCtx, inputs: &RoundInputs, model: &ClientModel) -> (Matrix, Option<Matrix>) {
    match ctx.kind {
        LayerKind::Gcn => (inputs.x0.clone(), None),
        LayerKind::Gcnii { .. } => {
            let proj = model.input_proj.as_ref().expect("gcnii model has an input projection");
            let h0 = matmul(&inputs.x0, proj);
            (h0.clone(), Some(h0))
        }
    }
}

fn h0_slice_for_layer(
    h0: Option<&Matrix>,
    inputs: &RoundInputs,
    layer: usize,
) -> Option<(Matrix, Vec<usize>)> {
    h0.map(|h0_full| {
        let pos = positions_in(&inputs.sets[layer + 1], &inputs.sets[0]);
        (crate::linalg::gather_rows(h0_full, &pos), pos)
    })
}

/// What the joint-inference cursor stopped on.
pub enum ForwardStep {
    /// This layer aggregates: `h_plus` must go to the server, and the
    /// aggregated value comes back via [`JointForward::accept_agg`].
    Upload { layer: usize, h_plus: Matrix },
    Finished,
}

/// One client's half of JointInference, runnable between aggregation barriers.
pub struct JointForward<'a> {
    ctx: &'a ClientCtx,
    inputs: &'a RoundInputs,
    model: &'a ClientModel,
    h_cur: Matrix,
    h0: Option<Matrix>,
    layer: usize,
    pending_plus: Option<Matrix>,
    cache: Vec<CacheEntry>,
    /// Composed H_m[l+1] per layer, kept for staleness-freshness checks.
    h_layers: Vec<Matrix>,
}

impl<'a> JointForward<'a> {
    pub fn new(ctx: &'a ClientCtx, inputs: &'a RoundInputs, model: &'a ClientModel) -> Self {
        let (h_cur, h0) = initial_state(ctx, inputs, model);
        JointForward {
            ctx,
            inputs,
            model,
            h_cur,
            h0,
            layer: 0,
            pending_plus: None,
            cache: Vec::new(),
            h_layers: Vec::new(),
        }
    }

    pub fn step(&mut self) -> ForwardStep {
        let l_total = self.ctx.plan.num_layers();
        while self.layer < l_total {
            let l = self.layer;
            let slice = h0_slice_for_layer(self.h0.as_ref(), self.inputs, l);
            let (h_plus, _tape) = layer_forward(
                &self.h_cur,
                &self.inputs.bips[l],
                &self.model.layers[l],
                self.ctx.kind,
                l,
                slice.as_ref().map(|(m, _)| m),
            );
            if self.ctx.plan.is_agg(l) {
                self.pending_plus = Some(h_plus.clone());
                return ForwardStep::Upload { layer: l, h_plus };
            }
            self.h_layers.push(h_plus.clone());
            self.h_cur = h_plus;
            self.layer += 1;
        }
        ForwardStep::Finished
    }

    /// Install the server's aggregated value for the layer just uploaded.
    pub fn accept_agg(&mut self, layer: usize, h_agg: Matrix) {
        debug_assert_eq!(layer, self.layer);
        let h_plus = self.pending_plus.take().expect("no pending upload");
        let h_minus = extract(&h_agg, &h_plus, &self.ctx.agg, self.ctx.m_total, self.ctx.id);
        self.cache.push(CacheEntry { layer, h_minus, h_agg: h_agg.clone(), h_plus_ref: h_plus });
        self.h_layers.push(h_agg.clone());
        self.h_cur = h_agg;
        self.layer += 1;
    }

    /// Final H_m[L] plus the populated cache and the per-layer trace.
    pub fn finish(self) -> (Matrix, StaleCache, Vec<Matrix>) {
        debug_assert_eq!(self.layer, self.ctx.plan.num_layers());
        (
            self.h_cur,
            StaleCache { entries: self.cache, cotangent: None },
            self.h_layers,
        )
    }
}

/// Loss and last-layer cotangent for the label holder during joint inference
/// (single-holder mode broadcasts this cotangent).
pub fn holder_loss_and_cotangent(
    inputs: &RoundInputs,
    model: &ClientModel,
    h_last: &Matrix,
) -> (f64, Matrix) {
    let w_cls = model.classifier.as_ref().expect("label holder has a classifier");
    let logits = classify(h_last, w_cls);
    let (loss, dlogits) = loss_and_grad(&logits, &inputs.batch_labels);
    let cotangent = matmul(&dlogits, &w_cls.transpose());
    (loss, cotangent)
}

/// Local stand-in for server aggregation during stale updates.
///
/// Algebraically this is local_compose(h_minus, h_plus_now); it is arranged
/// so the q = 0 recombination is bit-exact: for M = 1 h_minus is exactly zero
/// and the literal compose is an identity, for M > 1 the equivalent form
/// h_agg + (h_plus_now - h_plus_ref)/M cancels exactly when the weights have
/// not moved yet.
pub fn recombine_stale(entry: &CacheEntry, h_plus_now: &Matrix, ctx: &ClientCtx) -> Matrix {
    match &ctx.agg {
        AggKind::Average if ctx.m_total > 1 => {
            let mf = ctx.m_total as f64;
            let diff = sub(h_plus_now, &entry.h_plus_ref);
            add(&entry.h_agg, &diff.map(|v| v / mf))
        }
        _ => local_compose(&entry.h_minus, h_plus_now, &ctx.agg, ctx.m_total, ctx.id),
    }
}

/// Purely local forward pass with the stale cache standing in for the server.
pub struct LocalForward {
    pub tape: Vec<TapeEntry>,
    /// Positions of each layer's h0 slice inside S[0] (GCNII only).
    pub h0_positions: Vec<Option<Vec<usize>>>,
    pub h0: Option<Matrix>,
    /// Composed H_m[l+1] per layer.
    pub h_layers: Vec<Matrix>,
    pub h_last: Matrix,
}

pub fn local_forward(
    ctx: &ClientCtx,
    inputs: &RoundInputs,
    model: &ClientModel,
    cache: &StaleCache,
) -> LocalForward {
    let (mut h_cur, h0) = initial_state(ctx, inputs, model);
    let l_total = ctx.plan.num_layers();
    let mut tape = Vec::with_capacity(l_total);
    let mut h0_positions = Vec::with_capacity(l_total);
    let mut h_layers = Vec::with_capacity(l_total);
    for l in 0..l_total {
        let slice = h0_slice_for_layer(h0.as_ref(), inputs, l);
        let (h_plus, entry) = layer_forward(
            &h_cur,
            &inputs.bips[l],
            &model.layers[l],
            ctx.kind,
            l,
            slice.as_ref().map(|(m, _)| m),
        );
        tape.push(entry);
        h0_positions.push(slice.map(|(_, p)| p));
        h_cur = if ctx.plan.is_agg(l) {
            recombine_stale(cache.entry(l), &h_plus, ctx)
        } else {
            h_plus
        };
        h_layers.push(h_cur.clone());
    }
    LocalForward { tape, h0_positions, h0, h_layers, h_last: h_cur }
}

/// The local objective value for the current parameters: cross-entropy for
/// label owners, the cotangent pairing <G, H_m[L]> otherwise. Stale blocks
/// and the cotangent are constants.
pub fn local_objective(
    ctx: &ClientCtx,
    inputs: &RoundInputs,
    model: &ClientModel,
    cache: &StaleCache,
) -> f64 {
    let fwd = local_forward(ctx, inputs, model, cache);
    if ctx.owns_labels() {
        let logits = classify(&fwd.h_last, model.classifier.as_ref().unwrap());
        loss_and_grad(&logits, &inputs.batch_labels).0
    } else {
        let g = cache.cotangent.as_ref().expect("non-holder needs the broadcast cotangent");
        g.data().iter().zip(fwd.h_last.data()).map(|(a, b)| a * b).sum()
    }
}

/// Gradient of the composed layer output with respect to this client's own
/// contribution: Average -> grad/M, Concat -> own block.
fn route_to_self(grad: &Matrix, ctx: &ClientCtx) -> Matrix {
    match &ctx.agg {
        AggKind::Average => {
            let mf = ctx.m_total as f64;
            grad.map(|v| v / mf)
        }
        AggKind::Concat { widths } => {
            let start: usize = widths[..ctx.id].iter().sum();
            let w = widths[ctx.id];
            let mut out = Matrix::zeros(grad.rows(), w);
            for i in 0..grad.rows() {
                for j in 0..w {
                    out.set(i, j, grad.get(i, start + j));
                }
            }
            out
        }
    }
}

/// Weight-space gradients of the local objective, in model layout.
pub struct LocalGradients {
    pub layers: Vec<Matrix>,
    pub classifier: Option<Matrix>,
    pub input_proj: Option<Matrix>,
}

/// Local forward plus the exact gradients of the local objective with respect
/// to this client's own weights; stale blocks and the broadcast cotangent are
/// constants.
pub fn local_gradients(
    ctx: &ClientCtx,
    inputs: &RoundInputs,
    model: &ClientModel,
    cache: &StaleCache,
) -> (f64, LocalForward, LocalGradients) {
    let fwd = local_forward(ctx, inputs, model, cache);
    let l_total = ctx.plan.num_layers();

    let (loss, mut grad_h, grad_cls) = if ctx.owns_labels() {
        let w_cls = model.classifier.as_ref().unwrap();
        let logits = classify(&fwd.h_last, w_cls);
        let (loss, dlogits) = loss_and_grad(&logits, &inputs.batch_labels);
        let grad_cls = matmul(&fwd.h_last.transpose(), &dlogits);
        let grad_h = matmul(&dlogits, &w_cls.transpose());
        (loss, grad_h, Some(grad_cls))
    } else {
        let g = cache.cotangent.as_ref().expect("non-holder needs the broadcast cotangent");
        let loss = g.data().iter().zip(fwd.h_last.data()).map(|(a, b)| a * b).sum();
        (loss, g.clone(), None)
    };

    let mut grad_layers: Vec<Matrix> = Vec::with_capacity(l_total);
    let mut grad_h0: Option<Matrix> = fwd
        .h0
        .as_ref()
        .map(|h0| Matrix::zeros(h0.rows(), h0.cols()));

    for l in (0..l_total).rev() {
        let grad_plus = if ctx.plan.is_agg(l) { route_to_self(&grad_h, ctx) } else { grad_h };
        let grads = layer_backward(&grad_plus, &fwd.tape[l]);
        grad_layers.push(grads.w);
        if let (Some(gh0), Some(slice_grad), Some(pos)) =
            (grad_h0.as_mut(), grads.h0_slice, fwd.h0_positions[l].as_ref())
        {
            for (k, &p) in pos.iter().enumerate() {
                for j in 0..slice_grad.cols() {
                    gh0.set(p, j, gh0.get(p, j) + slice_grad.get(k, j));
                }
            }
        }
        grad_h = grads.h_in;
    }
    grad_layers.reverse();

    // For GCNII, layer 0's input is H0 itself.
    if let Some(gh0) = grad_h0.as_mut() {
        for (g, extra) in gh0.data_mut().iter_mut().zip(grad_h.data()) {
            *g += extra;
        }
    }
    let grad_proj = grad_h0.map(|gh0| matmul(&inputs.x0.transpose(), &gh0));

    (loss, fwd, LocalGradients { layers: grad_layers, classifier: grad_cls, input_proj: grad_proj })
}

/// One stale local update: [`local_gradients`] followed by a plain gradient
/// step W <- W - eta * grad. Returns the recorded loss and the forward trace.
pub fn local_update(
    ctx: &ClientCtx,
    inputs: &RoundInputs,
    model: &mut ClientModel,
    cache: &StaleCache,
    eta: f64,
) -> (f64, LocalForward) {
    let (loss, fwd, grads) = local_gradients(ctx, inputs, model, cache);
    for (w, g) in model.layers.iter_mut().zip(&grads.layers) {
        *w = sub(w, &scale(g, eta));
    }
    if let Some(g) = &grads.classifier {
        let w = model.classifier.as_mut().unwrap();
        *w = sub(w, &scale(g, eta));
    }
    if let Some(g) = &grads.input_proj {
        let w = model.input_proj.as_mut().unwrap();
        *w = sub(w, &scale(g, eta));
    }
    (loss, fwd)
}
