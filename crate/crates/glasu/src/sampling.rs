//! Layer-wise mini-batch neighbor sampling with cross-client index-set
//! synchronization at interior aggregation layers.
//!
//! Set-sharing structure for a plan with aggregation layers l_1 < ... < l_K:
//!
//! * S[L] is the broadcast batch; for K >= 2 the sets at layers [l_K, L) copy
//!   the batch (no sampling above the top aggregation layer);
//! * walking down, every client samples fanout neighbors per node from its
//!   own edge set, always including the node itself;
//! * at each interior aggregation layer (l_1 < l < l_K) the server unions the
//!   clients' sets and broadcasts the result; the sets at l_1 and strictly
//!   between boundaries stay per-client.
//!
//! Aggregation at layer l consumes the out-row set S[l+1]; requiring the
//! aggregation layers to be contiguous makes every consumed boundary one of
//! the shared sets above, with exactly 1 + (K-2)(M+1) sampling messages.

use std::collections::BTreeSet;

use crate::error::{GlasuError, Result};
use crate::graph::NormalizedAdj;
use crate::linalg::RngState;

/// Which of the L layers aggregate at the server.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    num_layers: usize,
    agg_layers: Vec<usize>,
}

impl LayerPlan {
    pub fn new(num_layers: usize, agg_layers: Vec<usize>) -> Result<Self> {
        if num_layers == 0 {
            return Err(GlasuError::Config("layer count must be >= 1".into()));
        }
        if agg_layers.is_empty() {
            return Err(GlasuError::Config("aggregation layer set must be non-empty".into()));
        }
        if !agg_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(GlasuError::Config("aggregation layers must be strictly increasing".into()));
        }
        if *agg_layers.last().unwrap() >= num_layers {
            return Err(GlasuError::Config(format!(
                "aggregation layer {} out of range for {num_layers} layers",
                agg_layers.last().unwrap()
            )));
        }
        if !agg_layers.windows(2).all(|w| w[1] == w[0] + 1) {
            return Err(GlasuError::Config(
                "aggregation layers must be contiguous; non-adjacent aggregation layers leave \
                 some aggregation input sets unsynchronized under the sampling protocol"
                    .into(),
            ));
        }
        if agg_layers.len() == 1 && agg_layers[0] != num_layers - 1 {
            return Err(GlasuError::Config(format!(
                "a single aggregation layer must be the last layer ({})",
                num_layers - 1
            )));
        }
        Ok(LayerPlan { num_layers, agg_layers })
    }

    /// The contiguous suffix plan {L-K, ..., L-1}.
    pub fn suffix(num_layers: usize, k: usize) -> Result<Self> {
        if k == 0 || k > num_layers {
            return Err(GlasuError::Config(format!(
                "aggregation count {k} not in 1..={num_layers}"
            )));
        }
        LayerPlan::new(num_layers, (num_layers - k..num_layers).collect())
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_agg_layers(&self) -> usize {
        self.agg_layers.len()
    }

    pub fn agg_layers(&self) -> &[usize] {
        &self.agg_layers
    }

    pub fn lowest_agg(&self) -> usize {
        self.agg_layers[0]
    }

    pub fn top_agg(&self) -> usize {
        *self.agg_layers.last().unwrap()
    }

    pub fn is_agg(&self, layer: usize) -> bool {
        self.agg_layers.binary_search(&layer).is_ok()
    }

    /// Interior aggregation layers get an index-set union during sampling.
    pub fn is_interior_agg(&self, layer: usize) -> bool {
        self.is_agg(layer) && layer != self.lowest_agg() && layer != self.top_agg()
    }

    /// Single-holder mode needs aggregation at the last layer so every client
    /// holds the same H[L] the cotangent refers to.
    pub fn validate_single_holder(&self) -> Result<()> {
        if self.top_agg() != self.num_layers - 1 {
            return Err(GlasuError::Config(
                "single-holder mode requires aggregation at the last layer".into(),
            ));
        }
        Ok(())
    }
}

/// Mini-batch size and per-node neighbor fanout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub fanout: usize,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(GlasuError::Config("batch size must be >= 1".into()));
        }
        if self.fanout < 1 {
            return Err(GlasuError::Config("fanout must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-client, per-layer node index sets for one round, sorted ascending.
/// sets[m][l] for l in 0..=L; sets[m][L] is the shared batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSchedule {
    pub sets: Vec<Vec<Vec<u32>>>,
}

impl SampleSchedule {
    pub fn batch(&self) -> &[u32] {
        let l = self.sets[0].len() - 1;
        &self.sets[0][l]
    }

    pub fn client(&self, m: usize) -> &[Vec<u32>] {
        &self.sets[m]
    }
}

/// Sampling messages per round: one batch broadcast plus, for each of the
/// K-2 interior boundaries, M uploads and one broadcast.
pub fn count_sync_messages(plan: &LayerPlan, m_clients: usize) -> usize {
    1 + plan.num_agg_layers().saturating_sub(2) * (m_clients + 1)
}

/// Draws the shared batch for round `t`: min(batch_size, |mask|) training
/// nodes without replacement. The stream depends only on (seed, t), so the
/// batch is identical whether the server draws it or the label holder does.
pub fn draw_batch(
    train_mask: &[u32],
    batch_size: usize,
    root: &RngState,
    round: u64,
) -> Result<Vec<u32>> {
    if train_mask.is_empty() {
        return Err(GlasuError::Config("training mask is empty".into()));
    }
    let mut rng = root.child_named("batch").child(round);
    let picks = rng.sample_distinct(train_mask.len(), batch_size.min(train_mask.len()));
    Ok(picks.into_iter().map(|i| train_mask[i]).collect())
}

/// Per-client neighbor stream for round `t`.
pub fn client_stream(root: &RngState, client: usize, round: u64) -> RngState {
    root.child_named("neighbors").child(client as u64).child(round)
}

/// Samples the in-set one layer below `upper`: for each node, itself plus up
/// to `fanout` of its neighbors in this client's graph, drawn without
/// replacement; the union over nodes, sorted ascending.
pub fn sample_layer_below(
    adj: &NormalizedAdj,
    upper: &[u32],
    fanout: usize,
    rng: &mut RngState,
) -> Vec<u32> {
    let mut out = BTreeSet::new();
    for &i in upper {
        out.insert(i);
        let nbrs: Vec<u32> = adj.neighbors_excl_self(i as usize).collect();
        if nbrs.len() <= fanout {
            out.extend(nbrs);
        } else {
            for k in rng.sample_distinct(nbrs.len(), fanout) {
                out.insert(nbrs[k]);
            }
        }
    }
    out.into_iter().collect()
}

/// Full closed neighborhood, used by evaluation (fanout = infinity).
pub fn full_neighborhood_below(adj: &NormalizedAdj, upper: &[u32]) -> Vec<u32> {
    let mut out = BTreeSet::new();
    for &i in upper {
        out.insert(i);
        out.extend(adj.neighbors_excl_self(i as usize));
    }
    out.into_iter().collect()
}

pub fn union_sorted<'a>(sets: impl IntoIterator<Item = &'a [u32]>) -> Vec<u32> {
    let mut out = BTreeSet::new();
    for s in sets {
        out.extend(s.iter().copied());
    }
    out.into_iter().collect()
}

/// What a sampling cursor stopped on.
pub enum SampleStep {
    /// The set at this interior aggregation layer must be unioned across
    /// clients before sampling can continue.
    NeedUnion { layer: usize },
    Done,
}

/// One client's half of the sampling procedure, runnable between barriers.
pub struct SampleCursor<'a> {
    adj: &'a NormalizedAdj,
    plan: &'a LayerPlan,
    fanout: Option<usize>,
    rng: RngState,
    sets: Vec<Vec<u32>>,
    /// Next layer to sample, walking down; `None` when finished.
    next_layer: Option<usize>,
}

impl<'a> SampleCursor<'a> {
    /// `fanout = None` means full neighborhoods (evaluation).
    pub fn new(
        adj: &'a NormalizedAdj,
        plan: &'a LayerPlan,
        fanout: Option<usize>,
        rng: RngState,
        batch: Vec<u32>,
    ) -> Self {
        let l_total = plan.num_layers();
        let mut sets = vec![Vec::new(); l_total + 1];
        sets[l_total] = batch.clone();
        let next_layer;
        if plan.num_agg_layers() >= 2 {
            // No sampling above the top aggregation layer: those sets copy
            // the batch, keeping the consumed boundary S[l_K + 1] shared.
            for set in sets.iter_mut().take(l_total).skip(plan.top_agg()) {
                *set = batch.clone();
            }
            next_layer = plan.top_agg().checked_sub(1);
        } else {
            next_layer = Some(l_total - 1);
        }
        SampleCursor { adj, plan, fanout, rng, sets, next_layer }
    }

    /// Samples downward until an interior union barrier or layer 0.
    pub fn step(&mut self) -> SampleStep {
        while let Some(l) = self.next_layer {
            let upper = &self.sets[l + 1];
            self.sets[l] = match self.fanout {
                Some(f) => sample_layer_below(self.adj, upper, f, &mut self.rng),
                None => full_neighborhood_below(self.adj, upper),
            };
            self.next_layer = l.checked_sub(1);
            if self.plan.is_interior_agg(l) {
                return SampleStep::NeedUnion { layer: l };
            }
        }
        SampleStep::Done
    }

    pub fn set_at(&self, layer: usize) -> &[u32] {
        &self.sets[layer]
    }

    /// Install the server's union for an interior aggregation layer.
    pub fn accept_union(&mut self, layer: usize, set: Vec<u32>) {
        debug_assert!(self.plan.is_interior_agg(layer));
        self.sets[layer] = set;
    }

    pub fn finish(self) -> Vec<Vec<u32>> {
        self.sets
    }
}

/// Lockstep schedule construction for all clients of one round; the threaded
/// transports drive the same cursors message by message.
pub fn sample_round(
    adjs: &[&NormalizedAdj],
    train_mask: &[u32],
    plan: &LayerPlan,
    cfg: &SamplerConfig,
    root: &RngState,
    round: u64,
) -> Result<SampleSchedule> {
    cfg.validate()?;
    let batch = draw_batch(train_mask, cfg.batch_size, root, round)?;
    let mut cursors: Vec<SampleCursor> = adjs
        .iter()
        .enumerate()
        .map(|(m, adj)| {
            SampleCursor::new(adj, plan, Some(cfg.fanout), client_stream(root, m, round), batch.clone())
        })
        .collect();
    loop {
        let mut barrier: Option<usize> = None;
        for c in cursors.iter_mut() {
            match c.step() {
                SampleStep::NeedUnion { layer } => {
                    debug_assert!(barrier.is_none_or(|b| b == layer));
                    barrier = Some(layer);
                }
                SampleStep::Done => {}
            }
        }
        match barrier {
            Some(layer) => {
                let union = union_sorted(cursors.iter().map(|c| c.set_at(layer)));
                for c in cursors.iter_mut() {
                    c.accept_union(layer, union.clone());
                }
            }
            None => break,
        }
    }
    Ok(SampleSchedule { sets: cursors.into_iter().map(|c| c.finish()).collect() })
}
