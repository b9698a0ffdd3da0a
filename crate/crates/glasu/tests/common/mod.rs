//! Shared fixtures and the independent monolithic reference trainer used by
//! the integration and acceptance suites.

#![allow(dead_code)]

use std::collections::BTreeSet;

use glasu::federation::{
    aggregate, build_round_inputs, AggKind, ClientCtx, ForwardStep, JointForward, LabelMode,
    RoundInputs, StaleCache,
};
use glasu::graph::{Dataset, Graph, PartitionedDataset};
use glasu::linalg::{matmul, Matrix, RngState};
use glasu::model::ClientModel;

/// Five-node fixture for gradient checks: connected graph, 4 features,
/// 3 classes, every node in the training mask.
pub fn five_node_dataset(seed: u64) -> Dataset {
    let graph =
        Graph::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (1, 4)]).unwrap();
    let mut rng = RngState::new(seed, 0).child_named("five-node-features");
    let features =
        Matrix::from_vec(5, 4, (0..20).map(|_| rng.next_f64() * 2.0 - 1.0).collect());
    Dataset {
        graph,
        features,
        labels: vec![0, 1, 2, 0, 1],
        num_classes: 3,
        train_mask: vec![0, 1, 2, 3, 4],
        val_mask: vec![],
        test_mask: vec![],
    }
}

/// Runs one joint inference across all clients with a manual aggregation
/// loop (the test-side counterpart of the engine driver).
pub fn run_joint_inference(
    ctxs: &[ClientCtx],
    inputs: &[RoundInputs],
    models: &[ClientModel],
) -> Vec<(Matrix, StaleCache, Vec<Matrix>)> {
    let agg = &ctxs[0].agg;
    let mut cursors: Vec<JointForward> = ctxs
        .iter()
        .zip(inputs)
        .zip(models)
        .map(|((ctx, inp), model)| JointForward::new(ctx, inp, model))
        .collect();
    loop {
        let mut uploads = Vec::new();
        let mut layer = None;
        for c in cursors.iter_mut() {
            match c.step() {
                ForwardStep::Upload { layer: l, h_plus } => {
                    layer = Some(l);
                    uploads.push(h_plus);
                }
                ForwardStep::Finished => {}
            }
        }
        match layer {
            Some(l) => {
                assert_eq!(uploads.len(), ctxs.len(), "all clients must reach the barrier");
                let h = aggregate(&uploads, agg);
                for c in cursors.iter_mut() {
                    c.accept_agg(l, h.clone());
                }
            }
            None => break,
        }
    }
    cursors.into_iter().map(|c| c.finish()).collect()
}

/// Builds per-client round inputs from a schedule.
pub fn inputs_from_schedule(
    ctxs: &[ClientCtx],
    sets: Vec<Vec<Vec<u32>>>,
) -> Vec<RoundInputs> {
    ctxs.iter()
        .zip(sets)
        .map(|(ctx, s)| build_round_inputs(ctx, s).unwrap())
        .collect()
}

// ---------------------------------------------------------------------------
// Monolithic reference trainer (GCN, full aggregation, single party).
//
// Independent of the federation/sampling/model modules: it rebuilds the
// normalized adjacency densely, samples with its own loops, and runs plain
// forward/backward passes, mirroring only the RNG stream addressing so the
// trajectories are comparable bit for bit.
// ---------------------------------------------------------------------------

pub struct MonolithicOutput {
    pub losses: Vec<f64>,
    pub layers: Vec<Matrix>,
    pub classifier: Matrix,
}

struct DenseAdj {
    nbrs: Vec<Vec<u32>>,
    values: Vec<Vec<f64>>,
    row_sums: Vec<f64>,
}

fn dense_normalized(ds: &Dataset) -> DenseAdj {
    let n = ds.graph.num_nodes();
    let mut sets: Vec<BTreeSet<u32>> = (0..n).map(|i| BTreeSet::from([i as u32])).collect();
    for (u, v) in ds.graph.edges() {
        sets[u as usize].insert(v);
        sets[v as usize].insert(u);
    }
    let deg: Vec<f64> = sets.iter().map(|s| s.len() as f64).collect();
    let mut nbrs = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut row_sums = Vec::with_capacity(n);
    for i in 0..n {
        let ids: Vec<u32> = sets[i].iter().copied().collect();
        let vals: Vec<f64> =
            ids.iter().map(|&j| 1.0 / (deg[i] * deg[j as usize]).sqrt()).collect();
        let mut sum = 0.0;
        for &v in &vals {
            sum += v;
        }
        nbrs.push(ids);
        values.push(vals);
        row_sums.push(sum);
    }
    DenseAdj { nbrs, values, row_sums }
}

fn mono_bipartite(adj: &DenseAdj, s_out: &[u32], s_in: &[u32]) -> Matrix {
    let mut out = Matrix::zeros(s_out.len(), s_in.len());
    for (k, &i) in s_out.iter().enumerate() {
        let ids = &adj.nbrs[i as usize];
        let vals = &adj.values[i as usize];
        let mut retained: Vec<(usize, f64)> = Vec::new();
        let mut retained_sum = 0.0;
        let (mut a, mut b) = (0usize, 0usize);
        while a < ids.len() && b < s_in.len() {
            match ids[a].cmp(&s_in[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    retained.push((b, vals[a]));
                    retained_sum += vals[a];
                    a += 1;
                    b += 1;
                }
            }
        }
        let only_self = retained.len() == 1 && s_in[retained[0].0] == i;
        let factor = if only_self { 1.0 } else { adj.row_sums[i as usize] / retained_sum };
        for (j, v) in retained {
            out.set(k, j, v * factor);
        }
    }
    out
}

fn mono_sample_below(adj: &DenseAdj, upper: &[u32], fanout: usize, rng: &mut RngState) -> Vec<u32> {
    let mut out = BTreeSet::new();
    for &i in upper {
        out.insert(i);
        let nbrs: Vec<u32> =
            adj.nbrs[i as usize].iter().copied().filter(|&j| j != i).collect();
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

fn relu(m: &Matrix) -> Matrix {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Plain centralized GCN mini-batch SGD with the protocol's stream addressing
/// and schedule shape (full-depth aggregation: the set at layer L-1 copies the
/// batch, sampling runs below it).
#[allow(clippy::too_many_arguments)]
pub fn monolithic_train_gcn(
    ds: &Dataset,
    layers: usize,
    hidden: usize,
    batch_size: usize,
    fanout: usize,
    rounds: usize,
    local_iters: usize,
    eta: f64,
    seed: u64,
) -> MonolithicOutput {
    assert!(layers >= 2, "reference trainer mirrors the K=L>=2 schedule shape");
    let adj = dense_normalized(ds);
    let root = RngState::new(seed, 0);

    // Same draw order as the engine: input dims chain d -> hidden -> ... -> C.
    let mut init = root.child_named("init").child(0);
    let mut ws = Vec::with_capacity(layers);
    let mut in_w = ds.feature_dim();
    for _ in 0..layers {
        ws.push(glasu::linalg::glorot_init(in_w, hidden, &mut init));
        in_w = hidden;
    }
    let mut w_cls = glasu::linalg::glorot_init(hidden, ds.num_classes, &mut init);

    let mut losses = Vec::new();
    for t in 0..rounds {
        let mut batch_rng = root.child_named("batch").child(t as u64);
        let picks =
            batch_rng.sample_distinct(ds.train_mask.len(), batch_size.min(ds.train_mask.len()));
        let batch: Vec<u32> = picks.into_iter().map(|i| ds.train_mask[i]).collect();

        let mut sets: Vec<Vec<u32>> = vec![Vec::new(); layers + 1];
        sets[layers] = batch.clone();
        sets[layers - 1] = batch.clone();
        let mut nbr_rng = root.child_named("neighbors").child(0).child(t as u64);
        for l in (0..layers - 1).rev() {
            sets[l] = mono_sample_below(&adj, &sets[l + 1], fanout, &mut nbr_rng);
        }
        let bips: Vec<Matrix> =
            (0..layers).map(|l| mono_bipartite(&adj, &sets[l + 1], &sets[l])).collect();
        let idx: Vec<usize> = sets[0].iter().map(|&i| i as usize).collect();
        let x0 = glasu::linalg::gather_rows(&ds.features, &idx);
        let labels: Vec<u32> = batch.iter().map(|&i| ds.labels[i as usize]).collect();

        for _q in 0..local_iters {
            // Forward with tape.
            let mut h = x0.clone();
            let mut pre_mix = Vec::with_capacity(layers);
            let mut zs = Vec::with_capacity(layers);
            let mut hs = Vec::with_capacity(layers);
            for l in 0..layers {
                let ah = matmul(&bips[l], &h);
                let z = matmul(&ah, &ws[l]);
                h = relu(&z);
                pre_mix.push(ah);
                zs.push(z);
                hs.push(h.clone());
            }
            let logits = matmul(&h, &w_cls);

            // Softmax cross-entropy, same stabilized form.
            let (n, c) = (logits.rows(), logits.cols());
            let mut loss = 0.0;
            let mut dlogits = Matrix::zeros(n, c);
            for (i, &label) in labels.iter().enumerate() {
                let row = logits.row(i);
                let y = label as usize;
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for &v in row {
                    denom += (v - max).exp();
                }
                loss += denom.ln() - (row[y] - max);
                let inv_n = 1.0 / n as f64;
                for (j, &v) in row.iter().enumerate() {
                    let p = (v - max).exp() / denom;
                    dlogits.set(i, j, (p - if j == y { 1.0 } else { 0.0 }) * inv_n);
                }
            }
            loss /= n as f64;
            losses.push(loss);

            let grad_cls = matmul(&h.transpose(), &dlogits);
            let mut grad_h = matmul(&dlogits, &w_cls.transpose());
            let mut grad_ws: Vec<Matrix> = Vec::with_capacity(layers);
            for l in (0..layers).rev() {
                let mut dz = grad_h.clone();
                for (g, z) in dz.data_mut().iter_mut().zip(zs[l].data()) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
                grad_ws.push(matmul(&pre_mix[l].transpose(), &dz));
                grad_h = matmul(&bips[l].transpose(), &matmul(&dz, &ws[l].transpose()));
            }
            grad_ws.reverse();

            for (w, g) in ws.iter_mut().zip(&grad_ws) {
                *w = glasu::linalg::sub(w, &glasu::linalg::scale(g, eta));
            }
            w_cls = glasu::linalg::sub(&w_cls, &glasu::linalg::scale(&grad_cls, eta));
        }
    }
    MonolithicOutput { losses, layers: ws, classifier: w_cls }
}

/// Single-shard partition wrapper around a dataset.
pub fn as_single_party(ds: &Dataset) -> PartitionedDataset {
    glasu::graph::partition_dataset(ds, 1, 1.0, 0).unwrap()
}

pub fn all_clients() -> LabelMode {
    LabelMode::AllClients
}

pub fn average() -> AggKind {
    AggKind::Average
}
