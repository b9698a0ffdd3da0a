//! Single-process protocol driver.
//!
//! Runs the server role and all client cursors in lockstep on one thread
//! (client steps fan out over rayon when the `parallel` feature is on). Every
//! cross-party value still passes through the wire codec, so byte accounting
//! and numeric results are identical to the TCP transport.

use crate::error::{GlasuError, Result};
use crate::graph::{normalize_adjacency, PartitionedDataset};
use crate::linalg::{Matrix, RngState};
use crate::model::{classify, ClientModel, LayerKind};
use crate::sampling::{
    draw_batch, client_stream, union_sorted, LayerPlan, SampleCursor, SampleStep, SamplerConfig,
};
use crate::transport::{deserialize, serialize, CommLedger, Message};

use super::client::{
    build_round_inputs, holder_loss_and_cotangent, local_update, ClientCtx, ForwardStep,
    JointForward, RoundInputs,
};
use super::{aggregate, AggKind, LabelMode, LossRecord, RoundConfig, StaleCache, TrainHistory};

/// How the parties talk to each other.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transport {
    /// In-process lockstep bus (frames still go через the codec).
    InProcess,
    /// Real sockets on localhost; one long-lived connection per client.
    Tcp { port: u16 },
}

#[derive(Clone, Debug)]
pub struct TrainOpts {
    pub transport: Transport,
    /// Evaluate test accuracy after every k rounds.
    pub eval_every: Option<usize>,
    /// Evaluate train/test accuracy once at the end.
    pub final_eval: bool,
    /// Record the communication ledger (training-phase messages only).
    pub record_ledger: bool,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            transport: Transport::InProcess,
            eval_every: None,
            final_eval: false,
            record_ledger: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub models: Vec<ClientModel>,
    pub history: TrainHistory,
    pub final_train_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
}

/// Map a closure over clients, in parallel when the feature allows it. The
/// per-client work is independent, so scheduling cannot change results.
pub fn map_clients_mut<A: Send, B: Send>(
    xs: &mut [A],
    parallel: bool,
    f: impl Fn(usize, &mut A) -> B + Sync,
) -> Vec<B> {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return xs.par_iter_mut().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let _ = parallel;
    xs.iter_mut().enumerate().map(|(i, x)| f(i, x)).collect()
}

fn pass(msg: &Message) -> Message {
    deserialize(&serialize(msg)).expect("codec roundtrip on a just-built message")
}

/// Builds per-client contexts and freshly initialized models. Weight streams
/// are (seed, "init", client), so initialization does not depend on the
/// transport or on scheduling.
pub fn build_clients(
    part: &PartitionedDataset,
    plan: &LayerPlan,
    kind: LayerKind,
    agg: &AggKind,
    hidden: usize,
    label_mode: LabelMode,
    seed: u64,
) -> Result<(Vec<ClientCtx>, Vec<ClientModel>)> {
    let m_total = part.num_clients();
    if let AggKind::Concat { widths } = agg {
        if widths.len() != m_total {
            return Err(GlasuError::Config("concat widths must match client count".into()));
        }
    }
    let root = RngState::new(seed, 0);
    let mut ctxs = Vec::with_capacity(m_total);
    let mut models = Vec::with_capacity(m_total);
    for (m, shard) in part.shards.iter().enumerate() {
        let ctx = ClientCtx {
            id: m,
            m_total,
            adj: normalize_adjacency(&shard.graph),
            features: shard.features.clone(),
            labels: part.labels.clone(),
            num_classes: part.num_classes,
            plan: plan.clone(),
            kind,
            agg: agg.clone(),
            hidden,
            label_mode,
        };
        ctx.validate()?;
        let mut rng = root.child_named("init").child(m as u64);
        let model = ClientModel::init(
            kind,
            &ctx.layer_dims(),
            ctx.input_proj_dims(),
            ctx.classifier_dims(),
            &mut rng,
        );
        ctxs.push(ctx);
        models.push(model);
    }
    Ok((ctxs, models))
}

/// Builds one round's schedule for all clients, recording sampling messages.
fn lockstep_schedule(
    ctxs: &[ClientCtx],
    train_mask: &[u32],
    sampler: &SamplerConfig,
    root: &RngState,
    round: u64,
    label_mode: LabelMode,
    ledger: &mut CommLedger,
) -> Result<Vec<Vec<Vec<u32>>>> {
    let m_total = ctxs.len();
    let plan = &ctxs[0].plan;
    // In single-holder mode client 0 draws the batch and hands it to the
    // server; the stream only depends on (seed, round), so the draw itself is
    // mode-independent. The extra leg shows up in byte totals only.
    let batch = draw_batch(train_mask, sampler.batch_size, root, round)?;
    let msg = Message::SampleBroadcast(batch);
    if label_mode == LabelMode::SingleHolder && m_total > 1 {
        ledger.record_relay_leg(&msg);
    }
    ledger.record_broadcast(&msg, m_total);
    let batch = match pass(&msg) {
        Message::SampleBroadcast(b) => b,
        _ => unreachable!(),
    };

    let mut cursors: Vec<SampleCursor> = ctxs
        .iter()
        .map(|ctx| {
            SampleCursor::new(
                &ctx.adj,
                plan,
                Some(sampler.fanout),
                client_stream(root, ctx.id, round),
                batch.clone(),
            )
        })
        .collect();

    loop {
        let steps = map_clients_mut(&mut cursors, true, |_, c| match c.step() {
            SampleStep::NeedUnion { layer } => Some(layer),
            SampleStep::Done => None,
        });
        let Some(layer) = steps[0] else { break };
        if steps.iter().any(|s| *s != Some(layer)) {
            return Err(GlasuError::Protocol("clients disagree on union barrier layer".into()));
        }
        let mut uploaded: Vec<Vec<u32>> = Vec::with_capacity(m_total);
        for c in cursors.iter() {
            let msg = Message::IndexUpload { layer: layer as u8, set: c.set_at(layer).to_vec() };
            ledger.record_upload(&msg);
            match pass(&msg) {
                Message::IndexUpload { set, .. } => uploaded.push(set),
                _ => unreachable!(),
            }
        }
        let union = union_sorted(uploaded.iter().map(|s| s.as_slice()));
        let msg = Message::IndexUnionBroadcast { layer: layer as u8, set: union };
        ledger.record_broadcast(&msg, m_total);
        let union = match pass(&msg) {
            Message::IndexUnionBroadcast { set, .. } => set,
            _ => unreachable!(),
        };
        for c in cursors.iter_mut() {
            c.accept_union(layer, union.clone());
        }
    }
    Ok(cursors.into_iter().map(|c| c.finish()).collect())
}

/// Runs JointInference across all clients, recording inference messages.
/// Returns per-client (H_m[L], stale cache, per-layer trace).
pub(super) fn lockstep_joint_inference(
    ctxs: &[ClientCtx],
    inputs: &[RoundInputs],
    models: &[ClientModel],
    ledger: &mut CommLedger,
) -> Result<Vec<(Matrix, StaleCache, Vec<Matrix>)>> {
    let m_total = ctxs.len();
    let agg = &ctxs[0].agg;
    let mut cursors: Vec<JointForward> = ctxs
        .iter()
        .zip(inputs)
        .zip(models)
        .map(|((ctx, inp), model)| JointForward::new(ctx, inp, model))
        .collect();
    loop {
        let steps = map_clients_mut(&mut cursors, true, |_, c| match c.step() {
            ForwardStep::Upload { layer, h_plus } => Some((layer, h_plus)),
            ForwardStep::Finished => None,
        });
        if steps[0].is_none() {
            if steps.iter().any(|s| s.is_some()) {
                return Err(GlasuError::Protocol("clients disagree on aggregation barrier".into()));
            }
            break;
        }
        let layer = steps[0].as_ref().unwrap().0;
        let mut parts = Vec::with_capacity(m_total);
        for (m, s) in steps.into_iter().enumerate() {
            let Some((l, h_plus)) = s else {
                return Err(GlasuError::Protocol(format!("client {m} missed aggregation barrier")));
            };
            if l != layer {
                return Err(GlasuError::Protocol("clients disagree on aggregation layer".into()));
            }
            let msg = Message::ReprUpload { layer: l as u8, matrix: h_plus };
            ledger.record_upload(&msg);
            match pass(&msg) {
                Message::ReprUpload { matrix, .. } => parts.push(matrix),
                _ => unreachable!(),
            }
        }
        let rows = parts[0].rows();
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(GlasuError::Protocol(format!(
                "row misalignment across clients at aggregation layer {layer}"
            )));
        }
        let h_agg = aggregate(&parts, agg);
        let msg = Message::ReprBroadcast { layer: layer as u8, matrix: h_agg };
        ledger.record_broadcast(&msg, m_total);
        let h_agg = match pass(&msg) {
            Message::ReprBroadcast { matrix, .. } => matrix,
            _ => unreachable!(),
        };
        for c in cursors.iter_mut() {
            c.accept_agg(layer, h_agg.clone());
        }
    }
    Ok(cursors.into_iter().map(|c| c.finish()).collect())
}

/// Rounds after which a periodic evaluation happens.
pub(crate) fn eval_rounds(rounds: usize, eval_every: Option<usize>) -> Vec<usize> {
    match eval_every {
        Some(k) if k > 0 => (0..rounds).filter(|t| (t + 1) % k == 0).collect(),
        _ => Vec::new(),
    }
}

/// Number of rows whose argmax prediction matches the node's label.
pub(crate) fn argmax_correct(logits: &Matrix, chunk: &[u32], labels: &[u32]) -> usize {
    let mut correct = 0;
    for (row, &node) in chunk.iter().enumerate() {
        let pred = (0..logits.cols())
            .max_by(|&a, &b| logits.get(row, a).partial_cmp(&logits.get(row, b)).unwrap())
            .unwrap();
        if pred as u32 == labels[node as usize] {
            correct += 1;
        }
    }
    correct
}

/// Full-neighborhood joint inference over `nodes` in batch-size chunks;
/// predictions are the argmax of the label owners' mean logits (all-clients)
/// or of client 0's logits (single-holder).
pub fn evaluate(
    ctxs: &[ClientCtx],
    models: &[ClientModel],
    nodes: &[u32],
    chunk_size: usize,
) -> Result<f64> {
    if nodes.is_empty() {
        log::warn!("evaluate called with an empty node set; reporting accuracy 1.0");
        return Ok(1.0);
    }
    let plan = &ctxs[0].plan;
    let labels = &ctxs[0].labels;
    let label_mode = ctxs[0].label_mode;
    let mut correct = 0usize;
    let mut ledger = CommLedger::new(false);
    for chunk in nodes.chunks(chunk_size.max(1)) {
        let mut cursors: Vec<SampleCursor> = ctxs
            .iter()
            .map(|ctx| {
                SampleCursor::new(&ctx.adj, plan, None, RngState::new(0, 0), chunk.to_vec())
            })
            .collect();
        loop {
            let steps = map_clients_mut(&mut cursors, true, |_, c| match c.step() {
                SampleStep::NeedUnion { layer } => Some(layer),
                SampleStep::Done => None,
            });
            let Some(layer) = steps[0] else { break };
            let union = union_sorted(cursors.iter().map(|c| c.set_at(layer)));
            for c in cursors.iter_mut() {
                c.accept_union(layer, union.clone());
            }
        }
        let sets: Vec<Vec<Vec<u32>>> = cursors.into_iter().map(|c| c.finish()).collect();
        let inputs: Result<Vec<RoundInputs>> = ctxs
            .iter()
            .zip(sets)
            .map(|(ctx, s)| build_round_inputs(ctx, s))
            .collect();
        let inputs = inputs?;
        let outs = lockstep_joint_inference(ctxs, &inputs, models, &mut ledger)?;

        let logits = match label_mode {
            LabelMode::AllClients => {
                let per_client: Vec<Matrix> = outs
                    .iter()
                    .zip(models)
                    .map(|((h, _, _), model)| classify(h, model.classifier.as_ref().unwrap()))
                    .collect();
                aggregate(&per_client, &AggKind::Average)
            }
            LabelMode::SingleHolder => {
                classify(&outs[0].0, models[0].classifier.as_ref().unwrap())
            }
        };
        correct += argmax_correct(&logits, chunk, labels);
    }
    Ok(correct as f64 / nodes.len() as f64)
}

/// Runs the full training procedure on the in-process transport.
#[allow(clippy::too_many_arguments)]
pub fn train_lockstep(
    part: &PartitionedDataset,
    plan: &LayerPlan,
    kind: LayerKind,
    agg: &AggKind,
    hidden: usize,
    round_cfg: &RoundConfig,
    sampler: &SamplerConfig,
    seed: u64,
    opts: &TrainOpts,
) -> Result<TrainOutput> {
    round_cfg.validate()?;
    sampler.validate()?;
    if round_cfg.label_mode == LabelMode::SingleHolder {
        plan.validate_single_holder()?;
    }
    let (ctxs, mut models) =
        build_clients(part, plan, kind, agg, hidden, round_cfg.label_mode, seed)?;
    let m_total = ctxs.len();
    let root = RngState::new(seed, 0);
    let mut ledger = CommLedger::new(opts.record_ledger && m_total > 1);
    let mut losses: Vec<LossRecord> = Vec::new();
    let mut accuracy: Vec<(usize, f64)> = Vec::new();
    let periodic = eval_rounds(round_cfg.rounds, opts.eval_every);

    for t in 0..round_cfg.rounds {
        ledger.begin_round();
        let sets = lockstep_schedule(
            &ctxs,
            &part.train_mask,
            sampler,
            &root,
            t as u64,
            round_cfg.label_mode,
            &mut ledger,
        )?;
        let inputs: Result<Vec<RoundInputs>> = ctxs
            .iter()
            .zip(sets)
            .map(|(ctx, s)| build_round_inputs(ctx, s))
            .collect();
        let inputs = inputs?;

        let outs = lockstep_joint_inference(&ctxs, &inputs, &models, &mut ledger)?;
        let mut caches: Vec<StaleCache> = Vec::with_capacity(m_total);
        let mut h_lasts: Vec<Matrix> = Vec::with_capacity(m_total);
        for (h_last, cache, _) in outs {
            h_lasts.push(h_last);
            caches.push(cache);
        }

        if round_cfg.label_mode == LabelMode::SingleHolder {
            let (_loss0, cot) =
                holder_loss_and_cotangent(&inputs[0], &models[0], &h_lasts[0]);
            let msg = Message::CotangentBroadcast(cot);
            ledger.record_upload(&msg);
            ledger.record_broadcast(&msg, m_total);
            let cot = match pass(&msg) {
                Message::CotangentBroadcast(m) => m,
                _ => unreachable!(),
            };
            for cache in caches.iter_mut() {
                cache.cotangent = Some(cot.clone());
            }
        }

        for q in 0..round_cfg.local_iters {
            let round_losses = map_clients_mut(&mut models, true, |m, model| {
                local_update(&ctxs[m], &inputs[m], model, &caches[m], round_cfg.eta).0
            });
            for (m, loss) in round_losses.into_iter().enumerate() {
                if ctxs[m].owns_labels() {
                    losses.push(LossRecord { round: t, local_iter: q, client: m, loss });
                }
            }
        }

        if periodic.contains(&t) {
            let acc = evaluate(&ctxs, &models, &part.test_mask, sampler.batch_size)?;
            accuracy.push((t, acc));
        }
    }

    let (final_train_accuracy, final_test_accuracy) = if opts.final_eval {
        (
            Some(evaluate(&ctxs, &models, &part.train_mask, sampler.batch_size)?),
            Some(evaluate(&ctxs, &models, &part.test_mask, sampler.batch_size)?),
        )
    } else {
        (None, None)
    };

    Ok(TrainOutput {
        models,
        history: TrainHistory { losses, accuracy, ledger },
        final_train_accuracy,
        final_test_accuracy,
    })
}

/// Training entry point; dispatches on the configured transport.
#[allow(clippy::too_many_arguments)]
pub fn train(
    part: &PartitionedDataset,
    plan: &LayerPlan,
    kind: LayerKind,
    agg: &AggKind,
    hidden: usize,
    round_cfg: &RoundConfig,
    sampler: &SamplerConfig,
    seed: u64,
    opts: &TrainOpts,
) -> Result<TrainOutput> {
    match opts.transport {
        Transport::InProcess => {
            train_lockstep(part, plan, kind, agg, hidden, round_cfg, sampler, seed, opts)
        }
        Transport::Tcp { port } => super::remote::train_tcp(
            part, plan, kind, agg, hidden, round_cfg, sampler, seed, opts, port,
        ),
    }
}
