//! Threaded TCP driver: the same protocol phases as the lockstep engine, but
//! every barrier crosses a real socket. One worker thread per client, server
//! on the calling thread, deterministic because all reductions happen in
//! client-id order and all randomness is stream-addressed.

use std::net::{TcpListener, TcpStream};

use crate::error::{GlasuError, Result};
use crate::graph::PartitionedDataset;
use crate::linalg::RngState;
use crate::model::{classify, ClientModel, LayerKind};
use crate::sampling::{
    client_stream, draw_batch, union_sorted, LayerPlan, SampleCursor, SampleStep, SamplerConfig,
};
use crate::transport::tcp::FramedStream;
use crate::transport::{CommLedger, Control, Message};

use super::client::{
    build_round_inputs, holder_loss_and_cotangent, local_update, ClientCtx, ForwardStep,
    JointForward,
};
use super::engine::{build_clients, eval_rounds, TrainOpts, TrainOutput};
use super::{aggregate, AggKind, LabelMode, LossRecord, RoundConfig, TrainHistory};

/// Interior aggregation layers in the order sampling reaches them (top down).
fn interior_layers_desc(plan: &LayerPlan) -> Vec<usize> {
    plan.agg_layers()
        .iter()
        .copied()
        .filter(|&l| plan.is_interior_agg(l))
        .rev()
        .collect()
}

use super::engine::argmax_correct;

struct ServerState<'a> {
    conns: Vec<FramedStream>,
    ledger: CommLedger,
    plan: &'a LayerPlan,
    agg: &'a AggKind,
}

impl ServerState<'_> {
    fn broadcast(&mut self, msg: &Message, record: bool) -> Result<()> {
        if record {
            self.ledger.record_broadcast(msg, self.conns.len());
        }
        for c in self.conns.iter_mut() {
            c.send(msg)?;
        }
        Ok(())
    }

    fn recv_from(&mut self, m: usize) -> Result<Message> {
        self.conns[m].recv()
    }

    /// One union barrier: M uploads in client order, then the broadcast.
    fn union_barrier(&mut self, layer: usize, record: bool) -> Result<()> {
        let mut sets = Vec::with_capacity(self.conns.len());
        for m in 0..self.conns.len() {
            match self.recv_from(m)? {
                Message::IndexUpload { layer: l, set } if l as usize == layer => {
                    if record {
                        self.ledger
                            .record_upload(&Message::IndexUpload { layer: l, set: set.clone() });
                    }
                    sets.push(set);
                }
                other => {
                    return Err(GlasuError::Protocol(format!(
                        "expected index upload for layer {layer} from client {m}, got {other:?}"
                    )))
                }
            }
        }
        let union = union_sorted(sets.iter().map(|s| s.as_slice()));
        self.broadcast(&Message::IndexUnionBroadcast { layer: layer as u8, set: union }, record)
    }

    /// One aggregation barrier: M representation uploads, then the broadcast.
    fn agg_barrier(&mut self, layer: usize, record: bool) -> Result<()> {
        let mut parts = Vec::with_capacity(self.conns.len());
        for m in 0..self.conns.len() {
            match self.recv_from(m)? {
                Message::ReprUpload { layer: l, matrix } if l as usize == layer => {
                    if record {
                        self.ledger.record_upload(&Message::ReprUpload {
                            layer: l,
                            matrix: matrix.clone(),
                        });
                    }
                    parts.push(matrix);
                }
                other => {
                    return Err(GlasuError::Protocol(format!(
                        "expected repr upload for layer {layer} from client {m}, got {other:?}"
                    )))
                }
            }
        }
        let rows = parts[0].rows();
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(GlasuError::Protocol(format!(
                "row misalignment across clients at aggregation layer {layer}"
            )));
        }
        let h = aggregate(&parts, self.agg);
        self.broadcast(&Message::ReprBroadcast { layer: layer as u8, matrix: h }, record)
    }

    /// Server side of one evaluation pass; returns the number of correct
    /// predictions. Never recorded in the ledger.
    fn eval_pass(
        &mut self,
        nodes: &[u32],
        chunk_size: usize,
        labels: &[u32],
        label_mode: LabelMode,
    ) -> Result<usize> {
        let mut correct = 0;
        for chunk in nodes.chunks(chunk_size.max(1)) {
            for layer in interior_layers_desc(self.plan) {
                self.union_barrier(layer, false)?;
            }
            for layer in self.plan.agg_layers().to_vec() {
                self.agg_barrier(layer, false)?;
            }
            let senders: Vec<usize> = match label_mode {
                LabelMode::AllClients => (0..self.conns.len()).collect(),
                LabelMode::SingleHolder => vec![0],
            };
            let mut logit_parts = Vec::with_capacity(senders.len());
            for m in senders {
                match self.recv_from(m)? {
                    Message::ReprUpload { matrix, .. } => logit_parts.push(matrix),
                    other => {
                        return Err(GlasuError::Protocol(format!(
                            "expected logits from client {m}, got {other:?}"
                        )))
                    }
                }
            }
            let logits = aggregate(&logit_parts, &AggKind::Average);
            correct += argmax_correct(&logits, chunk, labels);
        }
        Ok(correct)
    }
}

struct WorkerArgs {
    ctx: ClientCtx,
    model: ClientModel,
    root: RngState,
    round_cfg: RoundConfig,
    sampler: SamplerConfig,
    train_mask: Vec<u32>,
    test_mask: Vec<u32>,
    periodic: Vec<usize>,
    final_eval: bool,
    addr: String,
}

/// Drives a sampling cursor over the wire: upload each interior set, install
/// the union that comes back.
fn drive_sampling(cursor: &mut SampleCursor, conn: &mut FramedStream) -> Result<()> {
    while let SampleStep::NeedUnion { layer } = cursor.step() {
        conn.send(&Message::IndexUpload {
            layer: layer as u8,
            set: cursor.set_at(layer).to_vec(),
        })?;
        match conn.recv()? {
            Message::IndexUnionBroadcast { layer: l, set } if l as usize == layer => {
                cursor.accept_union(layer, set)
            }
            other => {
                return Err(GlasuError::Protocol(format!(
                    "expected union broadcast, got {other:?}"
                )))
            }
        }
    }
    Ok(())
}

/// Drives a joint-inference cursor over the wire: upload each aggregation
/// input, install the aggregated broadcast.
fn drive_forward(fwd: &mut JointForward, conn: &mut FramedStream) -> Result<()> {
    while let ForwardStep::Upload { layer, h_plus } = fwd.step() {
        conn.send(&Message::ReprUpload { layer: layer as u8, matrix: h_plus })?;
        match conn.recv()? {
            Message::ReprBroadcast { layer: l, matrix } if l as usize == layer => {
                fwd.accept_agg(layer, matrix)
            }
            other => {
                return Err(GlasuError::Protocol(format!(
                    "expected repr broadcast, got {other:?}"
                )))
            }
        }
    }
    Ok(())
}

/// One full evaluation pass from the client side.
fn client_eval_pass(
    ctx: &ClientCtx,
    model: &ClientModel,
    conn: &mut FramedStream,
    nodes: &[u32],
    chunk_size: usize,
) -> Result<()> {
    for chunk in nodes.chunks(chunk_size.max(1)) {
        let mut cursor =
            SampleCursor::new(&ctx.adj, &ctx.plan, None, RngState::new(0, 0), chunk.to_vec());
        drive_sampling(&mut cursor, conn)?;
        let inputs = build_round_inputs(ctx, cursor.finish())?;
        let mut fwd = JointForward::new(ctx, &inputs, model);
        drive_forward(&mut fwd, conn)?;
        let (h_last, _, _) = fwd.finish();
        if ctx.owns_labels() {
            let logits = classify(&h_last, model.classifier.as_ref().unwrap());
            conn.send(&Message::ReprUpload {
                layer: ctx.plan.num_layers() as u8,
                matrix: logits,
            })?;
        }
    }
    Ok(())
}

fn client_worker(mut args: WorkerArgs) -> Result<(ClientModel, Vec<f64>)> {
    let stream = TcpStream::connect(&args.addr)
        .map_err(|e| GlasuError::Protocol(format!("connect to {}: {e}", args.addr)))?;
    let mut conn = FramedStream::new(stream)?;
    conn.send(&Message::Control(Control::Hello { client: args.ctx.id as u32 }))?;

    let ctx = &args.ctx;
    let mut losses = Vec::new();
    for t in 0..args.round_cfg.rounds {
        if args.round_cfg.label_mode == LabelMode::SingleHolder && ctx.id == 0 {
            let batch = draw_batch(&args.train_mask, args.sampler.batch_size, &args.root, t as u64)?;
            conn.send(&Message::SampleBroadcast(batch))?;
        }
        let batch = match conn.recv()? {
            Message::SampleBroadcast(b) => b,
            other => {
                return Err(GlasuError::Protocol(format!("expected batch broadcast, got {other:?}")))
            }
        };
        let mut cursor = SampleCursor::new(
            &ctx.adj,
            &ctx.plan,
            Some(args.sampler.fanout),
            client_stream(&args.root, ctx.id, t as u64),
            batch,
        );
        drive_sampling(&mut cursor, &mut conn)?;
        let inputs = build_round_inputs(ctx, cursor.finish())?;

        let mut fwd = JointForward::new(ctx, &inputs, &args.model);
        drive_forward(&mut fwd, &mut conn)?;
        let (h_last, mut cache, _) = fwd.finish();

        if args.round_cfg.label_mode == LabelMode::SingleHolder {
            if ctx.id == 0 {
                let (_l0, cot) = holder_loss_and_cotangent(&inputs, &args.model, &h_last);
                conn.send(&Message::CotangentBroadcast(cot))?;
            }
            cache.cotangent = match conn.recv()? {
                Message::CotangentBroadcast(g) => Some(g),
                other => {
                    return Err(GlasuError::Protocol(format!(
                        "expected cotangent broadcast, got {other:?}"
                    )))
                }
            };
        }

        for _q in 0..args.round_cfg.local_iters {
            let (loss, _) = local_update(ctx, &inputs, &mut args.model, &cache, args.round_cfg.eta);
            if ctx.owns_labels() {
                losses.push(loss);
            }
        }

        if args.periodic.contains(&t) {
            client_eval_pass(ctx, &args.model, &mut conn, &args.test_mask, args.sampler.batch_size)?;
        }
    }

    if args.final_eval {
        client_eval_pass(ctx, &args.model, &mut conn, &args.train_mask, args.sampler.batch_size)?;
        client_eval_pass(ctx, &args.model, &mut conn, &args.test_mask, args.sampler.batch_size)?;
    }

    match conn.recv()? {
        Message::Control(Control::End) => {}
        other => return Err(GlasuError::Protocol(format!("expected end control, got {other:?}"))),
    }
    Ok((args.model, losses))
}

/// Runs the full training procedure over localhost TCP. Port 0 binds an
/// ephemeral port (the default 7431 is used by the CLI).
#[allow(clippy::too_many_arguments)]
pub fn train_tcp(
    part: &PartitionedDataset,
    plan: &LayerPlan,
    kind: LayerKind,
    agg: &AggKind,
    hidden: usize,
    round_cfg: &RoundConfig,
    sampler: &SamplerConfig,
    seed: u64,
    opts: &TrainOpts,
    port: u16,
) -> Result<TrainOutput> {
    round_cfg.validate()?;
    sampler.validate()?;
    if round_cfg.label_mode == LabelMode::SingleHolder {
        plan.validate_single_holder()?;
    }
    let (ctxs, models) = build_clients(part, plan, kind, agg, hidden, round_cfg.label_mode, seed)?;
    let m_total = ctxs.len();
    let root = RngState::new(seed, 0);
    let periodic = eval_rounds(round_cfg.rounds, opts.eval_every);

    let listener = TcpListener::bind(("127.0.0.1", port))?;
    let addr = listener.local_addr()?.to_string();

    let mut worker_args: Vec<WorkerArgs> = ctxs
        .into_iter()
        .zip(models)
        .map(|(ctx, model)| WorkerArgs {
            ctx,
            model,
            root: root.clone(),
            round_cfg: *round_cfg,
            sampler: *sampler,
            train_mask: part.train_mask.clone(),
            test_mask: part.test_mask.clone(),
            periodic: periodic.clone(),
            final_eval: opts.final_eval,
            addr: addr.clone(),
        })
        .collect();

    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(m_total);
        for args in worker_args.drain(..) {
            handles.push(scope.spawn(move || client_worker(args)));
        }

        // Accept and order connections by the Hello client id.
        let mut conns: Vec<Option<FramedStream>> = (0..m_total).map(|_| None).collect();
        for _ in 0..m_total {
            let (stream, _) = listener.accept()?;
            let mut conn = FramedStream::new(stream)?;
            match conn.recv()? {
                Message::Control(Control::Hello { client }) => {
                    let id = client as usize;
                    if id >= m_total || conns[id].is_some() {
                        return Err(GlasuError::Protocol(format!("bad hello from client {id}")));
                    }
                    conns[id] = Some(conn);
                }
                other => {
                    return Err(GlasuError::Protocol(format!("expected hello, got {other:?}")))
                }
            }
        }
        let conns: Vec<FramedStream> = conns.into_iter().map(|c| c.unwrap()).collect();
        let mut server = ServerState {
            conns,
            ledger: CommLedger::new(opts.record_ledger && m_total > 1),
            plan,
            agg,
        };

        let mut accuracy: Vec<(usize, f64)> = Vec::new();
        for t in 0..round_cfg.rounds {
            server.ledger.begin_round();
            let batch_msg = match round_cfg.label_mode {
                LabelMode::AllClients => Message::SampleBroadcast(draw_batch(
                    &part.train_mask,
                    sampler.batch_size,
                    &root,
                    t as u64,
                )?),
                LabelMode::SingleHolder => {
                    let msg = server.recv_from(0)?;
                    if !matches!(msg, Message::SampleBroadcast(_)) {
                        return Err(GlasuError::Protocol("expected batch from label holder".into()));
                    }
                    server.ledger.record_relay_leg(&msg);
                    msg
                }
            };
            server.broadcast(&batch_msg, true)?;

            for layer in interior_layers_desc(plan) {
                server.union_barrier(layer, true)?;
            }
            for layer in plan.agg_layers().to_vec() {
                server.agg_barrier(layer, true)?;
            }
            if round_cfg.label_mode == LabelMode::SingleHolder {
                let msg = server.recv_from(0)?;
                if !matches!(msg, Message::CotangentBroadcast(_)) {
                    return Err(GlasuError::Protocol("expected cotangent from label holder".into()));
                }
                server.ledger.record_upload(&msg);
                server.broadcast(&msg, true)?;
            }

            if periodic.contains(&t) {
                let correct = server.eval_pass(
                    &part.test_mask,
                    sampler.batch_size,
                    &part.labels,
                    round_cfg.label_mode,
                )?;
                let acc = if part.test_mask.is_empty() {
                    1.0
                } else {
                    correct as f64 / part.test_mask.len() as f64
                };
                accuracy.push((t, acc));
            }
        }

        let (final_train_accuracy, final_test_accuracy) = if opts.final_eval {
            let tr = server.eval_pass(
                &part.train_mask,
                sampler.batch_size,
                &part.labels,
                round_cfg.label_mode,
            )?;
            let te = server.eval_pass(
                &part.test_mask,
                sampler.batch_size,
                &part.labels,
                round_cfg.label_mode,
            )?;
            let frac = |correct: usize, mask: &[u32]| {
                if mask.is_empty() {
                    1.0
                } else {
                    correct as f64 / mask.len() as f64
                }
            };
            (Some(frac(tr, &part.train_mask)), Some(frac(te, &part.test_mask)))
        } else {
            (None, None)
        };

        server.broadcast(&Message::Control(Control::End), false)?;

        let mut models_out: Vec<Option<ClientModel>> = (0..m_total).map(|_| None).collect();
        let mut client_losses: Vec<Vec<f64>> = vec![Vec::new(); m_total];
        for (m, handle) in handles.into_iter().enumerate() {
            let (model, losses) = handle
                .join()
                .map_err(|_| GlasuError::Protocol(format!("client {m} worker panicked")))??;
            models_out[m] = Some(model);
            client_losses[m] = losses;
        }

        // Same (t, q, client) record order as the lockstep driver.
        let mut losses = Vec::new();
        for t in 0..round_cfg.rounds {
            for q in 0..round_cfg.local_iters {
                for (m, lv) in client_losses.iter().enumerate() {
                    let owner = round_cfg.label_mode == LabelMode::AllClients || m == 0;
                    if owner {
                        let idx = t * round_cfg.local_iters + q;
                        losses.push(LossRecord { round: t, local_iter: q, client: m, loss: lv[idx] });
                    }
                }
            }
        }

        Ok(TrainOutput {
            models: models_out.into_iter().map(|m| m.unwrap()).collect(),
            history: TrainHistory { losses, accuracy, ledger: server.ledger },
            final_train_accuracy,
            final_test_accuracy,
        })
    })
}
