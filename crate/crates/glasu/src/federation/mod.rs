//! The split-training protocol: server aggregation and extraction, joint
//! inference, stale local updates, backward routing, and the training loop in
//! both label-ownership regimes.

pub mod client;
pub mod engine;
pub mod remote;

pub use client::{
    build_round_inputs, holder_loss_and_cotangent, local_forward, local_gradients,
    local_objective, local_update, recombine_stale, ClientCtx, ForwardStep, JointForward,
    LocalForward, LocalGradients, RoundInputs,
};
pub use engine::{build_clients, evaluate, train, train_lockstep, TrainOpts, TrainOutput, Transport};

use crate::error::{GlasuError, Result};
use crate::linalg::{add, sub, Matrix};
use crate::transport::CommLedger;

/// Who owns training labels and the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Every client holds the labels and its own classifier.
    AllClients,
    /// Only client 0 holds labels and the classifier; it broadcasts the
    /// last-layer cotangent once per round.
    SingleHolder,
}

/// Parameter-free server aggregation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AggKind {
    Average,
    /// Column concatenation in client order with the given block widths.
    Concat { widths: Vec<usize> },
}

impl AggKind {
    pub fn concat_uniform(m_clients: usize, width: usize) -> Self {
        AggKind::Concat { widths: vec![width; m_clients] }
    }

    /// Output width given each client contributes `width` columns.
    pub fn out_width(&self, width: usize) -> usize {
        match self {
            AggKind::Average => width,
            AggKind::Concat { widths } => widths.iter().sum(),
        }
    }

    fn block_range(widths: &[usize], m: usize) -> (usize, usize) {
        let start: usize = widths[..m].iter().sum();
        (start, start + widths[m])
    }
}

/// Server aggregation: element-wise mean, or column concatenation in client
/// order. The mean folds parts in client order and divides by M, so it is a
/// bitwise identity for a single client.
pub fn aggregate(parts: &[Matrix], kind: &AggKind) -> Matrix {
    assert!(!parts.is_empty());
    match kind {
        AggKind::Average => {
            let mut acc = parts[0].clone();
            for p in &parts[1..] {
                acc = add(&acc, p);
            }
            let m = parts.len() as f64;
            acc.map(|v| v / m)
        }
        AggKind::Concat { widths } => {
            assert_eq!(widths.len(), parts.len());
            let rows = parts[0].rows();
            let total: usize = widths.iter().sum();
            let mut out = Matrix::zeros(rows, total);
            for i in 0..rows {
                let mut col = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    assert_eq!(p.rows(), rows, "aggregate row misalignment");
                    assert_eq!(p.cols(), w, "aggregate block width mismatch");
                    for j in 0..w {
                        out.set(i, col + j, p.get(i, j));
                    }
                    col += w;
                }
            }
            out
        }
    }
}

/// Recovers the "all but m" portion from the aggregated value and one's own
/// contribution: Average -> h_agg - h_plus/M; Concat -> the other blocks.
pub fn extract(h_agg: &Matrix, h_plus: &Matrix, kind: &AggKind, m_total: usize, m: usize) -> Matrix {
    match kind {
        AggKind::Average => {
            let mf = m_total as f64;
            sub(h_agg, &h_plus.map(|v| v / mf))
        }
        AggKind::Concat { widths } => {
            let (start, end) = AggKind::block_range(widths, m);
            let keep = h_agg.cols() - (end - start);
            let mut out = Matrix::zeros(h_agg.rows(), keep);
            for i in 0..h_agg.rows() {
                let mut col = 0;
                for j in 0..h_agg.cols() {
                    if j < start || j >= end {
                        out.set(i, col, h_agg.get(i, j));
                        col += 1;
                    }
                }
            }
            out
        }
    }
}

/// Local replacement for server aggregation during stale updates:
/// Average -> h_minus + h_plus/M; Concat -> reinsert client m's block.
pub fn local_compose(
    h_minus: &Matrix,
    h_plus: &Matrix,
    kind: &AggKind,
    m_total: usize,
    m: usize,
) -> Matrix {
    match kind {
        AggKind::Average => {
            let mf = m_total as f64;
            add(h_minus, &h_plus.map(|v| v / mf))
        }
        AggKind::Concat { widths } => {
            let (start, end) = AggKind::block_range(widths, m);
            assert_eq!(h_plus.cols(), end - start, "compose block width mismatch");
            let total = h_minus.cols() + h_plus.cols();
            let mut out = Matrix::zeros(h_plus.rows(), total);
            for i in 0..out.rows() {
                let mut src = 0;
                for j in 0..total {
                    if j >= start && j < end {
                        out.set(i, j, h_plus.get(i, j - start));
                    } else {
                        out.set(i, j, h_minus.get(i, src));
                        src += 1;
                    }
                }
            }
            out
        }
    }
}

/// Server-side gradient routing: Average -> every client gets grad/M;
/// Concat -> each client gets its own column block.
pub fn server_backward_route(grad_agg: &Matrix, kind: &AggKind, m_total: usize) -> Vec<Matrix> {
    match kind {
        AggKind::Average => {
            let mf = m_total as f64;
            (0..m_total).map(|_| grad_agg.map(|v| v / mf)).collect()
        }
        AggKind::Concat { widths } => (0..m_total)
            .map(|m| {
                let (start, end) = AggKind::block_range(widths, m);
                let mut out = Matrix::zeros(grad_agg.rows(), end - start);
                for i in 0..grad_agg.rows() {
                    for j in start..end {
                        out.set(i, j - start, grad_agg.get(i, j));
                    }
                }
                out
            })
            .collect(),
    }
}

/// Stale "all but m" state for one aggregation layer.
///
/// `h_minus` is the extracted value; `h_agg` and `h_plus_ref` additionally
/// pin the aggregated broadcast and the upload it was built from, so the
/// local recombination can be made exact at q = 0 (see
/// [`client::recombine_stale`]).
#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub layer: usize,
    pub h_minus: Matrix,
    pub h_agg: Matrix,
    pub h_plus_ref: Matrix,
}

/// Stored per-round stale state: one entry per aggregation layer, plus the
/// single-holder cotangent when applicable.
#[derive(Clone, Debug, Default)]
pub struct StaleCache {
    pub entries: Vec<CacheEntry>,
    pub cotangent: Option<Matrix>,
}

impl StaleCache {
    pub fn entry(&self, layer: usize) -> &CacheEntry {
        self.entries
            .iter()
            .find(|e| e.layer == layer)
            .expect("no stale cache entry for aggregation layer")
    }
}

/// Outer training configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_iters: usize,
    pub eta: f64,
    pub label_mode: LabelMode,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(GlasuError::Config("round count must be >= 1".into()));
        }
        if self.local_iters < 1 {
            return Err(GlasuError::Config("local iteration count must be >= 1".into()));
        }
        if self.eta.is_nan() || self.eta <= 0.0 {
            return Err(GlasuError::Config(format!("step size {} must be > 0", self.eta)));
        }
        Ok(())
    }
}

/// One recorded training loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub round: usize,
    pub local_iter: usize,
    pub client: usize,
    pub loss: f64,
}

/// Loss trajectory, periodic evaluation accuracy, and the message ledger.
#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub losses: Vec<LossRecord>,
    pub accuracy: Vec<(usize, f64)>,
    pub ledger: CommLedger,
}

impl TrainHistory {
    /// Bitwise equality of the full trajectory (loss bits, accuracy bits,
    /// ledger counts and bytes).
    pub fn bits_eq(&self, other: &TrainHistory) -> bool {
        self.losses.len() == other.losses.len()
            && self.losses.iter().zip(&other.losses).all(|(a, b)| {
                (a.round, a.local_iter, a.client) == (b.round, b.local_iter, b.client)
                    && a.loss.to_bits() == b.loss.to_bits()
            })
            && self.accuracy.len() == other.accuracy.len()
            && self
                .accuracy
                .iter()
                .zip(&other.accuracy)
                .all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits())
            && self.ledger == other.ledger
    }

    /// Mean loss per round across local iterations and clients.
    pub fn round_mean_losses(&self) -> Vec<f64> {
        let t_max = self.losses.iter().map(|r| r.round).max().map_or(0, |t| t + 1);
        let mut sums = vec![(0.0, 0usize); t_max];
        for r in &self.losses {
            sums[r.round].0 += r.loss;
            sums[r.round].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}
