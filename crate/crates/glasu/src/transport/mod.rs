//! Message types, bit-exact wire framing, the communication ledger, and the
//! expected message-count model the ledger is checked against.

mod codec;
pub mod tcp;

pub use codec::{deserialize, serialize, MAGIC, WIRE_VERSION};

use crate::sampling::{count_sync_messages, LayerPlan};
use crate::federation::LabelMode;
use crate::linalg::Matrix;

/// Wire messages exchanged between clients and the server.
///
/// Index sets are sorted ascending; matrices are finite. Both are enforced on
/// deserialization.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// Server-to-clients broadcast of the round's training batch S[L].
    SampleBroadcast(Vec<u32>),
    /// Client-to-server index set at an interior aggregation layer.
    IndexUpload { layer: u8, set: Vec<u32> },
    /// Server-to-clients union of uploaded index sets.
    IndexUnionBroadcast { layer: u8, set: Vec<u32> },
    /// Client-to-server partial representation H+_m at an aggregation layer.
    ReprUpload { layer: u8, matrix: Matrix },
    /// Server-to-clients aggregated representation H[l+1].
    ReprBroadcast { layer: u8, matrix: Matrix },
    /// Last-layer cotangent in single-holder mode (both legs use this variant).
    CotangentBroadcast(Matrix),
    /// Connection management; never recorded in the ledger.
    Control(Control),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Control {
    Hello { client: u32 },
    RoundBegin { round: u32 },
    End,
}

/// Ledger row index per message variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsgKind {
    SampleBroadcast = 0,
    IndexUpload = 1,
    IndexUnionBroadcast = 2,
    ReprUpload = 3,
    ReprBroadcast = 4,
    CotangentBroadcast = 5,
}

pub const NUM_KINDS: usize = 6;

pub const KIND_NAMES: [&str; NUM_KINDS] = [
    "sample_broadcast",
    "index_upload",
    "index_union_broadcast",
    "repr_upload",
    "repr_broadcast",
    "cotangent_broadcast",
];

impl Message {
    pub fn kind(&self) -> Option<MsgKind> {
        match self {
            Message::SampleBroadcast(_) => Some(MsgKind::SampleBroadcast),
            Message::IndexUpload { .. } => Some(MsgKind::IndexUpload),
            Message::IndexUnionBroadcast { .. } => Some(MsgKind::IndexUnionBroadcast),
            Message::ReprUpload { .. } => Some(MsgKind::ReprUpload),
            Message::ReprBroadcast { .. } => Some(MsgKind::ReprBroadcast),
            Message::CotangentBroadcast(_) => Some(MsgKind::CotangentBroadcast),
            Message::Control(_) => None,
        }
    }
}

/// Endpoint identity within the protocol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Role {
    Server,
    Client(usize),
}

/// Transport binding for one endpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Endpoint {
    pub role: Role,
    pub binding: Binding,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Binding {
    InProcess,
    Tcp(String),
}

/// Default TCP port for the simulator.
pub const DEFAULT_PORT: u16 = 7431;

/// Per-variant logical message counts and payload byte totals.
///
/// Counting unit is one logical message: an upload or a broadcast counts once
/// regardless of fan-out; broadcast bytes are multiplied by the receiver
/// count so fan-out cost still shows up in byte totals. Control frames and
/// evaluation traffic are not recorded, and single-client runs record nothing
/// (there is no inter-party communication to account for).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommLedger {
    enabled: bool,
    rounds: Vec<[(u64, u64); NUM_KINDS]>,
}

impl CommLedger {
    pub fn new(enabled: bool) -> Self {
        CommLedger { enabled, rounds: Vec::new() }
    }

    pub fn begin_round(&mut self) {
        if self.enabled {
            self.rounds.push([(0, 0); NUM_KINDS]);
        }
    }

    pub fn set_enabled(&mut self, on: bool) {
        self.enabled = on;
    }

    fn bump(&mut self, kind: MsgKind, count: u64, bytes: u64) {
        if !self.enabled {
            return;
        }
        let round = self.rounds.last_mut().expect("begin_round not called");
        let cell = &mut round[kind as usize];
        cell.0 += count;
        cell.1 += bytes;
    }

    /// One client-to-server message.
    pub fn record_upload(&mut self, msg: &Message) {
        if let Some(kind) = msg.kind() {
            let len = serialize(msg).len() as u64;
            self.bump(kind, 1, len);
        }
    }

    /// One logical broadcast delivered to `receivers` clients.
    pub fn record_broadcast(&mut self, msg: &Message, receivers: usize) {
        if let Some(kind) = msg.kind() {
            let len = serialize(msg).len() as u64;
            self.bump(kind, 1, len * receivers as u64);
        }
    }

    /// Extra wire leg that is part of an already-counted logical message
    /// (e.g. the single-holder client handing the batch to the server before
    /// the broadcast): bytes only, no count.
    pub fn record_relay_leg(&mut self, msg: &Message) {
        if let Some(kind) = msg.kind() {
            let len = serialize(msg).len() as u64;
            self.bump(kind, 0, len);
        }
    }

    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn round_counts(&self, t: usize) -> [u64; NUM_KINDS] {
        self.rounds[t].map(|(c, _)| c)
    }

    pub fn total_counts(&self) -> [u64; NUM_KINDS] {
        let mut out = [0u64; NUM_KINDS];
        for round in &self.rounds {
            for (o, (c, _)) in out.iter_mut().zip(round) {
                *o += c;
            }
        }
        out
    }

    pub fn total_bytes(&self) -> [u64; NUM_KINDS] {
        let mut out = [0u64; NUM_KINDS];
        for round in &self.rounds {
            for (o, (_, b)) in out.iter_mut().zip(round) {
                *o += b;
            }
        }
        out
    }

    pub fn total_message_count(&self) -> u64 {
        self.total_counts().iter().sum()
    }

    pub fn total_byte_count(&self) -> u64 {
        self.total_bytes().iter().sum()
    }

    pub fn summary(&self) -> String {
        let counts = self.total_counts();
        let bytes = self.total_bytes();
        let mut s = String::new();
        for i in 0..NUM_KINDS {
            s.push_str(&format!("{}: {} msgs, {} bytes\n", KIND_NAMES[i], counts[i], bytes[i]));
        }
        s.push_str(&format!(
            "total: {} msgs, {} bytes over {} rounds\n",
            self.total_message_count(),
            self.total_byte_count(),
            self.num_rounds()
        ));
        s
    }
}

/// Per-variant expected message counts for a full training run.
///
/// Per round: sampling costs `count_sync_messages`, joint inference costs
/// K uploads per client plus K broadcasts, single-holder mode adds one
/// cotangent upload and one cotangent broadcast; local iterations are silent.
/// Single-client runs communicate nothing.
pub fn expected_counts(
    plan: &LayerPlan,
    m_clients: usize,
    rounds: usize,
    _local_iters: usize,
    label_mode: LabelMode,
) -> [u64; NUM_KINDS] {
    let mut out = [0u64; NUM_KINDS];
    if m_clients <= 1 {
        return out;
    }
    let t = rounds as u64;
    let m = m_clients as u64;
    let k = plan.num_agg_layers() as u64;
    let interior = k.saturating_sub(2);
    out[MsgKind::SampleBroadcast as usize] = t;
    out[MsgKind::IndexUpload as usize] = t * interior * m;
    out[MsgKind::IndexUnionBroadcast as usize] = t * interior;
    out[MsgKind::ReprUpload as usize] = t * k * m;
    out[MsgKind::ReprBroadcast as usize] = t * k;
    if label_mode == LabelMode::SingleHolder {
        out[MsgKind::CotangentBroadcast as usize] = t * 2;
    }
    // Sampling total must agree with count_sync_messages.
    debug_assert_eq!(
        out[MsgKind::SampleBroadcast as usize]
            + out[MsgKind::IndexUpload as usize]
            + out[MsgKind::IndexUnionBroadcast as usize],
        t * count_sync_messages(plan, m_clients) as u64
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::LayerPlan;

    fn plan(l: usize, k: usize) -> LayerPlan {
        LayerPlan::suffix(l, k).unwrap()
    }

    #[test]
    fn expected_inference_messages_example() {
        // L=4, K=4, Q=1, M=3, AllClients, T=1: inference = 4*(3+1) = 16.
        let c = expected_counts(&plan(4, 4), 3, 1, 1, LabelMode::AllClients);
        let inference = c[MsgKind::ReprUpload as usize] + c[MsgKind::ReprBroadcast as usize];
        assert_eq!(inference, 16);
    }

    #[test]
    fn expected_counts_independent_of_local_iters() {
        let a = expected_counts(&plan(4, 2), 3, 5, 1, LabelMode::AllClients);
        let b = expected_counts(&plan(4, 2), 3, 5, 7, LabelMode::AllClients);
        assert_eq!(a, b);
    }

    #[test]
    fn saving_factor_ratio_is_k_over_ql() {
        // Equal model-update budget: K=2,Q=4 over T=2 rounds vs K=4,Q=1 over
        // T=8 rounds is 8 updates each; aggregation messages differ by QL/K.
        let m = 3;
        let a = expected_counts(&plan(4, 2), m, 2, 4, LabelMode::AllClients);
        let b = expected_counts(&plan(4, 4), m, 8, 1, LabelMode::AllClients);
        let agg = |c: [u64; NUM_KINDS]| {
            c[MsgKind::ReprUpload as usize] + c[MsgKind::ReprBroadcast as usize]
        };
        assert_eq!(agg(a) * 8, agg(b));
    }

    #[test]
    fn single_holder_adds_two_cotangent_messages_per_round() {
        let a = expected_counts(&plan(3, 2), 4, 6, 2, LabelMode::SingleHolder);
        let b = expected_counts(&plan(3, 2), 4, 6, 2, LabelMode::AllClients);
        assert_eq!(a[MsgKind::CotangentBroadcast as usize], 12);
        assert_eq!(b[MsgKind::CotangentBroadcast as usize], 0);
    }

    #[test]
    fn single_client_run_communicates_nothing() {
        let c = expected_counts(&plan(4, 4), 1, 10, 4, LabelMode::AllClients);
        assert_eq!(c, [0; NUM_KINDS]);
    }

    #[test]
    fn ledger_accumulates_counts_and_bytes() {
        let mut ledger = CommLedger::new(true);
        ledger.begin_round();
        let msg = Message::SampleBroadcast(vec![1, 2, 3]);
        ledger.record_broadcast(&msg, 3);
        let up = Message::IndexUpload { layer: 1, set: vec![0] };
        ledger.record_upload(&up);
        let counts = ledger.total_counts();
        assert_eq!(counts[MsgKind::SampleBroadcast as usize], 1);
        assert_eq!(counts[MsgKind::IndexUpload as usize], 1);
        let frame = serialize(&msg).len() as u64;
        assert_eq!(ledger.total_bytes()[MsgKind::SampleBroadcast as usize], frame * 3);
    }

    #[test]
    fn control_frames_never_recorded() {
        let mut ledger = CommLedger::new(true);
        ledger.begin_round();
        ledger.record_broadcast(&Message::Control(Control::End), 5);
        assert_eq!(ledger.total_message_count(), 0);
    }

    #[test]
    fn zero_round_ledger_is_empty() {
        let ledger = CommLedger::new(true);
        assert_eq!(ledger.num_rounds(), 0);
        assert_eq!(ledger.total_message_count(), 0);
    }
}
