//! gNB MAC: transport block construction, the two-stage queue (RLC bytes in Q1,
//! pending HARQ processes in Q2), cluster timing and grouped feedback handling.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{decode, ChannelError, TbSinrState};
use crate::scenario::Scenario;
use crate::traffic::AppPacket;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MacError {
    #[error("cannot build a transport block from an empty RLC buffer")]
    EmptyBuffer,
    #[error("feedback for unknown transport block {got} (active: {active:?})")]
    UnknownTb { got: u64, active: Option<u64> },
    #[error("cluster of size 0 for transport block {0}")]
    EmptyCluster(u64),
    #[error("transport block {tb_id} would exceed the budget of {budget} transmissions")]
    BudgetExceeded { tb_id: u64, budget: u32 },
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Pre-floor transport block size in bytes:
/// `n_ofdm * bw / (8 * scs) * modulation_order * code_rate`.
pub fn tb_size_exact(n_ofdm: u32, bw_hz: f64, scs_hz: f64, modulation_order: u32, code_rate: f64) -> f64 {
    f64::from(n_ofdm) * bw_hz / (8.0 * scs_hz) * f64::from(modulation_order) * code_rate
}

/// Transport block size in whole bytes.
pub fn compute_tb_size(s: &Scenario) -> u32 {
    tb_size_exact(s.n_ofdm, s.bw_hz, s.scs_hz(), s.modulation_order, s.code_rate).floor() as u32
}

/// Queue backlog observed at a frame boundary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub q1_bytes: u64,
    pub q2_tbs: u32,
    pub z: f64,
}

/// Which queue a frame serves (`alpha = 1` for Q1, `alpha = 0` for Q2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ServeChoice {
    Harq,
    Rlc,
    Idle,
}

impl ServeChoice {
    pub fn alpha(self) -> Option<u8> {
        match self {
            ServeChoice::Harq => Some(0),
            ServeChoice::Rlc => Some(1),
            ServeChoice::Idle => None,
        }
    }
}

/// Pending HARQ processes always go first.
pub fn select_queue(q: &QueueState) -> ServeChoice {
    if q.q2_tbs > 0 {
        ServeChoice::Harq
    } else if q.q1_bytes > 0 {
        ServeChoice::Rlc
    } else {
        ServeChoice::Idle
    }
}

/// What happened during one frame (between two decision instants).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameEvents {
    pub served: ServeChoice,
    /// Bytes that arrived in Q1 during the frame.
    pub arrivals_bytes: u64,
    /// Payload taken from Q1 into the TB built at the frame start.
    pub tb_served_bytes: u64,
    /// The initial transmission failed and the TB became a HARQ process.
    pub entered_harq: bool,
    /// A HARQ process left Q2 (decoded or dropped).
    pub harq_resolved: bool,
}

impl FrameEvents {
    pub fn new(served: ServeChoice) -> Self {
        Self {
            served,
            arrivals_bytes: 0,
            tb_served_bytes: 0,
            entered_harq: false,
            harq_resolved: false,
        }
    }
}

/// Frame-level queue recursion for Q1 (bytes) and Q2 (HARQ processes).
pub fn apply_queue_dynamics(q: &QueueState, frame: &FrameEvents) -> QueueState {
    let alpha = frame.served.alpha();
    let q1_out = if alpha == Some(1) { frame.tb_served_bytes } else { 0 };
    let q2_out = u32::from(alpha == Some(0) && frame.harq_resolved);
    QueueState {
        q1_bytes: q.q1_bytes.saturating_sub(q1_out) + frame.arrivals_bytes,
        q2_tbs: q.q2_tbs.saturating_sub(q2_out) + u32::from(frame.entered_harq),
        z: q.z,
    }
}

/// A (possibly partial) packet waiting in the RLC buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlcSegment {
    pub packet_id: u64,
    pub bytes: u32,
    pub arrival_slot: u64,
}

/// FIFO byte queue of application packets (Q1).
#[derive(Debug, Clone, Default)]
pub struct RlcBuffer {
    segments: VecDeque<RlcSegment>,
    bytes: u64,
}

impl RlcBuffer {
    pub fn push(&mut self, p: &AppPacket) {
        self.bytes += u64::from(p.size_bytes);
        self.segments.push_back(RlcSegment {
            packet_id: p.id,
            bytes: p.size_bytes,
            arrival_slot: p.arrival_slot,
        });
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn is_empty(&self) -> bool {
        self.bytes == 0
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }
}

/// Payload slice of one packet carried by a TB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TbSegment {
    pub packet_id: u64,
    pub bytes: u32,
    pub arrival_slot: u64,
    /// This slice ends the packet.
    pub last: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TbStatus {
    InFlight,
    Decoded,
    Dropped,
}

/// Size decision for one cluster of consecutive (re)transmissions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterDecision {
    pub cluster_index: u32,
    pub r: u32,
    pub decided_at_slot: u64,
    /// Estimated probability that the TB is still undecodable after this cluster.
    pub risk_estimate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledCluster {
    pub decision: ClusterDecision,
    pub start_slot: u64,
}

/// Lifetime record of one transport block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbRecord {
    pub tb_id: u64,
    pub tb_size_bytes: u32,
    pub payload_bytes: u32,
    pub segments: Vec<TbSegment>,
    pub sinr: TbSinrState,
    pub clusters: Vec<ScheduledCluster>,
    /// Transmissions so far, wasted ones included.
    pub total_rtx: u32,
    /// Transmissions up to and including the decoding one.
    pub needed_rtx: u32,
    pub status: TbStatus,
    pub built_slot: u64,
    pub first_tx_slot: u64,
    pub decode_slot: Option<u64>,
}

impl TbRecord {
    pub fn is_decoded(&self) -> bool {
        self.decode_slot.is_some()
    }

    /// Slots reserved over all clusters scheduled so far.
    pub fn reserved_slots(&self) -> u32 {
        self.clusters.iter().map(|c| c.decision.r).sum()
    }
}

/// Dequeues up to `tb_size` bytes (segmenting the head packet when needed) into
/// a new TB whose initial transmission goes out `l12` slots later.
pub fn build_tb(
    q1: &mut RlcBuffer,
    tb_size: u32,
    slot: u64,
    l12: u64,
    tb_id: u64,
) -> Result<TbRecord, MacError> {
    if q1.is_empty() {
        return Err(MacError::EmptyBuffer);
    }
    let mut room = tb_size;
    let mut segments = Vec::new();
    while room > 0 {
        let Some(head) = q1.segments.front_mut() else { break };
        let take = head.bytes.min(room);
        head.bytes -= take;
        room -= take;
        q1.bytes -= u64::from(take);
        let last = head.bytes == 0;
        segments.push(TbSegment {
            packet_id: head.packet_id,
            bytes: take,
            arrival_slot: head.arrival_slot,
            last,
        });
        if last {
            q1.segments.pop_front();
        }
    }
    Ok(TbRecord {
        tb_id,
        tb_size_bytes: tb_size,
        payload_bytes: tb_size - room,
        segments,
        sinr: TbSinrState::default(),
        clusters: Vec::new(),
        total_rtx: 0,
        needed_rtx: 0,
        status: TbStatus::InFlight,
        built_slot: slot,
        first_tx_slot: slot + l12,
        decode_slot: None,
    })
}

/// Grouped HARQ feedback for one cluster, sent by the UE in `deliver_at_slot`
/// and acted on by the gNB from the following slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub tb_id: u64,
    pub cluster_index: u32,
    pub ack: bool,
    pub deliver_at_slot: u64,
}

impl FeedbackEvent {
    pub fn processed_at_slot(&self) -> u64 {
        self.deliver_at_slot + 1
    }
}

/// Transmission slots of a scheduled cluster and when its feedback is sent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSchedule {
    pub tx_slots: Range<u64>,
    pub feedback_slot: u64,
}

/// Reserves `decision.r` consecutive slots.
///
/// The initial transmission (cluster 0) uses the slot fixed by [`build_tb`];
/// later clusters start `l12` slots after the decision instant `now`.
pub fn schedule_cluster(
    tb: &mut TbRecord,
    decision: ClusterDecision,
    now: u64,
    k1: u64,
    l12: u64,
    budget: u32,
) -> Result<ClusterSchedule, MacError> {
    if decision.r == 0 {
        return Err(MacError::EmptyCluster(tb.tb_id));
    }
    if tb.reserved_slots() + decision.r > budget {
        return Err(MacError::BudgetExceeded { tb_id: tb.tb_id, budget });
    }
    let start = if decision.cluster_index == 0 { tb.first_tx_slot } else { now + l12 };
    let end = start + u64::from(decision.r);
    tb.clusters.push(ScheduledCluster { decision, start_slot: start });
    Ok(ClusterSchedule {
        tx_slots: start..end,
        feedback_slot: end - 1 + k1,
    })
}

/// Result of one transmission slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TxOutcome {
    /// The TB was still undecoded; carries the SINR gain and whether it now decodes.
    Useful { increment: f64, decoded: bool },
    /// The TB was already decoded earlier in the cluster.
    Wasted,
}

/// Accounts one reserved transmission slot.
pub fn transmit(
    tb: &mut TbRecord,
    rb_sinrs: &[f64],
    beta: f64,
    sinr_target_db: f64,
    slot: u64,
) -> Result<TxOutcome, MacError> {
    tb.total_rtx += 1;
    if tb.is_decoded() {
        return Ok(TxOutcome::Wasted);
    }
    tb.needed_rtx += 1;
    let increment = tb.sinr.absorb(rb_sinrs, beta)?;
    let decoded = decode(&tb.sinr, sinr_target_db);
    if decoded {
        tb.decode_slot = Some(slot);
    }
    Ok(TxOutcome::Useful { increment, decoded })
}

/// What the gNB does after a grouped feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextAction {
    Decoded,
    Drop,
    /// Ask the strategy for the size of cluster `cluster_index`.
    Decide { cluster_index: u32 },
}

/// ACK completes the TB; NACK drops it once the transmission budget or the
/// cluster limit is exhausted, otherwise requests the next cluster.
pub fn handle_feedback(
    ev: &FeedbackEvent,
    tb: &TbRecord,
    r_max_total: u32,
    cluster_limit: Option<u32>,
) -> Result<NextAction, MacError> {
    if ev.tb_id != tb.tb_id {
        return Err(MacError::UnknownTb { got: ev.tb_id, active: Some(tb.tb_id) });
    }
    if ev.ack {
        return Ok(NextAction::Decoded);
    }
    if tb.total_rtx >= r_max_total {
        return Ok(NextAction::Drop);
    }
    if cluster_limit.is_some_and(|limit| ev.cluster_index >= limit) {
        return Ok(NextAction::Drop);
    }
    Ok(NextAction::Decide { cluster_index: ev.cluster_index + 1 })
}
