//! Slot-by-slot event loop.
//!
//! Order inside a slot: due feedback, strategy decisions, scheduled
//! transmissions, traffic arrivals, TB construction (only when the radio is
//! idle), mobility, trace. A frame is the interval between two consecutive
//! decision instants, i.e. TB builds and cluster decisions.
//!
//! Random numbers come from ChaCha8 generators seeded with the scenario seed,
//! one stream per concern (traffic, LOS, shadowing, fading, controller), so
//! that e.g. the traffic sequence does not depend on how many fading samples a
//! strategy consumed.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::channel::{linear_to_db, Channel, ChannelError, LinkState};
use crate::mac::{
    build_tb, compute_tb_size, handle_feedback, schedule_cluster, select_queue, transmit, ClusterDecision,
    ClusterSchedule, FeedbackEvent, FrameEvents, MacError, NextAction, QueueState, RlcBuffer,
    TbRecord, TbStatus, TxOutcome,
};
use crate::metrics::{
    ControllerSnapshot, DecisionRecord, FrameRecord, MetricsLog, PacketFate, PacketRecord, RunMeta, ScoreRecord,
    SlotRecord, TbSummary,
};
use crate::scenario::{ConfigError, Scenario};
use crate::strategy::{Decision, DecisionContext, Strategy, StrategyError};
use crate::traffic::{TrafficParams, TrafficSource};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Mac(#[from] MacError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("invariant violated at slot {slot}: {message}")]
    Invariant { slot: u64, message: String },
    #[error("run panicked: {0}")]
    Panic(String),
}

/// Seeds of the independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeeds {
    pub traffic: u64,
    pub los: u64,
    pub shadowing: u64,
    pub fading: u64,
    pub controller: u64,
}

impl StreamSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self { traffic: seed, los: seed, shadowing: seed, fading: seed, controller: seed }
    }
}

/// One ChaCha8 generator per concern; stream ids keep equal seeds independent.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub traffic: ChaCha8Rng,
    pub los: ChaCha8Rng,
    pub shadowing: ChaCha8Rng,
    pub fading: ChaCha8Rng,
    pub controller: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self::with_seeds(StreamSeeds::from_seed(seed))
    }

    pub fn with_seeds(s: StreamSeeds) -> Self {
        Self {
            traffic: stream(s.traffic, 1),
            los: stream(s.los, 2),
            shadowing: stream(s.shadowing, 3),
            fading: stream(s.fading, 4),
            controller: stream(s.controller, 5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimClock {
    pub slot: u64,
    pub slot_ms: f64,
}

impl SimClock {
    pub fn tick(&mut self) {
        self.slot += 1;
    }

    pub fn now_ms(&self) -> f64 {
        self.slot as f64 * self.slot_ms
    }
}

/// UE position at `slot`: starts at `(d0, 0)` and moves at constant velocity.
pub fn ue_position(s: &Scenario, slot: u64) -> [f64; 2] {
    let t_s = slot as f64 * s.slot_ms() / 1e3;
    [s.d0_m + s.velocity_mps[0] * t_s, s.velocity_mps[1] * t_s]
}

struct ActiveTb {
    tb: TbRecord,
    schedule: ClusterSchedule,
    cluster_index: u32,
    in_harq: bool,
    last_risk: f64,
}

struct OpenFrame {
    start_slot: u64,
    before: QueueState,
    events: FrameEvents,
}

/// Single-run simulator state.
pub struct Simulation {
    scenario: Scenario,
    clock: SimClock,
    rngs: RngStreams,
    channel: Channel,
    traffic: TrafficSource,
    strategy: Strategy,
    tb_size: u32,
    rlc: RlcBuffer,
    q2_tbs: u32,
    link: LinkState,
    rb_buf: Vec<f64>,
    active: Option<ActiveTb>,
    pending_feedback: Option<FeedbackEvent>,
    pending_decision: Option<u32>,
    frame: Option<OpenFrame>,
    next_tb_id: u64,
    /// Initial transmissions that failed in the current slot.
    harq_entries: u32,
    log: MetricsLog,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        Self::with_streams(scenario, RngStreams::new(scenario.seed))
    }

    pub fn with_streams(scenario: &Scenario, mut rngs: RngStreams) -> Result<Self, SimError> {
        scenario.validate()?;
        let channel = Channel::new(scenario)?;
        let tb_size = compute_tb_size(scenario);
        let traffic = TrafficSource::new(TrafficParams::from_scenario(scenario), &mut rngs.traffic);
        let controller_seed = rngs.controller.next_u64();
        let strategy = Strategy::from_scenario(scenario, tb_size, controller_seed);
        let link = channel.initial_link_state(ue_position(scenario, 0), &mut rngs.los, &mut rngs.shadowing);
        let log = MetricsLog::new(RunMeta::from_scenario(scenario, tb_size));
        Ok(Self {
            clock: SimClock { slot: 0, slot_ms: scenario.slot_ms() },
            rb_buf: vec![0.0; channel.n_rb],
            scenario: scenario.clone(),
            rngs,
            channel,
            traffic,
            strategy,
            tb_size,
            rlc: RlcBuffer::default(),
            q2_tbs: 0,
            link,
            active: None,
            pending_feedback: None,
            pending_decision: None,
            frame: None,
            next_tb_id: 0,
            harq_entries: 0,
            log,
        })
    }

    fn queue_state(&self) -> QueueState {
        QueueState {
            q1_bytes: self.rlc.bytes(),
            q2_tbs: self.q2_tbs,
            z: self.strategy.controller().map_or(0.0, |c| c.state.z),
        }
    }

    fn invariant(&self, message: impl Into<String>) -> SimError {
        SimError::Invariant { slot: self.clock.slot, message: message.into() }
    }

    /// Closes the running frame and opens a new one at the current state.
    fn frame_boundary(&mut self) {
        let now = self.queue_state();
        self.close_frame(now);
        self.frame = Some(OpenFrame {
            start_slot: self.clock.slot,
            before: now,
            events: FrameEvents::new(select_queue(&now)),
        });
    }

    fn close_frame(&mut self, after: QueueState) {
        if let Some(f) = self.frame.take() {
            self.log.frames.push(FrameRecord {
                start_slot: f.start_slot,
                end_slot: self.clock.slot,
                served: f.events.served,
                q1_before: f.before.q1_bytes,
                q2_before: f.before.q2_tbs,
                arrivals_bytes: f.events.arrivals_bytes,
                tb_served_bytes: f.events.tb_served_bytes,
                entered_harq: f.events.entered_harq,
                harq_resolved: f.events.harq_resolved,
                q1_after: after.q1_bytes,
                q2_after: after.q2_tbs,
            });
        }
    }

    fn frame_events(&mut self) -> Option<&mut FrameEvents> {
        self.frame.as_mut().map(|f| &mut f.events)
    }

    /// Decoded or dropped: release packets, update Q2 and the controller.
    fn complete(&mut self, mut active: ActiveTb, decoded: bool) {
        let slot = self.clock.slot;
        let tb = &mut active.tb;
        tb.status = if decoded { TbStatus::Decoded } else { TbStatus::Dropped };
        if active.in_harq {
            self.q2_tbs -= 1;
            if let Some(ev) = self.frame_events() {
                ev.harq_resolved = true;
            }
        }
        let deliver_slot = tb.decode_slot.map(|d| d + 1);
        for seg in &tb.segments {
            let rec = &mut self.log.packets[seg.packet_id as usize];
            if decoded {
                self.log.totals.delivered_bytes += u64::from(seg.bytes);
                if seg.last && rec.fate == PacketFate::Pending {
                    rec.fate = PacketFate::Delivered;
                    rec.delivery_slot = deliver_slot;
                }
            } else {
                self.log.totals.dropped_bytes += u64::from(seg.bytes);
                if rec.fate == PacketFate::Pending {
                    rec.fate = PacketFate::Dropped;
                    rec.delivery_slot = None;
                }
            }
        }
        let zeta = if active.cluster_index == 0 { 0.0 } else { active.last_risk };
        let zeta_o = self.scenario.zeta_o;
        let total = tb.total_rtx;
        if let Some(c) = self.strategy.controller_mut() {
            c.state.record_completion(total, zeta, zeta_o);
        }
        self.log.tbs.push(TbSummary::from_record(tb, slot));
    }

    fn step_feedback(&mut self) -> Result<(), SimError> {
        let now = self.clock.slot;
        let Some(ev) = self.pending_feedback.filter(|e| e.processed_at_slot() == now) else {
            return Ok(());
        };
        self.pending_feedback = None;
        let mut active = self.active.take().ok_or_else(|| self.invariant("feedback without active TB"))?;
        match handle_feedback(&ev, &active.tb, self.scenario.r_max_total, self.strategy.cluster_limit())? {
            NextAction::Decoded => self.complete(active, true),
            NextAction::Drop => {
                if ev.cluster_index == 0 && !active.in_harq {
                    active.in_harq = true;
                    self.q2_tbs += 1;
                    self.harq_entries += 1;
                    if let Some(f) = self.frame_events() {
                        f.entered_harq = true;
                    }
                }
                self.complete(active, false)
            }
            NextAction::Decide { cluster_index } => {
                if ev.cluster_index == 0 {
                    active.in_harq = true;
                    self.q2_tbs += 1;
                    self.harq_entries += 1;
                    if let Some(f) = self.frame_events() {
                        f.entered_harq = true;
                    }
                }
                self.active = Some(active);
                self.pending_decision = Some(cluster_index);
            }
        }
        Ok(())
    }

    fn step_decision(&mut self) -> Result<(), SimError> {
        let Some(cluster_index) = self.pending_decision.take() else {
            return Ok(());
        };
        self.frame_boundary();
        let now = self.clock.slot;
        let queue = self.queue_state();
        let active = self.active.as_ref().ok_or_else(|| self.invariant("decision without active TB"))?;
        let ctx = DecisionContext {
            queue,
            cluster_index,
            rtx_so_far: active.tb.total_rtx,
            accumulated_sinr_linear: active.tb.sinr.accumulated_sinr_linear,
            sinr_target_db: self.scenario.sinr_target_db,
            slot: now,
        };
        let outcome = self.strategy.decide(&ctx)?;
        let (zeta_bar, f_obj) =
            self.strategy.controller().map_or((0.0, 0.0), |c| (c.state.zeta_bar, c.state.f_obj_running));
        self.log.decisions.push(DecisionRecord {
            slot: now,
            tb_id: active.tb.tb_id,
            cluster_index,
            r: outcome.decision.r().unwrap_or(0),
            rtx_so_far: ctx.rtx_so_far,
            accumulated_sinr_db: linear_to_db(ctx.accumulated_sinr_linear),
            q1_bytes: queue.q1_bytes,
            q2_tbs: queue.q2_tbs,
            z: queue.z,
            zeta_bar,
            f_obj_running: f_obj,
            risk_estimate: match &outcome.decision {
                Decision::Cluster(d) => d.risk_estimate,
                Decision::Drop => 1.0,
            },
            scores: outcome
                .scores
                .iter()
                .map(|s| ScoreRecord { r: s.r, gamma: s.gamma, risk: s.risk_estimate })
                .collect(),
        });
        match outcome.decision {
            Decision::Drop => {
                let active = self.active.take().expect("checked above");
                self.complete(active, false);
            }
            Decision::Cluster(d) => {
                let (k1, l12, budget) = (self.scenario.k1_slots, self.scenario.l12_slots, self.scenario.r_max_total);
                let active = self.active.as_mut().expect("checked above");
                active.schedule = schedule_cluster(&mut active.tb, d, now, k1, l12, budget)?;
                active.cluster_index = d.cluster_index;
                active.last_risk = d.risk_estimate;
            }
        }
        Ok(())
    }

    fn step_transmit(&mut self) -> Result<Option<f64>, SimError> {
        let now = self.clock.slot;
        let Some(active) = self.active.as_mut() else {
            return Ok(None);
        };
        if !active.schedule.tx_slots.contains(&now) {
            return Ok(None);
        }
        self.channel.fill_rb_sinr(&self.link, &mut self.rb_buf, &mut self.rngs.fading);
        let out = transmit(&mut active.tb, &self.rb_buf, self.channel.beta, self.channel.sinr_target_db, now)?;
        if let TxOutcome::Useful { increment, .. } = out {
            if let Some(c) = self.strategy.controller_mut() {
                c.state.increments.observe(increment);
            }
        }
        let active = self.active.as_ref().expect("present");
        if now + 1 == active.schedule.tx_slots.end {
            self.pending_feedback = Some(FeedbackEvent {
                tb_id: active.tb.tb_id,
                cluster_index: active.cluster_index,
                ack: active.tb.is_decoded(),
                deliver_at_slot: active.schedule.feedback_slot,
            });
        }
        Ok(Some(active.tb.sinr.accumulated_sinr_linear))
    }

    fn step_arrivals(&mut self) -> u64 {
        let now = self.clock.slot;
        let mut bytes = 0;
        for p in self.traffic.step(now, &mut self.rngs.traffic) {
            bytes += u64::from(p.size_bytes);
            self.rlc.push(&p);
            self.log.packets.push(PacketRecord {
                id: p.id,
                size_bytes: p.size_bytes,
                arrival_slot: p.arrival_slot,
                delivery_slot: None,
                fate: PacketFate::Pending,
            });
        }
        self.log.totals.generated_bytes += bytes;
        if let Some(f) = self.frame_events() {
            f.arrivals_bytes += bytes;
        }
        bytes
    }

    fn step_build(&mut self) -> Result<(), SimError> {
        if self.active.is_some() || self.rlc.is_empty() {
            return Ok(());
        }
        self.frame_boundary();
        let now = self.clock.slot;
        let (k1, l12, budget) = (self.scenario.k1_slots, self.scenario.l12_slots, self.scenario.r_max_total);
        let mut tb = build_tb(&mut self.rlc, self.tb_size, now, l12, self.next_tb_id)?;
        self.next_tb_id += 1;
        if let Some(f) = self.frame_events() {
            f.tb_served_bytes = u64::from(tb.payload_bytes);
        }
        let c0 = ClusterDecision { cluster_index: 0, r: 1, decided_at_slot: now, risk_estimate: 0.0 };
        let schedule = schedule_cluster(&mut tb, c0, now, k1, l12, budget)?;
        self.active = Some(ActiveTb { tb, schedule, cluster_index: 0, in_harq: false, last_risk: 0.0 });
        Ok(())
    }

    /// Advances one slot.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.harq_entries = 0;
        self.step_feedback()?;
        self.step_decision()?;
        let sinr = self.step_transmit()?;
        let arrived = self.step_arrivals();
        self.step_build()?;
        if let Some(c) = self.strategy.controller_mut() {
            let window = c.params.arrival_window_slots;
            c.state.record_arrivals(arrived, self.harq_entries, window);
        }
        let q = self.queue_state();
        let in_flight = self.active.as_ref().map_or(0, |a| u32::from(a.in_harq));
        if q.q2_tbs != in_flight {
            return Err(self.invariant(format!("Q2 = {} but {} HARQ processes in flight", q.q2_tbs, in_flight)));
        }
        self.log.slots.push(SlotRecord {
            slot: self.clock.slot,
            q1_bytes: q.q1_bytes,
            q2_tbs: q.q2_tbs,
            z: q.z,
            distance_m: self.link.distance_m,
            is_los: self.link.is_los,
            shadowing_db: self.link.shadowing_db,
            tx: sinr.is_some(),
            effective_sinr_db: sinr.map(linear_to_db),
        });
        let next = ue_position(&self.scenario, self.clock.slot + 1);
        self.link = self.channel.sample_link_state(&self.link, next, &mut self.rngs.los, &mut self.rngs.shadowing);
        self.clock.tick();
        Ok(())
    }

    /// Runs the remaining slots and returns the finished log.
    pub fn finish(mut self) -> Result<MetricsLog, SimError> {
        while self.clock.slot < self.scenario.sim_slots {
            self.step()?;
        }
        let end = self.queue_state();
        self.close_frame(end);
        self.log.totals.queued_bytes = self.rlc.bytes();
        self.log.totals.in_flight_bytes = self.active.as_ref().map_or(0, |a| u64::from(a.tb.payload_bytes));
        self.log.totals.generated_packets = self.traffic.generated();
        for p in self.log.packets.iter_mut().filter(|p| p.fate == PacketFate::Pending) {
            p.fate = PacketFate::Censored;
        }
        self.log.final_controller = self.strategy.controller().map(|c| ControllerSnapshot {
            z: c.state.z,
            zeta_bar: c.state.zeta_bar,
            f_obj_running: c.state.f_obj_running,
            tb_count: c.state.tb_count,
        });
        Ok(self.log)
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn link(&self) -> &LinkState {
        &self.link
    }
}

/// Runs one scenario to completion.
pub fn run(scenario: &Scenario) -> Result<MetricsLog, SimError> {
    Simulation::new(scenario)?.finish()
}

/// Runs with explicit stream seeds (stream isolation tests).
pub fn run_with_streams(scenario: &Scenario, seeds: StreamSeeds) -> Result<MetricsLog, SimError> {
    Simulation::with_streams(scenario, RngStreams::with_seeds(seeds))?.finish()
}

fn run_caught(s: &Scenario) -> Result<MetricsLog, SimError> {
    catch_unwind(AssertUnwindSafe(|| run(s))).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(SimError::Panic(msg))
    })
}

/// Runs every scenario in order on the calling thread.
pub fn run_many_sequential(scenarios: &[Scenario]) -> Vec<Result<MetricsLog, SimError>> {
    scenarios.iter().map(run_caught).collect()
}

/// Runs scenarios on up to `parallelism` threads; output order matches input
/// and each entry is identical to what [`run`] returns for that scenario.
#[cfg(feature = "parallel")]
pub fn run_many(scenarios: &[Scenario], parallelism: usize) -> Vec<Result<MetricsLog, SimError>> {
    use rayon::prelude::*;
    if parallelism <= 1 || scenarios.len() <= 1 {
        return run_many_sequential(scenarios);
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| scenarios.par_iter().map(run_caught).collect()),
        Err(_) => run_many_sequential(scenarios),
    }
}

/// Sequential fallback when the `parallel` feature is disabled.
#[cfg(not(feature = "parallel"))]
pub fn run_many(scenarios: &[Scenario], _parallelism: usize) -> Vec<Result<MetricsLog, SimError>> {
    run_many_sequential(scenarios)
}
