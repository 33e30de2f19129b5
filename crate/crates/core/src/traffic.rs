//! ON/OFF downlink packet source feeding the RLC buffer.
//!
//! Phase durations are exponential in continuous time and the phase is sampled
//! at every slot start, so the long-run ON fraction equals `t_on / (t_on + t_off)`
//! regardless of the slot length.

use rand::Rng;
use rand_distr::{Distribution, Exp, Exp1, Poisson};
use serde::{Deserialize, Serialize};

use crate::scenario::{ArrivalProcess, Scenario};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppPacket {
    pub id: u64,
    pub size_bytes: u32,
    pub arrival_slot: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnOffState {
    pub phase: Phase,
    /// Time until the next phase flip, in (fractional) slots.
    pub slots_remaining: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficParams {
    pub on_mean_slots: f64,
    pub off_mean_slots: f64,
    pub lambda_on: f64,
    pub mean_packet_bytes: f64,
    pub arrivals: ArrivalProcess,
}

impl TrafficParams {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            on_mean_slots: s.ms_to_slots(s.t_on_ms),
            off_mean_slots: s.ms_to_slots(s.t_off_ms),
            lambda_on: s.lambda_on,
            mean_packet_bytes: s.mean_packet_bytes,
            arrivals: s.arrivals,
        }
    }
}

/// Running totals of drawn phase durations (in slots).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseStats {
    pub on_total: f64,
    pub on_count: u64,
    pub off_total: f64,
    pub off_count: u64,
}

#[derive(Debug, Clone)]
pub struct TrafficSource {
    params: TrafficParams,
    state: OnOffState,
    next_id: u64,
    stats: PhaseStats,
}

impl TrafficSource {
    /// Starts in the stationary phase distribution.
    pub fn new<R: Rng + ?Sized>(params: TrafficParams, rng: &mut R) -> Self {
        let p_on = params.on_mean_slots / (params.on_mean_slots + params.off_mean_slots);
        let phase = if rng.random::<f64>() < p_on { Phase::On } else { Phase::Off };
        let mut src = Self {
            params,
            state: OnOffState { phase, slots_remaining: 0.0 },
            next_id: 0,
            stats: PhaseStats::default(),
        };
        src.state.slots_remaining = src.draw_duration(phase, rng);
        src
    }

    pub fn state(&self) -> OnOffState {
        self.state
    }

    pub fn stats(&self) -> PhaseStats {
        self.stats
    }

    /// Packets generated so far.
    pub fn generated(&self) -> u64 {
        self.next_id
    }

    fn draw_duration<R: Rng + ?Sized>(&mut self, phase: Phase, rng: &mut R) -> f64 {
        let mean = match phase {
            Phase::On => self.params.on_mean_slots,
            Phase::Off => self.params.off_mean_slots,
        };
        let e: f64 = Exp1.sample(rng);
        let d = e * mean;
        match phase {
            Phase::On => {
                self.stats.on_total += d;
                self.stats.on_count += 1;
            }
            Phase::Off => {
                self.stats.off_total += d;
                self.stats.off_count += 1;
            }
        }
        d
    }

    /// Advances one slot and returns the packets arriving in it.
    pub fn step<R: Rng + ?Sized>(&mut self, slot: u64, rng: &mut R) -> Vec<AppPacket> {
        while self.state.slots_remaining <= 0.0 {
            let next = match self.state.phase {
                Phase::On => Phase::Off,
                Phase::Off => Phase::On,
            };
            self.state.phase = next;
            self.state.slots_remaining += self.draw_duration(next, rng);
        }
        let mut out = Vec::new();
        if self.state.phase == Phase::On {
            let n = match self.params.arrivals {
                ArrivalProcess::Deterministic => 1,
                ArrivalProcess::Poisson if self.params.lambda_on > 0.0 => {
                    let pois = Poisson::new(self.params.lambda_on).expect("lambda_on > 0");
                    pois.sample(rng) as u64
                }
                ArrivalProcess::Poisson => 0,
            };
            let size = Exp::new(1.0 / self.params.mean_packet_bytes).expect("positive mean");
            for _ in 0..n {
                let bytes: f64 = size.sample(rng);
                out.push(AppPacket {
                    id: self.next_id,
                    size_bytes: (bytes.ceil() as u32).max(1),
                    arrival_slot: slot,
                });
                self.next_id += 1;
            }
        }
        self.state.slots_remaining -= 1.0;
        out
    }
}
