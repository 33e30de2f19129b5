//! Cluster-size strategies: after a NACK on cluster `c_j`, how many
//! consecutive transmissions does cluster `c_{j+1}` get?

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ActionScore, Controller, ControllerError};
use crate::mac::{ClusterDecision, QueueState};
use crate::scenario::{Scenario, StrategySpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("decision requested before the initial transmission (rtx_so_far = 0)")]
    NoInitialTransmission,
    #[error("decision requested for cluster index 0")]
    ClusterZero,
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// Everything a strategy may look at when sizing the next cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionContext {
    pub queue: QueueState,
    /// Index of the cluster being sized (>= 1).
    pub cluster_index: u32,
    pub rtx_so_far: u32,
    pub accumulated_sinr_linear: f64,
    pub sinr_target_db: f64,
    pub slot: u64,
}

impl DecisionContext {
    fn check(&self) -> Result<(), StrategyError> {
        if self.rtx_so_far == 0 {
            return Err(StrategyError::NoInitialTransmission);
        }
        if self.cluster_index == 0 {
            return Err(StrategyError::ClusterZero);
        }
        Ok(())
    }
}

/// Per-cluster and per-TB transmission limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub r_min: u32,
    pub r_max_cluster: u32,
    pub r_max_total: u32,
}

impl ActionBounds {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self { r_min: s.r_min, r_max_cluster: s.r_max_cluster, r_max_total: s.r_max_total }
    }
}

/// Cluster sizes allowed after `rtx_so_far` transmissions, ascending.
///
/// When fewer than `r_min` transmissions remain the only option is the
/// remainder; with nothing left the set is empty.
pub fn feasible_actions(rtx_so_far: u32, b: &ActionBounds) -> Vec<u32> {
    let remaining = b.r_max_total.saturating_sub(rtx_so_far);
    if remaining == 0 {
        Vec::new()
    } else if remaining < b.r_min {
        vec![remaining]
    } else {
        (b.r_min.max(1)..=b.r_max_cluster.min(remaining)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Cluster(ClusterDecision),
    Drop,
}

impl Decision {
    pub fn r(&self) -> Option<u32> {
        match self {
            Decision::Cluster(d) => Some(d.r),
            Decision::Drop => None,
        }
    }
}

fn cluster(ctx: &DecisionContext, r: u32, risk: f64) -> Decision {
    Decision::Cluster(ClusterDecision {
        cluster_index: ctx.cluster_index,
        r,
        decided_at_slot: ctx.slot,
        risk_estimate: risk,
    })
}

/// One retransmission per NACK while budget remains.
pub fn reactive_decide(ctx: &DecisionContext, r_max_total: u32) -> Decision {
    if ctx.rtx_so_far >= r_max_total {
        Decision::Drop
    } else {
        cluster(ctx, 1, 0.0)
    }
}

/// `pattern[c - 1]`, clipped to the remaining budget; drop past the pattern.
pub fn fixed_decide(ctx: &DecisionContext, pattern: &[u32], r_max_total: u32) -> Decision {
    let remaining = r_max_total.saturating_sub(ctx.rtx_so_far);
    let Some(&want) = pattern.get(ctx.cluster_index as usize - 1) else {
        return Decision::Drop;
    };
    match want.min(remaining) {
        0 => Decision::Drop,
        r => cluster(ctx, r, 0.0),
    }
}

/// A decision and, for the adaptive strategy, the score of every candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionOutcome {
    pub decision: Decision,
    pub scores: Vec<ActionScore>,
}

/// Strategy instance owned by one run.
#[derive(Debug, Clone)]
pub enum Strategy {
    Reactive { r_max_total: u32 },
    Fixed { pattern: Vec<u32>, r_max_total: u32 },
    Adaptive { controller: Box<Controller>, c_max: u32 },
}

impl Strategy {
    pub fn from_scenario(s: &Scenario, tb_size_bytes: u32, controller_seed: u64) -> Self {
        match &s.strategy {
            StrategySpec::Reactive => Strategy::Reactive { r_max_total: s.r_max_total },
            StrategySpec::Fixed(p) => Strategy::Fixed { pattern: p.clone(), r_max_total: s.r_max_total },
            StrategySpec::Adaptive => Strategy::Adaptive {
                controller: Box::new(Controller::from_scenario(s, tb_size_bytes, controller_seed)),
                c_max: s.c_max,
            },
        }
    }

    /// Highest cluster index after which a NACK drops the TB.
    pub fn cluster_limit(&self) -> Option<u32> {
        match self {
            Strategy::Reactive { .. } => None,
            Strategy::Fixed { pattern, .. } => Some(pattern.len() as u32),
            Strategy::Adaptive { c_max, .. } => Some(*c_max),
        }
    }

    pub fn controller(&self) -> Option<&Controller> {
        match self {
            Strategy::Adaptive { controller, .. } => Some(controller),
            _ => None,
        }
    }

    pub fn controller_mut(&mut self) -> Option<&mut Controller> {
        match self {
            Strategy::Adaptive { controller, .. } => Some(controller),
            _ => None,
        }
    }

    pub fn decide(&self, ctx: &DecisionContext) -> Result<DecisionOutcome, StrategyError> {
        ctx.check()?;
        match self {
            Strategy::Reactive { r_max_total } => {
                Ok(DecisionOutcome { decision: reactive_decide(ctx, *r_max_total), scores: Vec::new() })
            }
            Strategy::Fixed { pattern, r_max_total } => {
                Ok(DecisionOutcome { decision: fixed_decide(ctx, pattern, *r_max_total), scores: Vec::new() })
            }
            Strategy::Adaptive { controller, c_max } => {
                if ctx.cluster_index > *c_max {
                    return Ok(DecisionOutcome { decision: Decision::Drop, scores: Vec::new() });
                }
                match controller.choose_action(ctx) {
                    Ok(choice) => Ok(DecisionOutcome { decision: Decision::Cluster(choice.decision), scores: choice.scores }),
                    Err(ControllerError::EmptyFeasibleSet { .. }) => {
                        Ok(DecisionOutcome { decision: Decision::Drop, scores: Vec::new() })
                    }
                    Err(e) => Err(e.into()),
                }
            }
        }
    }
}
