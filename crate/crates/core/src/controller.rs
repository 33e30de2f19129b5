//! Adaptive cluster sizing by drift-plus-penalty minimization.
//!
//! The controller observes the queue state `(Q1, Q2, Z)`, estimates for each
//! candidate cluster size `r` the probability `zeta(r)` that the TB is still
//! below its decode target after `r` more transmissions, and picks the `r`
//! minimizing
//!
//! ```text
//! gamma(r) = V*r + Z*(zeta(r) - zeta_o) + Q1*A1 + Q2*(A2 - (1 - zeta(r)) * tb_units)
//! ```
//!
//! The bound constant `B` is left out since it does not depend on `r`.
//! Queue quantities are expressed in units of `queue_unit_bytes`.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::channel::db_to_linear;
use crate::mac::{ClusterDecision, QueueState};
use crate::scenario::Scenario;
use crate::strategy::{feasible_actions, ActionBounds, DecisionContext};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("no feasible cluster size (rtx so far {rtx_so_far}, budget {budget})")]
    EmptyFeasibleSet { rtx_so_far: u32, budget: u32 },
    #[error("cluster size {r} outside the feasible set {lo}..={hi}")]
    Infeasible { r: u32, lo: u32, hi: u32 },
    #[error("non-finite score for r={0}")]
    NonFinite(u32),
}

/// `0.5 * (Q1^2 + Q2^2 + Z^2)`.
pub fn lyapunov_value(q1: f64, q2: f64, z: f64) -> f64 {
    0.5 * (q1 * q1 + q2 * q2 + z * z)
}

/// `max(Z + zeta_bar - zeta_o, 0)`.
pub fn virtual_queue_step(z: f64, zeta_bar: f64, zeta_o: f64) -> f64 {
    (z + zeta_bar - zeta_o).max(0.0)
}

/// Empirical distribution of per-transmission effective SINR gains (linear).
///
/// Until `min_obs` gains have been observed a Gaussian prior is used.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementModel {
    window: VecDeque<f64>,
    capacity: usize,
    min_obs: usize,
    prior_mean: f64,
    prior_std: f64,
    paths: usize,
    seed: u64,
}

impl IncrementModel {
    pub fn new(capacity: usize, min_obs: usize, prior_mean: f64, prior_std: f64, paths: usize, seed: u64) -> Self {
        Self {
            window: VecDeque::with_capacity(capacity.max(1)),
            capacity: capacity.max(1),
            min_obs,
            prior_mean,
            prior_std,
            paths: paths.max(1),
            seed,
        }
    }

    /// Model that always uses the given sample set.
    pub fn empirical(samples: &[f64], paths: usize, seed: u64) -> Self {
        let mut m = Self::new(samples.len().max(1), 0, 1.0, 1.0, paths, seed);
        for &s in samples {
            m.observe(s);
        }
        m
    }

    /// Model that always uses the Gaussian prior.
    pub fn gaussian(mean: f64, std: f64) -> Self {
        Self::new(1, usize::MAX, mean, std, 1, 0)
    }

    pub fn observe(&mut self, increment: f64) {
        if !increment.is_finite() {
            return;
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(increment.max(0.0));
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn is_empirical(&self) -> bool {
        !self.window.is_empty() && self.window.len() >= self.min_obs
    }

    /// Shortfall probability `P[sum of r gains < gap]`.
    pub fn risk(&self, gap: f64, r: u32) -> f64 {
        if r == 0 {
            return if gap > 0.0 { 1.0 } else { 0.0 };
        }
        self.risk_profile(gap, r)[r as usize - 1]
    }

    /// Shortfall probabilities for `r = 1..=r_max` (index `r - 1`).
    ///
    /// Exact when the prior is active or the `n^r` outcome space is small,
    /// otherwise Monte-Carlo over `paths` fixed-seed resampled paths that are
    /// shared across `r`. The profile is forced non-increasing in `r`.
    pub fn risk_profile(&self, gap: f64, r_max: u32) -> Vec<f64> {
        let r_max = r_max as usize;
        if gap <= 0.0 {
            return vec![0.0; r_max];
        }
        let mut out = Vec::with_capacity(r_max);
        if !self.is_empirical() {
            for r in 1..=r_max {
                out.push(gaussian_shortfall(self.prior_mean, self.prior_std, gap, r as f64));
            }
        } else {
            let samples: Vec<f64> = self.window.iter().copied().collect();
            let n = samples.len();
            let mut mc: Option<Vec<f64>> = None;
            for r in 1..=r_max {
                let exact_size = (n as f64).powi(r as i32);
                let p = if exact_size <= self.paths as f64 {
                    exact_shortfall(&samples, gap, r)
                } else {
                    let paths = mc.get_or_insert_with(|| self.mc_profile(&samples, gap, r_max));
                    paths[r - 1]
                };
                out.push(p);
            }
        }
        for i in 1..out.len() {
            out[i] = out[i].min(out[i - 1]);
        }
        out.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        out
    }

    fn mc_profile(&self, samples: &[f64], gap: f64, r_max: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut fails = vec![0u64; r_max];
        for _ in 0..self.paths {
            let mut sum = 0.0;
            // draw every step so that paths stay aligned across gaps
            for f in fails.iter_mut() {
                sum += samples[rng.random_range(0..samples.len())];
                *f += u64::from(sum < gap);
            }
        }
        fails.iter().map(|&f| f as f64 / self.paths as f64).collect()
    }
}

fn gaussian_shortfall(mean: f64, std: f64, gap: f64, r: f64) -> f64 {
    let mu = r * mean;
    let sd = std * r.sqrt();
    if sd <= 0.0 {
        return if mu < gap { 1.0 } else { 0.0 };
    }
    Normal::new(mu, sd).map(|n| n.cdf(gap)).unwrap_or(if mu < gap { 1.0 } else { 0.0 })
}

/// Enumerates all `n^r` ordered outcomes.
fn exact_shortfall(samples: &[f64], gap: f64, r: usize) -> f64 {
    fn rec(samples: &[f64], gap: f64, depth: usize, sum: f64) -> u64 {
        if depth == 0 {
            return u64::from(sum < gap);
        }
        samples.iter().map(|&s| rec(samples, gap, depth - 1, sum + s)).sum()
    }
    let total = (samples.len() as f64).powi(r as i32);
    rec(samples, gap, r, 0.0) as f64 / total
}

/// State-dependent inputs of the score, all in queue units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreInputs {
    pub v: f64,
    pub z: f64,
    pub zeta_o: f64,
    pub q1: f64,
    pub q2: f64,
    pub a1_hat: f64,
    pub a2_hat: f64,
    /// Queue units drained when the HARQ process decodes.
    pub tb_units: f64,
}

/// Score of one candidate cluster size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionScore {
    pub r: u32,
    pub gamma: f64,
    pub risk_estimate: f64,
    /// Expected Q2 service in queue units.
    pub expected_service: f64,
}

pub fn gamma_score(inp: &ScoreInputs, r: u32, risk: f64) -> ActionScore {
    let b2 = (1.0 - risk) * inp.tb_units;
    let gamma = inp.v * f64::from(r)
        + inp.z * (risk - inp.zeta_o)
        + inp.q1 * inp.a1_hat
        + inp.q2 * (inp.a2_hat - b2);
    ActionScore { r, gamma, risk_estimate: risk, expected_service: b2 }
}

/// Index of the smallest score, ties going to the earliest entry.
pub fn argmin_first(scores: &[ActionScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            Some(b) if s.gamma >= scores[b].gamma => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub v: f64,
    pub zeta_o: f64,
    pub bounds: ActionBounds,
    pub queue_unit_bytes: f64,
    pub tb_size_bytes: f64,
    pub arrival_window_slots: usize,
}

impl ControllerParams {
    pub fn from_scenario(s: &Scenario, tb_size_bytes: u32) -> Self {
        Self {
            v: s.v_param,
            zeta_o: s.zeta_o,
            bounds: ActionBounds::from_scenario(s),
            queue_unit_bytes: s.queue_unit_bytes,
            tb_size_bytes: f64::from(tb_size_bytes),
            arrival_window_slots: s.arrival_window_slots.max(1),
        }
    }

    pub fn tb_units(&self) -> f64 {
        self.tb_size_bytes / self.queue_unit_bytes
    }
}

/// Mutable controller state carried across one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub z: f64,
    pub zeta_bar: f64,
    pub f_obj_running: f64,
    pub tb_count: u64,
    pub increments: IncrementModel,
    arrivals: VecDeque<(f64, f64)>,
    arrival_sums: (f64, f64),
}

impl ControllerState {
    pub fn new(increments: IncrementModel) -> Self {
        Self {
            z: 0.0,
            zeta_bar: 0.0,
            f_obj_running: 0.0,
            tb_count: 0,
            increments,
            arrivals: VecDeque::new(),
            arrival_sums: (0.0, 0.0),
        }
    }

    /// Adds one slot of arrivals: Q1 bytes and newly failed initial transmissions.
    pub fn record_arrivals(&mut self, q1_bytes: u64, harq_entries: u32, window: usize) {
        let entry = (q1_bytes as f64, f64::from(harq_entries));
        self.arrivals.push_back(entry);
        self.arrival_sums.0 += entry.0;
        self.arrival_sums.1 += entry.1;
        while self.arrivals.len() > window {
            let (a, b) = self.arrivals.pop_front().expect("non-empty");
            self.arrival_sums.0 -= a;
            self.arrival_sums.1 -= b;
        }
    }

    /// Mean per-slot arrivals `(bytes into Q1, TBs into Q2)` over the window.
    pub fn arrival_means(&self) -> (f64, f64) {
        if self.arrivals.is_empty() {
            return (0.0, 0.0);
        }
        let n = self.arrivals.len() as f64;
        (self.arrival_sums.0.max(0.0) / n, self.arrival_sums.1.max(0.0) / n)
    }

    /// Books a completed (decoded or dropped) TB and advances `Z`.
    pub fn record_completion(&mut self, total_rtx: u32, zeta_realized: f64, zeta_o: f64) {
        self.tb_count += 1;
        let n = self.tb_count as f64;
        self.zeta_bar += (zeta_realized.clamp(0.0, 1.0) - self.zeta_bar) / n;
        self.f_obj_running += (f64::from(total_rtx) - self.f_obj_running) / n;
        self.z = virtual_queue_step(self.z, self.zeta_bar, zeta_o);
    }
}

/// Controller: parameters plus running state.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub params: ControllerParams,
    pub state: ControllerState,
}

/// Outcome of one decision with the full score table.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChoice {
    pub decision: ClusterDecision,
    pub scores: Vec<ActionScore>,
}

impl Controller {
    pub fn new(params: ControllerParams, increments: IncrementModel) -> Self {
        Self { params, state: ControllerState::new(increments) }
    }

    pub fn from_scenario(s: &Scenario, tb_size_bytes: u32, seed: u64) -> Self {
        let model = IncrementModel::new(
            s.risk_window,
            s.risk_min_obs,
            s.risk_prior_mean,
            s.risk_prior_std,
            s.risk_paths,
            seed,
        );
        Self::new(ControllerParams::from_scenario(s, tb_size_bytes), model)
    }

    /// Score inputs for the observed queue state.
    pub fn score_inputs(&self, q: &QueueState) -> ScoreInputs {
        let unit = self.params.queue_unit_bytes;
        let tb_units = self.params.tb_units();
        let (a1, a2) = self.state.arrival_means();
        ScoreInputs {
            v: self.params.v,
            z: self.state.z,
            zeta_o: self.params.zeta_o,
            q1: q.q1_bytes as f64 / unit,
            q2: f64::from(q.q2_tbs) * tb_units,
            a1_hat: a1 / unit,
            a2_hat: a2 * tb_units,
            tb_units,
        }
    }

    /// Shortfall estimate for `r` more transmissions from the context's SINR.
    pub fn estimate_risk(&self, ctx: &DecisionContext, r: u32) -> f64 {
        let gap = db_to_linear(ctx.sinr_target_db) - ctx.accumulated_sinr_linear;
        self.state.increments.risk(gap, r)
    }

    /// Exhaustive argmin over the feasible set; ties go to the smallest `r`.
    pub fn choose_action(&self, ctx: &DecisionContext) -> Result<ActionChoice, ControllerError> {
        let feasible = feasible_actions(ctx.rtx_so_far, &self.params.bounds);
        let (lo, hi) = match (feasible.first(), feasible.last()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => {
                return Err(ControllerError::EmptyFeasibleSet {
                    rtx_so_far: ctx.rtx_so_far,
                    budget: self.params.bounds.r_max_total,
                })
            }
        };
        let gap = db_to_linear(ctx.sinr_target_db) - ctx.accumulated_sinr_linear;
        let profile = self.state.increments.risk_profile(gap, hi);
        let inputs = self.score_inputs(&ctx.queue);
        let scores: Vec<ActionScore> = (lo..=hi)
            .map(|r| gamma_score(&inputs, r, profile[r as usize - 1]))
            .collect();
        if let Some(bad) = scores.iter().find(|s| !s.gamma.is_finite()) {
            return Err(ControllerError::NonFinite(bad.r));
        }
        let best = scores[argmin_first(&scores).expect("non-empty")];
        Ok(ActionChoice {
            decision: ClusterDecision {
                cluster_index: ctx.cluster_index,
                r: best.r,
                decided_at_slot: ctx.slot,
                risk_estimate: best.risk_estimate,
            },
            scores,
        })
    }

    /// Scores a single candidate, rejecting infeasible ones.
    pub fn score(&self, ctx: &DecisionContext, r: u32) -> Result<ActionScore, ControllerError> {
        let feasible = feasible_actions(ctx.rtx_so_far, &self.params.bounds);
        if !feasible.contains(&r) {
            let lo = feasible.first().copied().unwrap_or(0);
            let hi = feasible.last().copied().unwrap_or(0);
            return Err(ControllerError::Infeasible { r, lo, hi });
        }
        Ok(gamma_score(&self.score_inputs(&ctx.queue), r, self.estimate_risk(ctx, r)))
    }
}

/// User-supplied constants of the queue bound `(B + C + V*delta_f) / eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlaterParams {
    pub c: f64,
    pub epsilon: f64,
    pub v: f64,
    pub delta_f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlaterReport {
    pub time_avg_queue: f64,
    pub b_hat: f64,
    pub bound: f64,
    pub satisfied: bool,
}

/// Time-averaged `Q1 + Q2` against the Slater-type bound.
///
/// `b_hat` is half the mean of the squared per-frame queue increments
/// `(A_i - b_i)^2` summed with the squared risk excursion `(zeta - zeta_o)^2`.
pub fn check_slater_bound(queue_series: &[f64], sq_increments: &[f64], p: &SlaterParams) -> SlaterReport {
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let time_avg_queue = mean(queue_series);
    let b_hat = 0.5 * mean(sq_increments);
    let bound = if p.epsilon > 0.0 { (b_hat + p.c + p.v * p.delta_f) / p.epsilon } else { f64::INFINITY };
    SlaterReport { time_avg_queue, b_hat, bound, satisfied: time_avg_queue <= bound }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bounds() -> ActionBounds {
        ActionBounds { r_min: 2, r_max_cluster: 5, r_max_total: 10 }
    }

    fn params(v: f64) -> ControllerParams {
        ControllerParams {
            v,
            zeta_o: 0.05,
            bounds: bounds(),
            queue_unit_bytes: 1850.0,
            tb_size_bytes: 1850.0,
            arrival_window_slots: 200,
        }
    }

    fn ctx(q1: u64, q2: u32, rtx: u32, acc: f64, target_db: f64) -> DecisionContext {
        DecisionContext {
            queue: QueueState { q1_bytes: q1, q2_tbs: q2, z: 0.0 },
            cluster_index: 1,
            rtx_so_far: rtx,
            accumulated_sinr_linear: acc,
            sinr_target_db: target_db,
            slot: 0,
        }
    }

    #[test]
    fn lyapunov_examples() {
        assert_eq!(lyapunov_value(0.0, 0.0, 0.0), 0.0);
        assert_eq!(lyapunov_value(3.0, 4.0, 0.0), 12.5);
        assert_eq!(lyapunov_value(1.0, 2.0, 3.0), 7.0);
    }

    #[test]
    fn virtual_queue_examples() {
        assert_eq!(virtual_queue_step(0.0, 0.05, 0.05), 0.0);
        assert!((virtual_queue_step(1.0, 0.25, 0.05) - 1.2).abs() <= 1e-9 * 1.2);
        assert!((virtual_queue_step(0.1, 0.0, 0.05) - 0.05).abs() <= 1e-9 * 0.05);
    }

    #[test]
    fn risk_examples() {
        let m = IncrementModel::empirical(&[1.0, 3.0], 1000, 0);
        assert_eq!(m.risk(4.5, 2), 0.75);
        assert_eq!(m.risk(-1.0, 2), 0.0);
        assert_eq!(m.risk(0.0, 1), 0.0);
        let d = IncrementModel::empirical(&[2.0], 1000, 0);
        assert_eq!(d.risk(5.0, 2), 1.0);
        let g = IncrementModel::gaussian(2.0, 0.0);
        assert_eq!(g.risk(5.0, 2), 1.0);
        assert_eq!(g.risk(5.0, 3), 0.0);
        let g = IncrementModel::gaussian(1.0, 1.0);
        assert!((g.risk(2.0, 2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prior_until_enough_observations() {
        let mut m = IncrementModel::new(500, 3, 10.0, 0.0, 1000, 0);
        m.observe(1.0);
        m.observe(1.0);
        assert!(!m.is_empirical());
        assert_eq!(m.risk(5.0, 1), 0.0);
        m.observe(1.0);
        assert!(m.is_empirical());
        assert_eq!(m.risk(5.0, 1), 1.0);
    }

    #[test]
    fn window_is_bounded() {
        let mut m = IncrementModel::new(4, 0, 1.0, 1.0, 100, 0);
        for i in 0..10 {
            m.observe(f64::from(i));
        }
        assert_eq!(m.len(), 4);
        assert_eq!(m.risk(6.0, 1), 0.0);
    }

    #[test]
    fn monte_carlo_agrees_with_exact() {
        let samples: Vec<f64> = (0..50).map(|i| f64::from(i % 7) + 0.5).collect();
        let mc = IncrementModel::empirical(&samples, 200_000, 3);
        for r in 2..=3 {
            let exact = exact_shortfall(&samples, 9.0, r);
            let est = mc.risk_profile(9.0, 3)[r - 1];
            assert!((est - exact).abs() < 0.01, "r={r}: {est} vs {exact}");
        }
    }

    #[test]
    fn worked_score_example() {
        // Q2 = 2 TB units, Z = 0.5, V = 10, no arrivals, tb_units = 1
        let inp = ScoreInputs { v: 10.0, z: 0.5, zeta_o: 0.05, q1: 0.0, q2: 2.0, a1_hat: 0.0, a2_hat: 0.0, tb_units: 1.0 };
        let s2 = gamma_score(&inp, 2, 0.6);
        let s3 = gamma_score(&inp, 3, 0.2);
        assert!((s2.gamma - 19.475).abs() < 1e-9 * 19.475);
        assert!((s3.gamma - 28.475).abs() < 1e-9 * 28.475);
        assert_eq!(argmin_first(&[s2, s3]), Some(0));
    }

    #[test]
    fn all_zero_scores_pick_smallest() {
        let c = Controller::new(params(0.0), IncrementModel::gaussian(1.0, 1.0));
        let choice = c.choose_action(&ctx(0, 0, 1, 0.0, 0.0)).unwrap();
        assert!(choice.scores.windows(2).all(|w| w[0].gamma == w[1].gamma));
        assert_eq!(choice.decision.r, 2);
    }

    #[test]
    fn doubling_v_adds_v_times_r() {
        let inp = ScoreInputs { v: 7.0, z: 1.3, zeta_o: 0.05, q1: 2.0, q2: 1.0, a1_hat: 0.1, a2_hat: 0.2, tb_units: 1.0 };
        let inp2 = ScoreInputs { v: 14.0, ..inp };
        for r in 1..=5 {
            let d = gamma_score(&inp2, r, 0.3).gamma - gamma_score(&inp, r, 0.3).gamma;
            assert!((d - 7.0 * f64::from(r)).abs() < 1e-9);
        }
    }

    #[test]
    fn large_z_picks_max_and_large_v_picks_min() {
        let model = IncrementModel::gaussian(1.0, 0.5);
        let mut c = Controller::new(params(0.0), model.clone());
        c.state.z = 1e6;
        // gap of 4 linear units; risk strictly decreasing in r
        let x = ctx(0, 1, 1, 0.0, 10.0 * 4f64.log10());
        assert_eq!(c.choose_action(&x).unwrap().decision.r, 5);
        let c = Controller::new(params(1e6), model);
        assert_eq!(c.choose_action(&x).unwrap().decision.r, 2);
    }

    #[test]
    fn budget_limits_choice() {
        let mut c = Controller::new(params(0.0), IncrementModel::gaussian(1.0, 0.5));
        c.state.z = 1e6;
        let x = ctx(0, 1, 7, 0.0, 10.0 * 2.5f64.log10());
        let choice = c.choose_action(&x).unwrap();
        assert_eq!(choice.scores.iter().map(|s| s.r).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(choice.decision.r, 3);
        let single = c.choose_action(&ctx(0, 1, 9, 0.0, 20.0)).unwrap();
        assert_eq!(single.decision.r, 1);
        assert!(matches!(
            c.choose_action(&ctx(0, 1, 10, 0.0, 20.0)),
            Err(ControllerError::EmptyFeasibleSet { .. })
        ));
        assert!(matches!(c.score(&x, 4), Err(ControllerError::Infeasible { .. })));
    }

    #[test]
    fn vacuous_risk_and_zero_v_maximize_service() {
        let mut p = params(0.0);
        p.zeta_o = 1.0;
        let c = Controller::new(p, IncrementModel::gaussian(1.0, 0.5));
        let x = ctx(3000, 1, 1, 0.0, 10.0 * 4f64.log10());
        let choice = c.choose_action(&x).unwrap();
        let max_service = choice.scores.iter().map(|s| s.expected_service).fold(f64::MIN, f64::max);
        assert_eq!(choice.decision.r, 5);
        assert_eq!(choice.scores.last().unwrap().expected_service, max_service);
    }

    #[test]
    fn completion_updates_running_means() {
        let mut st = ControllerState::new(IncrementModel::gaussian(1.0, 1.0));
        st.record_completion(1, 0.0, 0.05);
        st.record_completion(5, 0.3, 0.05);
        assert_eq!(st.tb_count, 2);
        assert!((st.zeta_bar - 0.15).abs() < 1e-12);
        assert!((st.f_obj_running - 3.0).abs() < 1e-12);
        assert!((st.z - 0.10).abs() < 1e-12);
    }

    #[test]
    fn arrival_window_slides() {
        let mut st = ControllerState::new(IncrementModel::gaussian(1.0, 1.0));
        for i in 0..10u64 {
            st.record_arrivals(i * 10, u32::from(i % 2 == 0), 4);
        }
        let (a1, a2) = st.arrival_means();
        assert!((a1 - 75.0).abs() < 1e-9);
        assert!((a2 - 0.5).abs() < 1e-9);
    }

    #[test]
    fn slater_report() {
        let p = SlaterParams { c: 1.0, epsilon: 0.5, v: 60.0, delta_f: 0.0 };
        let r = check_slater_bound(&[0.0; 10], &[], &p);
        assert_eq!(r.time_avg_queue, 0.0);
        assert!(r.satisfied && r.bound.is_finite());
        let r = check_slater_bound(&[1.0, 3.0], &[4.0], &p);
        assert_eq!((r.time_avg_queue, r.b_hat, r.bound), (2.0, 2.0, 6.0));
    }

    /// Independent score and argmin used as the oracle.
    fn brute_force(c: &Controller, x: &DecisionContext) -> u32 {
        let b = c.params.bounds;
        let remaining = b.r_max_total - x.rtx_so_far;
        let candidates: Vec<u32> =
            if remaining < b.r_min { vec![remaining] } else { (b.r_min..=b.r_max_cluster.min(remaining)).collect() };
        let unit = c.params.queue_unit_bytes;
        let tb_units = c.params.tb_size_bytes / unit;
        let (a1, a2) = c.state.arrival_means();
        let gap = 10f64.powf(x.sinr_target_db / 10.0) - x.accumulated_sinr_linear;
        let mut best = (f64::INFINITY, 0);
        for r in candidates {
            let zeta = c.state.increments.risk(gap, r);
            let g = c.params.v * f64::from(r)
                + c.state.z * (zeta - c.params.zeta_o)
                + (x.queue.q1_bytes as f64 / unit) * (a1 / unit)
                + f64::from(x.queue.q2_tbs) * tb_units * (a2 * tb_units - (1.0 - zeta) * tb_units);
            if g < best.0 {
                best = (g, r);
            }
        }
        best.1
    }

    #[test]
    fn matches_brute_force_on_random_states() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let samples: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random_range(0.0..20.0)).collect();
            let mut p = params(rng.random_range(0.0..120.0));
            p.queue_unit_bytes = rng.random_range(10.0..2000.0);
            let mut c = Controller::new(p, IncrementModel::empirical(&samples, 500, rng.random()));
            c.state.z = rng.random_range(0.0..50.0);
            for _ in 0..rng.random_range(0..300) {
                c.state.record_arrivals(rng.random_range(0..200), u32::from(rng.random_bool(0.1)), 200);
            }
            let x = ctx(
                rng.random_range(0..10_000),
                rng.random_range(1..3),
                rng.random_range(1..10),
                rng.random_range(0.0..30.0),
                rng.random_range(5.0..20.0),
            );
            assert_eq!(c.choose_action(&x).unwrap().decision.r, brute_force(&c, &x));
        }
    }

    proptest! {
        #[test]
        fn argmin_invariant_to_scaling(k in 0.01f64..100.0, v in 0.0f64..100.0, z in 0.0f64..100.0,
                                       q1 in 0.0f64..400.0, q2 in 0.0f64..3.0,
                                       risks in proptest::collection::vec(0.0f64..1.0, 1..5)) {
            let mut risks = risks;
            risks.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let inp = ScoreInputs { v, z, zeta_o: 0.05, q1, q2, a1_hat: 0.3, a2_hat: 0.1, tb_units: 1.0 };
            let scaled = ScoreInputs { v: k * v, z: k * z, q1: k * q1, q2: k * q2, ..inp };
            let a: Vec<ActionScore> = risks.iter().enumerate().map(|(i, &p)| gamma_score(&inp, i as u32 + 2, p)).collect();
            let b: Vec<ActionScore> = risks.iter().enumerate().map(|(i, &p)| gamma_score(&scaled, i as u32 + 2, p)).collect();
            for (sa, sb) in a.iter().zip(&b) {
                prop_assert!((sb.gamma - k * sa.gamma).abs() <= 1e-9 * (1.0 + (k * sa.gamma).abs()));
            }
            let (i, j) = (argmin_first(&a).unwrap(), argmin_first(&b).unwrap());
            prop_assert!((a[i].gamma - a[j].gamma).abs() <= 1e-9 * (1.0 + a[i].gamma.abs()));
        }

        #[test]
        fn added_constant_keeps_argmin(c0 in -1e6f64..1e6, gammas in proptest::collection::vec(-1e3f64..1e3, 1..6)) {
            let scores: Vec<ActionScore> = gammas.iter().enumerate()
                .map(|(i, &g)| ActionScore { r: i as u32 + 1, gamma: g, risk_estimate: 0.0, expected_service: 0.0 })
                .collect();
            let shifted: Vec<ActionScore> = scores.iter().map(|s| ActionScore { gamma: s.gamma + c0, ..*s }).collect();
            let i = argmin_first(&scores).unwrap();
            let j = argmin_first(&shifted).unwrap();
            prop_assert!((scores[i].gamma - scores[j].gamma).abs() < 1e-6);
        }

        #[test]
        fn risk_monotone(samples in proptest::collection::vec(0.0f64..10.0, 1..60), gap in 0.0f64..30.0,
                         dacc in 0.0f64..5.0) {
            let m = IncrementModel::empirical(&samples, 300, 5);
            let prof = m.risk_profile(gap, 5);
            prop_assert!(prof.windows(2).all(|w| w[1] <= w[0]));
            let closer = m.risk_profile(gap - dacc, 5);
            for (a, b) in prof.iter().zip(&closer) {
                prop_assert!(b <= a);
            }
        }
    }
}
