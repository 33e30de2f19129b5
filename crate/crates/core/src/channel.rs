//! gNB to UE link model: InF-SL path loss and LOS probability, correlated
//! shadowing, per-RB Rayleigh fading, and EESM combining of incremental
//! redundancy retransmissions.
//!
//! All SINR values crossing this module's API are linear unless the name ends
//! in `_db`.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{LosRedraw, Scenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("domain error: {0}")]
    Domain(String),
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

fn check_positive(name: &str, v: f64) -> Result<(), ChannelError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ChannelError::Domain(format!("{name} must be > 0, got {v}")))
    }
}

/// LOS path loss in dB, `d` in meters and `fc` in GHz.
pub fn path_loss_los(d: f64, fc: f64) -> Result<f64, ChannelError> {
    check_positive("distance", d)?;
    check_positive("carrier frequency", fc)?;
    Ok(31.84 + 21.50 * d.log10() + 19.00 * fc.log10())
}

/// NLOS path loss in dB, `d` in meters and `fc` in GHz.
pub fn path_loss_nlos(d: f64, fc: f64) -> Result<f64, ChannelError> {
    check_positive("distance", d)?;
    check_positive("carrier frequency", fc)?;
    Ok(33.0 + 25.50 * d.log10() + 20.00 * fc.log10())
}

/// Clutter scale `k = -d_clutter / ln(1 - density)`.
pub fn clutter_scale(d_clutter: f64, clutter_density: f64) -> Result<f64, ChannelError> {
    if !(clutter_density > 0.0 && clutter_density < 1.0) {
        return Err(ChannelError::Domain(format!(
            "clutter density must lie in (0,1), got {clutter_density}"
        )));
    }
    check_positive("clutter size", d_clutter)?;
    Ok(-d_clutter / (1.0 - clutter_density).ln())
}

/// Probability that the link at distance `d` is in line of sight.
pub fn los_probability(d: f64, d_clutter: f64, clutter_density: f64) -> Result<f64, ChannelError> {
    if !(d >= 0.0) {
        return Err(ChannelError::Domain(format!("distance must be >= 0, got {d}")));
    }
    let k = clutter_scale(d_clutter, clutter_density)?;
    Ok((-d / k).exp())
}

/// One Gudmundson step: `s' = rho*s + sqrt(1 - rho^2) * N(0, sigma^2)` with
/// `rho = exp(-moved / decorrelation)`.
pub fn shadowing_step<R: Rng + ?Sized>(
    s: f64,
    moved_m: f64,
    decorrelation_m: f64,
    sigma_db: f64,
    rng: &mut R,
) -> f64 {
    let rho = (-moved_m / decorrelation_m).exp();
    if rho >= 1.0 {
        return s;
    }
    let z: f64 = StandardNormal.sample(rng);
    rho * s + (1.0 - rho * rho).sqrt() * sigma_db * z
}

/// Current large-scale state of the link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub distance_m: f64,
    pub is_los: bool,
    pub shadowing_db: f64,
    /// UE position relative to the gNB at the origin.
    pub position_m: [f64; 2],
    /// Position where LOS/NLOS was last drawn.
    pub los_anchor_m: [f64; 2],
}

/// Accumulated effective SINR of one transport block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TbSinrState {
    pub accumulated_sinr_linear: f64,
    pub rtx_count: u32,
}

impl TbSinrState {
    /// Folds one more transmission into the state and returns the SINR gain.
    pub fn absorb(&mut self, rb_sinrs: &[f64], beta: f64) -> Result<f64, ChannelError> {
        let before = self.accumulated_sinr_linear;
        self.accumulated_sinr_linear = eesm_combine(rb_sinrs, self, beta)?;
        self.rtx_count += 1;
        Ok(self.accumulated_sinr_linear - before)
    }
}

/// Incremental-redundancy EESM:
/// `-beta * ln( mean_x exp(-(sinr_x + prior) / beta) )`.
///
/// Evaluated around the smallest exponent so that large linear SINRs do not
/// underflow; a single RB (or identical RBs) returns `sinr + prior` exactly.
pub fn eesm_combine(rb_sinrs: &[f64], prior: &TbSinrState, beta: f64) -> Result<f64, ChannelError> {
    if rb_sinrs.is_empty() {
        return Err(ChannelError::Domain("empty RB set".into()));
    }
    check_positive("beta", beta)?;
    let prev = prior.accumulated_sinr_linear;
    if !(prev >= 0.0) {
        return Err(ChannelError::Domain(format!("prior SINR must be >= 0, got {prev}")));
    }
    let s_min = rb_sinrs.iter().copied().fold(f64::INFINITY, f64::min);
    if !s_min.is_finite() || s_min < 0.0 {
        return Err(ChannelError::Domain("RB SINRs must be finite and >= 0".into()));
    }
    let mean = rb_sinrs.iter().map(|&s| (-(s - s_min) / beta).exp()).sum::<f64>() / rb_sinrs.len() as f64;
    Ok(prev + s_min - beta * mean.ln())
}

/// Decode succeeds once the accumulated SINR reaches the target (inclusive).
pub fn decode(tb: &TbSinrState, sinr_target_db: f64) -> bool {
    tb.accumulated_sinr_linear > 0.0 && tb.accumulated_sinr_linear >= db_to_linear(sinr_target_db)
}

/// Link-budget parameters derived once from a [`Scenario`].
#[derive(Debug, Clone)]
pub struct Channel {
    pub fc_ghz: f64,
    pub ptx_dbm: f64,
    pub antenna_gain_db: f64,
    pub noise_dbm: f64,
    pub n_rb: usize,
    pub beta: f64,
    pub sinr_target_db: f64,
    pub clutter_k: f64,
    pub sigma_los_db: f64,
    pub sigma_nlos_db: f64,
    pub decorrelation_m: f64,
    pub los_redraw: LosRedraw,
    pub fading: bool,
    pub shadowing: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl Channel {
    pub fn new(s: &Scenario) -> Result<Self, ChannelError> {
        Ok(Self {
            fc_ghz: s.fc_ghz,
            ptx_dbm: s.ptx_dbm,
            antenna_gain_db: antenna_gain_db(s.utx, s.srx),
            noise_dbm: -174.0 + 10.0 * s.rb_bandwidth_hz().log10() + s.noise_figure_db,
            n_rb: s.n_rb(),
            beta: s.beta_eesm,
            sinr_target_db: s.sinr_target_db,
            clutter_k: clutter_scale(s.d_clutter_m, s.clutter_density)?,
            sigma_los_db: s.shadowing_sigma_los_db,
            sigma_nlos_db: s.shadowing_sigma_nlos_db,
            decorrelation_m: s.decorrelation_dist_m,
            los_redraw: s.los_redraw,
            fading: s.fading,
            shadowing: s.shadowing,
        })
    }

    pub fn los_probability(&self, d: f64) -> f64 {
        (-d.max(0.0) / self.clutter_k).exp()
    }

    pub fn path_loss(&self, link: &LinkState) -> f64 {
        let pl = if link.is_los {
            path_loss_los(link.distance_m, self.fc_ghz)
        } else {
            path_loss_nlos(link.distance_m, self.fc_ghz)
        };
        pl.expect("link distance is positive")
    }

    fn sigma(&self, is_los: bool) -> f64 {
        if !self.shadowing {
            0.0
        } else if is_los {
            self.sigma_los_db
        } else {
            self.sigma_nlos_db
        }
    }

    /// Mean per-RB SINR in dB (no fast fading).
    pub fn link_budget_db(&self, link: &LinkState) -> f64 {
        self.ptx_dbm - self.path_loss(link) - link.shadowing_db + self.antenna_gain_db - self.noise_dbm
    }

    /// First link state at `position`.
    pub fn initial_link_state<R: Rng + ?Sized, S: Rng + ?Sized>(
        &self,
        position: [f64; 2],
        los_rng: &mut R,
        shadow_rng: &mut S,
    ) -> LinkState {
        let distance_m = dist(position, [0.0, 0.0]).max(f64::MIN_POSITIVE);
        let is_los = los_rng.random::<f64>() < self.los_probability(distance_m);
        let sigma = self.sigma(is_los);
        let shadowing_db = if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(shadow_rng);
            sigma * z
        } else {
            0.0
        };
        LinkState {
            distance_m,
            is_los,
            shadowing_db,
            position_m: position,
            los_anchor_m: position,
        }
    }

    /// Moves the UE to `new_position`, redrawing LOS per the persistence rule
    /// and evolving shadowing by the distance travelled.
    pub fn sample_link_state<R: Rng + ?Sized, S: Rng + ?Sized>(
        &self,
        prev: &LinkState,
        new_position: [f64; 2],
        los_rng: &mut R,
        shadow_rng: &mut S,
    ) -> LinkState {
        let moved = dist(prev.position_m, new_position);
        let distance_m = dist(new_position, [0.0, 0.0]).max(f64::MIN_POSITIVE);
        let redraw = match self.los_redraw {
            LosRedraw::Slot => true,
            LosRedraw::Distance => dist(prev.los_anchor_m, new_position) >= self.decorrelation_m,
        };
        let (is_los, los_anchor_m) = if redraw {
            (los_rng.random::<f64>() < self.los_probability(distance_m), new_position)
        } else {
            (prev.is_los, prev.los_anchor_m)
        };
        let sigma = self.sigma(is_los);
        let shadowing_db = if sigma > 0.0 {
            shadowing_step(prev.shadowing_db, moved, self.decorrelation_m, sigma, shadow_rng)
        } else {
            0.0
        };
        LinkState {
            distance_m,
            is_los,
            shadowing_db,
            position_m: new_position,
            los_anchor_m,
        }
    }

    /// Per-RB linear SINR for one slot.
    pub fn per_rb_sinr<R: Rng + ?Sized>(
        &self,
        link: &LinkState,
        n_rb: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>, ChannelError> {
        if n_rb == 0 {
            return Err(ChannelError::Domain("n_rb must be >= 1".into()));
        }
        let mut out = vec![0.0; n_rb];
        self.fill_rb_sinr(link, &mut out, rng);
        Ok(out)
    }

    /// Allocation-free variant of [`Channel::per_rb_sinr`].
    pub fn fill_rb_sinr<R: Rng + ?Sized>(&self, link: &LinkState, out: &mut [f64], rng: &mut R) {
        let mean = db_to_linear(self.link_budget_db(link));
        for x in out.iter_mut() {
            let fade: f64 = if self.fading { Exp1.sample(rng) } else { 1.0 };
            *x = mean * fade;
        }
    }
}

/// Array gain of `utx x srx` elements in dB.
pub fn antenna_gain_db(utx: u32, srx: u32) -> f64 {
    10.0 * (f64::from(utx) * f64::from(srx)).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn path_loss_values() {
        assert!(rel_close(path_loss_los(1.0, 1.0).unwrap(), 31.84, 1e-12));
        assert!((path_loss_los(100.0, 3.5).unwrap() - 85.18).abs() < 5e-3);
        assert!((path_loss_los(110.0, 3.5).unwrap() - 86.07).abs() < 5e-3);
        assert!(rel_close(path_loss_nlos(1.0, 1.0).unwrap(), 33.0, 1e-12));
        assert!((path_loss_nlos(100.0, 3.5).unwrap() - 94.88).abs() < 5e-3);
        assert!(path_loss_los(0.0, 3.5).is_err());
        assert!(path_loss_nlos(10.0, -1.0).is_err());
    }

    #[test]
    fn los_probability_values() {
        assert_eq!(los_probability(0.0, 10.0, 0.3).unwrap(), 1.0);
        let k = clutter_scale(10.0, 0.3).unwrap();
        assert!((k - 28.0367).abs() < 1e-4);
        assert!(rel_close(los_probability(k, 10.0, 0.3).unwrap(), (-1f64).exp(), 1e-12));
        assert!((los_probability(110.0, 10.0, 0.3).unwrap() - 0.0198).abs() < 5e-5);
        assert!(los_probability(1.0, 10.0, 1.0).is_err());
        assert!(los_probability(1.0, 10.0, 0.0).is_err());
    }

    #[test]
    fn antenna_gain() {
        assert!((antenna_gain_db(16, 4) - 18.06).abs() < 5e-3);
    }

    #[test]
    fn eesm_examples() {
        let zero = TbSinrState::default();
        assert_eq!(eesm_combine(&[7.3], &zero, 1.0).unwrap(), 7.3);
        assert_eq!(eesm_combine(&[2.5; 40], &zero, 0.7).unwrap(), 2.5);
        let two = eesm_combine(&[1.0, 3.0], &zero, 1.0).unwrap();
        let oracle = -(((-1f64).exp() + (-3f64).exp()) / 2.0).ln();
        assert!(rel_close(two, oracle, 1e-12));
        assert!((two - 1.5662).abs() < 1e-4);
        assert!(eesm_combine(&[], &zero, 1.0).is_err());
        assert!(eesm_combine(&[1.0], &zero, 0.0).is_err());
        // huge linear SINRs stay finite
        let big = eesm_combine(&[2e4, 3e4, 5e4], &zero, 1.0).unwrap();
        assert!(big.is_finite() && big >= 2e4);
    }

    #[test]
    fn decode_threshold() {
        let at = TbSinrState { accumulated_sinr_linear: db_to_linear(4.2), rtx_count: 1 };
        assert!(decode(&at, 4.2));
        assert!(!decode(&TbSinrState::default(), -30.0));
        let half = TbSinrState { accumulated_sinr_linear: 0.5, rtx_count: 1 };
        assert!((linear_to_db(0.5) - (-3.0103)).abs() < 1e-4);
        assert!(!decode(&half, -3.0));
    }

    #[test]
    fn deterministic_budget_without_randomness() {
        let s = Scenario { fading: false, shadowing: false, ..Scenario::default() };
        let ch = Channel::new(&s).unwrap();
        let link = LinkState {
            distance_m: 1.0,
            is_los: true,
            shadowing_db: 0.0,
            position_m: [1.0, 0.0],
            los_anchor_m: [1.0, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = ch.per_rb_sinr(&link, 8, &mut rng).unwrap();
        let expect = db_to_linear(
            s.ptx_dbm - path_loss_los(1.0, s.fc_ghz).unwrap() + antenna_gain_db(s.utx, s.srx)
                - (-174.0 + 10.0 * s.rb_bandwidth_hz().log10() + s.noise_figure_db),
        );
        assert!(v.iter().all(|&x| rel_close(x, expect, 1e-12)));
        assert!(ch.per_rb_sinr(&link, 0, &mut rng).is_err());
    }

    #[test]
    fn fading_is_unit_mean() {
        let s = Scenario { shadowing: false, ..Scenario::default() };
        let ch = Channel::new(&s).unwrap();
        let link = LinkState {
            distance_m: 50.0,
            is_los: false,
            shadowing_db: 0.0,
            position_m: [50.0, 0.0],
            los_anchor_m: [50.0, 0.0],
        };
        let budget = db_to_linear(ch.link_budget_db(&link));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut acc = 0.0;
        let mut buf = [0.0; 1];
        for _ in 0..n {
            ch.fill_rb_sinr(&link, &mut buf, &mut rng);
            acc += buf[0];
        }
        assert!(rel_close(acc / n as f64, budget, 0.01));
    }

    #[test]
    fn los_draw_frequency_matches_probability() {
        let s = Scenario { los_redraw: LosRedraw::Slot, ..Scenario::default() };
        let ch = Channel::new(&s).unwrap();
        let k = ch.clutter_k;
        let pos = [k, 0.0];
        let mut los_rng = ChaCha8Rng::seed_from_u64(5);
        let mut sh_rng = ChaCha8Rng::seed_from_u64(6);
        let mut link = ch.initial_link_state(pos, &mut los_rng, &mut sh_rng);
        let n = 1_000_000;
        let mut hits = 0u32;
        for _ in 0..n {
            link = ch.sample_link_state(&link, pos, &mut los_rng, &mut sh_rng);
            hits += u32::from(link.is_los);
        }
        let frac = f64::from(hits) / f64::from(n);
        assert!((frac - 0.368).abs() < 0.005, "{frac}");
    }

    #[test]
    fn link_state_limits() {
        let ch = Channel::new(&Scenario::default()).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        let start = ch.initial_link_state([110.0, 0.0], &mut a, &mut b);
        let same = ch.sample_link_state(&start, [110.0, 0.0], &mut a, &mut b);
        assert_eq!(same.shadowing_db, start.shadowing_db);
        assert_eq!(same.distance_m, start.distance_m);
        // far jump: fresh draws, mean ~0 and variance ~sigma^2
        let n = 20_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let l = ch.sample_link_state(&start, [1e6, 0.0], &mut a, &mut b);
            m1 += l.shadowing_db;
            m2 += l.shadowing_db * l.shadowing_db;
        }
        let mean = m1 / n as f64;
        let var = m2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.15);
        assert!(rel_close(var, 5.7 * 5.7, 0.05));
        let moved = ch.sample_link_state(&start, [120.0, 5.0], &mut a, &mut b);
        assert!(rel_close(moved.distance_m, 120f64.hypot(5.0), 1e-12));
        assert_eq!(moved.los_anchor_m, [120.0, 5.0]);
    }

    #[test]
    fn shadowing_preserves_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sigma = 5.7;
        let mut s = 0.0;
        let n = 1_000_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            s = shadowing_step(s, 2.0, 10.0, sigma, &mut rng);
            m1 += s;
            m2 += s * s;
        }
        let mean = m1 / n as f64;
        let var = m2 / n as f64 - mean * mean;
        assert!(rel_close(var, sigma * sigma, 0.05), "{var}");
    }

    proptest! {
        #[test]
        fn nlos_never_below_los(d in 1.0f64..1e4, fc in 1.0f64..100.0) {
            prop_assert!(path_loss_nlos(d, fc).unwrap() >= path_loss_los(d, fc).unwrap());
        }

        #[test]
        fn losses_increase_with_distance_and_frequency(
            d in 0.1f64..1e4, fc in 0.5f64..100.0, dd in 0.01f64..100.0, df in 0.01f64..10.0
        ) {
            prop_assert!(path_loss_los(d + dd, fc).unwrap() > path_loss_los(d, fc).unwrap());
            prop_assert!(path_loss_nlos(d + dd, fc).unwrap() > path_loss_nlos(d, fc).unwrap());
            prop_assert!(path_loss_los(d, fc + df).unwrap() > path_loss_los(d, fc).unwrap());
            prop_assert!(path_loss_nlos(d, fc + df).unwrap() > path_loss_nlos(d, fc).unwrap());
            prop_assert!(los_probability(d + dd, 10.0, 0.3).unwrap() < los_probability(d, 10.0, 0.3).unwrap());
        }

        #[test]
        fn eesm_single_rb_is_additive(s in 0.0f64..1e4, p in 0.0f64..1e4, beta in 0.01f64..50.0) {
            let prior = TbSinrState { accumulated_sinr_linear: p, rtx_count: 1 };
            prop_assert_eq!(eesm_combine(&[s], &prior, beta).unwrap(), s + p);
        }

        #[test]
        fn eesm_is_monotone(
            rbs in proptest::collection::vec(0.0f64..1e3, 1..40),
            extra in 0.0f64..1e3,
            p in 0.0f64..100.0,
            dp in 0.0f64..100.0,
            beta in 0.1f64..10.0,
        ) {
            let prior = TbSinrState { accumulated_sinr_linear: p, rtx_count: 1 };
            let base = eesm_combine(&rbs, &prior, beta).unwrap();
            // raising one RB never lowers the result
            let mut up = rbs.clone();
            up[0] += extra;
            prop_assert!(eesm_combine(&up, &prior, beta).unwrap() >= base - 1e-9 * base.abs().max(1.0));
            let higher = TbSinrState { accumulated_sinr_linear: p + dp, rtx_count: 1 };
            prop_assert!(eesm_combine(&rbs, &higher, beta).unwrap() >= base - 1e-9 * base.abs().max(1.0));
        }
    }
}
