//! Scenario configuration.
//!
//! A [`Scenario`] is the complete, immutable description of one simulation run:
//! radio parameters, HARQ timing and budgets, controller knobs, traffic model,
//! mobility and engine settings. It is loaded from a flat TOML key/value file in
//! which every key is optional (absent keys take the defaults below) and unknown
//! keys are rejected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors raised while loading or validating a scenario.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config error: {0}")]
    Schema(String),
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("unsupported numerology {0} (expected 0..=4)")]
    Numerology(u32),
    #[error("invalid strategy `{0}`")]
    Strategy(String),
}

/// HARQ strategy run by the gNB for every transport block.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StrategySpec {
    /// One retransmission per NACK.
    Reactive,
    /// Cluster `c_j` (j >= 1) uses `pattern[j - 1]` consecutive retransmissions.
    Fixed(Vec<u32>),
    /// Drift-plus-penalty controller picks each cluster size.
    Adaptive,
}

impl StrategySpec {
    pub fn name(&self) -> String {
        self.to_string()
    }

    /// File-system friendly label, e.g. `fixed-3-3-3-1`.
    pub fn slug(&self) -> String {
        match self {
            StrategySpec::Reactive => "reactive".into(),
            StrategySpec::Adaptive => "adaptive".into(),
            StrategySpec::Fixed(p) => {
                let parts: Vec<String> = p.iter().map(u32::to_string).collect();
                format!("fixed-{}", parts.join("-"))
            }
        }
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategySpec::Reactive => f.write_str("reactive"),
            StrategySpec::Adaptive => f.write_str("adaptive"),
            StrategySpec::Fixed(p) => {
                let parts: Vec<String> = p.iter().map(u32::to_string).collect();
                write!(f, "fixed({})", parts.join(","))
            }
        }
    }
}

impl FromStr for StrategySpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "reactive" => return Ok(StrategySpec::Reactive),
            "adaptive" => return Ok(StrategySpec::Adaptive),
            _ => {}
        }
        let inner = t
            .strip_prefix("fixed(")
            .and_then(|rest| rest.strip_suffix(')'))
            .ok_or_else(|| ConfigError::Strategy(s.to_string()))?;
        let pattern = inner
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| ConfigError::Strategy(s.to_string()))?;
        if pattern.is_empty() {
            return Err(ConfigError::Strategy(s.to_string()));
        }
        Ok(StrategySpec::Fixed(pattern))
    }
}

impl Serialize for StrategySpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StrategySpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Arrival process inside an ON period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalProcess {
    /// Poisson(lambda_on) packets per slot.
    Poisson,
    /// Exactly one packet per slot.
    Deterministic,
}

/// When the LOS/NLOS state is redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LosRedraw {
    /// After the UE has moved at least `decorrelation_dist_m`.
    Distance,
    /// Every slot.
    Slot,
}

/// Full simulation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    // radio
    pub fc_ghz: f64,
    pub bw_hz: f64,
    pub numerology: u32,
    pub ptx_dbm: f64,
    pub mcs_index: u32,
    pub modulation_order: u32,
    pub code_rate: f64,
    pub beta_eesm: f64,
    pub sinr_target_db: f64,
    pub utx: u32,
    pub srx: u32,
    pub noise_figure_db: f64,
    pub n_ofdm: u32,

    // HARQ
    pub k1_slots: u64,
    pub l12_slots: u64,
    pub r_max_total: u32,
    pub c_max: u32,
    pub r_min: u32,
    pub r_max_cluster: u32,
    pub strategy: StrategySpec,

    // controller
    pub zeta_o: f64,
    pub v_param: f64,
    /// Bytes per queue unit in the controller state (Q1, Q2 and the TB service).
    pub queue_unit_bytes: f64,
    /// Number of per-retransmission SINR increments kept by the risk estimator.
    pub risk_window: usize,
    /// Observations required before the empirical increment model replaces the Gaussian prior.
    pub risk_min_obs: usize,
    pub risk_prior_mean: f64,
    pub risk_prior_std: f64,
    /// Resampled paths used for the shortfall probability.
    pub risk_paths: usize,
    /// Slots in the sliding window used for mean arrival estimates.
    pub arrival_window_slots: usize,

    // mobility and propagation
    pub d0_m: f64,
    pub velocity_mps: [f64; 2],
    pub d_clutter_m: f64,
    pub clutter_density: f64,
    pub shadowing_sigma_los_db: f64,
    pub shadowing_sigma_nlos_db: f64,
    pub decorrelation_dist_m: f64,
    pub los_redraw: LosRedraw,
    pub fading: bool,
    pub shadowing: bool,

    // traffic
    pub t_on_ms: f64,
    pub t_off_ms: f64,
    pub mean_packet_bytes: f64,
    pub lambda_on: f64,
    pub arrivals: ArrivalProcess,

    // engine
    pub seed: u64,
    pub sim_slots: u64,
}

/// Default decode threshold for MCS 5, see the first-shot BLER test in `engine`.
pub const DEFAULT_SINR_TARGET_DB: f64 = 18.0;

impl Default for Scenario {
    fn default() -> Self {
        Self {
            fc_ghz: 3.5,
            bw_hz: 50e6,
            numerology: 1,
            ptx_dbm: 8.0,
            mcs_index: 5,
            modulation_order: 2,
            code_rate: 0.3701,
            beta_eesm: 1.0,
            sinr_target_db: DEFAULT_SINR_TARGET_DB,
            utx: 16,
            srx: 4,
            noise_figure_db: 5.0,
            n_ofdm: 12,

            k1_slots: 2,
            l12_slots: 2,
            r_max_total: 10,
            c_max: 5,
            r_min: 2,
            r_max_cluster: 5,
            strategy: StrategySpec::Adaptive,

            zeta_o: 0.05,
            v_param: 60.0,
            queue_unit_bytes: 50.0,
            risk_window: 500,
            risk_min_obs: 30,
            risk_prior_mean: 8.0,
            risk_prior_std: 2.0,
            risk_paths: 1000,
            arrival_window_slots: 200,

            d0_m: 110.0,
            velocity_mps: [4.0, 4.0],
            d_clutter_m: 10.0,
            clutter_density: 0.3,
            shadowing_sigma_los_db: 4.0,
            shadowing_sigma_nlos_db: 5.7,
            decorrelation_dist_m: 10.0,
            los_redraw: LosRedraw::Distance,
            fading: true,
            shadowing: true,

            t_on_ms: 2.5,
            t_off_ms: 2.5,
            mean_packet_bytes: 50.0,
            lambda_on: 1.0,
            arrivals: ArrivalProcess::Poisson,

            seed: 1,
            sim_slots: 20_000,
        }
    }
}

/// Slot duration in milliseconds for a 5G NR numerology.
pub fn slot_duration_ms(numerology: u32) -> Result<f64, ConfigError> {
    if numerology > 4 {
        return Err(ConfigError::Numerology(numerology));
    }
    Ok(1.0 / f64::from(1u32 << numerology))
}

/// Sub-carrier spacing in kHz: 15 * 2^numerology.
pub fn subcarrier_spacing_khz(numerology: u32) -> Result<f64, ConfigError> {
    if numerology > 4 {
        return Err(ConfigError::Numerology(numerology));
    }
    Ok(15.0 * f64::from(1u32 << numerology))
}

/// Parses and validates a scenario; absent keys take defaults.
pub fn load_scenario(source: &str) -> Result<Scenario, ConfigError> {
    load_scenario_with_overrides(source, &[])
}

/// Like [`load_scenario`] but applies `key=value` overrides on top of the file.
///
/// Override values are parsed as TOML values, falling back to a bare string so
/// that `strategy=adaptive` works without quoting.
pub fn load_scenario_with_overrides(
    source: &str,
    overrides: &[(String, String)],
) -> Result<Scenario, ConfigError> {
    let mut table: toml::Table = source.parse().map_err(|e: toml::de::Error| parse_error(source, &e))?;
    for (key, raw) in overrides {
        table.insert(key.trim().to_string(), parse_override_value(raw));
    }
    let scenario: Scenario = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Schema(e.message().to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}

/// Splits a CLI `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.to_string()))?;
    if k.trim().is_empty() {
        return Err(ConfigError::Override(s.to_string()));
    }
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn parse_error(source: &str, e: &toml::de::Error) -> ConfigError {
    let line = e
        .span()
        .map(|span| source[..span.start.min(source.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    ConfigError::Parse {
        line,
        message: e.message().to_string(),
    }
}

impl Scenario {
    /// Serializes to the same flat TOML schema accepted by [`load_scenario`].
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes to toml")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn slot_ms(&self) -> f64 {
        slot_duration_ms(self.numerology).expect("validated numerology")
    }

    pub fn scs_hz(&self) -> f64 {
        subcarrier_spacing_khz(self.numerology).expect("validated numerology") * 1e3
    }

    /// Resource blocks (12 sub-carriers each) fitting in the bandwidth.
    pub fn n_rb(&self) -> usize {
        ((self.bw_hz / (12.0 * self.scs_hz())).floor() as usize).max(1)
    }

    pub fn rb_bandwidth_hz(&self) -> f64 {
        12.0 * self.scs_hz()
    }

    /// Slots per millisecond-denominated duration.
    pub fn ms_to_slots(&self, ms: f64) -> f64 {
        ms / self.slot_ms()
    }

    /// Returns a copy with another strategy.
    pub fn with_strategy(&self, strategy: StrategySpec) -> Self {
        Self { strategy, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_v(&self, v_param: f64) -> Self {
        Self { v_param, ..self.clone() }
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} must be strictly positive (got {v})"));
            }
        };
        positive("fc_ghz", self.fc_ghz);
        positive("bw_hz", self.bw_hz);
        positive("code_rate", self.code_rate);
        positive("beta_eesm", self.beta_eesm);
        positive("d0_m", self.d0_m);
        positive("d_clutter_m", self.d_clutter_m);
        positive("decorrelation_dist_m", self.decorrelation_dist_m);
        positive("t_on_ms", self.t_on_ms);
        positive("t_off_ms", self.t_off_ms);
        positive("mean_packet_bytes", self.mean_packet_bytes);
        positive("queue_unit_bytes", self.queue_unit_bytes);
        positive("risk_prior_mean", self.risk_prior_mean);
        positive("risk_prior_std", self.risk_prior_std);

        if self.numerology > 4 {
            errs.push(format!("numerology {} out of range [0,4]", self.numerology));
        }
        if !(1..=12).contains(&self.n_ofdm) {
            errs.push("n_ofdm out of range [1,12]".to_string());
        }
        if self.modulation_order == 0 {
            errs.push("modulation_order must be >= 1".to_string());
        }
        if self.code_rate > 1.0 {
            errs.push("code_rate must be <= 1".to_string());
        }
        if self.utx == 0 || self.srx == 0 {
            errs.push("utx and srx must be >= 1".to_string());
        }
        if self.r_max_total < 1 {
            errs.push("r_max_total must be >= 1".to_string());
        }
        if self.c_max < 1 {
            errs.push("c_max must be >= 1".to_string());
        }
        if self.r_min < 1 {
            errs.push("r_min must be >= 1".to_string());
        }
        if self.r_min > self.r_max_cluster {
            errs.push(format!(
                "r_min ({}) must not exceed r_max_cluster ({})",
                self.r_min, self.r_max_cluster
            ));
        }
        if !(self.zeta_o > 0.0 && self.zeta_o < 1.0) {
            errs.push(format!("zeta_o must lie in (0,1) (got {})", self.zeta_o));
        }
        if !(self.v_param.is_finite() && self.v_param >= 0.0) {
            errs.push(format!("v_param must be >= 0 (got {})", self.v_param));
        }
        if !(self.clutter_density > 0.0 && self.clutter_density < 1.0) {
            errs.push(format!(
                "clutter_density must lie in (0,1) (got {})",
                self.clutter_density
            ));
        }
        if !(self.lambda_on.is_finite() && self.lambda_on >= 0.0) {
            errs.push(format!("lambda_on must be >= 0 (got {})", self.lambda_on));
        }
        for (name, v) in [
            ("shadowing_sigma_los_db", self.shadowing_sigma_los_db),
            ("shadowing_sigma_nlos_db", self.shadowing_sigma_nlos_db),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} must be >= 0 (got {v})"));
            }
        }
        for (name, v) in [
            ("ptx_dbm", self.ptx_dbm),
            ("sinr_target_db", self.sinr_target_db),
            ("noise_figure_db", self.noise_figure_db),
            ("velocity_mps[0]", self.velocity_mps[0]),
            ("velocity_mps[1]", self.velocity_mps[1]),
        ] {
            if !v.is_finite() {
                errs.push(format!("{name} must be finite"));
            }
        }
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 || self.sim_slots > i64::MAX as u64 {
            errs.push("seed and sim_slots must fit in a signed 64-bit integer".to_string());
        }
        if self.risk_window == 0 {
            errs.push("risk_window must be >= 1".to_string());
        }
        if self.risk_paths == 0 {
            errs.push("risk_paths must be >= 1".to_string());
        }
        if self.arrival_window_slots == 0 {
            errs.push("arrival_window_slots must be >= 1".to_string());
        }
        if let StrategySpec::Fixed(pattern) = &self.strategy {
            errs.extend(self.pattern_violations(pattern));
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    fn pattern_violations(&self, pattern: &[u32]) -> Vec<String> {
        let mut errs = Vec::new();
        if pattern.is_empty() {
            errs.push("fixed pattern must not be empty".to_string());
            return errs;
        }
        let sum: u64 = pattern.iter().map(|&r| u64::from(r)).sum();
        if sum > u64::from(self.r_max_total) {
            errs.push(format!(
                "fixed pattern sums to {sum}, exceeding r_max_total {}",
                self.r_max_total
            ));
        }
        let last = pattern.len() - 1;
        for (i, &r) in pattern.iter().enumerate() {
            let in_range = (self.r_min..=self.r_max_cluster).contains(&r);
            // a shorter terminal cluster may exhaust the budget, e.g. 3-3-3-1
            let terminal_ok = i == last && r >= 1 && r < self.r_min;
            if !in_range && !terminal_ok {
                errs.push(format!(
                    "fixed pattern entry {} = {r} outside [{}, {}]",
                    i + 1,
                    self.r_min,
                    self.r_max_cluster
                ));
            }
        }
        errs
    }
}
