//! Run log, summary statistics and CSV export.
//!
//! Conventions: latency quantiles use the nearest-rank rule
//! (`x[ceil(p*n) - 1]` of the sorted series) and the latency standard deviation
//! is the population one. A packet is delivered at the end of the slot in
//! which its last byte is decoded, so latency is
//! `(decode_slot + 1 - arrival_slot) * slot_ms`.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controller::{check_slater_bound, SlaterParams, SlaterReport};
use crate::mac::{ServeChoice, TbRecord, TbStatus};
use crate::scenario::Scenario;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scenario_digest: String,
    pub seed: u64,
    pub strategy: String,
    pub v_param: f64,
    pub sim_slots: u64,
    pub slot_ms: f64,
    pub tb_size_bytes: u32,
    pub sinr_target_db: f64,
    pub zeta_o: f64,
    pub r_max_total: u32,
    pub quantile_rule: String,
    pub std_rule: String,
}

impl RunMeta {
    pub fn from_scenario(s: &Scenario, tb_size_bytes: u32) -> Self {
        Self {
            scenario_digest: s.digest(),
            seed: s.seed,
            strategy: s.strategy.to_string(),
            v_param: s.v_param,
            sim_slots: s.sim_slots,
            slot_ms: s.slot_ms(),
            tb_size_bytes,
            sinr_target_db: s.sinr_target_db,
            zeta_o: s.zeta_o,
            r_max_total: s.r_max_total,
            quantile_rule: "nearest-rank".into(),
            std_rule: "population".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PacketFate {
    Pending,
    Delivered,
    Dropped,
    /// Still queued or in flight when the run ended.
    Censored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub id: u64,
    pub size_bytes: u32,
    pub arrival_slot: u64,
    pub delivery_slot: Option<u64>,
    pub fate: PacketFate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbSummary {
    pub tb_id: u64,
    pub payload_bytes: u32,
    pub packets: u32,
    pub built_slot: u64,
    pub first_tx_slot: u64,
    pub decode_slot: Option<u64>,
    /// Slot in which the gNB learned the outcome (ACK, or drop).
    pub completion_slot: u64,
    pub status: TbStatus,
    pub allocated: u32,
    pub needed: u32,
    pub cluster_sizes: Vec<u32>,
    pub cluster_starts: Vec<u64>,
}

impl TbSummary {
    pub fn from_record(tb: &TbRecord, completion_slot: u64) -> Self {
        Self {
            tb_id: tb.tb_id,
            payload_bytes: tb.payload_bytes,
            packets: tb.segments.len() as u32,
            built_slot: tb.built_slot,
            first_tx_slot: tb.first_tx_slot,
            decode_slot: tb.decode_slot,
            completion_slot,
            status: tb.status,
            allocated: tb.total_rtx,
            needed: if tb.status == TbStatus::Dropped { tb.total_rtx } else { tb.needed_rtx },
            cluster_sizes: tb.clusters.iter().map(|c| c.decision.r).collect(),
            cluster_starts: tb.clusters.iter().map(|c| c.start_slot).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub r: u32,
    pub gamma: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub slot: u64,
    pub tb_id: u64,
    pub cluster_index: u32,
    /// Chosen cluster size, 0 for a drop.
    pub r: u32,
    pub rtx_so_far: u32,
    pub accumulated_sinr_db: f64,
    pub q1_bytes: u64,
    pub q2_tbs: u32,
    pub z: f64,
    pub zeta_bar: f64,
    pub f_obj_running: f64,
    pub risk_estimate: f64,
    pub scores: Vec<ScoreRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub start_slot: u64,
    pub end_slot: u64,
    pub served: ServeChoice,
    pub q1_before: u64,
    pub q2_before: u32,
    pub arrivals_bytes: u64,
    pub tb_served_bytes: u64,
    pub entered_harq: bool,
    pub harq_resolved: bool,
    pub q1_after: u64,
    pub q2_after: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: u64,
    pub q1_bytes: u64,
    pub q2_tbs: u32,
    pub z: f64,
    pub distance_m: f64,
    pub is_los: bool,
    pub shadowing_db: f64,
    pub tx: bool,
    /// Accumulated effective SINR of the TB after this slot's transmission.
    pub effective_sinr_db: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub generated_packets: u64,
    pub generated_bytes: u64,
    pub delivered_bytes: u64,
    pub dropped_bytes: u64,
    pub queued_bytes: u64,
    pub in_flight_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSnapshot {
    pub z: f64,
    pub zeta_bar: f64,
    pub f_obj_running: f64,
    pub tb_count: u64,
}

/// Everything recorded during one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub meta: RunMeta,
    pub packets: Vec<PacketRecord>,
    pub tbs: Vec<TbSummary>,
    pub decisions: Vec<DecisionRecord>,
    pub frames: Vec<FrameRecord>,
    pub slots: Vec<SlotRecord>,
    pub totals: Totals,
    pub final_controller: Option<ControllerSnapshot>,
}

impl MetricsLog {
    pub fn new(meta: RunMeta) -> Self {
        Self {
            meta,
            packets: Vec::new(),
            tbs: Vec::new(),
            decisions: Vec::new(),
            frames: Vec::new(),
            slots: Vec::new(),
            totals: Totals::default(),
            final_controller: None,
        }
    }

    /// SHA-256 over the JSON encoding of the whole log.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("log serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Needed over allocated transmissions across completed TBs.
pub fn resource_efficiency(log: &MetricsLog) -> Option<f64> {
    let (needed, allocated) = log
        .tbs
        .iter()
        .fold((0u64, 0u64), |(n, a), t| (n + u64::from(t.needed), a + u64::from(t.allocated)));
    (allocated > 0).then(|| needed as f64 / allocated as f64)
}

/// Mean transmissions per completed TB.
pub fn f_obj(log: &MetricsLog) -> Option<f64> {
    if log.tbs.is_empty() {
        return None;
    }
    // running mean, same arithmetic as the controller's
    let mut m = 0.0;
    for (i, t) in log.tbs.iter().enumerate() {
        m += (f64::from(t.allocated) - m) / (i + 1) as f64;
    }
    Some(m)
}

/// Latency of each delivered packet in ms, in arrival order.
pub fn ran_latency_series(log: &MetricsLog) -> Vec<f64> {
    log.packets
        .iter()
        .filter_map(|p| p.delivery_slot.map(|d| (d - p.arrival_slot) as f64 * log.meta.slot_ms))
        .collect()
}

/// Nearest-rank quantile.
pub fn outage_latency(series: &[f64], level: f64) -> Option<f64> {
    if series.is_empty() || !(level > 0.0 && level < 1.0) {
        return None;
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(quantile_sorted(&sorted, level))
}

fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let rank = ((level * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// `(value, cumulative fraction)` at every distinct value.
pub fn latency_cdf(series: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &x) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => out.push((x, frac)),
        }
    }
    out
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `Q1 / tb_size + Q2` per slot, in TB-equivalents.
pub fn queue_series(log: &MetricsLog) -> Vec<f64> {
    let tb = f64::from(log.meta.tb_size_bytes.max(1));
    log.slots.iter().map(|s| s.q1_bytes as f64 / tb + f64::from(s.q2_tbs)).collect()
}

/// Queue-bound diagnostic using the per-frame squared queue changes.
pub fn slater_report(log: &MetricsLog, c: f64, epsilon: f64) -> SlaterReport {
    let tb = f64::from(log.meta.tb_size_bytes.max(1));
    let zeta_o = log.meta.zeta_o;
    let mut sq: Vec<f64> = log
        .frames
        .iter()
        .map(|f| {
            let d1 = (f.q1_after as f64 - f.q1_before as f64) / tb;
            let d2 = f64::from(f.q2_after) - f64::from(f.q2_before);
            d1 * d1 + d2 * d2
        })
        .collect();
    if let Some(ctrl) = log.final_controller {
        sq.push((ctrl.zeta_bar - zeta_o).powi(2));
    }
    let p = SlaterParams { c, epsilon, v: log.meta.v_param, delta_f: f64::from(log.meta.r_max_total.saturating_sub(1)) };
    check_slater_bound(&queue_series(log), &sq, &p)
}

/// Per-run summary; one row of summary.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub strategy: String,
    pub seed: String,
    pub v_param: f64,
    pub packets_generated: u64,
    pub packets_delivered: u64,
    pub packets_dropped: u64,
    pub packets_censored: u64,
    pub app_loss: f64,
    pub mean_latency_ms: f64,
    pub std_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p90_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub resource_efficiency: f64,
    pub f_obj: f64,
    pub mean_queue_tb: f64,
    pub tbs_completed: u64,
    pub tbs_dropped: u64,
    pub zeta_bar: f64,
    pub z_final: f64,
    pub z_per_slot: f64,
}

pub fn summarize(log: &MetricsLog) -> SummaryReport {
    let lat = ran_latency_series(log);
    let mut sorted = lat.clone();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| if sorted.is_empty() { f64::NAN } else { quantile_sorted(&sorted, p) };
    let count = |fate: PacketFate| log.packets.iter().filter(|p| p.fate == fate).count() as u64;
    let (delivered, dropped, censored) =
        (count(PacketFate::Delivered), count(PacketFate::Dropped), count(PacketFate::Censored));
    let exited = delivered + dropped;
    let (mean, std) = mean_std(&lat);
    let (mean_queue, _) = mean_std(&queue_series(log));
    let ctrl = log.final_controller;
    SummaryReport {
        strategy: log.meta.strategy.clone(),
        seed: log.meta.seed.to_string(),
        v_param: log.meta.v_param,
        packets_generated: log.packets.len() as u64,
        packets_delivered: delivered,
        packets_dropped: dropped,
        packets_censored: censored,
        app_loss: if exited > 0 { dropped as f64 / exited as f64 } else { 0.0 },
        mean_latency_ms: mean,
        std_latency_ms: std,
        p50_latency_ms: q(0.5),
        p90_latency_ms: q(0.9),
        p95_latency_ms: q(0.95),
        p99_latency_ms: q(0.99),
        resource_efficiency: resource_efficiency(log).unwrap_or(f64::NAN),
        f_obj: f_obj(log).unwrap_or(f64::NAN),
        mean_queue_tb: mean_queue,
        tbs_completed: log.tbs.len() as u64,
        tbs_dropped: log.tbs.iter().filter(|t| t.status == TbStatus::Dropped).count() as u64,
        zeta_bar: ctrl.map_or(f64::NAN, |c| c.zeta_bar),
        z_final: ctrl.map_or(f64::NAN, |c| c.z),
        z_per_slot: ctrl.map_or(f64::NAN, |c| c.z / log.meta.sim_slots.max(1) as f64),
    }
}

/// Mean and population-std rows over several summaries of one strategy.
pub fn aggregate(rows: &[SummaryReport]) -> Option<(SummaryReport, SummaryReport)> {
    let first = rows.first()?;
    macro_rules! agg {
        ($($f:ident),*) => {{
            let mut mean = first.clone();
            let mut std = first.clone();
            $(
                let xs: Vec<f64> = rows.iter().map(|r| r.$f as f64).collect();
                let (m, s) = mean_std(&xs);
                mean.$f = m as _;
                std.$f = s as _;
            )*
            (mean, std)
        }};
    }
    let (mut mean, mut std) = agg!(
        v_param, app_loss, mean_latency_ms, std_latency_ms, p50_latency_ms, p90_latency_ms, p95_latency_ms,
        p99_latency_ms, resource_efficiency, f_obj, mean_queue_tb, zeta_bar, z_final, z_per_slot
    );
    let counts = |f: fn(&SummaryReport) -> u64| rows.iter().map(f).sum::<u64>() / rows.len() as u64;
    mean.packets_generated = counts(|r| r.packets_generated);
    mean.packets_delivered = counts(|r| r.packets_delivered);
    mean.packets_dropped = counts(|r| r.packets_dropped);
    mean.packets_censored = counts(|r| r.packets_censored);
    mean.tbs_completed = counts(|r| r.tbs_completed);
    mean.tbs_dropped = counts(|r| r.tbs_dropped);
    for c in [&mut std.packets_generated, &mut std.packets_delivered, &mut std.packets_dropped] {
        *c = 0;
    }
    std.packets_censored = 0;
    std.tbs_completed = 0;
    std.tbs_dropped = 0;
    mean.seed = "mean".into();
    std.seed = "std".into();
    Some((mean, std))
}

/// One row of vsweep.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VSweepRow {
    pub v_param: f64,
    pub seed: u64,
    pub f_obj: f64,
    pub resource_efficiency: f64,
    pub mean_queue_tb: f64,
    pub p90_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub zeta_bar: f64,
    pub z_final: f64,
}

impl VSweepRow {
    pub fn from_log(log: &MetricsLog) -> Self {
        let s = summarize(log);
        Self {
            v_param: log.meta.v_param,
            seed: log.meta.seed,
            f_obj: s.f_obj,
            resource_efficiency: s.resource_efficiency,
            mean_queue_tb: s.mean_queue_tb,
            p90_latency_ms: s.p90_latency_ms,
            p95_latency_ms: s.p95_latency_ms,
            zeta_bar: s.zeta_bar,
            z_final: s.z_final,
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, MetricsError> {
    let file = File::create(path).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<(), MetricsError> {
    let wrap = |source| MetricsError::Csv { path: path.to_path_buf(), source };
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.serialize(row).map_err(wrap)?;
    }
    w.flush().map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
}

pub const SUMMARY_HEADER: &[&str] = &[
    "strategy", "seed", "v_param", "packets_generated", "packets_delivered", "packets_dropped", "packets_censored",
    "app_loss", "mean_latency_ms", "std_latency_ms", "p50_latency_ms", "p90_latency_ms", "p95_latency_ms",
    "p99_latency_ms", "resource_efficiency", "f_obj", "mean_queue_tb", "tbs_completed", "tbs_dropped", "zeta_bar",
    "z_final", "z_per_slot",
];

pub fn write_summary_csv(path: &Path, rows: &[SummaryReport]) -> Result<(), MetricsError> {
    write_rows(path, SUMMARY_HEADER, rows)
}

pub fn write_latency_cdf(path: &Path, series: &[f64]) -> Result<(), MetricsError> {
    write_rows(path, &["latency_ms", "cumulative_fraction"], latency_cdf(series))
}

pub fn write_mac_delay_trace(path: &Path, log: &MetricsLog) -> Result<(), MetricsError> {
    let ms = log.meta.slot_ms;
    let rows = log.tbs.iter().map(|t| {
        let delay = t.decode_slot.map(|d| (d + 1 - t.first_tx_slot) as f64 * ms);
        let sizes: Vec<String> = t.cluster_sizes.iter().map(u32::to_string).collect();
        (
            t.tb_id,
            t.first_tx_slot as f64 * ms,
            format!("{:?}", t.status).to_lowercase(),
            delay,
            t.allocated,
            t.needed,
            sizes.join("-"),
        )
    });
    write_rows(
        path,
        &["tb_id", "first_tx_ms", "status", "mac_delay_ms", "allocated", "needed", "clusters"],
        rows,
    )
}

pub fn write_controller_trace(path: &Path, log: &MetricsLog) -> Result<(), MetricsError> {
    let rows = log.decisions.iter().map(|d| {
        let gammas: Vec<String> = d.scores.iter().map(|s| format!("{}:{}", s.r, s.gamma)).collect();
        let risks: Vec<String> = d.scores.iter().map(|s| format!("{}:{}", s.r, s.risk)).collect();
        (
            d.slot,
            d.tb_id,
            d.cluster_index,
            d.r,
            d.rtx_so_far,
            d.accumulated_sinr_db,
            d.q1_bytes,
            d.q2_tbs,
            d.z,
            d.zeta_bar,
            d.risk_estimate,
            gammas.join(" "),
            risks.join(" "),
        )
    });
    write_rows(
        path,
        &[
            "slot", "tb_id", "cluster_index", "r", "rtx_so_far", "accumulated_sinr_db", "q1_bytes", "q2_tbs", "z",
            "zeta_bar", "risk_estimate", "gamma_by_r", "risk_by_r",
        ],
        rows,
    )
}

pub fn write_vsweep_csv(path: &Path, rows: &[VSweepRow]) -> Result<(), MetricsError> {
    write_rows(
        path,
        &[
            "v_param", "seed", "f_obj", "resource_efficiency", "mean_queue_tb", "p90_latency_ms", "p95_latency_ms",
            "zeta_bar", "z_final",
        ],
        rows,
    )
}

pub fn write_channel_trace(path: &Path, log: &MetricsLog) -> Result<(), MetricsError> {
    let rows = log.slots.iter().map(|s| {
        (s.slot, s.distance_m, u8::from(s.is_los), s.shadowing_db, s.effective_sinr_db, s.q1_bytes, s.q2_tbs, s.z)
    });
    write_rows(
        path,
        &["slot", "distance_m", "los", "shadowing_db", "effective_sinr_db", "q1_bytes", "q2_tbs", "z"],
        rows,
    )
}

/// Writes the full log as JSON.
pub fn write_log_json(path: &Path, log: &MetricsLog) -> Result<(), MetricsError> {
    let io = |source| MetricsError::Io { path: path.to_path_buf(), source };
    let mut f = File::create(path).map_err(io)?;
    serde_json::to_writer(&mut f, log).map_err(|e| io(e.into()))?;
    f.flush().map_err(io)
}
