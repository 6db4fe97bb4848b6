//! Expert-utilization records, layer health classification, rebound
//! detection, depth banding and the training memory estimator.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{expert_output_similarity, BlockStack, PairSimilarity};
use crate::numkernel::Matrix;
use crate::routing::LayerLog;

/// Header of the utilization time-series CSV.
pub const CSV_HEADER: &str = "step,layer,expert,count,weight_mass,tokens";

/// Routing statistics of one layer over one logging interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationRecord {
    pub step: usize,
    pub layer: usize,
    pub counts: Vec<u64>,
    pub weight_mass: Vec<f64>,
    pub tokens: u64,
}

impl UtilizationRecord {
    pub fn from_log(step: usize, layer: usize, log: LayerLog) -> Self {
        Self {
            step,
            layer,
            counts: log.counts,
            weight_mass: log.weight_mass,
            tokens: log.tokens,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.counts.len()
    }

    /// Selections per token implied by the counts.
    pub fn top_k(&self) -> Option<u64> {
        let total: u64 = self.counts.iter().sum();
        (self.tokens > 0 && total.is_multiple_of(self.tokens)).then(|| total / self.tokens)
    }

    /// Sums records of one layer, as if the window had been counted directly.
    pub fn merge(records: &[UtilizationRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Argument("cannot merge an empty window".into()))?;
        let mut out = Self {
            step: first.step,
            layer: first.layer,
            counts: vec![0; first.n_experts()],
            weight_mass: vec![0.0; first.n_experts()],
            tokens: 0,
        };
        for r in records {
            if r.layer != out.layer || r.n_experts() != out.n_experts() {
                return Err(Error::Argument(
                    "window mixes layers or expert counts".into(),
                ));
            }
            out.step = out.step.max(r.step);
            for (a, c) in out.counts.iter_mut().zip(&r.counts) {
                *a += c;
            }
            for (a, m) in out.weight_mass.iter_mut().zip(&r.weight_mass) {
                *a += m;
            }
            out.tokens += r.tokens;
        }
        Ok(out)
    }
}

/// Which routing statistic a utilization share is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// How often each expert was selected.
    #[default]
    Counts,
    /// Sum of the gate weights each expert received.
    Mass,
}

/// Per-expert share of the chosen channel.
pub fn shares(rec: &UtilizationRecord, channel: Channel) -> Result<Vec<f64>> {
    if rec.tokens == 0 {
        return Err(Error::Evaluation(format!(
            "layer {} step {}: no tokens observed, utilization undefined",
            rec.layer, rec.step
        )));
    }
    if rec.n_experts() == 0 {
        return Err(Error::Argument("record lists no experts".into()));
    }
    let raw: Vec<f64> = match channel {
        Channel::Counts => rec.counts.iter().map(|&c| c as f64).collect(),
        Channel::Mass => {
            if rec.weight_mass.iter().any(|&m| !(m >= 0.0)) {
                return Err(Error::Evaluation("negative or NaN weight mass".into()));
            }
            rec.weight_mass.clone()
        }
    };
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::Evaluation(format!(
            "layer {} step {}: zero total on the {channel:?} channel",
            rec.layer, rec.step
        )));
    }
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Share of the least-used expert.
pub fn minority_fraction(rec: &UtilizationRecord, channel: Channel) -> Result<f64> {
    Ok(shares(rec, channel)?
        .into_iter()
        .fold(f64::INFINITY, f64::min))
}

/// Population standard deviation of the per-expert shares.
pub fn std_utilization(rec: &UtilizationRecord, channel: Channel) -> Result<f64> {
    let s = shares(rec, channel)?;
    let mean = 1.0 / s.len() as f64;
    Ok((s.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    DeepDeadlock,
    Skewed,
    Healthy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Below this minority fraction a layer is in deep deadlock.
    pub t_dead: f64,
    /// Below this (and at or above `t_dead`) a layer is skewed.
    pub t_skew: f64,
    /// A dipped layer has rebounded once it exceeds this.
    pub t_health: f64,
    /// Consecutive intervals below `t_dead` before a recovery counts as a rebound.
    pub min_dip_intervals: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            t_dead: 0.10,
            t_skew: 0.30,
            t_health: 0.10,
            min_dip_intervals: 2,
        }
    }
}

pub fn classify(fraction: f64, t: &Thresholds) -> Status {
    if fraction < t.t_dead {
        Status::DeepDeadlock
    } else if fraction < t.t_skew {
        Status::Skewed
    } else {
        Status::Healthy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHealth {
    pub layer: usize,
    pub minority_fraction_counts: f64,
    pub minority_fraction_mass: f64,
    pub std: f64,
    pub status: Status,
    /// Per-interval minority fraction on the classification channel.
    pub history: Vec<f64>,
}

/// Classifies a layer from the merged window of its most recent records.
pub fn classify_layer(window: &[UtilizationRecord], cfg: &TelemetryConfig) -> Result<LayerHealth> {
    let merged = UtilizationRecord::merge(window)?;
    let counts = minority_fraction(&merged, Channel::Counts)?;
    let mass = minority_fraction(&merged, Channel::Mass)?;
    let chosen = match cfg.channel {
        Channel::Counts => counts,
        Channel::Mass => mass,
    };
    Ok(LayerHealth {
        layer: merged.layer,
        minority_fraction_counts: counts,
        minority_fraction_mass: mass,
        std: std_utilization(&merged, cfg.channel)?,
        status: classify(chosen, &cfg.thresholds),
        history: window
            .iter()
            .map(|r| minority_fraction(r, cfg.channel))
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReboundKind {
    /// Climbed out of a sustained dip past the health threshold.
    Rebound,
    /// Rose briefly inside a dip and fell back without recovering.
    Oscillation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReboundEvent {
    pub layer: usize,
    pub kind: ReboundKind,
    pub dip_start: usize,
    pub recovery_step: usize,
    pub peak: f64,
}

/// Scans one layer's `(step, minority fraction)` series for rebounds and
/// in-dip oscillations. Series shorter than three intervals yield nothing.
pub fn detect_rebound(layer: usize, series: &[(usize, f64)], t: &Thresholds) -> Vec<ReboundEvent> {
    let mut events = Vec::new();
    let n = series.len();
    if n < 3 {
        return events;
    }
    let f = |i: usize| series[i].1;
    let mut i = 0;
    while i < n {
        if f(i) >= t.t_dead {
            i += 1;
            continue;
        }
        let start = i;
        let mut end = i;
        while end < n && f(end) < t.t_dead {
            end += 1;
        }
        for m in start + 1..end.saturating_sub(1) {
            if f(m) > f(m - 1) && f(m) > f(m + 1) {
                events.push(ReboundEvent {
                    layer,
                    kind: ReboundKind::Oscillation,
                    dip_start: series[start].0,
                    recovery_step: series[m].0,
                    peak: f(m),
                });
            }
        }
        if end - start >= t.min_dip_intervals.max(1) {
            let mut j = end;
            while j < n && f(j) >= t.t_dead && f(j) <= t.t_health {
                j += 1;
            }
            if j < n && f(j) > t.t_health {
                let mut peak = f(j);
                let mut r = j;
                while r < n && f(r) >= t.t_dead {
                    peak = peak.max(f(r));
                    r += 1;
                }
                events.push(ReboundEvent {
                    layer,
                    kind: ReboundKind::Rebound,
                    dip_start: series[start].0,
                    recovery_step: series[j].0,
                    peak,
                });
            }
        }
        i = end;
    }
    events
}

/// Inclusive range of 1-based layer numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub first: usize,
    pub last: usize,
}

impl LayerRange {
    pub const fn new(first: usize, last: usize) -> Self {
        Self { first, last }
    }

    fn contains(&self, layer: usize) -> bool {
        (self.first..=self.last).contains(&layer)
    }
}

/// Shallow / middle / deep split of the stack, in 1-based layer numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bands {
    pub shallow: LayerRange,
    pub mid: LayerRange,
    pub deep: LayerRange,
}

impl Default for Bands {
    /// Layers 1–8 / 9–22 / 23–30 of a 30-block stack.
    fn default() -> Self {
        Self {
            shallow: LayerRange::new(1, 8),
            mid: LayerRange::new(9, 22),
            deep: LayerRange::new(23, 30),
        }
    }
}

impl Bands {
    /// Alternative split 1–10 / 11–17 / 18–30.
    pub fn alternative() -> Self {
        Self {
            shallow: LayerRange::new(1, 10),
            mid: LayerRange::new(11, 17),
            deep: LayerRange::new(18, 30),
        }
    }

    /// The default split rescaled from 30 layers to `layers`.
    pub fn scaled(layers: usize) -> Result<Self> {
        if layers < 3 {
            return Err(Error::Config(format!(
                "{layers} layers cannot form three bands"
            )));
        }
        let cut = |b: usize| ((b * layers + 15) / 30).clamp(1, layers - 1);
        let a = cut(8);
        let b = cut(22).max(a + 1).min(layers - 1);
        Ok(Self {
            shallow: LayerRange::new(1, a),
            mid: LayerRange::new(a + 1, b),
            deep: LayerRange::new(b + 1, layers),
        })
    }

    fn ranges(&self) -> [LayerRange; 3] {
        [self.shallow, self.mid, self.deep]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.ranges();
        if r.iter().any(|b| b.first == 0 || b.first > b.last) {
            return Err(Error::Config(format!(
                "empty or zero-based band in {self:?}"
            )));
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if r[i].first <= r[j].last && r[j].first <= r[i].last {
                    return Err(Error::Config(format!(
                        "bands {:?} and {:?} overlap",
                        r[i], r[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub bands: Bands,
    pub shallow_deadlocks: usize,
    pub mid_deadlocks: usize,
    pub deep_deadlocks: usize,
    pub u_shape: bool,
}

/// Counts deep deadlocks per band; `statuses[i]` is layer `i + 1`.
pub fn band_summary(statuses: &[Status], bands: &Bands) -> Result<BandReport> {
    bands.validate()?;
    let mut counts = [0usize; 3];
    for (i, s) in statuses.iter().enumerate() {
        let layer = i + 1;
        let Some(band) = bands.ranges().iter().position(|b| b.contains(layer)) else {
            return Err(Error::Config(format!(
                "layer {layer} lies outside every band"
            )));
        };
        if *s == Status::DeepDeadlock {
            counts[band] += 1;
        }
    }
    Ok(BandReport {
        bands: *bands,
        shallow_deadlocks: counts[0],
        mid_deadlocks: counts[1],
        deep_deadlocks: counts[2],
        u_shape: counts[0] > counts[1] && counts[2] > counts[1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub layer: usize,
    pub pairs: Vec<PairSimilarity>,
}

/// Routed-expert output similarity for every MoE layer, each fed the same
/// probe tokens (experts are compared with one another, not across layers).
pub fn homogenization_report(
    stack: &BlockStack,
    probe_tokens: &Matrix,
) -> Result<Vec<LayerSimilarity>> {
    let mut out = Vec::new();
    for layer in stack.moe_layers() {
        out.push(LayerSimilarity {
            layer: layer.layer_index,
            pairs: expert_output_similarity(layer, probe_tokens)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TelemetryConfig {
    pub log_interval: usize,
    pub thresholds: Thresholds,
    pub channel: Channel,
    /// Most recent intervals merged when classifying a layer.
    pub window_intervals: usize,
    /// `None` rescales the default bands to the stack depth.
    pub bands: Option<Bands>,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self {
            log_interval: 50,
            thresholds: Thresholds::default(),
            channel: Channel::Counts,
            window_intervals: 4,
            bands: None,
        }
    }
}

impl TelemetryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.log_interval == 0 || self.window_intervals == 0 {
            return Err(Error::Config(
                "log_interval and window_intervals must be positive".into(),
            ));
        }
        let t = &self.thresholds;
        if !(0.0 <= t.t_dead && t.t_dead <= t.t_skew && t.t_skew <= 0.5) {
            return Err(Error::Config(
                "thresholds must satisfy 0 <= t_dead <= t_skew <= 0.5".into(),
            ));
        }
        if let Some(b) = &self.bands {
            b.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub layers: Vec<LayerHealth>,
    pub bands: Option<BandReport>,
    pub rebounds: Vec<ReboundEvent>,
    pub homogenization: Vec<LayerSimilarity>,
}

/// Builds the per-layer health table, band summary and rebound list from a
/// utilization time series.
pub fn build_report(
    records: &[UtilizationRecord],
    cfg: &TelemetryConfig,
    homogenization: Vec<LayerSimilarity>,
) -> Result<Report> {
    cfg.validate()?;
    let n_layers = records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let mut layers = Vec::new();
    let mut rebounds = Vec::new();
    for layer in 0..n_layers {
        let mut series: Vec<&UtilizationRecord> =
            records.iter().filter(|r| r.layer == layer).collect();
        if series.is_empty() {
            continue;
        }
        series.sort_by_key(|r| r.step);
        let window: Vec<UtilizationRecord> = series
            .iter()
            .rev()
            .take(cfg.window_intervals)
            .rev()
            .map(|r| (*r).clone())
            .collect();
        layers.push(classify_layer(&window, cfg)?);
        let fractions = series
            .iter()
            .map(|r| Ok((r.step, minority_fraction(r, cfg.channel)?)))
            .collect::<Result<Vec<_>>>()?;
        rebounds.extend(detect_rebound(layer, &fractions, &cfg.thresholds));
    }
    let bands = if layers.len() == n_layers && n_layers >= 3 {
        let b = match cfg.bands {
            Some(b) => b,
            None => Bands::scaled(n_layers)?,
        };
        let statuses: Vec<Status> = layers.iter().map(|l| l.status).collect();
        Some(band_summary(&statuses, &b)?)
    } else {
        None
    };
    Ok(Report {
        layers,
        bands,
        rebounds,
        homogenization,
    })
}

/// Writes one CSV row per (record, expert), header first.
pub fn write_csv<W: Write>(mut w: W, records: &[UtilizationRecord]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        for (e, (c, m)) in r.counts.iter().zip(&r.weight_mass).enumerate() {
            writeln!(w, "{},{},{},{},{},{}", r.step, r.layer, e, c, m, r.tokens)?;
        }
    }
    Ok(())
}

/// Parses a CSV written by [`write_csv`] back into records.
pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<UtilizationRecord>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Argument(format!(
            "expected CSV header {CSV_HEADER:?}"
        )));
    }
    let mut out: Vec<UtilizationRecord> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Argument(format!("malformed CSV row {}: {line:?}", n + 2));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let step: usize = f[0].parse().map_err(|_| bad())?;
        let layer: usize = f[1].parse().map_err(|_| bad())?;
        let expert: usize = f[2].parse().map_err(|_| bad())?;
        let count: u64 = f[3].parse().map_err(|_| bad())?;
        let mass: f64 = f[4].parse().map_err(|_| bad())?;
        let tokens: u64 = f[5].parse().map_err(|_| bad())?;
        let rec = match out.last_mut() {
            Some(r) if r.step == step && r.layer == layer && r.counts.len() == expert => r,
            _ if expert == 0 => {
                out.push(UtilizationRecord {
                    step,
                    layer,
                    counts: Vec::new(),
                    weight_mass: Vec::new(),
                    tokens,
                });
                out.last_mut().expect("just pushed")
            }
            _ => return Err(bad()),
        };
        rec.counts.push(count);
        rec.weight_mass.push(mass);
    }
    Ok(out)
}

/// Bytes per parameter for each memory column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrecisionPlan {
    pub compute_copy_bytes: f64,
    pub master_bytes: f64,
    pub grad_bytes: f64,
    /// Two optimizer moments at one byte each.
    pub optimizer_bytes: f64,
}

impl Default for PrecisionPlan {
    fn default() -> Self {
        Self {
            compute_copy_bytes: 2.0,
            master_bytes: 4.0,
            grad_bytes: 4.0,
            optimizer_bytes: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentSize {
    /// Trainable parameters: compute copy, master, gradient and optimizer state.
    Trainable { params: f64 },
    /// Frozen parameters held only as a compute copy.
    Frozen { params: f64 },
    /// A footprint given directly in GB (activations, the frozen backbone).
    FixedGb {
        compute: f64,
        master: f64,
        total: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryComponent {
    pub name: String,
    pub size: ComponentSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub name: String,
    pub params: Option<f64>,
    pub compute_gb: f64,
    pub master_gb: f64,
    pub grads_gb: f64,
    pub optimizer_gb: f64,
    /// Master + gradients + optimizer state; compute copies are transient
    /// casts and are not counted.
    pub total_gb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryTable {
    pub rows: Vec<MemoryRow>,
    pub total_gb: f64,
}

const GB: f64 = 1e9;

/// Training-memory table. GB means 1e9 bytes.
pub fn estimate_memory(
    components: &[MemoryComponent],
    plan: &PrecisionPlan,
) -> Result<MemoryTable> {
    let mut rows = Vec::with_capacity(components.len());
    for c in components {
        let row = match c.size {
            ComponentSize::Trainable { params } | ComponentSize::Frozen { params }
                if !(params >= 0.0 && params.is_finite()) =>
            {
                return Err(Error::Argument(format!(
                    "{}: parameter count {params}",
                    c.name
                )));
            }
            ComponentSize::Trainable { params } => {
                let master = params * plan.master_bytes / GB;
                let grads = params * plan.grad_bytes / GB;
                let opt = params * plan.optimizer_bytes / GB;
                MemoryRow {
                    name: c.name.clone(),
                    params: Some(params),
                    compute_gb: params * plan.compute_copy_bytes / GB,
                    master_gb: master,
                    grads_gb: grads,
                    optimizer_gb: opt,
                    total_gb: master + grads + opt,
                }
            }
            ComponentSize::Frozen { params } => {
                let compute = params * plan.compute_copy_bytes / GB;
                MemoryRow {
                    name: c.name.clone(),
                    params: Some(params),
                    compute_gb: compute,
                    master_gb: 0.0,
                    grads_gb: 0.0,
                    optimizer_gb: 0.0,
                    total_gb: compute,
                }
            }
            ComponentSize::FixedGb {
                compute,
                master,
                total,
            } => MemoryRow {
                name: c.name.clone(),
                params: None,
                compute_gb: compute,
                master_gb: master,
                grads_gb: 0.0,
                optimizer_gb: 0.0,
                total_gb: total,
            },
        };
        rows.push(row);
    }
    let total_gb = rows.iter().map(|r| r.total_gb).sum();
    Ok(MemoryTable { rows, total_gb })
}

/// Components of full-expert training of a 9.06B-parameter MoE module on one GPU.
pub fn full_expert_components() -> Vec<MemoryComponent> {
    let trainable = |name: &str, params: f64| MemoryComponent {
        name: name.into(),
        size: ComponentSize::Trainable { params },
    };
    let fixed = |name: &str, gb: f64| MemoryComponent {
        name: name.into(),
        size: ComponentSize::FixedGb {
            compute: gb,
            master: gb,
            total: gb,
        },
    };
    vec![
        trainable("routed_experts", 2.64e9),
        trainable("shared_experts", 1.32e9),
        trainable("gate", 1.12e9),
        fixed("frozen_components", 20.0),
        fixed("activations", 10.0),
    ]
}

/// Rounds to two decimals for table display.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(counts: &[u64], mass: &[f64], tokens: u64) -> UtilizationRecord {
        UtilizationRecord {
            step: 50,
            layer: 0,
            counts: counts.to_vec(),
            weight_mass: mass.to_vec(),
            tokens,
        }
    }

    #[test]
    fn minority_fraction_fixtures() {
        let m =
            |c: [u64; 2]| minority_fraction(&rec(&c, &[0.0, 0.0], 100), Channel::Counts).unwrap();
        assert_eq!(m([80, 20]), 0.2);
        assert_eq!(m([50, 50]), 0.5);
        assert_eq!(m([100, 0]), 0.0);
        assert!(matches!(
            minority_fraction(&rec(&[0, 0], &[0.0, 0.0], 0), Channel::Counts),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn std_fixtures() {
        let s = |c: [u64; 2]| std_utilization(&rec(&c, &[0.0, 0.0], 10), Channel::Counts).unwrap();
        assert_eq!(s([5, 5]), 0.0);
        assert_eq!(s([10, 0]), 0.5);
        assert!((s([8, 2]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn classification_fixtures() {
        let t = Thresholds::default();
        assert_eq!(classify(0.0733, &t), Status::DeepDeadlock);
        assert_eq!(classify(0.4999, &t), Status::Healthy);
        assert_eq!(classify(0.2680, &t), Status::Skewed);
    }

    #[test]
    fn rebound_fixtures() {
        let t = Thresholds::default();
        let ev = detect_rebound(27, &[(50, 0.08), (100, 0.08), (150, 0.18)], &t);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, ReboundKind::Rebound);
        assert_eq!(
            (ev[0].dip_start, ev[0].recovery_step, ev[0].peak),
            (50, 150, 0.18)
        );

        let decay: Vec<_> = (0..10)
            .map(|i| (i * 50, 0.5 * 0.7f64.powi(i as i32)))
            .collect();
        assert!(detect_rebound(0, &decay, &t).is_empty());

        let ev = detect_rebound(7, &[(1600, 0.0), (1650, 0.014), (1700, 0.0)], &t);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, ReboundKind::Oscillation);
        assert_eq!(ev[0].recovery_step, 1650);
    }

    #[test]
    fn band_fixtures() {
        let mut s = vec![Status::Healthy; 30];
        for l in [1, 4, 6, 23, 27] {
            s[l - 1] = Status::DeepDeadlock;
        }
        let r = band_summary(&s, &Bands::default()).unwrap();
        assert_eq!(
            (r.shallow_deadlocks, r.mid_deadlocks, r.deep_deadlocks),
            (3, 0, 2)
        );
        assert!(r.u_shape);
        let r = band_summary(&[Status::Healthy; 30], &Bands::default()).unwrap();
        assert!(!r.u_shape);
        let mut s = vec![Status::Healthy; 30];
        s[14] = Status::DeepDeadlock;
        assert!(!band_summary(&s, &Bands::default()).unwrap().u_shape);
        let overlapping = Bands {
            mid: LayerRange::new(8, 22),
            ..Bands::default()
        };
        assert!(matches!(
            band_summary(&s, &overlapping),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scaled_bands_partition_small_stacks() {
        for l in 3..40 {
            let b = Bands::scaled(l).unwrap();
            b.validate().unwrap();
            assert_eq!(b.shallow.first, 1);
            assert_eq!(b.mid.first, b.shallow.last + 1);
            assert_eq!(b.deep.first, b.mid.last + 1);
            assert_eq!(b.deep.last, l);
        }
        assert_eq!(Bands::scaled(30).unwrap(), Bands::default());
    }

    #[test]
    fn table_rows() {
        let t = estimate_memory(&full_expert_components(), &PrecisionPlan::default()).unwrap();
        let r = &t.rows[0];
        assert_eq!(
            [
                r.compute_gb,
                r.master_gb,
                r.grads_gb,
                r.optimizer_gb,
                r.total_gb
            ]
            .map(round2),
            [5.28, 10.56, 10.56, 5.28, 26.4]
        );
        let g = &t.rows[2];
        assert_eq!(
            [g.compute_gb, g.master_gb, g.grads_gb, g.optimizer_gb].map(round2),
            [2.24, 4.48, 4.48, 2.24]
        );
        assert_eq!(round2(t.total_gb), 80.8);
        let zero = estimate_memory(
            &[MemoryComponent {
                name: "none".into(),
                size: ComponentSize::Trainable { params: 0.0 },
            }],
            &PrecisionPlan::default(),
        )
        .unwrap();
        assert_eq!(zero.total_gb, 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let records = vec![
            UtilizationRecord {
                step: 50,
                layer: 0,
                counts: vec![3, 1],
                weight_mass: vec![1.75, 0.5],
                tokens: 4,
            },
            UtilizationRecord {
                step: 50,
                layer: 1,
                counts: vec![4, 0],
                weight_mass: vec![2.0, 0.0],
                tokens: 4,
            },
        ];
        let mut buf = Vec::new();
        write_csv(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,layer,expert,count,weight_mass,tokens\n50,0,0,3,1.75,4\n"));
        assert_eq!(read_csv(&buf[..]).unwrap(), records);
    }
}
