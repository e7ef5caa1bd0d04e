//! Log-SNR schedule, hierarchical expert partitioning and timestep routing.
//!
//! Time axis: routing uses the axis on which `t = 1` is pure noise, so
//! `λ(t) = 2(ln(1 − t) − ln t)` decreases in `t` and `t(λ) = 1 / (e^{λ/2} + 1)`.
//! The flow-matching interpolant `(1 − s)·z0 + s·z1` runs the other way
//! (`s = 0` is noise); [`routing_time_from_flow`] converts.
//!
//! Partitioning: the effective range `[λ_min, λ_max]` comes from noise bounds
//! via `λ = −2 ln σ`. Depth 1 splits it at `λ(anchor_t)`. Each further level
//! bisects every sub-interval at its log-SNR midpoint, giving `2^depth` experts.
//!
//! Experts are indexed from the noisiest: expert 0 owns the interval touching
//! `t = 1`. Each expert owns `[t_low, t_high)`, except expert 0 which is
//! closed at `t = 1`. A boundary value therefore belongs to the higher-noise
//! expert.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_MIN: f64 = 0.0118;
pub const DEFAULT_SIGMA_MAX: f64 = 33.78;
pub const DEFAULT_ANCHOR_T: f64 = 0.875;

/// `λ(t) = 2(ln(1 − t) − ln t)` for `t ∈ (0, 1)`.
pub fn log_snr(t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("log-SNR needs t in (0, 1), got {t}")));
    }
    Ok(2.0 * ((-t).ln_1p() - t.ln()))
}

/// As [`log_snr`] but maps `t = 0` to `+∞` and `t = 1` to `−∞`.
pub fn log_snr_extended(t: f64) -> Result<f64> {
    match t {
        0.0 => Ok(f64::INFINITY),
        1.0 => Ok(f64::NEG_INFINITY),
        _ => log_snr(t),
    }
}

/// `t(λ) = 1 / (e^{λ/2} + 1)`.
pub fn inv_log_snr(lambda: f64) -> Result<f64> {
    if !lambda.is_finite() {
        return Err(Error::Domain(format!("inverse log-SNR needs finite λ, got {lambda}")));
    }
    Ok(1.0 / ((0.5 * lambda).exp() + 1.0))
}

/// `(λ_min, λ_max) = (−2 ln σ_max, −2 ln σ_min)`.
pub fn effective_range(sigma_min: f64, sigma_max: f64) -> Result<(f64, f64)> {
    if !(sigma_min > 0.0 && sigma_min.is_finite() && sigma_max.is_finite()) {
        return Err(Error::Domain(format!("noise bounds must be positive and finite, got ({sigma_min}, {sigma_max})")));
    }
    if sigma_min >= sigma_max {
        return Err(Error::Domain(format!("σ_min {sigma_min} must be below σ_max {sigma_max}")));
    }
    Ok((-2.0 * sigma_max.ln(), -2.0 * sigma_min.ln()))
}

/// Converts a flow-matching interpolation time (0 = noise) to the routing axis (1 = noise).
pub fn routing_time_from_flow(t_flow: f64) -> f64 {
    1.0 - t_flow
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSnrSchedule {
    pub sigma_min_eff: f64,
    pub sigma_max_eff: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl LogSnrSchedule {
    pub fn from_sigmas(sigma_min_eff: f64, sigma_max_eff: f64) -> Result<Self> {
        let (lambda_min, lambda_max) = effective_range(sigma_min_eff, sigma_max_eff)?;
        Ok(LogSnrSchedule { sigma_min_eff, sigma_max_eff, lambda_min, lambda_max })
    }

    /// Range `[−λ_max, λ_max]`, i.e. `σ_min = e^{−λ_max/2}`, `σ_max = e^{λ_max/2}`.
    pub fn symmetric(lambda_max: f64) -> Result<Self> {
        if !(lambda_max > 0.0 && lambda_max.is_finite()) {
            return Err(Error::Domain(format!("symmetric range needs λ_max > 0, got {lambda_max}")));
        }
        Ok(LogSnrSchedule {
            sigma_min_eff: (-0.5 * lambda_max).exp(),
            sigma_max_eff: (0.5 * lambda_max).exp(),
            lambda_min: -lambda_max,
            lambda_max,
        })
    }

    pub fn lambda_of_t(&self, t: f64) -> Result<f64> {
        log_snr(t)
    }

    pub fn t_of_lambda(&self, lambda: f64) -> Result<f64> {
        inv_log_snr(lambda)
    }
}

impl Default for LogSnrSchedule {
    fn default() -> Self {
        Self::from_sigmas(DEFAULT_SIGMA_MIN, DEFAULT_SIGMA_MAX).expect("valid defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertPartition {
    pub schedule: LogSnrSchedule,
    pub anchor_t: f64,
    pub lambda_anchor: f64,
    pub depth: u32,
    /// Interior boundaries, ascending in λ (noisiest first).
    pub lambda_boundaries: Vec<f64>,
    /// `t_of_lambda` of each boundary, hence descending in `t`.
    pub t_boundaries: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub expert_index: usize,
    pub t: f64,
    pub lambda: f64,
}

/// Hierarchical bisection of the schedule's log-SNR range.
pub fn derive_partition(schedule: &LogSnrSchedule, anchor_t: f64, depth: u32) -> Result<ExpertPartition> {
    if depth > 16 {
        return Err(Error::Domain(format!("depth {depth} too large (max 16)")));
    }
    let lambda_anchor = log_snr(anchor_t)?;
    let (lo, hi) = (schedule.lambda_min, schedule.lambda_max);
    if !(lambda_anchor > lo && lambda_anchor < hi) {
        return Err(Error::Domain(format!(
            "anchor t={anchor_t} has λ={lambda_anchor:.4}, outside the effective range ({lo:.4}, {hi:.4})"
        )));
    }
    let mut edges = vec![lo, hi];
    if depth >= 1 {
        edges = vec![lo, lambda_anchor, hi];
    }
    for _ in 1..depth {
        let mut next = Vec::with_capacity(edges.len() * 2 - 1);
        for w in edges.windows(2) {
            next.push(w[0]);
            next.push(0.5 * (w[0] + w[1]));
        }
        next.push(hi);
        edges = next;
    }
    let lambda_boundaries = edges[1..edges.len() - 1].to_vec();
    let t_boundaries = lambda_boundaries.iter().map(|&l| inv_log_snr(l)).collect::<Result<Vec<_>>>()?;
    Ok(ExpertPartition { schedule: *schedule, anchor_t, lambda_anchor, depth, lambda_boundaries, t_boundaries })
}

impl ExpertPartition {
    /// Partition with the default noise bounds and anchor.
    pub fn default_with_depth(depth: u32) -> Result<Self> {
        derive_partition(&LogSnrSchedule::default(), DEFAULT_ANCHOR_T, depth)
    }

    pub fn num_experts(&self) -> usize {
        self.t_boundaries.len() + 1
    }

    /// `(t_low, t_high)` owned by expert `k`.
    pub fn t_interval(&self, k: usize) -> (f64, f64) {
        let kmax = self.num_experts() - 1;
        let high = if k == 0 { 1.0 } else { self.t_boundaries[k - 1] };
        let low = if k == kmax { 0.0 } else { self.t_boundaries[k] };
        (low, high)
    }

    /// `(λ_low, λ_high)` served by expert `k`, clipped to the effective range.
    pub fn lambda_interval(&self, k: usize) -> (f64, f64) {
        let kmax = self.num_experts() - 1;
        let low = if k == 0 { self.schedule.lambda_min } else { self.lambda_boundaries[k - 1] };
        let high = if k == kmax { self.schedule.lambda_max } else { self.lambda_boundaries[k] };
        (low, high)
    }

    /// Deterministic interval lookup on the routing axis (`t = 1` is noise).
    pub fn route(&self, t: f64) -> Result<RouteDecision> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("routing time {t} outside [0, 1]")));
        }
        // Boundaries are descending; the expert index is the number of
        // boundaries strictly above t.
        let expert_index = self.t_boundaries.iter().take_while(|&&b| b > t).count();
        Ok(RouteDecision { expert_index, t, lambda: log_snr_extended(t)? })
    }

    /// Routes a flow-matching time (0 = noise).
    pub fn route_flow_time(&self, t_flow: f64) -> Result<RouteDecision> {
        self.route(routing_time_from_flow(t_flow))
    }

    pub fn label(&self, k: usize) -> String {
        const FOUR: [&str; 4] = ["Initial Denoising", "Coarse Structure", "Texture Generation", "Detail Refinement"];
        const TWO: [&str; 2] = ["Structure Formation", "Detail Refinement"];
        match self.num_experts() {
            4 => FOUR[k].to_string(),
            2 => TWO[k].to_string(),
            1 => "Single Expert".to_string(),
            _ => format!("Expert {}", k + 1),
        }
    }
}

/// Free-function form of [`ExpertPartition::route`].
pub fn route(t: f64, partition: &ExpertPartition) -> Result<RouteDecision> {
    partition.route(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    /// 1-based, noisiest first.
    pub expert: usize,
    pub label: String,
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub t_low: f64,
    pub t_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub sigma_min_eff: f64,
    pub sigma_max_eff: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub anchor_t: f64,
    pub lambda_anchor: f64,
    pub depth: u32,
    pub lambda_boundaries: Vec<f64>,
    pub t_boundaries: Vec<f64>,
    pub experts: Vec<RoutingRow>,
}

pub const ROUTING_CSV_HEADER: &str = "expert,label,lambda_low,lambda_high,t_low,t_high";

impl RoutingTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("routing table JSON: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ROUTING_CSV_HEADER);
        out.push('\n');
        for r in &self.experts {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.expert, r.label, r.lambda_low, r.lambda_high, r.t_low, r.t_high
            ));
        }
        out
    }
}

pub fn emit_routing_table(partition: &ExpertPartition) -> RoutingTable {
    let experts = (0..partition.num_experts())
        .map(|k| {
            let (lambda_low, lambda_high) = partition.lambda_interval(k);
            let (t_low, t_high) = partition.t_interval(k);
            RoutingRow { expert: k + 1, label: partition.label(k), lambda_low, lambda_high, t_low, t_high }
        })
        .collect();
    let s = &partition.schedule;
    RoutingTable {
        sigma_min_eff: s.sigma_min_eff,
        sigma_max_eff: s.sigma_max_eff,
        lambda_min: s.lambda_min,
        lambda_max: s.lambda_max,
        anchor_t: partition.anchor_t,
        lambda_anchor: partition.lambda_anchor,
        depth: partition.depth,
        lambda_boundaries: partition.lambda_boundaries.clone(),
        t_boundaries: partition.t_boundaries.clone(),
        experts,
    }
}
