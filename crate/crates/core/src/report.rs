//! Output documents written by the command-line tool.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{
    access_breakdown, accuracy, buffer_profile, time_breakdown, underutilization_profile, Profile, TimeBreakdown,
};
use crate::blocks::Traffic;
use crate::composer::{ratio_as_f64, to_f64, EvalReport, Seconds};
use crate::dse::{best_with_ties, DesignPoint, Exploration, Metric};
use crate::sim::SimReport;

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    /// SHA-256 over every input that shaped the output.
    pub input_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
}

impl Provenance {
    pub fn new(inputs: &[&[u8]], timestamp_unix: Option<u64>) -> Self {
        Provenance {
            tool: TOOL,
            version: VERSION,
            input_sha256: digest(inputs),
            timestamp_unix,
        }
    }
}

/// Length-prefixed so that moving bytes between inputs changes the digest.
pub fn digest(inputs: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for part in inputs {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Breakdown {
    pub time: TimeBreakdown,
    pub accesses: Traffic,
    pub underutilization: Profile,
    pub buffers: Profile,
}

pub fn breakdown(report: &EvalReport) -> Breakdown {
    Breakdown {
        time: time_breakdown(report),
        accesses: access_breakdown(report),
        underutilization: underutilization_profile(report),
        buffers: buffer_profile(report),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EvalOutput {
    pub provenance: Provenance,
    pub cnn: String,
    pub platform: String,
    pub report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<Breakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationRow {
    pub metric: &'static str,
    pub analytical: f64,
    pub simulated: f64,
    pub accuracy_pct: f64,
    /// Whether the two must agree exactly; otherwise within `tolerance`.
    pub exact: bool,
    pub agrees: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidateOutput {
    pub provenance: Provenance,
    pub sketch: String,
    pub memory_bound: bool,
    #[serde(serialize_with = "ratio_as_f64")]
    pub tolerance_s: Seconds,
    pub rows: Vec<ValidationRow>,
    pub agrees: bool,
}

fn pct(reference: f64, estimate: f64) -> f64 {
    if reference == 0.0 && estimate == 0.0 {
        100.0
    } else {
        accuracy(reference, estimate).unwrap_or(0.0)
    }
}

/// Side-by-side comparison. Cycles and bytes must match exactly; latency
/// may differ by the simulator's stage tolerance.
pub fn validation(provenance: Provenance, report: &EvalReport, sim: &SimReport) -> ValidateOutput {
    let exact_row = |metric, a: u64, s: u64| ValidationRow {
        metric,
        analytical: a as f64,
        simulated: s as f64,
        accuracy_pct: pct(s as f64, a as f64),
        exact: true,
        agrees: a == s,
    };
    let latency = ValidationRow {
        metric: "latency_s",
        analytical: to_f64(&report.latency_s),
        simulated: to_f64(&sim.time_s),
        accuracy_pct: pct(to_f64(&sim.time_s), to_f64(&report.latency_s)),
        exact: false,
        agrees: sim.latency_agrees(report.latency_s),
    };
    let rows = vec![
        exact_row("compute_cycles", report.compute_cycles, sim.cycles),
        exact_row("access_bytes", report.access_bytes, sim.access_bytes),
        exact_row(
            "weight_access_bytes",
            report.access_breakdown.weights,
            sim.access.weights,
        ),
        exact_row("fm_access_bytes", report.access_breakdown.fms, sim.access.fms),
        latency,
    ];
    let agrees = rows.iter().all(|r| r.agrees);
    ValidateOutput {
        provenance,
        sketch: report.sketch.clone(),
        memory_bound: report.segments.iter().any(|s| s.memory_bound),
        tolerance_s: sim.tolerance_s,
        rows,
        agrees,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Best {
    pub objective: Metric,
    pub point: DesignPoint,
    /// Designs within 10% of the best.
    pub ties: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExploreSummary {
    pub provenance: Provenance,
    pub objectives: (Metric, Metric),
    pub points: usize,
    pub feasible: usize,
    pub custom_space: String,
    pub front: Vec<DesignPoint>,
    /// Sketches with objective values identical to a front member.
    pub ties: Vec<(String, String)>,
    pub best: Vec<Best>,
}

pub fn explore_summary(provenance: Provenance, ex: &Exploration) -> ExploreSummary {
    let (a, b) = ex.objectives;
    let best = [a, b]
        .into_iter()
        .filter_map(|m| {
            best_with_ties(&ex.points, m).map(|(i, ties)| Best {
                objective: m,
                point: ex.points[i].clone(),
                ties: ties.into_iter().map(|t| ex.points[t].sketch.clone()).collect(),
            })
        })
        .collect();
    ExploreSummary {
        provenance,
        objectives: ex.objectives,
        points: ex.points.len(),
        feasible: ex.points.iter().filter(|p| p.metrics.is_some()).count(),
        custom_space: ex.custom_space.to_string(),
        front: ex.front.members.iter().map(|&i| ex.points[i].clone()).collect(),
        ties: ex
            .front
            .ties
            .iter()
            .map(|&(k, d)| (ex.points[k].sketch.clone(), ex.points[d].sketch.clone()))
            .collect(),
        best,
    }
}
