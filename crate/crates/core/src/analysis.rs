//! Breakdowns of an evaluation: where time goes, which data class dominates
//! off-chip traffic, how well PEs are used and where on-chip memory sits.

use std::io::Write;

use num_rational::Ratio;
use num_traits::Zero;
use serde::Serialize;

use crate::blocks::Traffic;
use crate::composer::{ratio_as_f64, to_f64, EvalReport, Seconds};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SegmentTime {
    pub segment: usize,
    #[serde(serialize_with = "ratio_as_f64")]
    pub compute: Ratio<i128>,
    #[serde(serialize_with = "ratio_as_f64")]
    pub idle: Ratio<i128>,
    #[serde(serialize_with = "ratio_as_f64")]
    pub idle_fraction: Ratio<i128>,
    pub memory_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TimeBreakdown {
    /// Per segment, as fractions of the total execution time.
    pub segments: Vec<SegmentTime>,
    #[serde(serialize_with = "ratio_as_f64")]
    pub communication: Ratio<i128>,
    /// Fraction of the whole run in which compute waits on memory.
    #[serde(serialize_with = "ratio_as_f64")]
    pub global_idle: Ratio<i128>,
}

pub fn time_breakdown(report: &EvalReport) -> TimeBreakdown {
    let comm: Seconds = report.boundaries.iter().map(|b| b.comm_s).sum();
    let total: Seconds = report.segments.iter().map(|s| s.effective_s).sum::<Seconds>() + comm;
    let share = |x: Seconds| if total.is_zero() { Ratio::zero() } else { x / total };
    let segments: Vec<SegmentTime> = report
        .segments
        .iter()
        .map(|s| SegmentTime {
            segment: s.index,
            compute: share(s.compute_s),
            idle: share(s.effective_s - s.compute_s),
            idle_fraction: s.idle_fraction,
            memory_bound: s.idle_fraction > Ratio::zero(),
        })
        .collect();
    let global_idle = segments.iter().map(|s| s.idle).sum();
    TimeBreakdown {
        segments,
        communication: share(comm),
        global_idle,
    }
}

pub fn access_breakdown(report: &EvalReport) -> Traffic {
    report.access_breakdown
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Profile {
    #[serde(serialize_with = "ratios_as_f64")]
    pub raw: Vec<Ratio<i128>>,
    #[serde(serialize_with = "ratios_as_f64")]
    pub normalized: Vec<Ratio<i128>>,
}

fn ratios_as_f64<S: serde::Serializer>(v: &[Ratio<i128>], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for r in v {
        seq.serialize_element(&to_f64(r))?;
    }
    seq.end()
}

/// Per-segment idle PE-cycle fraction, also relative to the smallest
/// nonzero entry.
pub fn underutilization_profile(report: &EvalReport) -> Profile {
    let raw: Vec<Ratio<i128>> = report.segments.iter().map(|s| s.underutilization).collect();
    normalize_to_min(raw)
}

pub fn normalize_to_min(raw: Vec<Ratio<i128>>) -> Profile {
    let min = raw.iter().filter(|r| !r.is_zero()).min().copied();
    let normalized = raw
        .iter()
        .map(|r| match min {
            Some(m) => r / m,
            None => Ratio::zero(),
        })
        .collect();
    Profile { raw, normalized }
}

/// Per-segment buffer bytes followed by one entry per segment boundary,
/// each also as a share of the total.
pub fn buffer_profile(report: &EvalReport) -> Profile {
    let raw: Vec<u64> = report
        .segments
        .iter()
        .map(|s| s.buffer_bytes)
        .chain(report.boundaries.iter().map(|b| b.buffer_bytes))
        .collect();
    normalize_to_total(&raw)
}

pub fn normalize_to_total(raw: &[u64]) -> Profile {
    let total: u64 = raw.iter().sum();
    Profile {
        raw: raw.iter().map(|&b| Ratio::from_integer(b as i128)).collect(),
        normalized: raw
            .iter()
            .map(|&b| {
                if total == 0 {
                    Ratio::zero()
                } else {
                    Ratio::new(b as i128, total as i128)
                }
            })
            .collect(),
    }
}

/// Agreement of an estimate with a measured value, in percent.
pub fn accuracy(reference: f64, estimate: f64) -> Result<f64> {
    if reference.is_nan() || reference <= 0.0 {
        return Err(Error::Config("reference value must be positive".into()));
    }
    Ok(100.0 * (1.0 - (reference - estimate).abs() / reference))
}

/// One row per segment:
/// `segment,compute_s,memory_s,idle_frac,buffer_bytes,underutil`.
pub fn write_segment_csv<W: Write>(report: &EvalReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("writing CSV: {e}"));
    w.write_record([
        "segment",
        "compute_s",
        "memory_s",
        "idle_frac",
        "buffer_bytes",
        "underutil",
    ])
    .map_err(io)?;
    for s in &report.segments {
        w.write_record([
            s.index.to_string(),
            sig4(to_f64(&s.compute_s)),
            sig4(to_f64(&s.memory_s)),
            sig4(to_f64(&s.idle_fraction)),
            s.buffer_bytes.to_string(),
            sig4(to_f64(&s.underutilization)),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Config(format!("writing CSV: {e}")))?;
    Ok(())
}

/// Four significant digits.
pub fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.3e}");
    s.parse::<f64>().map(|v| v.to_string()).unwrap_or(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::build_ref;
    use crate::composer::compose;
    use crate::descriptors::testutil::layer;
    use crate::descriptors::{CnnModel, FpgaPlatform};
    use crate::notation::parse_for_depth;

    fn ns(x: i128) -> Seconds {
        Ratio::new(x, 1_000_000_000)
    }

    fn report_with(effective: &[i128], compute: &[i128]) -> EvalReport {
        let cnn = CnnModel::new("c", 1, (1..=2).map(|i| layer(i, 4, 3, 4, 4)).collect()).unwrap();
        let p = FpgaPlatform {
            name: "p".into(),
            pe_count: 8,
            on_chip_bytes: 1 << 20,
            bandwidth: 1 << 30,
            clock_hz: 1_000_000_000,
            clock_assumed: false,
        };
        let s = parse_for_depth("{L1: CE1, L2: CE2}", 2).unwrap();
        let mut r = compose(&build_ref(&s, &cnn, &p).unwrap());
        for (i, seg) in r.segments.iter_mut().enumerate() {
            seg.effective_s = ns(effective[i]);
            seg.compute_s = ns(compute[i]);
            seg.idle_fraction = (ns(effective[i]) - ns(compute[i])) / ns(effective[i]);
        }
        r
    }

    #[test]
    fn time_breakdown_example() {
        let r = report_with(&[800, 200], &[600, 200]);
        let t = time_breakdown(&r);
        assert_eq!(t.segments[0].idle_fraction, Ratio::new(1, 4));
        assert!(t.segments[1].idle_fraction.is_zero());
        assert_eq!(t.global_idle, Ratio::new(1, 5));
        assert!(t.segments[0].memory_bound && !t.segments[1].memory_bound);
        let total: Ratio<i128> = t.segments.iter().map(|s| s.compute + s.idle).sum::<Ratio<i128>>() + t.communication;
        assert_eq!(total, Ratio::from_integer(1));

        let r = report_with(&[300, 200], &[300, 200]);
        assert!(time_breakdown(&r).global_idle.is_zero());
    }

    #[test]
    fn profiles() {
        let p = normalize_to_min(vec![Ratio::new(1, 4), Ratio::new(1, 8)]);
        assert_eq!(p.normalized, vec![Ratio::from_integer(2), Ratio::from_integer(1)]);
        let kb = 1024;
        let p = normalize_to_total(&[364 * kb, 282 * kb, 80 * kb]);
        let rounded: Vec<f64> = p
            .normalized
            .iter()
            .map(|r| (to_f64(r) * 1000.0).round() / 1000.0)
            .collect();
        assert_eq!(rounded, vec![0.501, 0.388, 0.110]);
        assert_eq!(normalize_to_total(&[5]).normalized, vec![Ratio::from_integer(1)]);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(100.0, 90.0).unwrap(), 90.0);
        assert_eq!(accuracy(100.0, 100.0).unwrap(), 100.0);
        assert_eq!(accuracy(50.0, 75.0).unwrap(), 50.0);
        assert_ne!(accuracy(50.0, 75.0).unwrap(), accuracy(75.0, 50.0).unwrap());
        assert!(accuracy(0.0, 1.0).is_err());
    }

    #[test]
    fn csv_has_one_row_per_segment() {
        let r = report_with(&[800, 200], &[600, 200]);
        let mut out = Vec::new();
        write_segment_csv(&r, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "segment,compute_s,memory_s,idle_frac,buffer_bytes,underutil");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,0.0000006,"), "{}", lines[1]);
    }
}
