//! Design-space exploration: the three classic multiple-CE layouts, a
//! sampler for custom layouts and Pareto filtering.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_rational::Ratio;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::composer::{evaluate, ratio_as_f64, to_f64, EvalReport, Seconds};
use crate::descriptors::{CnnModel, FpgaPlatform};
use crate::error::{Error, Result};
use crate::notation::{parse_accelerator, AcceleratorSketch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Family {
    Segmented,
    SegmentedRR,
    Hybrid,
    CustomHybridFirstSegmentedRest,
}

impl Family {
    pub const BASELINES: [Family; 3] = [Family::Segmented, Family::SegmentedRR, Family::Hybrid];
    pub const ALL: [Family; 4] = [
        Family::Segmented,
        Family::SegmentedRR,
        Family::Hybrid,
        Family::CustomHybridFirstSegmentedRest,
    ];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Segmented => "Segmented",
            Family::SegmentedRR => "SegmentedRR",
            Family::Hybrid => "Hybrid",
            Family::CustomHybridFirstSegmentedRest => "Custom",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "segmented" => Ok(Family::Segmented),
            "segmentedrr" | "rr" => Ok(Family::SegmentedRR),
            "hybrid" => Ok(Family::Hybrid),
            "custom" | "customhybridfirstsegmentedrest" => Ok(Family::CustomHybridFirstSegmentedRest),
            other => Err(Error::Config(format!("unknown family {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Latency,
    Throughput,
    Buffer,
    Accesses,
}

impl Metric {
    /// Whether larger values are better.
    pub fn maximize(self) -> bool {
        self == Metric::Throughput
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "latency" => Ok(Metric::Latency),
            "throughput" => Ok(Metric::Throughput),
            "buffer" => Ok(Metric::Buffer),
            "accesses" | "access" => Ok(Metric::Accesses),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DesignSpaceConfig {
    pub min_ces: usize,
    pub max_ces: usize,
    pub families: Vec<Family>,
    /// Custom designs to sample on top of the baseline families.
    pub sample_size: usize,
    pub seed: u64,
    pub objectives: (Metric, Metric),
    pub inter_segment_pipelining: bool,
}

impl Default for DesignSpaceConfig {
    fn default() -> Self {
        DesignSpaceConfig {
            min_ces: 2,
            max_ces: 11,
            families: Family::ALL.to_vec(),
            sample_size: 1000,
            seed: 0,
            objectives: (Metric::Throughput, Metric::Buffer),
            inter_segment_pipelining: true,
        }
    }
}

impl DesignSpaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_ces < 2 {
            return Err(Error::Config("a multiple-CE design needs at least 2 CEs".into()));
        }
        if self.max_ces < self.min_ces {
            return Err(Error::Config(format!(
                "empty CE range {}..{}",
                self.min_ces, self.max_ces
            )));
        }
        if self.objectives.0 == self.objectives.1 {
            return Err(Error::Config("objectives must differ".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Metrics {
    #[serde(serialize_with = "ratio_as_f64")]
    pub latency_s: Seconds,
    #[serde(serialize_with = "ratio_as_f64")]
    pub throughput: Ratio<i128>,
    pub buffer_bytes: u64,
    pub access_bytes: u64,
}

impl Metrics {
    pub fn of(report: &EvalReport) -> Self {
        Metrics {
            latency_s: report.latency_s,
            throughput: report.throughput,
            buffer_bytes: report.buffer_bytes,
            access_bytes: report.access_bytes,
        }
    }

    pub fn get(&self, m: Metric) -> Ratio<i128> {
        match m {
            Metric::Latency => self.latency_s,
            Metric::Throughput => self.throughput,
            Metric::Buffer => Ratio::from_integer(self.buffer_bytes as i128),
            Metric::Accesses => Ratio::from_integer(self.access_bytes as i128),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DesignPoint {
    pub sketch: String,
    pub family: Family,
    pub ce_count: usize,
    /// None when the design cannot be built on the platform.
    pub metrics: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Layer ranges of `parts` contiguous groups with roughly equal MACs.
pub fn balanced_cuts(cnn: &CnnModel, parts: usize) -> Result<Vec<usize>> {
    let n = cnn.num_layers();
    if parts == 0 || parts > n {
        return Err(Error::Config(format!("cannot split {n} layers into {parts} segments")));
    }
    let total = cnn.total_macs() as u128;
    let mut cuts = Vec::with_capacity(parts);
    let mut acc = 0u128;
    for l in 1..=n {
        let placed = cuts.len();
        if placed == parts - 1 {
            break;
        }
        acc += cnn.layer(l).macs() as u128;
        let layers_left = n - l;
        let cuts_left = parts - 1 - placed;
        // close the group once it reaches its share, or when the remaining
        // layers are only just enough for the remaining groups
        if acc * parts as u128 >= total * (placed as u128 + 1) || layers_left == cuts_left {
            cuts.push(l);
        }
    }
    cuts.push(n);
    Ok(cuts)
}

fn range(lo: usize, hi: usize, n: usize) -> String {
    if lo == hi && hi != n {
        format!("L{lo}")
    } else if hi == n {
        format!("L{lo}-Last")
    } else {
        format!("L{lo}-L{hi}")
    }
}

fn engines(lo: usize, hi: usize) -> String {
    if lo == hi {
        format!("CE{lo}")
    } else {
        format!("CE{lo}-CE{hi}")
    }
}

/// Single-CE blocks over consecutive groups ending at `ends`, numbered from
/// CE `first_ce`.
fn segmented_parts(start: usize, ends: &[usize], first_ce: usize, n: usize) -> Vec<String> {
    let mut lo = start;
    ends.iter()
        .enumerate()
        .map(|(i, &hi)| {
            let s = format!("{}: {}", range(lo, hi, n), engines(first_ce + i, first_ce + i));
            lo = hi + 1;
            s
        })
        .collect()
}

fn custom_text(prefix: usize, ends: &[usize], n: usize) -> String {
    let mut parts = Vec::new();
    if prefix > 0 {
        parts.push(format!("{}: {}", range(1, prefix, n), engines(1, prefix)));
    }
    parts.extend(segmented_parts(prefix + 1, ends, prefix + 1, n));
    format!("{{{}}}", parts.join(", "))
}

/// Sketch text of a baseline family with `ces` engines.
pub fn family_text(family: Family, ces: usize, cnn: &CnnModel) -> Result<String> {
    let n = cnn.num_layers();
    if ces == 0 || ces > n {
        return Err(Error::Config(format!(
            "{ces} CEs exceed the {n} layers of {}",
            cnn.name
        )));
    }
    Ok(match family {
        Family::Segmented => format!("{{{}}}", segmented_parts(1, &balanced_cuts(cnn, ces)?, 1, n).join(", ")),
        Family::SegmentedRR => format!("{{L1-Last: {}}}", engines(1, ces)),
        // chained single-layer engines then one engine for the rest
        Family::Hybrid => custom_text(ces - 1, &[n], n),
        Family::CustomHybridFirstSegmentedRest => {
            return Err(Error::Config("the custom family is sampled, not enumerated".into()))
        }
    })
}

pub fn enumerate_family(family: Family, ces: usize, cnn: &CnnModel) -> Result<AcceleratorSketch> {
    parse_accelerator(&family_text(family, ces, cnn)?, cnn)
}

fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// Prefix lengths allowed for a custom design with `ces` engines: none, or a
/// chain of at least two engines leaving one engine for the rest.
fn prefixes(ces: usize, n: usize) -> Vec<usize> {
    std::iter::once(0)
        .chain(2..ces)
        .filter(|&p| n > p && n - p >= ces - p)
        .collect()
}

/// Number of distinct custom designs over the CE range.
pub fn custom_space_size(config: &DesignSpaceConfig, layers: usize) -> u128 {
    let mut total = 0u128;
    for c in config.min_ces..=config.max_ces {
        for p in prefixes(c, layers) {
            total += binomial((layers - p - 1) as u64, (c - p - 1) as u64);
        }
    }
    total
}

/// Custom design number `index` of the stream for `seed`. Draws the CE count
/// and prefix length uniformly, then a uniform set of segment boundaries over
/// the remaining layers.
pub fn sample_custom(config: &DesignSpaceConfig, n: usize, index: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let counts: Vec<usize> = (config.min_ces..=config.max_ces)
        .filter(|&c| !prefixes(c, n).is_empty())
        .collect();
    if counts.is_empty() {
        return Err(Error::Config(format!(
            "no custom design with {}..{} CEs fits {n} layers",
            config.min_ces, config.max_ces
        )));
    }
    let c = counts[rng.gen_range(0..counts.len())];
    let options = prefixes(c, n);
    let p = options[rng.gen_range(0..options.len())];
    let rest = n - p;
    let blocks = c - p;
    let mut ends: Vec<usize> = index::sample(&mut rng, rest - 1, blocks - 1)
        .into_iter()
        .map(|i| p + i + 1)
        .collect();
    ends.sort_unstable();
    ends.push(n);
    Ok(custom_text(p, &ends, n))
}

fn ce_count_of(text: &str, cnn: &CnnModel) -> usize {
    parse_accelerator(text, cnn).map(|s| s.ce_count()).unwrap_or(0)
}

fn evaluate_point(
    text: String,
    family: Family,
    cnn: &Arc<CnnModel>,
    platform: &FpgaPlatform,
    inter_segment_pipelining: bool,
) -> DesignPoint {
    let ce_count = ce_count_of(&text, cnn);
    let result = parse_accelerator(&text, cnn)
        .map(|s| s.with_inter_segment_pipelining(inter_segment_pipelining))
        .and_then(|s| evaluate(&s, cnn.clone(), platform));
    match result {
        Ok(report) => DesignPoint {
            sketch: text,
            family,
            ce_count,
            metrics: Some(Metrics::of(&report)),
            error: None,
        },
        Err(e) => DesignPoint {
            sketch: text,
            family,
            ce_count,
            metrics: None,
            error: Some(e.to_string()),
        },
    }
}

/// The baseline sketches for every family and CE count in the range, in
/// family-major order. CE counts a family cannot realise are skipped.
pub fn baseline_texts(config: &DesignSpaceConfig, cnn: &CnnModel) -> Vec<(Family, String)> {
    let mut out = Vec::new();
    for &family in Family::BASELINES.iter().filter(|f| config.families.contains(f)) {
        for c in config.min_ces..=config.max_ces {
            if let Ok(text) = family_text(family, c, cnn) {
                out.push((family, text));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParetoFront {
    /// Indices into the input, best first on the first objective.
    pub members: Vec<usize>,
    /// (kept, dropped) pairs of points with identical objective values.
    pub ties: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Exploration {
    pub points: Vec<DesignPoint>,
    pub front: ParetoFront,
    pub objectives: (Metric, Metric),
    /// Size of the custom space the sampler draws from.
    pub custom_space: u128,
}

/// Evaluates the baselines and `sample_size` custom designs on a pool of
/// `jobs` threads (0 = all cores). The output order does not depend on
/// `jobs`.
pub fn explore(
    config: &DesignSpaceConfig,
    cnn: Arc<CnnModel>,
    platform: &FpgaPlatform,
    jobs: usize,
) -> Result<Exploration> {
    config.validate()?;
    let n = cnn.num_layers();
    let mut work: Vec<(Family, Option<String>, u64)> = baseline_texts(config, &cnn)
        .into_iter()
        .map(|(f, t)| (f, Some(t), 0))
        .collect();
    if config.families.contains(&Family::CustomHybridFirstSegmentedRest) && config.sample_size > 0 {
        sample_custom(config, n, 0)?;
        work.extend((0..config.sample_size as u64).map(|i| (Family::CustomHybridFirstSegmentedRest, None, i)));
    }
    if work.is_empty() {
        return Err(Error::Config("the design space is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let isp = config.inter_segment_pipelining;
    let points: Vec<DesignPoint> = pool.install(|| {
        work.into_par_iter()
            .map(|(family, text, i)| {
                let text = text.unwrap_or_else(|| sample_custom(config, n, i).expect("space checked non-empty"));
                evaluate_point(text, family, &cnn, platform, isp)
            })
            .collect()
    });
    let front = pareto_front(&points, config.objectives);
    Ok(Exploration {
        points,
        front,
        objectives: config.objectives,
        custom_space: custom_space_size(config, n),
    })
}

/// `a` compared with `b` on one objective; Greater means `a` is better.
fn better(m: Metric, a: &Metrics, b: &Metrics) -> Ordering {
    let o = a.get(m).cmp(&b.get(m));
    if m.maximize() {
        o
    } else {
        o.reverse()
    }
}

pub fn dominates(objectives: (Metric, Metric), a: &Metrics, b: &Metrics) -> bool {
    let x = better(objectives.0, a, b);
    let y = better(objectives.1, a, b);
    x != Ordering::Less && y != Ordering::Less && (x == Ordering::Greater || y == Ordering::Greater)
}

/// Non-dominated points among those that built. Points with equal objective
/// values are represented by the first of them.
pub fn pareto_front(points: &[DesignPoint], objectives: (Metric, Metric)) -> ParetoFront {
    let mut order: Vec<usize> = (0..points.len()).filter(|&i| points[i].metrics.is_some()).collect();
    let m = |i: usize| points[i].metrics.as_ref().expect("filtered");
    order.sort_by(|&a, &b| {
        better(objectives.0, m(b), m(a))
            .then(better(objectives.1, m(b), m(a)))
            .then(a.cmp(&b))
    });
    let mut members: Vec<usize> = Vec::new();
    let mut ties = Vec::new();
    for i in order {
        match members.last() {
            None => members.push(i),
            Some(&last) => {
                let second = better(objectives.1, m(i), m(last));
                if second == Ordering::Greater {
                    members.push(i);
                } else if second == Ordering::Equal && better(objectives.0, m(i), m(last)) == Ordering::Equal {
                    ties.push((last, i));
                }
            }
        }
    }
    ParetoFront { members, ties }
}

/// Quadratic check of a front: no member is dominated by any point, every
/// other buildable point is dominated by or equal to a member.
pub fn verify_front(points: &[DesignPoint], objectives: (Metric, Metric), front: &ParetoFront) -> bool {
    let built: Vec<(usize, &Metrics)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.metrics.as_ref().map(|m| (i, m)))
        .collect();
    let is_member = |i: usize| front.members.contains(&i);
    if front
        .members
        .iter()
        .any(|&i| points.get(i).and_then(|p| p.metrics.as_ref()).is_none())
    {
        return false;
    }
    for &(i, mi) in &built {
        let dominated = built.iter().any(|&(_, mj)| dominates(objectives, mj, mi));
        if is_member(i) {
            if dominated {
                return false;
            }
        } else {
            let covered = front.members.iter().any(|&f| {
                let mf = points[f].metrics.as_ref().expect("checked");
                dominates(objectives, mf, mi)
                    || (mf.get(objectives.0) == mi.get(objectives.0) && mf.get(objectives.1) == mi.get(objectives.1))
            });
            if !covered {
                return false;
            }
        }
    }
    true
}

/// Whether two values differ by at most 10% of the larger.
pub fn within_tie_margin(a: Ratio<i128>, b: Ratio<i128>) -> bool {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    (hi - lo) * Ratio::from_integer(10) <= hi
}

/// The best point on `metric` and every other point tied with it.
pub fn best_with_ties(points: &[DesignPoint], metric: Metric) -> Option<(usize, Vec<usize>)> {
    let built: Vec<usize> = (0..points.len()).filter(|&i| points[i].metrics.is_some()).collect();
    let m = |i: usize| points[i].metrics.as_ref().expect("filtered");
    let best = *built
        .iter()
        .max_by(|&&a, &&b| better(metric, m(a), m(b)).then(b.cmp(&a)))?;
    let ties = built
        .into_iter()
        .filter(|&i| i != best && within_tie_margin(m(i).get(metric), m(best).get(metric)))
        .collect();
    Some((best, ties))
}

/// `sketch,family,latency_s,throughput,buffer_bytes,access_bytes`; designs
/// that do not fit leave the metric columns empty.
pub fn write_points_csv<W: std::io::Write>(points: &[DesignPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("writing CSV: {e}"));
    w.write_record([
        "sketch",
        "family",
        "latency_s",
        "throughput",
        "buffer_bytes",
        "access_bytes",
    ])
    .map_err(io)?;
    for p in points {
        let cols = match &p.metrics {
            Some(m) => [
                to_f64(&m.latency_s).to_string(),
                to_f64(&m.throughput).to_string(),
                m.buffer_bytes.to_string(),
                m.access_bytes.to_string(),
            ],
            None => Default::default(),
        };
        w.write_record([p.sketch.clone(), p.family.to_string()].into_iter().chain(cols))
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Config(format!("writing CSV: {e}")))?;
    Ok(())
}
