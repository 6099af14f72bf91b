#![allow(dead_code)]

use std::sync::Arc;

use mccm::descriptors::{CnnModel, FpgaPlatform};
use mccm::notation::{parse_accelerator, AcceleratorSketch};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const CLOCK_HZ: u64 = 1_000_000_000;

pub struct Instance {
    pub cnn: Arc<CnnModel>,
    pub text: String,
    pub sketch: AcceleratorSketch,
    pub platform: FpgaPlatform,
}

/// A chain of up to six small layers with the odd residual link.
pub fn random_cnn(rng: &mut ChaCha8Rng) -> CnnModel {
    let n = rng.gen_range(1..=6);
    let word_bytes = *[1, 2].choose(rng).unwrap();
    let mut channels = rng.gen_range(1..=8);
    let mut h = rng.gen_range(2..=16);
    let mut w = rng.gen_range(2..=16);
    let mut shapes = Vec::new();
    let mut layers = Vec::new();
    for i in 1..=n {
        let kind = match rng.gen_range(0..6) {
            0 => "depthwise",
            1 | 2 => "pointwise",
            _ => "standard",
        };
        let filters = if kind == "depthwise" {
            channels
        } else {
            rng.gen_range(1..=32)
        };
        let k = match kind {
            "pointwise" => 1,
            _ => *[1, 3, 5].choose(rng).unwrap(),
        };
        let stride = if rng.gen_bool(0.2) { 2 } else { 1 };
        let (oh, ow) = ((h + stride - 1) / stride, (w + stride - 1) / stride);
        let residual: Vec<usize> = shapes
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == (filters, oh, ow))
            .map(|(j, _)| j + 1)
            .filter(|&j| j + 1 < i && rng.gen_bool(0.5))
            .take(1)
            .collect();
        layers.push(json!({
            "index": i,
            "kind": kind,
            "filters": filters,
            "kernel": [k, k],
            "in_channels": channels,
            "ifm": [h, w],
            "stride": stride,
            "residual_sources": residual,
        }));
        shapes.push((filters, oh, ow));
        channels = filters;
        h = oh;
        w = ow;
    }
    let text = json!({"name": "random", "word_bytes": word_bytes, "layers": layers}).to_string();
    CnnModel::from_json_str(&text).expect("generated CNN is valid")
}

/// Up to three blocks over `n` layers, mixing single CEs, one-pass chains and
/// round-robin chains.
pub fn random_sketch_text(rng: &mut ChaCha8Rng, n: usize) -> String {
    let blocks = rng.gen_range(1..=n.min(3));
    let mut cuts: Vec<usize> = (1..n).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(blocks - 1).collect();
    cuts.sort_unstable();
    cuts.push(n);
    let mut parts = Vec::new();
    let mut lo = 1;
    let mut ce = 1;
    for &hi in &cuts {
        let len = hi - lo + 1;
        let ces = match rng.gen_range(0..3) {
            0 => 1,
            1 => len,
            _ => rng.gen_range(1..=len),
        };
        let range = if lo == hi {
            format!("L{lo}")
        } else if hi == n && rng.gen_bool(0.5) {
            format!("L{lo}-Last")
        } else {
            format!("L{lo}-L{hi}")
        };
        let engines = if ces == 1 {
            format!("CE{ce}")
        } else {
            format!("CE{}-CE{}", ce, ce + ces - 1)
        };
        parts.push(format!("{range}: {engines}"));
        ce += ces;
        lo = hi + 1;
    }
    format!("{{{}}}", parts.join(", "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Buffer and channel large enough to stay compute-bound.
    Roomy,
    /// A trickle of bandwidth, so transfers dominate every stage.
    Starved,
    /// Tight buffers and a channel moving 1/16 to 4 bytes per cycle, so
    /// compute and memory time are comparable.
    Mixed,
}

pub fn random_instance(seed: u64, regime: Regime) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cnn = Arc::new(random_cnn(&mut rng));
    let text = random_sketch_text(&mut rng, cnn.num_layers());
    let mut sketch = parse_accelerator(&text, &cnn).expect("generated sketch parses");
    if rng.gen_bool(0.3) {
        sketch = sketch.with_inter_segment_pipelining(false);
    }
    let ces = sketch.ce_count() as u64;
    let platform = FpgaPlatform {
        name: "random".into(),
        pe_count: rng.gen_range(ces..=ces * 64),
        on_chip_bytes: match regime {
            Regime::Roomy => 1 << 30,
            _ => rng.gen_range(1u64..=1 << 17),
        },
        bandwidth: match regime {
            Regime::Roomy => 1 << 50,
            Regime::Starved => rng.gen_range(1u64..=1 << 12),
            Regime::Mixed => rng.gen_range(CLOCK_HZ / 16..=CLOCK_HZ * 4),
        },
        clock_hz: CLOCK_HZ,
        clock_assumed: false,
    };
    Instance {
        cnn,
        text,
        sketch,
        platform,
    }
}
