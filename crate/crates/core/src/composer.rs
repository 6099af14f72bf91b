//! Whole-accelerator metrics from per-segment block models.

use num_rational::Ratio;
use num_traits::Zero;
use serde::{Serialize, Serializer};

use crate::blocks::{
    pipeline_schedule, pipelined_block_latency, pipelined_busy_cycles, pipelined_layer_accesses,
    single_ce_layer_latency, streamed_ifm_traffic, Traffic,
};
use crate::builder::{Accelerator, BlockShape, Segment};
use crate::descriptors::FpgaPlatform;

pub type Seconds = Ratio<i128>;

pub(crate) fn ratio_as_f64<S: Serializer>(r: &Ratio<i128>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(to_f64(r))
}

pub fn to_f64(r: &Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Compute, memory and overlapped time of one segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    pub compute_s: Seconds,
    pub memory_s: Seconds,
    pub effective_s: Seconds,
    pub idle_fraction: Ratio<i128>,
}

/// Compute and transfers overlap perfectly; the slower one sets the pace.
pub fn effective_time(compute_cycles: u64, access_bytes: u64, platform: &FpgaPlatform) -> Timing {
    let compute_s = Ratio::new(compute_cycles as i128, platform.clock_hz as i128);
    let memory_s = Ratio::new(access_bytes as i128, platform.bandwidth as i128);
    let effective_s = compute_s.max(memory_s);
    let idle_fraction = if effective_s.is_zero() || memory_s <= compute_s {
        Ratio::zero()
    } else {
        (effective_s - compute_s) / effective_s
    };
    Timing {
        compute_s,
        memory_s,
        effective_s,
        idle_fraction,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SegmentPlan {
    pub segments: Vec<Segment>,
    pub inter_segment_pipelining: bool,
}

pub fn plan_segments(acc: &Accelerator) -> SegmentPlan {
    SegmentPlan {
        segments: acc.segments.clone(),
        inter_segment_pipelining: acc.coarse_pipelined(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SegmentReport {
    pub index: usize,
    pub block: usize,
    pub pass: usize,
    pub layer_lo: usize,
    pub layer_hi: usize,
    pub compute_cycles: u64,
    /// Cycles of the busiest CE; equals `compute_cycles` for a single CE.
    pub busy_cycles: u64,
    #[serde(serialize_with = "ratio_as_f64")]
    pub compute_s: Seconds,
    #[serde(serialize_with = "ratio_as_f64")]
    pub memory_s: Seconds,
    #[serde(serialize_with = "ratio_as_f64")]
    pub effective_s: Seconds,
    #[serde(serialize_with = "ratio_as_f64")]
    pub idle_fraction: Ratio<i128>,
    pub memory_bound: bool,
    /// Share of the on-chip total charged to this segment.
    pub buffer_bytes: u64,
    /// What this segment alone would need.
    pub own_buffer_bytes: u64,
    pub access: Traffic,
    pub macs: u64,
    /// PE-cycles spent by the CEs while busy.
    pub pe_cycles: u64,
    #[serde(serialize_with = "ratio_as_f64")]
    pub underutilization: Ratio<i128>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BoundaryReport {
    pub after_layer: usize,
    pub bytes: u64,
    pub on_chip: bool,
    pub buffer_bytes: u64,
    pub access_bytes: u64,
    #[serde(serialize_with = "ratio_as_f64")]
    pub comm_s: Seconds,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockReport {
    pub index: usize,
    pub segments: usize,
    pub compute_cycles: u64,
    #[serde(serialize_with = "ratio_as_f64")]
    pub latency_s: Seconds,
    /// Time between successive inputs entering the block.
    #[serde(serialize_with = "ratio_as_f64")]
    pub interval_s: Seconds,
    pub buffer_bytes: u64,
    pub access_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EvalReport {
    pub sketch: String,
    #[serde(serialize_with = "ratio_as_f64")]
    pub latency_s: Seconds,
    /// Inputs per second.
    #[serde(serialize_with = "ratio_as_f64")]
    pub throughput: Ratio<i128>,
    pub buffer_bytes: u64,
    pub access_bytes: u64,
    pub compute_cycles: u64,
    pub access_breakdown: Traffic,
    pub full_fit: bool,
    pub inter_segment_pipelining: bool,
    pub clock_hz: u64,
    pub clock_assumed: bool,
    pub blocks: Vec<BlockReport>,
    pub segments: Vec<SegmentReport>,
    pub boundaries: Vec<BoundaryReport>,
}

impl EvalReport {
    pub fn latency_f64(&self) -> f64 {
        to_f64(&self.latency_s)
    }

    pub fn throughput_f64(&self) -> f64 {
        to_f64(&self.throughput)
    }
}

struct SegmentCost {
    cycles: u64,
    busy: u64,
    pe_cycles: u64,
    macs: u64,
    access: Traffic,
    /// Buffer components, one entry per CE position.
    buffers: Vec<u64>,
}

fn segment_cost(acc: &Accelerator, si: usize) -> SegmentCost {
    let seg = &acc.segments[si];
    let block = &acc.blocks[seg.block];
    let cnn = &*acc.cnn;
    let n = cnn.num_layers();
    let mut access = Traffic::default();
    let mut macs = 0;

    for &l in &seg.layers {
        let layer = cnn.layer(l);
        macs += layer.macs();
        let res = acc.residency(l);
        if l == 1 {
            access.fms += layer.ifms_bytes();
        }
        if l == n {
            access.fms += layer.ofms_bytes();
        }
        if res.residual_copy_off_chip {
            access.fms += layer.ofms_bytes();
        }
        for &s in &layer.residual_sources {
            if acc.residency(s).residual_copy_off_chip {
                access.fms += cnn.layer(s).ofms_bytes();
            }
        }
        match block.shape {
            BlockShape::SingleCe => {
                let buf = &acc.buffers.ces[acc.layer_ce[l - 1]];
                if res.ifms_off_chip {
                    let mut t = streamed_ifm_traffic(
                        layer.ifms_bytes(),
                        layer.weights_bytes(),
                        buf.ifm_buffer_bytes,
                        buf.weights_buffer_bytes,
                    );
                    if acc.segment_entry(l) {
                        // the first full read arrives with the segment input
                        t.fms -= layer.ifms_bytes();
                    }
                    access += t;
                } else {
                    access.weights += layer.weights_bytes();
                }
                if res.ofms_off_chip && !acc.segment_exit(l) {
                    access.fms += layer.ofms_bytes();
                }
            }
            BlockShape::Pipelined => {
                access.weights +=
                    pipelined_layer_accesses(layer.weights_bytes(), res.weights_resident, acc.tile_count(l));
            }
        }
    }

    match block.shape {
        BlockShape::SingleCe => {
            let ce = &acc.ces[block.ces[0]];
            let cycles: u64 = seg
                .layers
                .iter()
                .map(|&l| single_ce_layer_latency(&cnn.layer(l).loop_nest(), &ce.parallelism))
                .sum();
            SegmentCost {
                cycles,
                busy: cycles,
                pe_cycles: cycles * ce.pe_count,
                macs,
                access,
                buffers: vec![acc.buffers.ces[block.ces[0]].total()],
            }
        }
        BlockShape::Pipelined => {
            let tiles: Vec<u64> = seg.layers.iter().map(|&l| acc.tile_count(l)).collect();
            let lat: Vec<u64> = seg
                .layers
                .iter()
                .enumerate()
                .map(|(j, &l)| single_ce_layer_latency(&acc.tile_nest(l), &acc.ces[block.ces[j]].parallelism))
                .collect();
            let schedule = pipeline_schedule(&tiles).expect("tile counts are positive");
            let pe_cycles = seg
                .layers
                .iter()
                .enumerate()
                .map(|(j, _)| acc.ces[block.ces[j]].pe_count * tiles[j] * lat[j])
                .sum();
            let buffers = seg
                .layers
                .iter()
                .enumerate()
                .map(|(j, &l)| {
                    let layer = cnn.layer(l);
                    let w = if acc.residency(l).weights_resident {
                        layer.weights_bytes()
                    } else {
                        layer.weights_tile_bytes(acc.ces[block.ces[j]].parallelism.filters)
                    };
                    w + 2 * layer.ofm_row_bytes()
                })
                .collect();
            SegmentCost {
                cycles: pipelined_block_latency(&schedule, &lat),
                busy: pipelined_busy_cycles(&schedule, &lat),
                pe_cycles,
                macs,
                access,
                buffers,
            }
        }
    }
}

/// Worst case over the segments a block processes, taken per CE position.
pub fn multi_segment_buffer(per_segment: &[Vec<u64>]) -> u64 {
    let width = per_segment.iter().map(Vec::len).max().unwrap_or(0);
    (0..width)
        .map(|j| per_segment.iter().filter_map(|s| s.get(j)).copied().max().unwrap_or(0))
        .sum()
}

pub fn compose(acc: &Accelerator) -> EvalReport {
    let platform = &acc.platform;
    let costs: Vec<SegmentCost> = (0..acc.segments.len()).map(|si| segment_cost(acc, si)).collect();

    let boundaries: Vec<BoundaryReport> = acc
        .buffers
        .boundaries
        .iter()
        .map(|b| BoundaryReport {
            after_layer: b.after_layer,
            bytes: b.bytes,
            on_chip: b.on_chip,
            buffer_bytes: b.buffer_bytes,
            access_bytes: if b.on_chip { 0 } else { 2 * b.bytes },
            comm_s: if b.on_chip {
                Ratio::zero()
            } else {
                Ratio::new(b.bytes as i128, platform.bandwidth as i128)
            },
        })
        .collect();

    let mut segments = Vec::with_capacity(costs.len());
    for (si, (seg, c)) in acc.segments.iter().zip(&costs).enumerate() {
        let t = effective_time(c.cycles, c.access.total(), platform);
        let block = &acc.blocks[seg.block];
        let buffer_bytes = if si == block.first_segment {
            block.ces.iter().map(|&ce| acc.buffers.ces[ce].total()).sum()
        } else {
            0
        };
        segments.push(SegmentReport {
            index: si,
            block: seg.block,
            pass: seg.pass,
            layer_lo: seg.first(),
            layer_hi: seg.last(),
            compute_cycles: c.cycles,
            busy_cycles: c.busy,
            compute_s: t.compute_s,
            memory_s: t.memory_s,
            effective_s: t.effective_s,
            idle_fraction: t.idle_fraction,
            memory_bound: t.memory_s > t.compute_s,
            buffer_bytes,
            own_buffer_bytes: c.buffers.iter().sum(),
            access: c.access,
            macs: c.macs,
            pe_cycles: c.pe_cycles,
            underutilization: Ratio::from_integer(1) - Ratio::new(c.macs as i128, c.pe_cycles as i128),
        });
    }

    let mut blocks = Vec::with_capacity(acc.blocks.len());
    for (bi, block) in acc.blocks.iter().enumerate() {
        let range = block.first_segment..block.first_segment + block.num_segments;
        let inner_comm: Seconds = boundaries[range.start..range.end - 1].iter().map(|b| b.comm_s).sum();
        let latency_s: Seconds = segments[range.clone()].iter().map(|s| s.effective_s).sum::<Seconds>() + inner_comm;
        let interval_s = if block.shape == BlockShape::Pipelined && block.num_segments == 1 {
            let s = &segments[range.start];
            Ratio::new(s.busy_cycles as i128, platform.clock_hz as i128).max(s.memory_s)
        } else {
            latency_s
        };
        blocks.push(BlockReport {
            index: bi,
            segments: block.num_segments,
            compute_cycles: segments[range.clone()].iter().map(|s| s.compute_cycles).sum(),
            latency_s,
            interval_s,
            buffer_bytes: block.ces.iter().map(|&ce| acc.buffers.ces[ce].total()).sum(),
            access_bytes: segments[range].iter().map(|s| s.access.total()).sum(),
        });
    }

    let latency_s: Seconds =
        segments.iter().map(|s| s.effective_s).sum::<Seconds>() + boundaries.iter().map(|b| b.comm_s).sum::<Seconds>();
    let coarse = acc.coarse_pipelined();
    let throughput = if segments.len() == 1 {
        blocks[0].interval_s.recip()
    } else if coarse {
        blocks.iter().map(|b| b.interval_s).max().expect("has blocks").recip()
    } else {
        latency_s.recip()
    };

    let mut access_breakdown: Traffic = segments.iter().map(|s| s.access).sum();
    access_breakdown.fms += boundaries.iter().map(|b| b.access_bytes).sum::<u64>();

    EvalReport {
        sketch: acc.sketch.to_string(),
        latency_s,
        throughput,
        buffer_bytes: acc.buffers.allocated_bytes,
        access_bytes: access_breakdown.total(),
        compute_cycles: segments.iter().map(|s| s.compute_cycles).sum(),
        access_breakdown,
        full_fit: acc.buffers.full_fit,
        inter_segment_pipelining: coarse,
        clock_hz: platform.clock_hz,
        clock_assumed: platform.clock_assumed,
        blocks,
        segments,
        boundaries,
    }
}

/// Builds and composes in one call.
pub fn evaluate(
    sketch: &crate::notation::AcceleratorSketch,
    cnn: std::sync::Arc<crate::descriptors::CnnModel>,
    platform: &FpgaPlatform,
) -> crate::error::Result<EvalReport> {
    let acc = crate::builder::build(sketch, cnn, platform)?;
    Ok(compose(&acc))
}
