//! Event-driven reference simulator.
//!
//! Runs one input through a built accelerator stage by stage. CEs inside a
//! stage run concurrently and meet at a barrier; every off-chip transfer is a
//! job on a single FIFO channel of the platform's bandwidth. Loads of a
//! segment are issued when the segment starts, stores when the stage that
//! produced the data ends. A pipelined block receives the network input one
//! row band per tile. Cycle counts come from walking the chunked
//! iteration space of each layer, byte counts from the individual transfers,
//! so none of the closed forms used by the analytical model are reused.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::io::Write;

use num_rational::Ratio;
use num_traits::Zero;
use serde::Serialize;

use crate::blocks::{Parallelism, Traffic};
use crate::builder::{Accelerator, BlockShape};
use crate::composer::{ratio_as_f64, to_f64, Seconds};
use crate::descriptors::{ConvLayer, LoopNest};
use crate::error::{Error, Result};

pub const DEFAULT_CAP_MACS: u64 = 100_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    StageStart,
    TileDone,
    Load,
    Store,
    Boundary,
    SegmentEnd,
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceKind::StageStart => "stage_start",
            TraceKind::TileDone => "tile_done",
            TraceKind::Load => "load",
            TraceKind::Store => "store",
            TraceKind::Boundary => "boundary",
            TraceKind::SegmentEnd => "segment_end",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEvent {
    pub event: usize,
    /// Time in clock cycles; fractional when a transfer ends mid-cycle.
    #[serde(serialize_with = "ratio_as_f64")]
    pub cycle: Ratio<i128>,
    /// CE id, 0 for events not tied to a CE.
    pub ce: usize,
    pub kind: TraceKind,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimSegment {
    pub index: usize,
    pub stages: usize,
    /// Cycles with an infinitely fast channel.
    pub cycles: u64,
    pub access: Traffic,
    #[serde(serialize_with = "ratio_as_f64")]
    pub time_s: Seconds,
    /// Duration of the longest stage, counting its transfers.
    #[serde(serialize_with = "ratio_as_f64")]
    pub longest_stage_s: Seconds,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    /// Compute cycles of the whole run with an infinitely fast channel.
    pub cycles: u64,
    pub access_bytes: u64,
    pub access: Traffic,
    pub macs: u64,
    /// End-to-end time with the platform's bandwidth.
    #[serde(serialize_with = "ratio_as_f64")]
    pub time_s: Seconds,
    /// Allowed gap to an analytical latency: one longest stage per segment.
    #[serde(serialize_with = "ratio_as_f64")]
    pub tolerance_s: Seconds,
    pub segments: Vec<SimSegment>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

impl SimReport {
    /// Whether an analytical latency lies within the stage tolerance.
    pub fn latency_agrees(&self, analytical_s: Seconds) -> bool {
        let gap = if analytical_s > self.time_s {
            analytical_s - self.time_s
        } else {
            self.time_s - analytical_s
        };
        gap <= self.tolerance_s
    }

    /// `event,cycle,ce,kind,bytes`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Config(format!("writing trace: {e}"));
        w.write_record(["event", "cycle", "ce", "kind", "bytes"]).map_err(io)?;
        for e in &self.trace {
            w.write_record([
                e.event.to_string(),
                to_f64(&e.cycle).to_string(),
                e.ce.to_string(),
                e.kind.to_string(),
                e.bytes.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Config(format!("writing trace: {e}")))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Class {
    Weights,
    Fms,
}

#[derive(Clone, Copy, Debug)]
struct Transfer {
    class: Class,
    bytes: u64,
    ce: usize,
}

#[derive(Default)]
struct Stage {
    /// (CE id, cycles) per active CE.
    work: Vec<(usize, u64)>,
    loads: Vec<Transfer>,
    stores: Vec<Transfer>,
}

/// Walks the output and reduction loops in steps of the unroll factors; each
/// innermost step is one cycle. Returns (cycles, MACs performed).
fn walk_iteration_space(nest: &LoopNest, par: &Parallelism) -> (u64, u64) {
    let steps = |extent: u64, factor: u64| {
        (0..extent)
            .step_by(factor.max(1) as usize)
            .map(move |s| (extent - s).min(factor))
    };
    let mut cycles = 0;
    let mut macs = 0;
    for f in steps(nest.filters, par.filters) {
        for h in steps(nest.out_h, par.out_h) {
            for w in steps(nest.out_w, par.out_w) {
                let out = f * h * w;
                for c in steps(nest.reduction, par.in_channels) {
                    for kh in steps(nest.kernel_h, par.kernel_h) {
                        for kw in steps(nest.kernel_w, par.kernel_w) {
                            cycles += 1;
                            macs += out * c * kh * kw;
                        }
                    }
                }
            }
        }
    }
    (cycles, macs)
}

/// Chunks of `total` bytes at most `chunk` long.
fn chunks(total: u64, chunk: u64) -> impl Iterator<Item = u64> {
    let chunk = chunk.max(1);
    (0..total).step_by(chunk as usize).map(move |s| (total - s).min(chunk))
}

/// Transfers of a layer whose IFMs stream through a partial buffer. Both loop
/// orders are enumerated and the one moving fewer bytes kept. With
/// `first_pass_served` the first full sweep over the IFMs is not fetched.
fn streamed_transfers(
    ifms: u64,
    weights: u64,
    ifm_buf: u64,
    w_buf: u64,
    ce: usize,
    first_pass_served: bool,
) -> Vec<Transfer> {
    let load = |class, bytes| Transfer { class, bytes, ce };
    // outer loop over IFM chunks, all weights per chunk
    let mut by_ifm = Vec::new();
    for i in chunks(ifms, ifm_buf) {
        by_ifm.push(load(Class::Fms, i));
        for w in chunks(weights, w_buf) {
            by_ifm.push(load(Class::Weights, w));
        }
    }
    let by_ifm_bytes: u64 = by_ifm.iter().map(|t| t.bytes).sum();
    // outer loop over weight chunks, all IFMs per chunk
    let mut by_w = Vec::new();
    for w in chunks(weights, w_buf) {
        by_w.push(load(Class::Weights, w));
        for i in chunks(ifms, ifm_buf) {
            by_w.push(load(Class::Fms, i));
        }
    }
    let by_w_bytes: u64 = by_w.iter().map(|t| t.bytes).sum();
    let mut chosen = if by_w_bytes < by_ifm_bytes { by_w } else { by_ifm };
    if first_pass_served {
        // in either order the first sweep is the first run of IFM chunks
        let mut skip = chunks(ifms, ifm_buf).count();
        chosen.retain(|t| {
            if skip > 0 && t.class == Class::Fms {
                skip -= 1;
                false
            } else {
                true
            }
        });
    }
    chosen
}

/// Input bytes first needed by each output row: the rows under the kernel
/// window that earlier rows did not already pull in.
fn input_bands(layer: &ConvLayer) -> Vec<u64> {
    let row = layer.ifm_w * layer.in_channels * layer.word_bytes;
    let mut have = 0;
    (0..layer.ofm_h)
        .map(|t| {
            let need = if t + 1 == layer.ofm_h {
                layer.ifm_h
            } else {
                (t * layer.stride + layer.kernel_h / 2 + 1).min(layer.ifm_h)
            };
            let fresh = need.saturating_sub(have);
            have = have.max(need);
            fresh * row
        })
        .collect()
}

struct Builder<'a> {
    acc: &'a Accelerator,
    cycle_cache: HashMap<(usize, usize, bool), (u64, u64)>,
    macs: u64,
}

impl<'a> Builder<'a> {
    fn layer_work(&mut self, l: usize, tile: bool) -> (u64, u64) {
        let acc = self.acc;
        let ce = acc.layer_ce[l - 1];
        *self.cycle_cache.entry((l, ce, tile)).or_insert_with(|| {
            let nest = if tile {
                acc.tile_nest(l)
            } else {
                acc.cnn.layer(l).loop_nest()
            };
            walk_iteration_space(&nest, &acc.ces[ce].parallelism)
        })
    }

    /// Network input, residual copies and network output. The input is left
    /// out when `banded`, the caller then delivers it row band by row band.
    fn common(&self, l: usize, banded: bool, first: &mut Vec<Transfer>, last: &mut Vec<Transfer>) {
        let acc = self.acc;
        let cnn = &*acc.cnn;
        let layer = cnn.layer(l);
        let ce = acc.ce_of(l).id;
        if l == 1 && !banded {
            first.push(Transfer {
                class: Class::Fms,
                bytes: layer.ifms_bytes(),
                ce,
            });
        }
        for &s in &layer.residual_sources {
            if acc.residency(s).residual_copy_off_chip {
                first.push(Transfer {
                    class: Class::Fms,
                    bytes: cnn.layer(s).ofms_bytes(),
                    ce,
                });
            }
        }
        if acc.residency(l).residual_copy_off_chip {
            last.push(Transfer {
                class: Class::Fms,
                bytes: layer.ofms_bytes(),
                ce,
            });
        }
        if l == cnn.num_layers() {
            last.push(Transfer {
                class: Class::Fms,
                bytes: layer.ofms_bytes(),
                ce,
            });
        }
    }

    fn stages(&mut self, si: usize) -> Vec<Stage> {
        let acc = self.acc;
        let seg = &acc.segments[si];
        let block = &acc.blocks[seg.block];
        match block.shape {
            BlockShape::SingleCe => {
                let buf = &acc.buffers.ces[block.ces[0]];
                let mut out = Vec::new();
                for &l in &seg.layers {
                    let layer = acc.cnn.layer(l);
                    let ce = acc.ce_of(l).id;
                    let res = acc.residency(l);
                    let (cycles, macs) = self.layer_work(l, false);
                    self.macs += macs;
                    let mut st = Stage {
                        work: vec![(ce, cycles)],
                        ..Stage::default()
                    };
                    let mut loads = Vec::new();
                    let mut stores = Vec::new();
                    self.common(l, false, &mut loads, &mut stores);
                    if res.ifms_off_chip {
                        loads.extend(streamed_transfers(
                            layer.ifms_bytes(),
                            layer.weights_bytes(),
                            buf.ifm_buffer_bytes,
                            buf.weights_buffer_bytes,
                            ce,
                            acc.segment_entry(l),
                        ));
                    } else {
                        loads.extend(
                            chunks(layer.weights_bytes(), buf.weights_buffer_bytes).map(|bytes| Transfer {
                                class: Class::Weights,
                                bytes,
                                ce,
                            }),
                        );
                    }
                    if res.ofms_off_chip && !acc.segment_exit(l) {
                        stores.push(Transfer {
                            class: Class::Fms,
                            bytes: layer.ofms_bytes(),
                            ce,
                        });
                    }
                    st.loads = loads;
                    st.stores = stores;
                    out.push(st);
                }
                out
            }
            BlockShape::Pipelined => {
                // CE j starts one stage after CE j-1 and runs one stage per tile
                let spans: Vec<(usize, usize)> = seg
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(j, &l)| (j, j + acc.tile_count(l) as usize))
                    .collect();
                let n_stages = spans.iter().map(|s| s.1).max().unwrap_or(0);
                let mut out: Vec<Stage> = (0..n_stages).map(|_| Stage::default()).collect();
                for (j, &l) in seg.layers.iter().enumerate() {
                    let layer = acc.cnn.layer(l);
                    let ce = acc.ce_of(l).id;
                    let (start, end) = spans[j];
                    let (cycles, macs) = self.layer_work(l, true);
                    let mut first = Vec::new();
                    let mut last = Vec::new();
                    self.common(l, true, &mut first, &mut last);
                    out[start].loads.extend(first);
                    out[end - 1].stores.extend(last);
                    if l == 1 {
                        for (t, bytes) in input_bands(layer).into_iter().enumerate() {
                            if bytes > 0 {
                                out[start + t].loads.push(Transfer {
                                    class: Class::Fms,
                                    bytes,
                                    ce,
                                });
                            }
                        }
                    }
                    let resident = acc.residency(l).weights_resident;
                    for (s, stage) in out.iter_mut().enumerate().take(end).skip(start) {
                        self.macs += macs;
                        stage.work.push((ce, cycles));
                        if s == start || !resident {
                            stage.loads.push(Transfer {
                                class: Class::Weights,
                                bytes: layer.weights_bytes(),
                                ce,
                            });
                        }
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Done {
    Load { stage: usize, bytes: u64, ce: usize },
    Tile { stage: usize, ce: usize },
    Store { bytes: u64, ce: usize },
}

/// FIFO off-chip channel; `cycles_per_byte` of zero makes transfers free.
struct Channel {
    free_at: Ratio<i128>,
    cycles_per_byte: Ratio<i128>,
}

impl Channel {
    fn issue(&mut self, now: Ratio<i128>, bytes: u64) -> Ratio<i128> {
        let start = self.free_at.max(now);
        self.free_at = start + self.cycles_per_byte * Ratio::from_integer(bytes as i128);
        self.free_at
    }
}

struct Run {
    end: Ratio<i128>,
    longest_stage: Ratio<i128>,
    trace: Vec<TraceEvent>,
}

/// Event loop of one segment starting at `t0`.
fn run_segment(stages: &[Stage], t0: Ratio<i128>, channel: &mut Channel, tracing: bool) -> Run {
    let mut heap: BinaryHeap<Reverse<(Ratio<i128>, u64, Done)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut trace = Vec::new();
    let mut push = |heap: &mut BinaryHeap<_>, t: Ratio<i128>, e: Done| {
        heap.push(Reverse((t, seq, e)));
        seq += 1;
    };
    let mut pending_loads: Vec<usize> = stages.iter().map(|s| s.loads.len()).collect();
    let mut running = vec![0usize; stages.len()];
    let mut started = vec![None; stages.len()];
    let mut done = vec![false; stages.len()];
    let mut transfer_cycles = vec![Ratio::zero(); stages.len()];

    for (k, st) in stages.iter().enumerate() {
        for t in &st.loads {
            let at = channel.issue(t0, t.bytes);
            transfer_cycles[k] += channel.cycles_per_byte * Ratio::from_integer(t.bytes as i128);
            push(
                &mut heap,
                at,
                Done::Load {
                    stage: k,
                    bytes: t.bytes,
                    ce: t.ce,
                },
            );
        }
    }

    let mut now = t0;
    let mut end = t0;
    let mut next = 0usize;
    loop {
        // start every stage whose data is in and whose predecessor finished
        while next < stages.len() && pending_loads[next] == 0 && (next == 0 || done[next - 1]) {
            let k = next;
            started[k] = Some(now);
            if tracing {
                trace.push((now, 0, TraceKind::StageStart, 0));
            }
            running[k] = stages[k].work.len();
            for &(ce, cycles) in &stages[k].work {
                push(
                    &mut heap,
                    now + Ratio::from_integer(cycles as i128),
                    Done::Tile { stage: k, ce },
                );
            }
            if running[k] > 0 {
                next += 1;
                break;
            }
            done[k] = true;
            next += 1;
        }
        let Some(Reverse((t, _, e))) = heap.pop() else { break };
        now = t;
        end = end.max(t);
        match e {
            Done::Load { bytes, ce, stage } => {
                pending_loads[stage] -= 1;
                if tracing {
                    trace.push((t, ce, TraceKind::Load, bytes));
                }
            }
            Done::Store { bytes, ce } => {
                if tracing {
                    trace.push((t, ce, TraceKind::Store, bytes));
                }
            }
            Done::Tile { stage, ce } => {
                if tracing {
                    trace.push((t, ce, TraceKind::TileDone, 0));
                }
                running[stage] -= 1;
                if running[stage] == 0 {
                    done[stage] = true;
                    for s in &stages[stage].stores {
                        let at = channel.issue(t, s.bytes);
                        transfer_cycles[stage] += channel.cycles_per_byte * Ratio::from_integer(s.bytes as i128);
                        push(
                            &mut heap,
                            at,
                            Done::Store {
                                bytes: s.bytes,
                                ce: s.ce,
                            },
                        );
                    }
                }
            }
        }
    }
    debug_assert!(done.iter().all(|&d| d), "every stage completes");

    let longest_stage = stages
        .iter()
        .enumerate()
        .map(|(k, st)| {
            let compute = Ratio::from_integer(st.work.iter().map(|w| w.1).max().unwrap_or(0) as i128);
            compute.max(transfer_cycles[k])
        })
        .max()
        .unwrap_or_else(Ratio::zero);
    Run {
        end,
        longest_stage,
        trace: trace
            .into_iter()
            .map(|(cycle, ce, kind, bytes)| TraceEvent {
                event: 0,
                cycle,
                ce,
                kind,
                bytes,
            })
            .collect(),
    }
}

fn tally(stages: &[Stage]) -> Traffic {
    let mut t = Traffic::default();
    for x in stages.iter().flat_map(|s| s.loads.iter().chain(&s.stores)) {
        match x.class {
            Class::Weights => t.weights += x.bytes,
            Class::Fms => t.fms += x.bytes,
        }
    }
    t
}

/// Simulates one input through `acc`. Refuses networks above `cap_macs`
/// multiply-accumulates.
pub fn simulate(acc: &Accelerator, cap_macs: u64, tracing: bool) -> Result<SimReport> {
    let total_macs = acc.cnn.total_macs();
    if total_macs > cap_macs {
        return Err(Error::SimCap {
            macs: total_macs,
            cap: cap_macs,
        });
    }
    let clock = acc.platform.clock_hz as i128;
    let per_byte = Ratio::new(clock, acc.platform.bandwidth as i128);
    let mut builder = Builder {
        acc,
        cycle_cache: HashMap::new(),
        macs: 0,
    };
    let stages: Vec<Vec<Stage>> = (0..acc.segments.len()).map(|si| builder.stages(si)).collect();

    // compute alone
    let mut free = Channel {
        free_at: Ratio::zero(),
        cycles_per_byte: Ratio::zero(),
    };
    let mut cycles = 0u64;
    let mut seg_cycles = Vec::with_capacity(stages.len());
    for st in &stages {
        let t0 = Ratio::from_integer(cycles as i128);
        let run = run_segment(st, t0, &mut free, false);
        let c = (run.end - t0).to_integer() as u64;
        seg_cycles.push(c);
        cycles += c;
    }

    // with the real channel
    let mut channel = Channel {
        free_at: Ratio::zero(),
        cycles_per_byte: per_byte,
    };
    let mut now = Ratio::zero();
    let mut trace = Vec::new();
    let mut segments = Vec::with_capacity(stages.len());
    let mut access = Traffic::default();
    let mut tolerance = Ratio::zero();
    for (si, st) in stages.iter().enumerate() {
        let t0 = now;
        let run = run_segment(st, t0, &mut channel, tracing);
        now = run.end;
        trace.extend(run.trace);
        let seg_access = tally(st);
        access += seg_access;
        tolerance += run.longest_stage;
        if tracing {
            trace.push(TraceEvent {
                event: 0,
                cycle: now,
                ce: 0,
                kind: TraceKind::SegmentEnd,
                bytes: 0,
            });
        }
        segments.push(SimSegment {
            index: si,
            stages: st.len(),
            cycles: seg_cycles[si],
            access: seg_access,
            time_s: (now - t0) / Ratio::from_integer(clock),
            longest_stage_s: run.longest_stage / Ratio::from_integer(clock),
        });
        if let Some(b) = acc.buffers.boundaries.get(si) {
            if !b.on_chip {
                // written by this segment, read back by the next
                access.fms += 2 * b.bytes;
                let at = channel.issue(now, b.bytes);
                now = at;
                if tracing {
                    trace.push(TraceEvent {
                        event: 0,
                        cycle: at,
                        ce: 0,
                        kind: TraceKind::Boundary,
                        bytes: b.bytes,
                    });
                }
            }
        }
    }
    for (i, e) in trace.iter_mut().enumerate() {
        e.event = i;
    }

    Ok(SimReport {
        cycles,
        access_bytes: access.total(),
        access,
        macs: builder.macs,
        time_s: now / Ratio::from_integer(clock),
        tolerance_s: tolerance / Ratio::from_integer(clock),
        segments,
        trace,
    })
}
