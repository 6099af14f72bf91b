//! Turns a sketch into a concrete accelerator: PEs per CE, unroll factors and
//! the on-chip buffer plan.

use std::sync::Arc;

use num_rational::Ratio;
use serde::Serialize;

use crate::blocks::{single_ce_layer_latency, streamed_ifm_traffic, Parallelism};
use crate::descriptors::{CnnModel, FpgaPlatform, LoopNest};
use crate::error::{Error, Result};
use crate::notation::{AcceleratorSketch, BlockKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataflow {
    OutputStationary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComputeEngine {
    pub id: usize,
    pub pe_count: u64,
    pub parallelism: Parallelism,
    pub dataflow: Dataflow,
    pub layers: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockShape {
    SingleCe,
    Pipelined,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Block {
    pub shape: BlockShape,
    pub layer_lo: usize,
    pub layer_hi: usize,
    /// Positions in [`Accelerator::ces`].
    pub ces: Vec<usize>,
    /// First segment of this block in [`Accelerator::segments`].
    pub first_segment: usize,
    pub num_segments: usize,
}

/// A contiguous run of layers processed by one block in one go: the whole
/// block for a single CE, one round-robin pass for a CE chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub block: usize,
    pub pass: usize,
    pub layers: Vec<usize>,
}

impl Segment {
    pub fn first(&self) -> usize {
        self.layers[0]
    }

    pub fn last(&self) -> usize {
        *self.layers.last().expect("segment has layers")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CeBuffer {
    pub ce: usize,
    pub weights_buffer_bytes: u64,
    pub ifm_buffer_bytes: u64,
    /// Whole-FM working set of a single CE.
    pub fm_bytes: u64,
    /// One tile of a chained CE; allocated twice for ping-pong.
    pub fm_tile_buffer_bytes: u64,
}

impl CeBuffer {
    pub fn total(&self) -> u64 {
        self.weights_buffer_bytes + self.ifm_buffer_bytes + self.fm_bytes + 2 * self.fm_tile_buffer_bytes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BoundaryBuffer {
    /// Last layer before the boundary.
    pub after_layer: usize,
    pub bytes: u64,
    pub on_chip: bool,
    /// On-chip bytes charged to this boundary.
    pub buffer_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LayerResidency {
    pub ifms_off_chip: bool,
    pub ofms_off_chip: bool,
    pub weights_resident: bool,
    pub residual_copy_off_chip: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BufferAllocation {
    pub ces: Vec<CeBuffer>,
    pub boundaries: Vec<BoundaryBuffer>,
    /// Indexed by layer - 1.
    pub residency: Vec<LayerResidency>,
    pub full_fit: bool,
    /// Bytes needed to keep everything on chip.
    pub full_fit_bytes: u64,
    pub allocated_bytes: u64,
    /// Steps taken down the degradation ladder.
    pub rung: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Accelerator {
    #[serde(serialize_with = "serialize_sketch")]
    pub sketch: AcceleratorSketch,
    #[serde(skip)]
    pub cnn: Arc<CnnModel>,
    pub platform: FpgaPlatform,
    pub ces: Vec<ComputeEngine>,
    pub blocks: Vec<Block>,
    pub segments: Vec<Segment>,
    pub buffers: BufferAllocation,
    /// Block of each layer, indexed by layer - 1.
    #[serde(skip)]
    pub layer_block: Vec<usize>,
    /// CE position of each layer, indexed by layer - 1.
    #[serde(skip)]
    pub layer_ce: Vec<usize>,
    /// Segment of each layer, indexed by layer - 1.
    #[serde(skip)]
    pub layer_segment: Vec<usize>,
}

fn serialize_sketch<S: serde::Serializer>(s: &AcceleratorSketch, ser: S) -> std::result::Result<S::Ok, S::Error> {
    ser.serialize_str(&s.to_string())
}

impl PartialEq for Accelerator {
    fn eq(&self, other: &Self) -> bool {
        self.sketch == other.sketch
            && *self.cnn == *other.cnn
            && self.platform == other.platform
            && self.ces == other.ces
            && self.blocks == other.blocks
            && self.segments == other.segments
            && self.buffers == other.buffers
    }
}

impl Accelerator {
    pub fn coarse_pipelined(&self) -> bool {
        self.sketch.inter_segment_pipelining && self.blocks.len() > 1
    }

    pub fn block_of(&self, layer: usize) -> &Block {
        &self.blocks[self.layer_block[layer - 1]]
    }

    pub fn ce_of(&self, layer: usize) -> &ComputeEngine {
        &self.ces[self.layer_ce[layer - 1]]
    }

    pub fn residency(&self, layer: usize) -> LayerResidency {
        self.buffers.residency[layer - 1]
    }

    pub fn is_pipelined(&self, layer: usize) -> bool {
        self.block_of(layer).shape == BlockShape::Pipelined
    }

    /// Tiles a chained layer is split into: one per OFM row.
    pub fn tile_count(&self, layer: usize) -> u64 {
        self.cnn.layer(layer).ofm_h
    }

    /// Loop nest of one tile of a chained layer.
    pub fn tile_nest(&self, layer: usize) -> LoopNest {
        self.cnn.layer(layer).loop_nest().with_rows(1)
    }

    pub fn segment_entry(&self, layer: usize) -> bool {
        self.segments[self.layer_segment[layer - 1]].first() == layer
    }

    pub fn segment_exit(&self, layer: usize) -> bool {
        self.segments[self.layer_segment[layer - 1]].last() == layer
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("accelerator serializes")
    }
}

/// PEs per CE, in sketch order, proportional to each CE's MACs.
pub fn distribute_pes(sketch: &AcceleratorSketch, cnn: &CnnModel, platform: &FpgaPlatform) -> Result<Vec<u64>> {
    let workloads: Vec<u64> = ce_layers(sketch)
        .iter()
        .map(|layers| layers.iter().map(|&l| cnn.layer(l).macs()).sum())
        .collect();
    proportional_split(platform.pe_count, &workloads)
}

/// Largest-remainder apportionment of `total` by `weights`, each share at
/// least 1.
pub fn proportional_split(total: u64, weights: &[u64]) -> Result<Vec<u64>> {
    let n = weights.len();
    if n as u64 > total {
        return Err(Error::InsufficientPes { ces: n, pes: total });
    }
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    let mut shares: Vec<u64> = Vec::with_capacity(n);
    let mut rema: Vec<(u128, usize)> = Vec::with_capacity(n);
    for (i, &w) in weights.iter().enumerate() {
        let q = total as u128 * w as u128;
        shares.push((q / sum) as u64);
        rema.push((q % sum, i));
    }
    let mut left = total - shares.iter().sum::<u64>();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &rema {
        if left == 0 {
            break;
        }
        shares[i] += 1;
        left -= 1;
    }
    for s in shares.iter_mut() {
        *s = (*s).max(1);
    }
    let mut excess = shares.iter().sum::<u64>().saturating_sub(total);
    while excess > 0 {
        let i = (0..n)
            .max_by_key(|&i| (shares[i], std::cmp::Reverse(i)))
            .expect("non-empty");
        shares[i] -= 1;
        excess -= 1;
    }
    Ok(shares)
}

/// Layers handled by each CE, in sketch order.
fn ce_layers(sketch: &AcceleratorSketch) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for b in &sketch.blocks {
        let k = b.kind.ce_count();
        for j in 0..k {
            out.push((b.layer_lo + j..=b.layer_hi).step_by(k).collect());
        }
    }
    out
}

/// Unroll factors on filters, OFM rows and OFM columns minimising the summed
/// cycles of `workload` (nest, repetitions). Ties go to the larger product,
/// then the larger filter factor, then the larger row factor.
pub fn select_parallelism(pe_count: u64, workload: &[(LoopNest, u64)]) -> Parallelism {
    struct Shape {
        f: u64,
        h: u64,
        w: u64,
        serial: u64,
    }
    let mut merged: Vec<(LoopNest, u64)> = workload.to_vec();
    merged.sort_by_key(|(n, _)| (n.filters, n.out_h, n.out_w, n.reduction, n.kernel_h, n.kernel_w));
    let mut shapes: Vec<Shape> = Vec::new();
    let mut prev: Option<(u64, u64, u64)> = None;
    for (n, count) in merged {
        let serial = n.reduction * n.kernel_h * n.kernel_w * count;
        if prev == Some((n.filters, n.out_h, n.out_w)) {
            shapes.last_mut().expect("previous shape").serial += serial;
        } else {
            shapes.push(Shape {
                f: n.filters,
                h: n.out_h,
                w: n.out_w,
                serial,
            });
            prev = Some((n.filters, n.out_h, n.out_w));
        }
    }
    if shapes.is_empty() || pe_count <= 1 {
        return Parallelism::SERIAL;
    }
    let fmax = shapes.iter().map(|s| s.f).max().unwrap_or(1).min(pe_count);
    let hmax = shapes.iter().map(|s| s.h).max().unwrap_or(1);
    let wmax = shapes.iter().map(|s| s.w).max().unwrap_or(1);

    let mut best = (u64::MAX, 0u64, 0u64, 0u64);
    let mut best_par = Parallelism::SERIAL;
    let mut per_f = vec![0u64; shapes.len()];
    for f in 1..=fmax {
        for (i, s) in shapes.iter().enumerate() {
            per_f[i] = s.f.div_ceil(f) * s.serial;
        }
        let hcap = hmax.min(pe_count / f);
        for h in 1..=hcap {
            let w = wmax.min(pe_count / (f * h));
            let mut cycles = 0u64;
            for (i, s) in shapes.iter().enumerate() {
                cycles += per_f[i] * s.h.div_ceil(h) * s.w.div_ceil(w);
            }
            let product = f * h * w;
            let better = cycles < best.0
                || (cycles == best.0
                    && (product > best.1 || (product == best.1 && (f > best.2 || (f == best.2 && h > best.3)))));
            if better {
                best = (cycles, product, f, h);
                best_par = Parallelism::spatial(f, h, w);
            }
        }
    }
    best_par
}

/// Cycles of a whole workload under `par`.
pub fn workload_cycles(par: &Parallelism, workload: &[(LoopNest, u64)]) -> u64 {
    workload.iter().map(|(n, c)| single_ce_layer_latency(n, par) * c).sum()
}

pub fn build(sketch: &AcceleratorSketch, cnn: Arc<CnnModel>, platform: &FpgaPlatform) -> Result<Accelerator> {
    if sketch.blocks.is_empty() {
        return Err(Error::Sketch("accelerator has no blocks".into()));
    }
    if sketch.num_layers() != cnn.num_layers() {
        return Err(Error::Sketch(format!(
            "sketch covers {} layers, CNN has {}",
            sketch.num_layers(),
            cnn.num_layers()
        )));
    }
    let pes = distribute_pes(sketch, &cnn, platform)?;
    let assignments = ce_layers(sketch);
    let n = cnn.num_layers();

    let mut ces = Vec::with_capacity(pes.len());
    let mut blocks = Vec::with_capacity(sketch.blocks.len());
    let mut segments = Vec::new();
    let mut layer_block = vec![0; n];
    let mut layer_ce = vec![0; n];
    let mut layer_segment = vec![0; n];

    for (bi, b) in sketch.blocks.iter().enumerate() {
        let k = b.kind.ce_count();
        let shape = match b.kind {
            BlockKind::SingleCe(_) => BlockShape::SingleCe,
            BlockKind::PipelinedCes(..) => BlockShape::Pipelined,
        };
        let first_ce = ces.len();
        for (j, id) in b.kind.ce_ids().enumerate() {
            let pos = first_ce + j;
            let layers = assignments[pos].clone();
            let workload: Vec<(LoopNest, u64)> = layers
                .iter()
                .map(|&l| {
                    let layer = cnn.layer(l);
                    match shape {
                        BlockShape::SingleCe => (layer.loop_nest(), 1),
                        BlockShape::Pipelined => (layer.loop_nest().with_rows(1), layer.ofm_h),
                    }
                })
                .collect();
            for &l in &layers {
                layer_block[l - 1] = bi;
                layer_ce[l - 1] = pos;
            }
            ces.push(ComputeEngine {
                id,
                pe_count: pes[pos],
                parallelism: select_parallelism(pes[pos], &workload),
                dataflow: Dataflow::OutputStationary,
                layers,
            });
        }
        let first_segment = segments.len();
        match shape {
            BlockShape::SingleCe => segments.push(Segment {
                block: bi,
                pass: 0,
                layers: (b.layer_lo..=b.layer_hi).collect(),
            }),
            BlockShape::Pipelined => {
                for (pass, lo) in (b.layer_lo..=b.layer_hi).step_by(k).enumerate() {
                    segments.push(Segment {
                        block: bi,
                        pass,
                        layers: (lo..=(lo + k - 1).min(b.layer_hi)).collect(),
                    });
                }
            }
        }
        for (si, seg) in segments.iter().enumerate().skip(first_segment) {
            for &l in &seg.layers {
                layer_segment[l - 1] = si;
            }
        }
        blocks.push(Block {
            shape,
            layer_lo: b.layer_lo,
            layer_hi: b.layer_hi,
            ces: (first_ce..first_ce + k).collect(),
            first_segment,
            num_segments: segments.len() - first_segment,
        });
    }

    let mut acc = Accelerator {
        sketch: sketch.clone(),
        cnn,
        platform: platform.clone(),
        ces,
        blocks,
        segments,
        buffers: BufferAllocation {
            ces: Vec::new(),
            boundaries: Vec::new(),
            residency: Vec::new(),
            full_fit: false,
            full_fit_bytes: 0,
            allocated_bytes: 0,
            rung: 0,
        },
        layer_block,
        layer_ce,
        layer_segment,
    };
    acc.buffers = allocate_buffers(&acc)?;
    Ok(acc)
}

/// Convenience wrapper taking the CNN by reference.
pub fn build_ref(sketch: &AcceleratorSketch, cnn: &CnnModel, platform: &FpgaPlatform) -> Result<Accelerator> {
    build(sketch, Arc::new(cnn.clone()), platform)
}

/// Residency choices explored by the allocator.
#[derive(Clone, Debug)]
struct Plan {
    resident: Vec<bool>,
    boundary_on_chip: Vec<bool>,
    ifm_off: Vec<bool>,
    ofm_off: Vec<bool>,
    copy_off: Vec<bool>,
    /// Streaming budget (weights + IFM buffers) per block; 0 when unused.
    stream: Vec<u64>,
}

/// Static per-block facts used while walking the ladder.
struct BlockFacts {
    max_tile: u64,
    initial_stream: u64,
}

struct Allocator<'a> {
    acc: &'a Accelerator,
    cnn: &'a CnnModel,
    facts: Vec<BlockFacts>,
    boundary_bytes: Vec<u64>,
    coarse: bool,
    demote_order: Vec<usize>,
    boundary_order: Vec<usize>,
}

impl<'a> Allocator<'a> {
    fn new(acc: &'a Accelerator) -> Self {
        let cnn = &*acc.cnn;
        let facts = acc
            .blocks
            .iter()
            .map(|b| {
                let mut max_tile = 0;
                let mut max_w = 0;
                let mut max_i = 0;
                for l in b.layer_lo..=b.layer_hi {
                    let layer = cnn.layer(l);
                    max_tile = max_tile.max(layer.weights_tile_bytes(acc.ce_of(l).parallelism.filters));
                    max_w = max_w.max(layer.weights_bytes());
                    max_i = max_i.max(layer.ifms_bytes());
                }
                BlockFacts {
                    max_tile,
                    initial_stream: (9 * (max_w + max_i)).div_ceil(8) + 9,
                }
            })
            .collect();
        let boundary_bytes: Vec<u64> = acc.segments[1..]
            .iter()
            .map(|s| cnn.crossing_bytes(s.first()))
            .collect();
        let mut demote_order: Vec<usize> = (1..=cnn.num_layers()).filter(|&l| acc.is_pipelined(l)).collect();
        demote_order.sort_by_key(|&l| (std::cmp::Reverse(cnn.layer(l).weights_bytes()), l));
        let mut boundary_order: Vec<usize> = (0..boundary_bytes.len()).collect();
        boundary_order.sort_by_key(|&b| (std::cmp::Reverse(boundary_bytes[b]), b));
        Allocator {
            acc,
            cnn,
            facts,
            boundary_bytes,
            coarse: acc.coarse_pipelined(),
            demote_order,
            boundary_order,
        }
    }

    fn full_plan(&self) -> Plan {
        let n = self.cnn.num_layers();
        Plan {
            resident: (1..=n).map(|l| self.acc.is_pipelined(l)).collect(),
            boundary_on_chip: vec![true; self.boundary_bytes.len()],
            ifm_off: vec![false; n],
            ofm_off: vec![false; n],
            copy_off: vec![false; n],
            stream: vec![0; self.acc.blocks.len()],
        }
    }

    fn need(&self, plan: &Plan, l: usize) -> u64 {
        let layer = self.cnn.layer(l);
        let mut need = self
            .cnn
            .live_sources(l)
            .iter()
            .filter(|&&s| !plan.copy_off[s - 1])
            .map(|&s| self.cnn.layer(s).ofms_bytes())
            .sum::<u64>();
        if !plan.ifm_off[l - 1] {
            need += layer.ifms_bytes();
        }
        if !plan.ofm_off[l - 1] {
            need += layer.ofms_bytes();
        }
        need
    }

    /// Largest working set in a single-CE block and the first layer reaching it.
    fn pool(&self, plan: &Plan, b: usize) -> (u64, usize) {
        let blk = &self.acc.blocks[b];
        let mut best = (0, blk.layer_lo);
        for l in blk.layer_lo..=blk.layer_hi {
            let need = self.need(plan, l);
            if need > best.0 {
                best = (need, l);
            }
        }
        best
    }

    fn spills_ifm(&self, plan: &Plan, b: usize) -> bool {
        let blk = &self.acc.blocks[b];
        (blk.layer_lo..=blk.layer_hi).any(|l| plan.ifm_off[l - 1])
    }

    fn max_band(&self, plan: &Plan, b: usize) -> u64 {
        let blk = &self.acc.blocks[b];
        (blk.layer_lo..=blk.layer_hi)
            .filter(|&l| plan.ifm_off[l - 1])
            .map(|l| self.cnn.layer(l).ifm_band_bytes())
            .max()
            .unwrap_or(0)
    }

    /// Cheapest split of a streaming budget into (weights, IFM) buffers over
    /// eight ratios, or None if no ratio leaves room for a weights tile and
    /// an IFM band.
    fn split(&self, plan: &Plan, b: usize, budget: u64) -> Option<(u64, u64, u64)> {
        let blk = &self.acc.blocks[b];
        let band = self.max_band(plan, b);
        let tile = self.facts[b].max_tile;
        let mut best: Option<(u64, u64, u64)> = None;
        for k in 1..=8u64 {
            let wb = budget * k / 9;
            let ib = budget - wb;
            if wb < tile || ib < band || ib == 0 {
                continue;
            }
            let cost: u64 = (blk.layer_lo..=blk.layer_hi)
                .filter(|&l| plan.ifm_off[l - 1])
                .map(|l| {
                    let layer = self.cnn.layer(l);
                    streamed_ifm_traffic(layer.ifms_bytes(), layer.weights_bytes(), ib, wb).total()
                })
                .sum();
            if best.is_none_or(|(c, _, _)| cost < c) {
                best = Some((cost, wb, ib));
            }
        }
        best
    }

    fn stream_cost(&self, plan: &Plan, b: usize, budget: u64) -> Option<u64> {
        self.split(plan, b, budget).map(|(cost, _, _)| cost)
    }

    fn ce_buffers(&self, plan: &Plan) -> Vec<CeBuffer> {
        let mut out = Vec::with_capacity(self.acc.ces.len());
        for (b, blk) in self.acc.blocks.iter().enumerate() {
            match blk.shape {
                BlockShape::SingleCe => {
                    let (pool, _) = self.pool(plan, b);
                    let (wb, ib) = if self.spills_ifm(plan, b) {
                        let (_, wb, ib) = self.split(plan, b, plan.stream[b]).expect("stream budget kept valid");
                        (wb, ib)
                    } else {
                        (self.facts[b].max_tile, 0)
                    };
                    out.push(CeBuffer {
                        ce: self.acc.ces[blk.ces[0]].id,
                        weights_buffer_bytes: wb,
                        ifm_buffer_bytes: ib,
                        fm_bytes: pool,
                        fm_tile_buffer_bytes: 0,
                    });
                }
                BlockShape::Pipelined => {
                    for &c in &blk.ces {
                        let ce = &self.acc.ces[c];
                        let mut weights = 0;
                        let mut tile = 0;
                        for &l in &ce.layers {
                            let layer = self.cnn.layer(l);
                            let w = if plan.resident[l - 1] {
                                layer.weights_bytes()
                            } else {
                                layer.weights_tile_bytes(ce.parallelism.filters)
                            };
                            weights = weights.max(w);
                            tile = tile.max(layer.ofm_row_bytes());
                        }
                        out.push(CeBuffer {
                            ce: ce.id,
                            weights_buffer_bytes: weights,
                            ifm_buffer_bytes: 0,
                            fm_bytes: 0,
                            fm_tile_buffer_bytes: tile,
                        });
                    }
                }
            }
        }
        out
    }

    /// Whether producer and consumer of boundary `b` run concurrently on
    /// different inputs. Passes of one block never overlap.
    fn overlapped(&self, b: usize) -> bool {
        self.coarse && self.acc.segments[b].block != self.acc.segments[b + 1].block
    }

    fn boundary_buffers(&self, plan: &Plan) -> Vec<BoundaryBuffer> {
        // boundaries crossed one at a time share a single buffer
        let shared = (0..self.boundary_bytes.len())
            .filter(|&b| plan.boundary_on_chip[b] && !self.overlapped(b))
            .max_by_key(|&b| (self.boundary_bytes[b], std::cmp::Reverse(b)));
        (0..self.boundary_bytes.len())
            .map(|b| {
                let on = plan.boundary_on_chip[b];
                let bytes = self.boundary_bytes[b];
                let buffer_bytes = match (on, self.overlapped(b)) {
                    (false, _) => 0,
                    (true, true) => 2 * bytes,
                    (true, false) if shared == Some(b) => bytes,
                    (true, false) => 0,
                };
                BoundaryBuffer {
                    after_layer: self.acc.segments[b].last(),
                    bytes,
                    on_chip: on,
                    buffer_bytes,
                }
            })
            .collect()
    }

    fn requirement(&self, plan: &Plan) -> u64 {
        self.ce_buffers(plan).iter().map(CeBuffer::total).sum::<u64>()
            + self.boundary_buffers(plan).iter().map(|b| b.buffer_bytes).sum::<u64>()
    }

    fn same_single_block(&self, a: usize, b: usize) -> bool {
        let ba = self.acc.layer_block[a - 1];
        ba == self.acc.layer_block[b - 1] && self.acc.blocks[ba].shape == BlockShape::SingleCe
    }

    /// Components of a layer's working set that can still move off chip,
    /// as (bytes, action).
    fn reducible(&self, plan: &Plan, l: usize) -> Vec<(u64, Spill)> {
        let layer = self.cnn.layer(l);
        let n = self.cnn.num_layers();
        let mut out = Vec::new();
        if !plan.ifm_off[l - 1] {
            let open = l == 1 || self.same_single_block(l - 1, l) || !self.boundary_before(plan, l);
            if open {
                out.push((layer.ifms_bytes(), Spill::Ifm(l)));
            }
        }
        if !plan.ofm_off[l - 1] {
            let open = l == n || self.same_single_block(l, l + 1) || !self.boundary_before(plan, l + 1);
            if open {
                out.push((layer.ofms_bytes(), Spill::Ofm(l)));
            }
        }
        for &s in self.cnn.live_sources(l) {
            if !plan.copy_off[s - 1] {
                out.push((self.cnn.layer(s).ofms_bytes(), Spill::Copy(s)));
            }
        }
        out
    }

    /// Whether the segment boundary in front of layer `l` (if any) is on chip.
    fn boundary_before(&self, plan: &Plan, l: usize) -> bool {
        let seg = self.acc.layer_segment[l - 1];
        if seg == 0 || self.acc.segments[seg].first() != l {
            return false;
        }
        plan.boundary_on_chip[seg - 1]
    }

    fn apply(&self, plan: &mut Plan, spill: Spill) {
        let mark_stream = |plan: &mut Plan, l: usize| {
            let b = self.acc.layer_block[l - 1];
            if plan.stream[b] == 0 {
                plan.stream[b] = self.facts[b].initial_stream;
            }
        };
        match spill {
            Spill::Ifm(l) => {
                plan.ifm_off[l - 1] = true;
                if l > 1 && self.same_single_block(l - 1, l) {
                    plan.ofm_off[l - 2] = true;
                }
                mark_stream(plan, l);
            }
            Spill::Ofm(l) => {
                plan.ofm_off[l - 1] = true;
                if l < self.cnn.num_layers() && self.same_single_block(l, l + 1) {
                    plan.ifm_off[l] = true;
                    mark_stream(plan, l + 1);
                }
            }
            Spill::Copy(s) => plan.copy_off[s - 1] = true,
        }
    }

    /// Moves one step down the ladder. Returns false at the bottom.
    fn advance(&self, plan: &mut Plan) -> bool {
        if let Some(&l) = self.demote_order.iter().find(|&&l| plan.resident[l - 1]) {
            plan.resident[l - 1] = false;
            return true;
        }
        if let Some(&b) = self.boundary_order.iter().find(|&&b| plan.boundary_on_chip[b]) {
            plan.boundary_on_chip[b] = false;
            return true;
        }
        // shrink the largest reducible single-CE working set
        let mut target: Option<(u64, usize, Spill)> = None;
        for (b, blk) in self.acc.blocks.iter().enumerate() {
            if blk.shape != BlockShape::SingleCe {
                continue;
            }
            let (pool, _) = self.pool(plan, b);
            if pool == 0 {
                continue;
            }
            let mut choice = None;
            let mut stuck = false;
            for l in blk.layer_lo..=blk.layer_hi {
                if self.need(plan, l) != pool {
                    continue;
                }
                let options = self.reducible(plan, l);
                match options.iter().max_by_key(|(bytes, _)| *bytes) {
                    None => stuck = true,
                    Some(&(_, spill)) => {
                        if choice.is_none() {
                            choice = Some(spill);
                        }
                    }
                }
            }
            if stuck {
                continue;
            }
            if let Some(spill) = choice {
                if target.is_none_or(|(p, _, _)| pool > p) {
                    target = Some((pool, b, spill));
                }
            }
        }
        if let Some((_, _, spill)) = target {
            self.apply(plan, spill);
            return true;
        }
        // shrink the streaming budget whose shrinking adds the least traffic per byte
        let mut shrink: Option<(Ratio<u128>, usize, u64)> = None;
        for (b, &s) in plan.stream.iter().enumerate() {
            if s == 0 || !self.spills_ifm(plan, b) {
                continue;
            }
            let smaller = s - (s / 8).max(1);
            let (Some(now), Some(after)) = (self.stream_cost(plan, b, s), self.stream_cost(plan, b, smaller)) else {
                continue;
            };
            let rate = Ratio::new((after - now) as u128, (s - smaller) as u128);
            if shrink.as_ref().is_none_or(|(r, _, _)| rate < *r) {
                shrink = Some((rate, b, smaller));
            }
        }
        if let Some((_, b, smaller)) = shrink {
            plan.stream[b] = smaller;
            return true;
        }
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Spill {
    Ifm(usize),
    Ofm(usize),
    Copy(usize),
}

/// Walks a fixed ladder of progressively cheaper buffer plans and takes the
/// first that fits on chip. Every step moves more data off chip, so a larger
/// budget never produces more off-chip traffic.
pub fn allocate_buffers(acc: &Accelerator) -> Result<BufferAllocation> {
    let budget = acc.platform.on_chip_bytes;
    let alloc = Allocator::new(acc);
    let mut plan = alloc.full_plan();
    let full_fit_bytes = alloc.requirement(&plan);
    let mut needed = full_fit_bytes;
    let mut rung = 0;
    loop {
        let req = if rung == 0 {
            full_fit_bytes
        } else {
            alloc.requirement(&plan)
        };
        if req <= budget {
            let residency = (0..acc.cnn.num_layers())
                .map(|i| LayerResidency {
                    ifms_off_chip: plan.ifm_off[i],
                    ofms_off_chip: plan.ofm_off[i],
                    weights_resident: plan.resident[i],
                    residual_copy_off_chip: plan.copy_off[i],
                })
                .collect();
            return Ok(BufferAllocation {
                ces: alloc.ce_buffers(&plan),
                boundaries: alloc.boundary_buffers(&plan),
                residency,
                full_fit: rung == 0,
                full_fit_bytes,
                allocated_bytes: req,
                rung,
            });
        }
        needed = needed.min(req);
        if !alloc.advance(&mut plan) {
            return Err(Error::Infeasible { needed, budget });
        }
        rung += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::testutil::layer;
    use crate::descriptors::{bundled, ConvLayer};
    use crate::notation::parse_for_depth;
    use proptest::prelude::*;

    fn platform(pes: u64, bytes: u64) -> FpgaPlatform {
        FpgaPlatform {
            name: "test".into(),
            pe_count: pes,
            on_chip_bytes: bytes,
            bandwidth: 1_000_000_000,
            clock_hz: 100_000_000,
            clock_assumed: false,
        }
    }

    fn chain(n: usize) -> CnnModel {
        let layers: Vec<ConvLayer> = (1..=n).map(|i| layer(i, 8, 3, 8, 8)).collect();
        CnnModel::new("chain", 1, layers).unwrap()
    }

    /// Exhaustive search over every triple with the same tie-break rule.
    fn brute_parallelism(pe: u64, work: &[(LoopNest, u64)]) -> Parallelism {
        let fmax = work.iter().map(|(n, _)| n.filters).max().unwrap();
        let hmax = work.iter().map(|(n, _)| n.out_h).max().unwrap();
        let wmax = work.iter().map(|(n, _)| n.out_w).max().unwrap();
        let mut best: Option<(u64, u64, u64, u64, Parallelism)> = None;
        for f in 1..=fmax {
            for h in 1..=hmax {
                for w in 1..=wmax {
                    if f * h * w > pe {
                        continue;
                    }
                    let p = Parallelism::spatial(f, h, w);
                    let c = workload_cycles(&p, work);
                    let key = (c, u64::MAX - f * h * w, u64::MAX - f, u64::MAX - h);
                    if best.as_ref().is_none_or(|b| key < (b.0, b.1, b.2, b.3)) {
                        best = Some((key.0, key.1, key.2, key.3, p));
                    }
                }
            }
        }
        best.unwrap().4
    }

    #[test]
    fn pe_distribution_examples() {
        assert_eq!(proportional_split(768, &[1, 3]).unwrap(), vec![192, 576]);
        assert_eq!(proportional_split(900, &[5, 5, 5]).unwrap(), vec![300, 300, 300]);
        let err = proportional_split(4, &[1; 8]).unwrap_err();
        assert!(err.to_string().starts_with("insufficient PEs"), "{err}");
        assert_eq!(proportional_split(3, &[1000, 1, 1]).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn parallelism_examples() {
        let n = LoopNest {
            filters: 4,
            out_h: 2,
            out_w: 2,
            reduction: 3,
            kernel_h: 3,
            kernel_w: 3,
        };
        let p = select_parallelism(16, &[(n, 1)]);
        assert_eq!((p.filters, p.out_h, p.out_w), (4, 2, 2));
        assert_eq!(workload_cycles(&p, &[(n, 1)]) * 16, n.macs());
        assert_eq!(select_parallelism(1, &[(n, 1)]), Parallelism::SERIAL);

        let work: Vec<(LoopNest, u64)> = [6, 8]
            .iter()
            .map(|&f| {
                (
                    LoopNest {
                        filters: f,
                        out_h: 8,
                        out_w: 8,
                        reduction: 3,
                        kernel_h: 3,
                        kernel_w: 3,
                    },
                    1,
                )
            })
            .collect();
        assert_eq!(select_parallelism(16, &work), brute_parallelism(16, &work));
    }

    #[test]
    fn pipelined_exact_fit() {
        // weights {10 KB, 20 KB}, row tiles {8 KB, 4 KB}
        let mut a = layer(1, 8, 1, 1280, 2);
        a.ifm_w = 1024;
        a.ofm_w = 1024;
        let mut b = layer(2, 16, 1, 1280, 2);
        b.ifm_w = 256;
        b.ofm_w = 256;
        assert_eq!((a.weights_bytes(), b.weights_bytes()), (10 * 1024, 20 * 1024));
        assert_eq!((a.ofm_row_bytes(), b.ofm_row_bytes()), (8 * 1024, 4 * 1024));
        let cnn = CnnModel::new("p", 1, vec![a, b]).unwrap();
        let sketch = parse_for_depth("{L1-L2: CE1-CE2}", 2).unwrap();
        let acc = build_ref(&sketch, &cnn, &platform(64, 54 * 1024)).unwrap();
        assert!(acc.buffers.full_fit);
        assert_eq!(acc.buffers.allocated_bytes, 54 * 1024);
        assert!(acc.buffers.residency.iter().all(|r| r.weights_resident));
    }

    #[test]
    fn budget_zero_is_infeasible() {
        let cnn = chain(3);
        let sketch = parse_for_depth("{L1-Last: CE1}", 3).unwrap();
        let err = build_ref(&sketch, &cnn, &platform(16, 0)).unwrap_err();
        assert!(
            err.to_string().starts_with("cannot allocate minimum working set"),
            "{err}"
        );
        assert!(err.is_infeasible());
    }

    #[test]
    fn single_block_identity_and_determinism() {
        let cnn = CnnModel::new("one", 1, vec![layer(1, 8, 3, 4, 8)]).unwrap();
        let sketch = parse_for_depth("{L1: CE1}", 1).unwrap();
        let p = platform(37, 1 << 20);
        let a = build_ref(&sketch, &cnn, &p).unwrap();
        assert_eq!(a.ces.len(), 1);
        assert_eq!(a.ces[0].pe_count, 37);
        let b = build_ref(&sketch, &cnn, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resnet50_on_vcu108_two_ces() {
        let cnn = bundled::cnn("resnet50").unwrap();
        let p = bundled::platform("vcu108").unwrap();
        let sketch = parse_for_depth("{L1-Last: CE1-CE2}", cnn.num_layers()).unwrap();
        let acc = build_ref(&sketch, &cnn, &p).unwrap();
        assert_eq!(acc.ces.len(), 2);
        assert!(acc.ces.iter().map(|c| c.pe_count).sum::<u64>() <= 768);
        assert!(acc.buffers.allocated_bytes <= p.on_chip_bytes);
    }

    #[test]
    fn shrinking_budget_walks_the_ladder() {
        let cnn = chain(4);
        let sketch = parse_for_depth("{L1-L2: CE1, L3-L4: CE2}", 4).unwrap();
        let full = build_ref(&sketch, &cnn, &platform(32, 1 << 30)).unwrap();
        assert!(full.buffers.full_fit);
        let tight = build_ref(&sketch, &cnn, &platform(32, full.buffers.full_fit_bytes - 1)).unwrap();
        assert!(!tight.buffers.full_fit);
        assert!(tight.buffers.allocated_bytes < full.buffers.full_fit_bytes);
    }

    proptest! {
        #[test]
        fn parallelism_is_optimal_on_small_instances(
            pe in 1u64..33,
            dims in proptest::collection::vec((1u64..17, 1u64..17, 1u64..17, 1u64..5), 1..4),
        ) {
            let work: Vec<(LoopNest, u64)> = dims
                .iter()
                .map(|&(f, h, w, c)| (LoopNest { filters: f, out_h: h, out_w: w, reduction: c, kernel_h: 3, kernel_w: 3 }, 1))
                .collect();
            let got = select_parallelism(pe, &work);
            let want = brute_parallelism(pe, &work);
            prop_assert_eq!(got, want);
            prop_assert!(got.product() <= pe);
        }

        #[test]
        fn pe_conservation(pes in 1u64..5000, weights in proptest::collection::vec(1u64..1_000_000, 1..12)) {
            prop_assume!(weights.len() as u64 <= pes);
            let shares = proportional_split(pes, &weights).unwrap();
            let total: u64 = shares.iter().sum();
            prop_assert!(total <= pes);
            prop_assert!(total + weights.len() as u64 > pes);
            prop_assert!(shares.iter().all(|&s| s >= 1));
        }

        #[test]
        fn allocation_fits_budget(budget in 0u64..40_000, split in 1usize..4) {
            let cnn = chain(4);
            let text = format!("{{L1-L{split}: CE1, L{}-L4: CE2-CE3}}", split + 1);
            let sketch = parse_for_depth(&text, 4);
            prop_assume!(sketch.is_ok());
            match build_ref(&sketch.unwrap(), &cnn, &platform(64, budget)) {
                Ok(acc) => prop_assert!(acc.buffers.allocated_bytes <= budget),
                Err(e) => prop_assert!(e.is_infeasible()),
            }
        }
    }
}
