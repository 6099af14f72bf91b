//! Closed-form models of the two building blocks: a single CE running layers
//! one after another, and a chain of CEs exchanging FM tiles.

use num_rational::Ratio;
use serde::Serialize;

use crate::descriptors::LoopNest;
use crate::error::{Error, Result};

/// Unroll factors over the six convolution loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Parallelism {
    pub filters: u64,
    pub out_h: u64,
    pub out_w: u64,
    pub in_channels: u64,
    pub kernel_h: u64,
    pub kernel_w: u64,
}

impl Parallelism {
    pub const SERIAL: Parallelism = Parallelism {
        filters: 1,
        out_h: 1,
        out_w: 1,
        in_channels: 1,
        kernel_h: 1,
        kernel_w: 1,
    };

    pub fn spatial(filters: u64, out_h: u64, out_w: u64) -> Self {
        Parallelism {
            filters,
            out_h,
            out_w,
            ..Self::SERIAL
        }
    }

    pub fn product(&self) -> u64 {
        self.filters * self.out_h * self.out_w * self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Cycles for one loop nest on a CE: product over dims of ceil(|d| / Par(d)).
pub fn single_ce_layer_latency(nest: &LoopNest, par: &Parallelism) -> u64 {
    nest.filters.div_ceil(par.filters)
        * nest.out_h.div_ceil(par.out_h)
        * nest.out_w.div_ceil(par.out_w)
        * nest.reduction.div_ceil(par.in_channels)
        * nest.kernel_h.div_ceil(par.kernel_h)
        * nest.kernel_w.div_ceil(par.kernel_w)
}

/// Skewed tile schedule of a CE chain. CE `j` (0-based) is active in stages
/// `j .. j + tiles[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub tiles: Vec<u64>,
    pub num_stages: u64,
}

impl Schedule {
    /// Stage range (0-based, half open) in which CE `j` is active.
    pub fn active_stages(&self, j: usize) -> std::ops::Range<u64> {
        let start = j as u64;
        start..start + self.tiles[j]
    }

    pub fn active_ces(&self, stage: u64) -> impl Iterator<Item = usize> + '_ {
        (0..self.tiles.len()).filter(move |&j| self.active_stages(j).contains(&stage))
    }

    /// Tile (0-based) CE `j` works on in `stage`, if any.
    pub fn tile_at(&self, j: usize, stage: u64) -> Option<u64> {
        let r = self.active_stages(j);
        r.contains(&stage).then(|| stage - r.start)
    }
}

pub fn pipeline_schedule(tiles: &[u64]) -> Result<Schedule> {
    if tiles.is_empty() {
        return Err(Error::Config("pipeline with no CEs".into()));
    }
    if let Some(j) = tiles.iter().position(|&t| t == 0) {
        return Err(Error::Config(format!("CE {} has zero tiles", j + 1)));
    }
    let num_stages = tiles.iter().enumerate().map(|(j, &t)| t + j as u64).max().unwrap_or(0);
    Ok(Schedule {
        tiles: tiles.to_vec(),
        num_stages,
    })
}

/// Sum over stages of the slowest active CE's tile latency.
pub fn pipelined_block_latency(schedule: &Schedule, tile_latency: &[u64]) -> u64 {
    let mut total = 0;
    for stage in 0..schedule.num_stages {
        let mut slowest = 0;
        for (j, (&tiles, &lat)) in schedule
            .tiles
            .iter()
            .zip(tile_latency)
            .enumerate()
            .take(stage as usize + 1)
        {
            if stage - (j as u64) < tiles {
                slowest = slowest.max(lat);
            }
        }
        total += slowest;
    }
    total
}

/// Busy cycles of the slowest CE; the pipeline's initiation interval.
pub fn pipelined_busy_cycles(schedule: &Schedule, tile_latency: &[u64]) -> u64 {
    schedule
        .tiles
        .iter()
        .zip(tile_latency)
        .map(|(&t, &l)| t * l)
        .max()
        .unwrap_or(0)
}

/// Inputs per second of a CE chain.
pub fn pipelined_block_throughput(schedule: &Schedule, tile_latency: &[u64], clock_hz: u64) -> Ratio<i128> {
    Ratio::new(clock_hz as i128, pipelined_busy_cycles(schedule, tile_latency) as i128)
}

/// Largest FM working set plus largest weights tile.
pub fn single_ce_buffer(fms_bytes: &[u64], weight_tiles: &[u64]) -> u64 {
    fms_bytes.iter().copied().max().unwrap_or(0) + weight_tiles.iter().copied().max().unwrap_or(0)
}

/// Weights of every layer plus a double-buffered FM tile per layer.
pub fn pipelined_buffer(weights: &[u64], fm_tile_buffers: &[u64]) -> u64 {
    weights.iter().sum::<u64>() + 2 * fm_tile_buffers.iter().sum::<u64>()
}

/// Off-chip traffic of one single-CE layer, split by data class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Traffic {
    pub weights: u64,
    pub fms: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.weights + self.fms
    }
}

impl std::ops::Add for Traffic {
    type Output = Traffic;
    fn add(self, o: Traffic) -> Traffic {
        Traffic {
            weights: self.weights + o.weights,
            fms: self.fms + o.fms,
        }
    }
}

impl std::ops::AddAssign for Traffic {
    fn add_assign(&mut self, o: Traffic) {
        self.weights += o.weights;
        self.fms += o.fms;
    }
}

impl std::iter::Sum for Traffic {
    fn sum<I: Iterator<Item = Traffic>>(iter: I) -> Traffic {
        iter.fold(Traffic::default(), |a, b| a + b)
    }
}

/// Cheaper of the two ways to stream an off-chip IFM past the weights:
/// keep an IFM chunk and sweep all weights over it, or keep a weights
/// chunk and sweep the whole IFM over it.
pub fn streamed_ifm_traffic(ifms: u64, weights: u64, ifm_buffer: u64, weights_buffer: u64) -> Traffic {
    let input_stationary = Traffic {
        weights: weights * ifms.div_ceil(ifm_buffer),
        fms: ifms,
    };
    let weight_stationary = Traffic {
        weights,
        fms: ifms * weights.div_ceil(weights_buffer),
    };
    if weight_stationary.total() < input_stationary.total() {
        weight_stationary
    } else {
        input_stationary
    }
}

/// Residency of one single-CE layer's FMs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SingleLayerAccess {
    pub weights: u64,
    pub ifms: u64,
    pub ofms: u64,
    pub ifms_off_chip: bool,
    pub ofms_off_chip: bool,
    pub ifm_buffer: u64,
    pub weights_buffer: u64,
}

pub fn single_ce_layer_accesses(a: &SingleLayerAccess) -> Traffic {
    let mut t = if a.ifms_off_chip {
        streamed_ifm_traffic(a.ifms, a.weights, a.ifm_buffer, a.weights_buffer)
    } else {
        Traffic {
            weights: a.weights,
            fms: 0,
        }
    };
    if a.ofms_off_chip {
        t.fms += a.ofms;
    }
    t
}

pub fn single_ce_accesses(layers: &[SingleLayerAccess]) -> Traffic {
    layers.iter().map(single_ce_layer_accesses).sum()
}

/// Weight traffic of a pipelined layer active in `active_stages` stages:
/// loaded once if it stays resident, otherwise once per stage.
pub fn pipelined_layer_accesses(weights: u64, resident: bool, active_stages: u64) -> u64 {
    if resident {
        weights
    } else {
        weights * active_stages
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KB: u64 = 1024;

    fn nest(f: u64, h: u64, w: u64, c: u64, k: u64) -> LoopNest {
        LoopNest {
            filters: f,
            out_h: h,
            out_w: w,
            reduction: c,
            kernel_h: k,
            kernel_w: k,
        }
    }

    /// Steps through the tiled iteration space one PE-array cycle at a time.
    fn enumerate_cycles(n: &LoopNest, p: &Parallelism) -> u64 {
        let mut cycles = 0;
        let mut f = 0;
        while f < n.filters {
            let mut y = 0;
            while y < n.out_h {
                let mut x = 0;
                while x < n.out_w {
                    cycles += n.reduction * n.kernel_h * n.kernel_w;
                    x += p.out_w;
                }
                y += p.out_h;
            }
            f += p.filters;
        }
        cycles
    }

    /// Stage-by-stage unrolling of the skew rule.
    fn enumerate_stages(tiles: &[u64], lat: &[u64]) -> (u64, u64) {
        let mut stage = 0u64;
        let mut latency = 0;
        let mut seen = 0;
        loop {
            let active: Vec<usize> = (0..tiles.len())
                .filter(|&j| stage >= j as u64 && stage - (j as u64) < tiles[j])
                .collect();
            if active.is_empty() && stage >= tiles.len() as u64 {
                break;
            }
            seen += active.len() as u64;
            latency += active.iter().map(|&j| lat[j]).max().unwrap_or(0);
            stage += 1;
        }
        (latency, seen)
    }

    #[test]
    fn eq1_worked_example() {
        let n = nest(6, 8, 8, 3, 3);
        let p = Parallelism::spatial(4, 2, 2);
        assert_eq!(single_ce_layer_latency(&n, &p), 864);
        assert_eq!(enumerate_cycles(&n, &p), 864);
        assert_eq!(single_ce_layer_latency(&n, &Parallelism::SERIAL), n.macs());
        let exact = nest(8, 8, 8, 3, 3);
        assert_eq!(single_ce_layer_latency(&exact, &p), exact.macs() / 16);
    }

    #[test]
    fn schedule_shapes() {
        let s = pipeline_schedule(&[4, 4, 4]).unwrap();
        assert_eq!(s.num_stages, 6);
        let active: Vec<Vec<usize>> = (0..6).map(|st| s.active_ces(st).collect()).collect();
        assert_eq!(
            active,
            vec![vec![0], vec![0, 1], vec![0, 1, 2], vec![0, 1, 2], vec![1, 2], vec![2]]
        );
        assert_eq!(pipeline_schedule(&[7]).unwrap().num_stages, 7);
        assert_eq!(pipeline_schedule(&[1, 1]).unwrap().num_stages, 2);
        assert!(pipeline_schedule(&[3, 0]).is_err());
    }

    #[test]
    fn eq2_and_eq3_worked_example() {
        let s = pipeline_schedule(&[4, 4, 4]).unwrap();
        let lat = [10, 30, 20];
        assert_eq!(pipelined_block_latency(&s, &lat), 150);
        assert_eq!(pipelined_busy_cycles(&s, &lat), 120);
        let thr = pipelined_block_throughput(&s, &lat, 1_000_000_000);
        assert_eq!(thr, Ratio::new(25_000_000, 3));
        let latency_s = Ratio::new(150i128, 1_000_000_000);
        assert_eq!(thr * latency_s, Ratio::new(5, 4));

        let single = pipeline_schedule(&[2]).unwrap();
        assert_eq!(pipelined_block_latency(&single, &[5]), 10);
    }

    #[test]
    fn buffer_equations() {
        assert_eq!(single_ce_buffer(&[300 * KB, 250 * KB], &[64 * KB, 32 * KB]), 364 * KB);
        assert_eq!(single_ce_buffer(&[7], &[3]), 10);
        assert_eq!(pipelined_buffer(&[10 * KB, 20 * KB], &[8 * KB, 4 * KB]), 54 * KB);
        assert_eq!(pipelined_buffer(&[10, 20], &[0, 0]), 30);
    }

    #[test]
    fn eq6_examples() {
        let on = SingleLayerAccess {
            weights: 40,
            ifms: 100,
            ofms: 30,
            ifms_off_chip: false,
            ofms_off_chip: false,
            ifm_buffer: 0,
            weights_buffer: 0,
        };
        assert_eq!(single_ce_layer_accesses(&on).total(), 40);
        let off = SingleLayerAccess {
            ifms_off_chip: true,
            ifm_buffer: 50,
            weights_buffer: 20,
            ..on
        };
        assert_eq!(single_ce_layer_accesses(&off).total(), 180);
        let both = SingleLayerAccess {
            ofms_off_chip: true,
            ..off
        };
        assert_eq!(single_ce_layer_accesses(&both).total(), 210);
        assert_eq!(single_ce_accesses(&[on, off, both]).total(), 430);
    }

    #[test]
    fn eq7_examples() {
        assert_eq!(
            pipelined_layer_accesses(10 * KB, true, 4) + pipelined_layer_accesses(20 * KB, true, 4),
            30 * KB
        );
        assert_eq!(
            pipelined_layer_accesses(10 * KB, false, 4) + pipelined_layer_accesses(20 * KB, false, 4),
            120 * KB
        );
        assert_eq!(pipelined_layer_accesses(9, false, 1), 9);
    }

    proptest! {
        #[test]
        fn eq1_matches_enumeration(
            f in 1u64..17, h in 1u64..17, w in 1u64..17, c in 1u64..9, k in 1u64..4,
            pf in 1u64..9, ph in 1u64..5, pw in 1u64..5,
        ) {
            let n = nest(f, h, w, c, k);
            let p = Parallelism::spatial(pf, ph, pw);
            let lat = single_ce_layer_latency(&n, &p);
            prop_assert_eq!(lat, enumerate_cycles(&n, &p));
            let pe = p.product();
            prop_assert!(lat >= n.macs().div_ceil(pe));
            let divides = f % pf == 0 && h % ph == 0 && w % pw == 0;
            prop_assert_eq!(lat * pe == n.macs(), divides);
        }

        #[test]
        fn eq2_matches_stage_enumeration(
            tiles in proptest::collection::vec(1u64..8, 1..6),
            seed in proptest::collection::vec(1u64..50, 6),
        ) {
            let lat = &seed[..tiles.len()];
            let s = pipeline_schedule(&tiles).unwrap();
            let (expected, seen) = enumerate_stages(&tiles, lat);
            prop_assert_eq!(pipelined_block_latency(&s, lat), expected);
            prop_assert_eq!(seen, tiles.iter().sum::<u64>());
            // pipelined law: latency never below the busiest CE
            prop_assert!(pipelined_block_latency(&s, lat) >= pipelined_busy_cycles(&s, lat));
        }

        #[test]
        fn uniform_pipeline_closed_form(c in 1u64..100, ces in 1usize..8, t in 1u64..20) {
            let s = pipeline_schedule(&vec![t; ces]).unwrap();
            prop_assert_eq!(pipelined_block_latency(&s, &vec![c; ces]), (t + ces as u64 - 1) * c);
        }

        #[test]
        fn streamed_traffic_floor(i in 1u64..5000, w in 1u64..5000, ib in 1u64..5000, wb in 1u64..5000) {
            let t = streamed_ifm_traffic(i, w, ib, wb);
            prop_assert!(t.total() >= i + w);
            prop_assert!(t.weights >= w);
        }
    }
}
