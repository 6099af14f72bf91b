mod common;

use common::Regime;
use mccm::{builder, composer, sim};
use num_rational::Ratio;
use proptest::prelude::*;

fn check(seed: u64, regime: Regime) -> Result<(), TestCaseError> {
    let inst = common::random_instance(seed, regime);
    let acc = match builder::build(&inst.sketch, inst.cnn.clone(), &inst.platform) {
        Ok(a) => a,
        Err(e) => {
            prop_assert!(e.is_infeasible(), "{}: {e}", inst.text);
            return Ok(());
        }
    };
    let report = composer::compose(&acc);
    let sim = sim::simulate(&acc, sim::DEFAULT_CAP_MACS, false).unwrap();
    prop_assert_eq!(sim.cycles, report.compute_cycles, "{}", inst.text);
    prop_assert_eq!(sim.access, report.access_breakdown, "{}", inst.text);
    prop_assert_eq!(sim.macs, inst.cnn.total_macs(), "{}", inst.text);
    prop_assert!(report.buffer_bytes <= inst.platform.on_chip_bytes);
    // the simulator never beats perfect overlap
    prop_assert!(sim.time_s + sim.tolerance_s >= report.latency_s, "{}", inst.text);
    if regime != Regime::Mixed {
        prop_assert!(sim.latency_agrees(report.latency_s), "{}", inst.text);
    }
    if regime == Regime::Roomy {
        prop_assert!(report.segments.iter().all(|s| !s.memory_bound));
        prop_assert!(report.full_fit);
    }
    let stage_sum: Ratio<i128> = sim.segments.iter().map(|s| s.longest_stage_s).sum();
    prop_assert_eq!(stage_sum, sim.tolerance_s);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn roomy_instances_match_exactly(seed in any::<u64>()) {
        check(seed, Regime::Roomy)?;
    }

    #[test]
    fn starved_instances_within_one_stage(seed in any::<u64>()) {
        check(seed, Regime::Starved)?;
    }

    #[test]
    fn mixed_instances_count_exactly(seed in any::<u64>()) {
        check(seed, Regime::Mixed)?;
    }
}

#[test]
fn roomy_latency_is_exact_up_to_load_time() {
    for seed in 0..200 {
        let inst = common::random_instance(seed, Regime::Roomy);
        let Ok(acc) = builder::build(&inst.sketch, inst.cnn.clone(), &inst.platform) else {
            continue;
        };
        let report = composer::compose(&acc);
        let sim = sim::simulate(&acc, sim::DEFAULT_CAP_MACS, false).unwrap();
        let cycles = Ratio::new(sim.cycles as i128, inst.platform.clock_hz as i128);
        // a 2^50 B/s channel adds well under a cycle per transfer
        let slack = Ratio::new(1i128, 1_000_000);
        assert!(
            sim.time_s - cycles < slack * cycles + Ratio::new(1, 1_000_000_000),
            "{}",
            inst.text
        );
        assert!(report.latency_s <= sim.time_s);
    }
}
