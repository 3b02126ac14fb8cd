//! Value iteration on the simplex grid for the two-cluster benchmark, then
//! the greedy flow from the initial measure.

use std::time::Instant;

use clustermf::benchmarks::two_cluster_coupled;
use clustermf::meanfield::{rollout_flow, value_iteration, Interpolation, DEFAULT_BUDGET};
use clustermf::Horizon;

fn main() -> clustermf::Result<()> {
    let args: Vec<u32> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let (k, l) = (args.first().copied().unwrap_or(20), args.get(1).copied().unwrap_or(10));
    let spec = two_cluster_coupled();
    let start = Instant::now();
    let sol = value_iteration(&spec, k, l, 1e-6, Interpolation::Kuhn, DEFAULT_BUDGET)?;
    println!("K={k} L={l}: {} sweeps in {:.1?}", sol.iterations, start.elapsed());
    println!("value at nu0: {:.6}", sol.value_at(&spec, spec.nu0())?);
    let roll = rollout_flow(&spec, &sol, spec.nu0(), Horizon::Infinite)?;
    println!("cost along the flow: {:.6} over {} steps", roll.discounted_cost, roll.steps.len());
    for step in roll.steps.iter().take(6) {
        println!("t={} mu={:?} stage={:.4}", step.t, step.mu.to_rows(), step.stage_cost);
    }
    Ok(())
}
