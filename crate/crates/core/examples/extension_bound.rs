//! Sampling agents with replacement from a cluster-exchangeable law.
//!
//! Runs the randomized sweep over all cluster sizes up to six and prints the
//! worst cases, then the balanced-pair law that exceeds the stated bound.

use clustermf::verify::{balanced_pair_law, bound_sweep, check_extension_bound};

fn main() -> clustermf::Result<()> {
    let sweep = bound_sweep(7, 2, &[0.05, 0.3, 1.0])?;
    println!("laws: {}  checks: {}", sweep.laws, sweep.records.len());
    println!("stated bound violated: {}", sweep.failures);
    println!("collision bound violated: {}", sweep.collision_failures);
    println!("max tv with one draw per cluster: {}", sweep.max_tv_single);
    let mut worst: Vec<_> = sweep.records.iter().collect();
    worst.sort_by(|a, b| (b.check.tv - b.check.bound).total_cmp(&(a.check.tv - a.check.bound)));
    for r in worst.iter().take(5) {
        println!(
            "N={:?} k={:?} symbols={} alpha={}: tv={:.4} stated={:.4} collision={:.4}",
            r.sizes, r.k, r.symbols, r.alpha, r.check.tv, r.check.bound, r.check.collision_bound
        );
    }
    let c = check_extension_bound(&balanced_pair_law(), &[4, 4])?;
    println!("balanced pairs N=(4,4) k=(4,4): tv={:.4} stated={:.4} collision={:.4}", c.tv, c.bound, c.collision_bound);
    Ok(())
}
