//! Distance between the empirical cluster measures and the mean-field flow
//! under the induced policy, for growing N.

use clustermf::benchmarks::two_cluster_coupled;
use clustermf::induction::induce_policy;
use clustermf::meanfield::{value_iteration, Interpolation, DEFAULT_BUDGET};
use clustermf::verify::chaos_experiment;
use clustermf::Horizon;

fn main() -> clustermf::Result<()> {
    let spec = two_cluster_coupled();
    let sol = value_iteration(&spec, 20, 10, 1e-6, Interpolation::Kuhn, DEFAULT_BUDGET)?;
    let policy = induce_policy(&spec, &sol, spec.nu0(), Horizon::Infinite)?;
    let rep = chaos_experiment(&spec, &policy, &[16, 64, 256, 1024], 50, 300, 5, 0.05)?;
    for r in &rep.rows {
        println!("N={:5} mean tv {:.4} +- {:.4}  sqrt(N) tv {:.3}", r.n, r.mean_tv, r.std_err, r.scaled_tv);
    }
    println!("strictly decreasing: {}", rep.strictly_decreasing);
    Ok(())
}
