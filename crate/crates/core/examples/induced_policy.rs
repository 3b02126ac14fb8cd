//! Induce a decentralized policy from the mean-field solution and run it on
//! growing populations.

use clustermf::benchmarks::two_cluster_coupled;
use clustermf::induction::{check_cost_preservation, induce_policy, simulate_mkv, RepresentativeSystem};
use clustermf::meanfield::{value_iteration, Interpolation, DEFAULT_BUDGET};
use clustermf::Horizon;

fn main() -> clustermf::Result<()> {
    let spec = two_cluster_coupled();
    let sol = value_iteration(&spec, 20, 10, 1e-6, Interpolation::Kuhn, DEFAULT_BUDGET)?;
    let policy = induce_policy(&spec, &sol, spec.nu0(), Horizon::Infinite)?;
    for j in 0..spec.clusters() {
        for x in 0..spec.state_sizes()[j] {
            println!("t=0 cluster {j} state {x}: {:?}", policy.row(0, j, x));
        }
    }
    let sys = RepresentativeSystem::new(policy.clone(), spec.nu0().clone());
    println!("mean-field cost {:.6}, representative agent {:.6}", policy.mean_field_cost, sys.exact_cost(&spec));
    let mkv = simulate_mkv(&spec, &sys, 2000, 1);
    println!("sampled representative agent {:.6} +- {:.6}", mkv.mean, mkv.std_err);
    let rep = check_cost_preservation(&spec, &policy, &[8, 32, 128, 512], 1000, 1, 0.1)?;
    for r in &rep.rows {
        println!("N={:4} cost {:.5} +- {:.5}  gap {:+.5}  tv {:.4}", r.n, r.mean, r.std_err, r.gap, r.mean_tv);
    }
    Ok(())
}
