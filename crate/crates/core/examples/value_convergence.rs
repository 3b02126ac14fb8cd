//! Exact N-agent optimum against the mean-field value on the single-cluster
//! benchmark.

use clustermf::benchmarks::single_cluster_binary;
use clustermf::exact::DEFAULT_BUDGET;
use clustermf::meanfield::Interpolation;
use clustermf::verify::{value_convergence_experiment, MeanFieldGrid};

fn main() -> clustermf::Result<()> {
    let spec = single_cluster_binary();
    let mf = MeanFieldGrid { grid: 20, action_grid: 10, interpolation: Interpolation::Kuhn };
    let rep = value_convergence_experiment(&spec, &[1, 2, 3, 4, 5, 6], 4, mf, DEFAULT_BUDGET)?;
    for r in &rep.rows {
        println!(
            "N={} optimal {:.6}  truncated induced {:.6}  mean field {:.6}  gap {:.2e}",
            r.n, r.optimal, r.truncated, r.mean_field, r.gap
        );
    }
    Ok(())
}
