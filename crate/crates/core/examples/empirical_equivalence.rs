//! The joint-state and empirical-count value functions agree.

use clustermf::empirical::{check_representation_equivalence, solve_dp};
use clustermf::exact::DEFAULT_BUDGET;
use clustermf::generate::{random_spec, SpecShape};
use clustermf::{Horizon, PopulationLayout};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> clustermf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = random_spec(&mut rng, &SpecShape::binary(2));
    for sizes in [vec![1, 1], vec![2, 3], vec![3, 3]] {
        let layout = PopulationLayout::new(sizes.clone())?;
        let emp = solve_dp(&spec, &layout, Horizon::Finite(3), 0.0, DEFAULT_BUDGET)?;
        let fin = check_representation_equivalence(&spec, &layout, Horizon::Finite(3), 0.0, DEFAULT_BUDGET)?;
        let inf = check_representation_equivalence(&spec, &layout, Horizon::Infinite, 1e-8, DEFAULT_BUDGET)?;
        println!(
            "N={sizes:?}: {} joint states vs {} count states, finite gap {:.1e}, infinite gap {:.1e} ({} tables)",
            fin.joint_states,
            fin.empirical_states,
            fin.max_discrepancy,
            inf.max_discrepancy,
            emp.values.len()
        );
    }
    Ok(())
}
