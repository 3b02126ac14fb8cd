//! Exact joint-state DP on the decoupled instance, then the two ways of
//! averaging a policy over within-cluster permutations.

use clustermf::benchmarks::decoupled;
use clustermf::exact::{
    cluster_permutations, evaluate_policy, solve_exact_finite, symmetry_defect, uniformize_along_occupation,
    uniformize_policy, CentralizedMarkovPolicy, JointStateSpace, DEFAULT_BUDGET,
};
use clustermf::generate::random_simplex;
use clustermf::{Horizon, PopulationLayout};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> clustermf::Result<()> {
    let spec = decoupled();
    let layout = PopulationLayout::new(vec![2, 2])?;
    let t = 3;
    let space = JointStateSpace::new(&spec, &layout, DEFAULT_BUDGET)?;
    let dp = solve_exact_finite(&spec, &layout, t, DEFAULT_BUDGET)?;
    let optimal = space.average_over_initial_law(spec.nu0(), dp.initial_values());
    println!("{} joint states, {} joint actions", space.n_states(), space.n_actions());
    println!("optimal cost over {t} steps: {optimal:.6}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pi = CentralizedMarkovPolicy::time_varying(
        (0..t)
            .map(|_| (0..space.n_states()).map(|_| random_simplex(&mut rng, space.n_actions())).collect())
            .collect(),
    );
    let cost = |p: &CentralizedMarkovPolicy| -> clustermf::Result<f64> {
        let ev = evaluate_policy(&spec, &layout, p, Horizon::Finite(t), 0.0, DEFAULT_BUDGET)?;
        Ok(space.average_over_initial_law(spec.nu0(), ev.initial_values()))
    };
    let perms = cluster_permutations(&layout, 0);
    let pointwise = uniformize_policy(&spec, &layout, &pi, DEFAULT_BUDGET)?;
    let occupation = uniformize_along_occupation(&spec, &layout, &pi, t, DEFAULT_BUDGET)?;
    println!("random policy:        {:.6}", cost(&pi)?);
    println!(
        "pointwise average:    {:.6}  (symmetry defect {:e})",
        cost(&pointwise)?,
        symmetry_defect(&spec, &layout, &pointwise, &perms, DEFAULT_BUDGET)?
    );
    println!(
        "occupation average:   {:.6}  (symmetry defect {:e})",
        cost(&occupation)?,
        symmetry_defect(&spec, &layout, &occupation, &perms, DEFAULT_BUDGET)?
    );
    Ok(())
}
