mod common;

use common::*;
use ddss::diffusion::NoiseSchedule;
use ddss::ggdm::{init_from_ddpm, theorem1_marginals_plain, Family, OffDiagonal, SamplerSpec};
use proptest::prelude::*;

#[test]
fn recursion_matches_forward_composition() {
    assert!(theorem1_oracle_error(200, 1) <= 1e-10);
}

#[test]
fn oracle_reproduces_a_hand_example() {
    // x_2 = 0.5 x_0 + √0.75 z, x_1 = 0.1 x_0 + 0.8 x_2 + 0.2 z'
    let l = ddss::ggdm::Lattice {
        k: 2,
        mu0: vec![0.1, 0.5],
        mu_hist: vec![vec![Some(0.8)], vec![]],
        sigma: vec![0.2, 0.75f64.sqrt()],
    };
    let m = forward_composition(&l);
    assert!((m[0].0 - 0.5).abs() < 1e-15);
    assert!((m[0].1 - 0.52).abs() < 1e-15);
}

#[test]
fn ddim_embedding_preserves_marginals() {
    assert!(ddim_embedding_error(50, 2) <= 1e-9);
}

#[test]
fn sparse_ddpm_initialization_recovers_forward_marginals() {
    let schedule = NoiseSchedule::linear(128, 1e-3, 0.2).unwrap();
    for k in [2, 5, 10, 20] {
        let spec = SamplerSpec {
            off_diagonal: OffDiagonal::Sparse,
            ..SamplerSpec::new(Family::Ggdm, false)
        };
        let p = init_from_ddpm(&schedule, k, spec).unwrap();
        let values = p.values(&schedule).unwrap();
        let table = theorem1_marginals_plain(&values.lattice).unwrap();
        for (i, &s) in p.stride.iter().enumerate() {
            let ab = schedule.alpha_bar(s);
            assert!((table.marginal_a(i + 1) - ab.sqrt()).abs() <= 1e-9);
            assert!((table.marginal_v(i + 1) - (1.0 - ab)).abs() <= 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn recursion_matches_oracle_on_random_lattices(seed in any::<u64>(), k in 1usize..=8) {
        let l = random_lattice(&mut rng(seed), k);
        let table = theorem1_marginals_plain(&l).unwrap();
        for (t, (a, v)) in forward_composition(&l).into_iter().enumerate() {
            prop_assert!((table.marginal_a(t + 1) - a).abs() <= 1e-10);
            prop_assert!((table.marginal_v(t + 1) - v).abs() <= 1e-10);
            prop_assert!(table.marginal_v(t + 1) >= 0.0);
        }
    }
}
