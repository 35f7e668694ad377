use std::collections::BTreeSet;

use dsee_core::decompose::{
    extract_support, select_support, solve_slr, SupportMethod, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use dsee_core::linalg::{matmul, DenseMatrix, Rng};

mod support;

use support::planted;

#[test]
fn planted_low_rank_without_sparse_part() {
    let mut rng = Rng::new(5);
    let x = DenseMatrix::from_fn(40, 3, |_, _| rng.normal() as f32);
    let y = DenseMatrix::from_fn(3, 30, |_, _| rng.normal() as f32);
    let w = matmul(&x, &y).unwrap();
    let res = solve_slr(&w, 3, 0, DEFAULT_TOL, DEFAULT_MAX_ITER, &mut rng).unwrap();
    assert_eq!(res.s.count_nonzero(), 0);
    assert!(res.relative_residual(&w) <= 1e-4);
}

#[test]
fn planted_spikes_recovered_at_ten_times_rms() {
    let p = planted(64, 4, 20, 10.0, 99);
    let res = solve_slr(&p.w, 4, 20, DEFAULT_TOL, DEFAULT_MAX_ITER, &mut Rng::new(1)).unwrap();
    let support = extract_support(&res.s, 20).unwrap();
    let got: BTreeSet<_> = support.indices().iter().copied().collect();
    assert_eq!(got, p.spikes);
    assert!(res.relative_residual(&p.w) <= 1e-3);
}

#[test]
fn exact_recovery_across_seeds_and_sizes() {
    for size in [32usize, 64, 128] {
        for seed in 0..20u64 {
            let p = planted(size, 4, 20, 5.0, 1000 * size as u64 + seed);
            let res = solve_slr(
                &p.w,
                4,
                20,
                DEFAULT_TOL,
                DEFAULT_MAX_ITER,
                &mut Rng::new(seed),
            )
            .unwrap();
            assert!(res.s.count_nonzero() <= 20);
            let got: BTreeSet<_> = extract_support(&res.s, 20)
                .unwrap()
                .indices()
                .iter()
                .copied()
                .collect();
            assert_eq!(got, p.spikes, "size {size} seed {seed}");
        }
    }
}

#[test]
fn residual_trace_is_monotone_and_cardinality_hard() {
    for seed in 0..10u64 {
        let mut rng = Rng::new(seed);
        let w = DenseMatrix::from_fn(30, 25, |_, _| rng.normal() as f32);
        let res = solve_slr(&w, 3, 40, DEFAULT_TOL, 30, &mut rng).unwrap();
        assert!(res.s.count_nonzero() <= 40);
        for pair in res.residual_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-7, "{:?}", res.residual_history);
        }
    }
}

#[test]
fn select_support_decompose_matches_standalone_pipeline() {
    let p = planted(64, 4, 20, 10.0, 7);
    let via_select =
        select_support(&p.w, SupportMethod::Decompose, 20, 4, &mut Rng::new(3)).unwrap();
    let res = solve_slr(&p.w, 4, 20, DEFAULT_TOL, DEFAULT_MAX_ITER, &mut Rng::new(3)).unwrap();
    let standalone = extract_support(&res.s, 20).unwrap();
    assert_eq!(via_select, standalone);
    let got: BTreeSet<_> = via_select.indices().iter().copied().collect();
    assert_eq!(got, p.spikes);
}
