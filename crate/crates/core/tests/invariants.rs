//! Property tests of cross-module invariants through the public API.

use filterlab::attention::{
    self_attention_forward, sinusoidal_pe, KernelSpec, PositionalConfig, ProjectionSet,
};
use filterlab::filters::Image;
use filterlab::lab::{
    check_prop3_factorization, closed_form_grc, robustness_recurrence, AlphaC, ClosedForm,
};
use filterlab::model::{moe_forward, moe_matrix_form, router_weights, MoEConfig};
use filterlab::residual::verify_snr_boost;
use filterlab::rng::{normal_matrix, normal_vec, stream_rng};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_output_stays_in_the_hull_of_the_values(n in 1usize..10, half_d in 1usize..6, seed in 0u64..10_000) {
        let d = 2 * half_d;
        let mut rng = stream_rng(seed, "hull", 0);
        let e = normal_matrix(&mut rng, n, d, 1.0);
        let p = sinusoidal_pe(&PositionalConfig::new(n, d)).unwrap();
        let u = self_attention_forward(&KernelSpec::standard(), &ProjectionSet::identity(d), &e, &p).unwrap();
        // with identity projections the values are the rows of E + P
        let v = e.add(&p).unwrap();
        for col in 0..d {
            let lo = (0..n).map(|j| v.get(j, col)).fold(f64::INFINITY, f64::min);
            let hi = (0..n).map(|j| v.get(j, col)).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let x = u.get(i, col);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12, "u[{i},{col}]={x} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn derived_closed_form_solves_the_recurrence(l in 0.01f64..3.0, t in 0.0f64..=1.0, n in 1usize..=50) {
        let k = robustness_recurrence(l, t, n).unwrap().k_grc[n - 1];
        let closed = closed_form_grc(l, t, n, ClosedForm::Derived).unwrap();
        prop_assert!((closed - k).abs() <= 1e-9 * k.abs().max(1.0), "L={l} t={t} n={n}: {closed} vs {k}");
    }

    #[test]
    fn kernel_factorization_holds_with_the_derived_constant(
        n in 2usize..12, half_d in 1usize..20, c in 0.1f64..3.0, seed in 0u64..10_000,
    ) {
        let r = check_prop3_factorization(n, 2 * half_d, c, AlphaC::Derived, seed).unwrap();
        prop_assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
    }

    #[test]
    fn graymaps_round_trip_at_eight_bits(w in 1usize..12, h in 1usize..12, seed in 0u64..10_000) {
        let mut rng = stream_rng(seed, "pgm", 0);
        let pixels: Vec<f64> = normal_vec(&mut rng, w * h, 1.0)
            .into_iter()
            .map(|z| (z.abs() * 80.0).min(255.0).round() / 255.0)
            .collect();
        let img = Image::new(w, h, pixels).unwrap();
        let back = Image::from_pgm_str(&img.to_pgm_string()).unwrap();
        prop_assert_eq!(back.width(), w);
        prop_assert_eq!(back.height(), h);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn moe_routes_to_exactly_k_experts(m in 1usize..10, k_frac in 0.0f64..1.0, d in 1usize..8, seed in 0u64..10_000) {
        let k = 1 + ((m - 1) as f64 * k_frac) as usize;
        let mut rng = stream_rng(seed, "moe-prop", 0);
        let cfg = MoEConfig::random(&mut rng, m, k, d, 4).unwrap();
        let x = normal_vec(&mut rng, d, 1.0);
        let g = router_weights(&cfg, &x).unwrap();
        prop_assert_eq!(g.iter().filter(|w| **w > 0.0).count(), k);
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let dense = moe_forward(&cfg, &x).unwrap();
        let sparse = moe_matrix_form(&cfg, &x).unwrap();
        prop_assert!(sparse.nnz() <= k * 4);
        for (a, b) in dense.iter().zip(&sparse.y) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn reports_do_not_depend_on_the_thread_count() {
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| verify_snr_boost(None, 500, 16, 42).unwrap())
    };
    let (one, many) = (run(1), run(4));
    assert_eq!(one.rows, many.rows);
    assert_eq!(one.checks.len(), many.checks.len());
}
