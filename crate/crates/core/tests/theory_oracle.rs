//! Bound formulas against an exact rational re-evaluation.

mod common;

use common::*;
use dfedavgm::theory::{self, CommSavingInputs, TheoryInputs};
use proptest::prelude::*;

#[test]
fn reference_point_matches_exact_evaluation() {
    // K = 1, eta = 1/(16 L), theta = 0, L = 1, sigma_l = sigma_g = B = 1, lambda = 1/2
    let c = theory::rate_constants(TheoryInputs {
        local_steps: 1,
        eta: 1.0 / 16.0,
        theta: 0.0,
        smoothness: 1.0,
        sigma_l: 1.0,
        sigma_g: 1.0,
        grad_bound: 1.0,
        lambda: 0.5,
    })
    .unwrap();
    let e = exact_constants(1, 1.0 / 16.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.5);
    // gamma < 0 at this step, so the bound itself is inapplicable
    assert_eq!(q(c.gamma), e.gamma);
    assert!(rel_err(c.alpha, &e.alpha) <= 1e-12);
    assert!(rel_err(c.beta, &e.beta) <= 1e-12);
    assert!(!c.applicable());
}

#[test]
fn hand_values_at_reference_point() {
    let e = exact_constants(1, 1.0 / 16.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.5);
    // gamma = 1/16 - 64/4096 - 64/256 = 16/256 - 4/256 - 64/256 = -52/256
    assert_eq!(e.gamma, qi(-52) / qi(256));
    // C1 = 8 + 32 = 40, C2 = 40 + 32 = 72
    assert_eq!(e.c1, qi(40));
    assert_eq!(e.c2, qi(72));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn constants_and_bounds_transcribed(
        k in 1usize..12,
        l in 0.05f64..20.0,
        theta in 0.0f64..0.97,
        eta_frac in 0.001f64..1.0,
        sl in 0.0f64..4.0,
        sg in 0.0f64..4.0,
        b in 0.0f64..4.0,
        lambda in 0.0f64..0.995,
        f1 in 0.0f64..10.0,
        t in 1u64..500,
        nu_frac in 0.01f64..0.99,
        tp in 0u32..40,
    ) {
        let eta = eta_frac / (200.0 * l * k as f64);
        let c = theory::rate_constants(TheoryInputs {
            local_steps: k, eta, theta, smoothness: l, sigma_l: sl, sigma_g: sg, grad_bound: b, lambda,
        }).unwrap();
        let e = exact_constants(k, eta, theta, l, sl, sg, b, lambda);
        prop_assert!(rel_err(c.gamma, &e.gamma) <= 1e-12);
        prop_assert!(rel_err(c.alpha, &e.alpha) <= 1e-12);
        prop_assert!(rel_err(c.beta, &e.beta) <= 1e-12);
        prop_assert!(rel_err(c.c2, &e.c2) <= 1e-12);
        let got = theory::nonconvex_bound(&c, f1, 0.0, t).unwrap();
        prop_assert!(rel_err(got, &exact_nonconvex_bound(&e, f1, 0.0, t)) <= 1e-12);
        let nu = nu_frac / c.gamma;
        let got = theory::pl_bound(&c, nu, f1, 0.0, tp as u64).unwrap();
        prop_assert!(rel_err(got, &exact_pl_bound(&e, nu, f1, 0.0, tp)) <= 1e-12);
    }

    #[test]
    fn comm_saving_floor_transcribed(
        d in 1usize..1_000_000,
        bits in 1u32..=32,
        theta in 0.0f64..0.99,
        l in 0.05f64..20.0,
        b in 0.0f64..4.0,
        s_exp in -8.0f64..1.0,
        sl in 0.0f64..4.0,
        sg in 0.0f64..4.0,
        k in 1usize..20,
        gap in 0.0f64..10.0,
    ) {
        let s = 10f64.powf(s_exp);
        let cs = theory::comm_saving_check(CommSavingInputs {
            bits, dim: d, epsilon: 1.0, theta, smoothness: l, grad_bound: b, step: s,
            sigma_l: sl, sigma_g: sg, local_steps: k, initial_gap: gap,
        });
        prop_assert!(floor_rel_err(cs.epsilon_floor, &exact_floor_pow4(d, theta, l, b, s, sl, sg, k, gap)) <= 1e-12);
        prop_assert_eq!(cs.bits_ok, exact_bits_ok(bits, d));
        prop_assert_eq!(cs.saves, cs.bits_ok && 1.0 > cs.epsilon_floor);
    }
}
