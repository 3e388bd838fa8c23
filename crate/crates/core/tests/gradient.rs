mod common;

use common::{check_gradient, check_self_override, grad_instance, max_relative_error};
use proptest::prelude::*;

#[test]
fn analytic_gradient_matches_central_differences() {
    check_gradient(100).unwrap();
}

#[test]
fn router_pathway_override_is_bit_identical() {
    check_self_override(1000).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_vanishes_off_mask(seed in 1000u64..1_000_000) {
        let g = grad_instance(seed);
        let grad = g.model.grad_pathway(&g.input, g.label, &g.omega, &g.mask).unwrap();
        for (i, v) in grad.values().iter().enumerate() {
            if !g.mask.entries().contains(&i) {
                prop_assert_eq!(*v, 0.0);
            }
        }
        let fd = g.model.finite_diff_grad(&g.input, g.label, &g.omega, &g.mask, 1e-5).unwrap();
        prop_assert!(max_relative_error(&grad, &fd, &g.mask, 1e-8).0 < 1e-5);
    }
}
