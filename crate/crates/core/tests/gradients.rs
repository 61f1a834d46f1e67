mod common;

use common::*;
use proptest::prelude::*;
use unrec::losses::{bpr_loss, reverse_bpr_loss};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_gradients_match_finite_differences(seed in any::<u64>()) {
        let inst = random_instance(seed);
        for name in LOSSES {
            let e = max_grad_error(&inst, name, 1e-5);
            prop_assert!(e <= 1e-4, "{name}: relative error {e:.3e}");
        }
    }

    #[test]
    fn reverse_bpr_is_exact_negation(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let enc = inst.encoder();
        let fwd = enc.forward(&inst.params).unwrap();
        let b = bpr_loss(&enc, &inst.params, &fwd, &inst.retain);
        let r = reverse_bpr_loss(&enc, &inst.params, &fwd, &inst.retain);
        prop_assert_eq!(r.rpr, -b.bpr);
        for k in 0..inst.params.num_values() {
            prop_assert_eq!(r.grads.get_flat(k), -b.grads.get_flat(k));
        }
    }
}

#[test]
fn gradient_check_detects_a_wrong_gradient() {
    // Guards the checker itself: a perturbed analytic gradient must fail.
    let inst = random_instance(3);
    let enc = inst.encoder();
    let (_, mut g) = eval_loss(&inst, &enc, "bpr", &inst.params);
    let k = (0..g.num_values()).max_by(|&a, &b| g.get_flat(a).abs().total_cmp(&g.get_flat(b).abs())).unwrap();
    let h = 1e-5;
    let mut plus = inst.params.clone();
    plus.set_flat(k, plus.get_flat(k) + h);
    let mut minus = inst.params.clone();
    minus.set_flat(k, minus.get_flat(k) - h);
    let fd = (eval_loss(&inst, &enc, "bpr", &plus).0 - eval_loss(&inst, &enc, "bpr", &minus).0) / (2.0 * h);
    assert!((g.get_flat(k) - fd).abs() <= 1e-4 * fd.abs().max(1e-6));
    g.set_flat(k, g.get_flat(k) * 1.01);
    assert!((g.get_flat(k) - fd).abs() > 1e-4 * fd.abs().max(1e-6));
}
