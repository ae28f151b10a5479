mod common;

use common::*;
use dyknow::grpo::{posterior_scaling, total_objective, GrpoConfig};

#[test]
fn analytic_gradients_match_finite_differences() {
    for (name, err) in gradient_oracle_errors(20) {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn full_objective_gradient() {
    let data = small_data(6, 5);
    let old = random_policy(3);
    let policy = perturbed(&old, 0.02, 4);
    let batches: Vec<_> = data.iter().enumerate().map(|(i, inst)| mixed_batch(&old, inst, 8, i as u64)).collect();
    let coeffs = vec![posterior_scaling(0.8, 0.6); batches.len()];
    for cfg in [
        GrpoConfig::default(),
        GrpoConfig {
            crossprompt_log: true,
            ..GrpoConfig::default()
        },
    ] {
        let (_, g) = total_objective(&policy, &old, &batches, &coeffs, &cfg, true).unwrap();
        let ng = numeric_grad(&policy, GRAD_H, |p| {
            total_objective(p, &old, &batches, &coeffs, &cfg, false).unwrap().0.j
        });
        let err = rel_err(&g.unwrap(), &ng);
        assert!(err < 1e-4, "relative error {err:e}");
    }
}

#[test]
fn kl_gradient_vanishes_at_reference() {
    let data = small_data(3, 8);
    let p = random_policy(1);
    let batches: Vec<_> = data.iter().map(|i| mixed_batch(&p, i, 4, 2)).collect();
    let mut g = p.zero_grad();
    let kl = dyknow::grpo::kl_penalty(&p, &p, &batches, 1.0, Some(&mut g)).unwrap();
    assert_eq!(kl, 0.0);
    assert!(g.iter().all(|v| v.abs() < 1e-15));
}
