//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use dyknow::env::{generate_dataset, Instance, TaskConfig};
use dyknow::grpo::{DualGroupBatch, GrpoConfig, RolloutGroup};
use dyknow::policy::{sample_with, Label, PolicyParams, PromptVariant, SamplingSpec, TokenSeq, Usage};
use dyknow::env::build_observation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_data(n: usize, seed: u64) -> Vec<Instance> {
    generate_dataset(&TaskConfig {
        n_instances: n,
        seed,
        ..TaskConfig::default()
    })
    .expect("valid task config")
}

/// Randomly initialised policy with weights large enough that every
/// distribution is far from uniform.
pub fn random_policy(seed: u64) -> PolicyParams {
    let arch = TaskConfig::default().arch();
    let mut r = rng(seed);
    let values = (0..arch.param_count()).map(|_| r.random_range(-0.6..0.6)).collect();
    PolicyParams::from_values(arch, values).expect("matching length")
}

/// `p + scale * noise`.
pub fn perturbed(p: &PolicyParams, scale: f64, seed: u64) -> PolicyParams {
    let mut r = rng(seed);
    let values = p.values().iter().map(|v| v + scale * r.random_range(-1.0..1.0)).collect();
    PolicyParams::from_values(p.arch(), values).expect("matching length")
}

pub fn random_tokens<R: Rng>(r: &mut R) -> TokenSeq {
    TokenSeq::new(
        Usage::ALL[r.random_range(0..2)],
        Label::ALL[r.random_range(0..4)],
    )
}

/// A group sampled from `old` whose returns are forced to alternate so the
/// advantages are nonzero.
pub fn mixed_group(old: &PolicyParams, inst: &Instance, variant: PromptVariant, n: usize, seed: u64) -> RolloutGroup {
    let spec = GrpoConfig::default().spec().expect("valid spec");
    let mut r = rng(seed);
    let obs = build_observation(inst, variant);
    let rollouts: Vec<_> = (0..n).map(|_| sample_with(old, &obs, &spec, &mut r).unwrap()).collect();
    let returns = (0..n).map(|i| (i * 7 + seed as usize).is_multiple_of(3) as u8 as f64).collect();
    RolloutGroup::new(variant, rollouts, returns)
}

pub fn mixed_batch(old: &PolicyParams, inst: &Instance, n: usize, seed: u64) -> DualGroupBatch {
    let g0 = mixed_group(old, inst, PromptVariant::NoContext, n, seed);
    let g1 = mixed_group(old, inst, PromptVariant::WithContext, n, seed + 1);
    DualGroupBatch::dual(inst, g0, g1).expect("equal group sizes")
}

/// Central finite differences of `f` at `p`, one coordinate at a time.
pub fn numeric_grad(p: &PolicyParams, h: f64, mut f: impl FnMut(&PolicyParams) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.len())
        .map(|i| {
            let v = p.values()[i];
            q.values_mut()[i] = v + h;
            let up = f(&q);
            q.values_mut()[i] = v - h;
            let down = f(&q);
            q.values_mut()[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn spec() -> SamplingSpec {
    GrpoConfig::default().spec().expect("valid spec")
}

pub const GRAD_H: f64 = 1e-5;

/// Worst relative error between analytic and central-difference gradients
/// of each differentiable term over `n` randomised small instances.
pub fn gradient_oracle_errors(n: usize) -> Vec<(&'static str, f64)> {
    use dyknow::dpo::{dpo_loss, PreferencePair};
    use dyknow::grpo::{crossprompt_loss, kl_penalty, surrogate_loss_intra};
    use dyknow::policy::{sequence_logprob, sequence_logprob_grad};

    let data = small_data(n, 91);
    let cfg = GrpoConfig::default();
    let mut worst = vec![
        ("sequence_logprob", 0.0f64),
        ("dpo_loss", 0.0),
        ("l0", 0.0),
        ("l1", 0.0),
        ("l_hat", 0.0),
        ("kl", 0.0),
    ];
    let mut bump = |k: usize, e: f64| worst[k].1 = worst[k].1.max(e);
    for (case, inst) in data.iter().enumerate() {
        let seed = 1000 + case as u64;
        let mut r = rng(seed);
        let old = random_policy(seed);
        let policy = perturbed(&old, 0.02, seed + 7);
        let variant = if case % 2 == 0 { PromptVariant::WithContext } else { PromptVariant::NoContext };
        let obs = build_observation(inst, variant);

        let tokens = random_tokens(&mut r);
        let (_, g) = sequence_logprob_grad(&policy, &obs, tokens).unwrap();
        let ng = numeric_grad(&policy, GRAD_H, |p| sequence_logprob(p, &obs, tokens).unwrap());
        bump(0, rel_err(&g, &ng));

        let chosen = random_tokens(&mut r);
        let mut rejected = random_tokens(&mut r);
        while rejected == chosen {
            rejected = random_tokens(&mut r);
        }
        let pair = PreferencePair {
            instance_id: inst.id,
            obs: obs.clone(),
            chosen,
            rejected,
        };
        let g = dpo_loss(&policy, &old, &pair, 0.1).unwrap().grad;
        let ng = numeric_grad(&policy, GRAD_H, |p| dpo_loss(p, &old, &pair, 0.1).unwrap().loss);
        bump(1, rel_err(&g, &ng));

        let batch = mixed_batch(&old, inst, 8, seed);
        let g0 = batch.group0.as_ref().unwrap();
        for (k, o, grp) in [(2, &batch.obs_no_ctx, g0), (3, &batch.obs_with_ctx, &batch.group1)] {
            let mut g = policy.zero_grad();
            surrogate_loss_intra(&policy, o, grp, &cfg, 1.0, Some(&mut g)).unwrap();
            let ng = numeric_grad(&policy, GRAD_H, |p| {
                surrogate_loss_intra(p, o, grp, &cfg, 1.0, None).unwrap().value
            });
            bump(k, rel_err(&g, &ng));
        }

        let scaled: Vec<f64> = (0..g0.len()).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut g = policy.zero_grad();
        crossprompt_loss(&policy, &batch.obs_with_ctx, g0, &scaled, &cfg, 1.0, Some(&mut g)).unwrap();
        let ng = numeric_grad(&policy, GRAD_H, |p| {
            crossprompt_loss(p, &batch.obs_with_ctx, g0, &scaled, &cfg, 1.0, None).unwrap()
        });
        bump(4, rel_err(&g, &ng));

        let batches = [batch.clone()];
        let mut g = policy.zero_grad();
        kl_penalty(&policy, &old, &batches, 1.0, Some(&mut g)).unwrap();
        let ng = numeric_grad(&policy, GRAD_H, |p| kl_penalty(p, &old, &batches, 1.0, None).unwrap());
        bump(5, rel_err(&g, &ng));
    }
    worst
}
