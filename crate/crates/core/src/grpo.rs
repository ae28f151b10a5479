//! Dual-group GRPO with posterior-driven inter-group advantage scaling, and
//! the single-group baseline.
//!
//! Each wave rolls out, per instance, one group under the no-context prompt
//! and one under the with-context prompt from a frozen snapshot of the
//! policy. The objective ascended is
//!
//! ```text
//! J = l0 + l1 + l_hat - lambda_kl * KL(pi || pi_ref)
//! ```
//!
//! where `l0` / `l1` are clipped surrogates with group z-scored advantages,
//! and `l_hat` re-scores the no-context sequences under the with-context
//! prompt, weighted by the piecewise-scaled inter-group advantage.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{build_observation, reward, Instance, Utility};
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, AdamConfig, AdamState};
use crate::policy::{
    kl_exact, kl_exact_grad, sample_with, Observation, PolicyParams, PromptVariant, SampledSequence,
    SamplingSpec, SequenceEval, Usage, LOG_CLAMP, SEQ_LEN,
};

/// Regulariser inside every z-score square root.
pub const Z_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalingMode {
    /// `beta = 4 sigmoid(4 gap)`, `alpha = 0.1 / beta`.
    Posterior,
    Fixed { alpha: f64, beta: f64 },
    /// `(0.05, 2)` on ADOPT/PARTIAL instances, `(2, 0.05)` on IGNORE ones.
    LabelGated,
}

impl ScalingMode {
    pub const FIXED_DEFAULT: ScalingMode = ScalingMode::Fixed {
        alpha: 2.0,
        beta: 0.05,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Dual groups, union statistics and the cross-prompt term.
    Dyknow,
    /// One with-context group of size `2 n`.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub algorithm: Algorithm,
    pub n_per_group: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub rollout_batch: usize,
    pub clip_eps: f64,
    pub adv_clamp: f64,
    pub lambda_kl: f64,
    pub lr: f64,
    pub difficulty_band: [f64; 2],
    pub scaling: ScalingMode,
    /// Number of rollout waves (one optimizer step each).
    pub steps: usize,
    /// Use `log pi` instead of `pi` in the cross-prompt term.
    pub crossprompt_log: bool,
    /// Disable the cross-prompt term entirely.
    pub crossprompt_off: bool,
    /// Accuracy gap per instance instead of per batch.
    pub per_query_gap: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Dyknow,
            n_per_group: 8,
            temperature: 0.99,
            top_k: 100,
            rollout_batch: 64,
            clip_eps: 0.2,
            adv_clamp: 2.0,
            lambda_kl: 0.02,
            lr: 3e-4,
            difficulty_band: [0.01, 0.9],
            scaling: ScalingMode::Posterior,
            steps: 300,
            crossprompt_log: false,
            crossprompt_off: false,
            per_query_gap: false,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_per_group < 2 {
            return bad("grpo.n_per_group must be >= 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("grpo.clip_eps must lie in (0, 1)");
        }
        let [lo, hi] = self.difficulty_band;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("grpo.difficulty_band must be an ordered pair within [0, 1]");
        }
        if !(self.adv_clamp > 0.0) || !(self.lr > 0.0) || !(self.lambda_kl >= 0.0) {
            return bad("grpo.adv_clamp and grpo.lr must be > 0, grpo.lambda_kl >= 0");
        }
        if self.rollout_batch == 0 {
            return bad("grpo.rollout_batch must be >= 1");
        }
        if let ScalingMode::Fixed { alpha, beta } = self.scaling {
            if !(alpha > 0.0 && beta > 0.0) {
                return bad("fixed scaling coefficients must be positive");
            }
        }
        self.spec().map(|_| ())
    }

    pub fn spec(&self) -> Result<SamplingSpec> {
        SamplingSpec::new(self.temperature, self.top_k)
    }
}

/// Population mean and epsilon-regularised standard deviation.
pub fn z_stats(returns: &[f64]) -> (f64, f64) {
    let n = returns.len() as f64;
    let mu = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / n;
    (mu, (var + Z_EPS).sqrt())
}

/// `A_i = (R_i - mu) / s` against the group's own statistics.
pub fn intra_group_advantages(returns: &[f64]) -> (f64, f64, Vec<f64>) {
    let (mu, s) = z_stats(returns);
    (mu, s, returns.iter().map(|r| (r - mu) / s).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub variant: PromptVariant,
    pub rollouts: Vec<SampledSequence>,
    pub returns: Vec<f64>,
    pub mu: f64,
    pub s: f64,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(variant: PromptVariant, rollouts: Vec<SampledSequence>, returns: Vec<f64>) -> Self {
        let (mu, s, advantages) = intra_group_advantages(&returns);
        Self {
            variant,
            rollouts,
            returns,
            mu,
            s,
            advantages,
        }
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn mean_return(&self) -> f64 {
        self.mu
    }
}

/// Samples `n` sequences from `old` under one prompt variant and scores them.
pub fn rollout_group<R: Rng + ?Sized>(
    old: &PolicyParams,
    inst: &Instance,
    variant: PromptVariant,
    n: usize,
    spec: &SamplingSpec,
    rng: &mut R,
) -> Result<RolloutGroup> {
    if n < 2 {
        return Err(Error::Config("rollout groups need n >= 2".into()));
    }
    let obs = build_observation(inst, variant);
    let mut rollouts = Vec::with_capacity(n);
    let mut returns = Vec::with_capacity(n);
    for _ in 0..n {
        let s = sample_with(old, &obs, spec, rng)?;
        returns.push(reward(s.tokens.label, inst.gold));
        rollouts.push(s);
    }
    Ok(RolloutGroup::new(variant, rollouts, returns))
}

/// The no-context group followed by the with-context group.
pub fn rollout_dual_groups<R: Rng + ?Sized>(
    old: &PolicyParams,
    inst: &Instance,
    cfg: &GrpoConfig,
    rng: &mut R,
) -> Result<(RolloutGroup, RolloutGroup)> {
    let spec = cfg.spec()?;
    let g0 = rollout_group(old, inst, PromptVariant::NoContext, cfg.n_per_group, &spec, rng)?;
    let g1 = rollout_group(old, inst, PromptVariant::WithContext, cfg.n_per_group, &spec, rng)?;
    Ok((g0, g1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnionStats {
    pub mu_star: f64,
    pub s_star: f64,
}

/// Pooled statistics over the returns of both groups.
pub fn union_statistics(returns0: &[f64], returns1: &[f64]) -> Result<UnionStats> {
    if returns0.len() != returns1.len() {
        return Err(Error::Config(format!(
            "union statistics need equal group sizes, got {} and {}",
            returns0.len(),
            returns1.len()
        )));
    }
    let pooled: Vec<f64> = returns0.iter().chain(returns1).copied().collect();
    let (mu_star, s_star) = z_stats(&pooled);
    Ok(UnionStats { mu_star, s_star })
}

/// `A~_i = (R0_i - mu*) / s*` for the no-context rollouts.
pub fn inter_group_advantages(returns0: &[f64], stats: &UnionStats) -> Vec<f64> {
    returns0.iter().map(|r| (r - stats.mu_star) / stats.s_star).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCoeffs {
    pub alpha: f64,
    pub beta: f64,
    pub acc_with: f64,
    pub acc_without: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn posterior_scaling(acc_with: f64, acc_without: f64) -> ScalingCoeffs {
    let beta = 4.0 * sigmoid(4.0 * (acc_with - acc_without));
    ScalingCoeffs {
        alpha: 0.1 / beta,
        beta,
        acc_with,
        acc_without,
    }
}

/// Coefficients for one instance under the configured mode.
pub fn scaling_for(mode: ScalingMode, utility: Utility, acc_with: f64, acc_without: f64) -> ScalingCoeffs {
    let (alpha, beta) = match mode {
        ScalingMode::Posterior => return posterior_scaling(acc_with, acc_without),
        ScalingMode::Fixed { alpha, beta } => (alpha, beta),
        ScalingMode::LabelGated => match utility {
            Utility::Adopt | Utility::Partial => (0.05, 2.0),
            Utility::Ignore => (2.0, 0.05),
        },
    };
    ScalingCoeffs {
        alpha,
        beta,
        acc_with,
        acc_without,
    }
}

/// `alpha * x` for positive `x`, `beta * x` otherwise.
pub fn piecewise_scale(x: f64, c: &ScalingCoeffs) -> f64 {
    if x > 0.0 {
        c.alpha * x
    } else {
        c.beta * x
    }
}

/// `min(r A, clip(r, 1-eps, 1+eps) A)` and whether the unclipped branch is
/// the one selected (only then does the term depend on `r`).
pub fn clipped_term(ratio: f64, adv: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IntraEval {
    pub value: f64,
    pub clipped_tokens: usize,
    pub tokens: usize,
}

/// Clipped surrogate of one group under its own prompt: mean over rollouts
/// of the length-normalised per-token terms. Advantages are clamped to
/// `±adv_clamp`. Adds `weight * grad` when `grad` is given.
pub fn surrogate_loss_intra(
    policy: &PolicyParams,
    obs: &Observation,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
    weight: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<IntraEval> {
    let spec = cfg.spec()?;
    let n = group.len() as f64;
    let mut out = IntraEval::default();
    for (ro, &a) in group.rollouts.iter().zip(&group.advantages) {
        let adv = a.clamp(-cfg.adv_clamp, cfg.adv_clamp);
        let ev = SequenceEval::new(policy, obs, ro.tokens, &spec)?;
        let mut w = [0.0; SEQ_LEN];
        for t in 0..SEQ_LEN {
            let ratio = (ev.logprobs[t] - ro.logprobs[t]).exp();
            let (v, active) = clipped_term(ratio, adv, cfg.clip_eps);
            out.value += v / (SEQ_LEN as f64 * n);
            out.tokens += 1;
            if active {
                w[t] = weight * adv * ratio / (SEQ_LEN as f64 * n);
            } else {
                out.clipped_tokens += 1;
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            ev.backprop(policy, &spec, w, g);
        }
    }
    Ok(out)
}

/// Cross-prompt term: the no-context sequences of `group0` scored under the
/// with-context observation, `mean_i (1/|o|) sum_t pi_t * T_i`. `scaled` holds
/// the already scaled and clamped `T(A~_i)`.
pub fn crossprompt_loss(
    policy: &PolicyParams,
    with_obs: &Observation,
    group0: &RolloutGroup,
    scaled: &[f64],
    cfg: &GrpoConfig,
    weight: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    if scaled.len() != group0.len() {
        return Err(Error::DimensionMismatch {
            expected: group0.len(),
            got: scaled.len(),
        });
    }
    let spec = cfg.spec()?;
    let n = group0.len() as f64;
    let norm = SEQ_LEN as f64 * n;
    let mut value = 0.0;
    for (ro, &t_i) in group0.rollouts.iter().zip(scaled) {
        if t_i == 0.0 {
            continue;
        }
        let ev = SequenceEval::new(policy, with_obs, ro.tokens, &spec)?;
        let mut w = [0.0; SEQ_LEN];
        for t in 0..SEQ_LEN {
            if cfg.crossprompt_log {
                value += ev.logprobs[t].max(LOG_CLAMP.ln()) * t_i / norm;
                w[t] = weight * t_i / norm;
            } else {
                let p = ev.logprobs[t].exp();
                value += p * t_i / norm;
                w[t] = weight * p * t_i / norm;
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            ev.backprop(policy, &spec, w, g);
        }
    }
    Ok(value)
}

/// Rollouts and advantage structures of one instance within a wave.
#[derive(Clone, Debug)]
pub struct DualGroupBatch {
    pub instance_id: u64,
    pub utility: Utility,
    pub obs_no_ctx: Observation,
    pub obs_with_ctx: Observation,
    /// Absent for the single-group baseline.
    pub group0: Option<RolloutGroup>,
    pub group1: RolloutGroup,
    /// Inter-group advantages of the `group0` rollouts.
    pub inter: Vec<f64>,
}

impl DualGroupBatch {
    pub fn dual(inst: &Instance, group0: RolloutGroup, group1: RolloutGroup) -> Result<Self> {
        let stats = union_statistics(&group0.returns, &group1.returns)?;
        let inter = inter_group_advantages(&group0.returns, &stats);
        Ok(Self {
            instance_id: inst.id,
            utility: inst.utility,
            obs_no_ctx: build_observation(inst, PromptVariant::NoContext),
            obs_with_ctx: build_observation(inst, PromptVariant::WithContext),
            group0: Some(group0),
            group1,
            inter,
        })
    }

    pub fn single(inst: &Instance, group1: RolloutGroup) -> Self {
        Self {
            instance_id: inst.id,
            utility: inst.utility,
            obs_no_ctx: build_observation(inst, PromptVariant::NoContext),
            obs_with_ctx: build_observation(inst, PromptVariant::WithContext),
            group0: None,
            group1,
            inter: Vec::new(),
        }
    }

    /// Mean return over every rollout of the instance.
    pub fn pooled_mean(&self) -> f64 {
        let mut s: f64 = self.group1.returns.iter().sum();
        let mut n = self.group1.len();
        if let Some(g0) = &self.group0 {
            s += g0.returns.iter().sum::<f64>();
            n += g0.len();
        }
        s / n as f64
    }
}

/// Keep iff the pooled mean return lies in the closed band.
pub fn difficulty_filter(batch: &DualGroupBatch, band: [f64; 2]) -> bool {
    let m = batch.pooled_mean();
    m >= band[0] && m <= band[1]
}

/// Mean exact per-position KL to `reference` over every state visited by
/// the rollouts of `batches` (both prompts). Adds `weight * grad`.
pub fn kl_penalty(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batches: &[DualGroupBatch],
    weight: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    // visits per (observation, state); the first-position state is shared by
    // a whole group, the second depends only on the sampled usage token
    let mut visits: Vec<(&Observation, Option<Usage>, usize)> = Vec::new();
    let mut total = 0usize;
    for b in batches {
        let groups = b.group0.iter().map(|g| (g, &b.obs_no_ctx)).chain([(&b.group1, &b.obs_with_ctx)]);
        for (g, obs) in groups {
            visits.push((obs, None, g.len()));
            for u in Usage::ALL {
                let c = g.rollouts.iter().filter(|r| r.tokens.usage == u).count();
                if c > 0 {
                    visits.push((obs, Some(u), c));
                }
            }
            total += SEQ_LEN * g.len();
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    let mut kl = 0.0;
    for (obs, prev, count) in visits {
        let share = count as f64 / total as f64;
        let k = match grad.as_deref_mut() {
            Some(g) => kl_exact_grad(policy, reference, obs, prev, weight * share, g)?,
            None => kl_exact(policy, reference, obs, prev)?,
        };
        kl += share * k;
    }
    Ok(kl)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub l0: f64,
    pub l1: f64,
    pub l_hat: f64,
    pub kl: f64,
    pub j: f64,
    pub clipped_tokens: usize,
    pub tokens: usize,
}

/// `J = l0 + l1 + l_hat - lambda_kl * KL`, each term averaged over
/// `batches`; `coeffs[i]` scales the inter-group advantages of batch `i`.
/// Returns the parts and `dJ/dtheta` when `want_grad`.
pub fn total_objective(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batches: &[DualGroupBatch],
    coeffs: &[ScalingCoeffs],
    cfg: &GrpoConfig,
    want_grad: bool,
) -> Result<(ObjectiveParts, Option<Vec<f64>>)> {
    if coeffs.len() != batches.len() {
        return Err(Error::DimensionMismatch {
            expected: batches.len(),
            got: coeffs.len(),
        });
    }
    let mut parts = ObjectiveParts::default();
    let mut grad = want_grad.then(|| policy.zero_grad());
    if batches.is_empty() {
        return Ok((parts, grad));
    }
    let w = 1.0 / batches.len() as f64;
    for (b, c) in batches.iter().zip(coeffs) {
        if let Some(g0) = &b.group0 {
            let e = surrogate_loss_intra(policy, &b.obs_no_ctx, g0, cfg, w, grad.as_deref_mut())?;
            parts.l0 += w * e.value;
            parts.clipped_tokens += e.clipped_tokens;
            parts.tokens += e.tokens;
            if !cfg.crossprompt_off {
                let scaled: Vec<f64> = b
                    .inter
                    .iter()
                    .map(|a| piecewise_scale(*a, c).clamp(-cfg.adv_clamp, cfg.adv_clamp))
                    .collect();
                parts.l_hat +=
                    w * crossprompt_loss(policy, &b.obs_with_ctx, g0, &scaled, cfg, w, grad.as_deref_mut())?;
            }
        }
        let e = surrogate_loss_intra(policy, &b.obs_with_ctx, &b.group1, cfg, w, grad.as_deref_mut())?;
        parts.l1 += w * e.value;
        parts.clipped_tokens += e.clipped_tokens;
        parts.tokens += e.tokens;
    }
    if cfg.lambda_kl > 0.0 {
        parts.kl = kl_penalty(policy, reference, batches, -cfg.lambda_kl, grad.as_deref_mut())?;
    } else {
        parts.kl = kl_penalty(policy, reference, batches, 0.0, None)?;
    }
    parts.j = parts.l0 + parts.l1 + parts.l_hat - cfg.lambda_kl * parts.kl;
    Ok((parts, grad))
}

/// Everything sampled and derived in one wave before the update.
#[derive(Clone, Debug)]
pub struct Wave {
    pub batches: Vec<DualGroupBatch>,
    pub kept: Vec<usize>,
    pub acc_with: f64,
    /// `None` for the single-group baseline.
    pub acc_without: Option<f64>,
    /// One entry per kept batch.
    pub coeffs: Vec<ScalingCoeffs>,
}

/// Rolls out every instance from `old`, filters by difficulty and computes
/// the scaling coefficients.
pub fn prepare_wave<R: Rng + ?Sized>(
    old: &PolicyParams,
    instances: &[Instance],
    cfg: &GrpoConfig,
    dual: bool,
    rng: &mut R,
) -> Result<Wave> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let mut batches = Vec::with_capacity(instances.len());
    for inst in instances {
        if dual {
            let (g0, g1) = rollout_dual_groups(old, inst, cfg, rng)?;
            batches.push(DualGroupBatch::dual(inst, g0, g1)?);
        } else {
            let g1 = rollout_group(old, inst, PromptVariant::WithContext, 2 * cfg.n_per_group, &spec, rng)?;
            batches.push(DualGroupBatch::single(inst, g1));
        }
    }
    let mean_of = |f: &dyn Fn(&DualGroupBatch) -> Option<&RolloutGroup>| -> Option<f64> {
        let (s, n) = batches
            .iter()
            .filter_map(f)
            .fold((0.0, 0usize), |(s, n), g| (s + g.returns.iter().sum::<f64>(), n + g.len()));
        (n > 0).then(|| s / n as f64)
    };
    let acc_with = mean_of(&|b| Some(&b.group1)).unwrap_or(0.0);
    let acc_without = mean_of(&|b| b.group0.as_ref());
    let kept: Vec<usize> = (0..batches.len())
        .filter(|&i| difficulty_filter(&batches[i], cfg.difficulty_band))
        .collect();
    let coeffs = kept
        .iter()
        .map(|&i| {
            let b = &batches[i];
            let (aw, an) = if cfg.per_query_gap {
                (b.group1.mean_return(), b.group0.as_ref().map_or(0.0, |g| g.mean_return()))
            } else {
                (acc_with, acc_without.unwrap_or(0.0))
            };
            scaling_for(cfg.scaling, b.utility, aw, an)
        })
        .collect();
    Ok(Wave {
        batches,
        kept,
        acc_with,
        acc_without,
        coeffs,
    })
}

/// Per-wave metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_return_no_ctx: Option<f64>,
    pub mean_return_with_ctx: f64,
    pub acc_gap: Option<f64>,
    /// Mean over kept instances (they differ only under label gating).
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub kl: f64,
    pub clip_fraction: f64,
    pub filtered_count: usize,
    pub skipped: bool,
}

#[allow(clippy::too_many_arguments)]
fn wave_step<R: Rng + ?Sized>(
    policy: &mut PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    opt: &mut AdamState,
    instances: &[Instance],
    cfg: &GrpoConfig,
    step: usize,
    dual: bool,
    rng: &mut R,
) -> Result<StepMetrics> {
    let wave = prepare_wave(old, instances, cfg, dual, rng)?;
    let kept: Vec<DualGroupBatch> = wave.kept.iter().map(|&i| wave.batches[i].clone()).collect();
    let mut metrics = StepMetrics {
        step,
        mean_return_no_ctx: wave.acc_without,
        mean_return_with_ctx: wave.acc_with,
        acc_gap: wave.acc_without.map(|a| wave.acc_with - a),
        alpha: None,
        beta: None,
        kl: 0.0,
        clip_fraction: 0.0,
        filtered_count: wave.batches.len() - kept.len(),
        skipped: kept.is_empty(),
    };
    if kept.is_empty() {
        return Ok(metrics);
    }
    if dual {
        let n = wave.coeffs.len() as f64;
        metrics.alpha = Some(wave.coeffs.iter().map(|c| c.alpha).sum::<f64>() / n);
        metrics.beta = Some(wave.coeffs.iter().map(|c| c.beta).sum::<f64>() / n);
    }
    let (parts, grad) = total_objective(policy, reference, &kept, &wave.coeffs, cfg, true)?;
    metrics.kl = parts.kl;
    metrics.clip_fraction = parts.clipped_tokens as f64 / parts.tokens.max(1) as f64;
    let grad = grad.expect("gradient requested");
    optimizer_step(policy.values_mut(), &grad, opt, &AdamConfig::new(cfg.lr));
    Ok(metrics)
}

/// One dual-group wave and one optimizer step. `old` must be a snapshot of
/// `policy` taken at wave start.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step<R: Rng + ?Sized>(
    policy: &mut PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    opt: &mut AdamState,
    instances: &[Instance],
    cfg: &GrpoConfig,
    step: usize,
    rng: &mut R,
) -> Result<StepMetrics> {
    wave_step(policy, old, reference, opt, instances, cfg, step, true, rng)
}

/// Single with-context group of size `2 n`; no union statistics, no
/// cross-prompt term.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_grpo_step<R: Rng + ?Sized>(
    policy: &mut PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    opt: &mut AdamState,
    instances: &[Instance],
    cfg: &GrpoConfig,
    step: usize,
    rng: &mut R,
) -> Result<StepMetrics> {
    wave_step(policy, old, reference, opt, instances, cfg, step, false, rng)
}

/// Runs `cfg.steps` waves over the pool. The KL reference is the policy as
/// passed in. Batches are drawn without replacement from a reshuffled pool.
pub fn train<R: Rng + ?Sized>(
    policy: &mut PolicyParams,
    pool: &[Instance],
    cfg: &GrpoConfig,
    rng: &mut R,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reference = policy.clone();
    let mut opt = AdamState::new(policy.len());
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = pool.len();
    let batch_size = cfg.rollout_batch.min(pool.len());
    let mut out = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(pool[order[cursor]].clone());
            cursor += 1;
        }
        let old = policy.clone();
        let m = match cfg.algorithm {
            Algorithm::Dyknow => grpo_step(policy, &old, &reference, &mut opt, &batch, cfg, step, rng)?,
            Algorithm::Vanilla => vanilla_grpo_step(policy, &old, &reference, &mut opt, &batch, cfg, step, rng)?,
        };
        on_step(&m);
        out.push(m);
    }
    Ok(out)
}
