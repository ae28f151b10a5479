//! Preference warm start: pairs built from SFT drafts, optimised with the
//! DPO objective against a frozen reference.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::format_record;
use crate::env::{build_observation, Instance};
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, AdamConfig, AdamState};
use crate::policy::{
    sample_with, Label, Observation, PolicyParams, PromptVariant, SamplingSpec, SequenceEval,
    TokenSeq, Usage,
};
use crate::seed::Provenance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta_dpo: f64,
    pub drafts_per_input: usize,
    pub temperature: f64,
    pub top_k: usize,
    /// Maximum pairs kept per instance; `0` keeps the full cross product.
    pub pair_cap: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta_dpo: 0.1,
            drafts_per_input: 16,
            temperature: 0.99,
            top_k: 100,
            pair_cap: 8,
            epochs: 1,
            batch_size: 16,
            lr: 3e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub instance_id: u64,
    pub obs: Observation,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
}

/// Distinct positive and negative drafts (label agrees / disagrees with gold),
/// each in sorted order.
pub fn partition_drafts(drafts: &[TokenSeq], gold: Label) -> (Vec<TokenSeq>, Vec<TokenSeq>) {
    let pos: BTreeSet<TokenSeq> = drafts.iter().copied().filter(|d| d.label == gold).collect();
    let neg: BTreeSet<TokenSeq> = drafts.iter().copied().filter(|d| d.label != gold).collect();
    (pos.into_iter().collect(), neg.into_iter().collect())
}

/// Cross product of distinct positives and negatives, subsampled to `cap`.
pub fn pairs_from_drafts<R: Rng + ?Sized>(
    drafts: &[TokenSeq],
    gold: Label,
    cap: usize,
    rng: &mut R,
) -> Vec<(TokenSeq, TokenSeq)> {
    let (pos, neg) = partition_drafts(drafts, gold);
    let mut pairs: Vec<(TokenSeq, TokenSeq)> = pos
        .iter()
        .flat_map(|p| neg.iter().map(move |n| (*p, *n)))
        .collect();
    if cap > 0 && pairs.len() > cap {
        pairs.shuffle(rng);
        pairs.truncate(cap);
        pairs.sort();
    }
    pairs
}

/// Samples drafts from `policy` under the with-context prompt for every pool
/// instance and forms preference pairs.
pub fn build_preference_pairs<R: Rng + ?Sized>(
    policy: &PolicyParams,
    pool: &[Instance],
    cfg: &DpoConfig,
    rng: &mut R,
) -> Result<Vec<PreferencePair>> {
    if cfg.drafts_per_input < 2 {
        return Err(Error::Config("drafts_per_input must be >= 2".into()));
    }
    let spec = SamplingSpec::new(cfg.temperature, cfg.top_k)?;
    let mut out = Vec::new();
    for inst in pool {
        let obs = build_observation(inst, PromptVariant::WithContext);
        let drafts = (0..cfg.drafts_per_input)
            .map(|_| sample_with(policy, &obs, &spec, rng).map(|s| s.tokens))
            .collect::<Result<Vec<_>>>()?;
        for (chosen, rejected) in pairs_from_drafts(&drafts, inst.gold, cfg.pair_cap, rng) {
            out.push(PreferencePair {
                instance_id: inst.id,
                obs: obs.clone(),
                chosen,
                rejected,
            });
        }
    }
    Ok(out)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss value, its gradient with respect to the policy parameters, and the
/// margin `beta * delta`.
#[derive(Clone, Debug)]
pub struct DpoEval {
    pub loss: f64,
    pub margin: f64,
    pub grad: Vec<f64>,
}

fn dpo_eval_with_ref(
    policy: &PolicyParams,
    pair: &PreferencePair,
    ref_chosen: f64,
    ref_rejected: f64,
    beta: f64,
    grad: Option<&mut [f64]>,
    weight: f64,
) -> Result<(f64, f64)> {
    let spec = SamplingSpec::UNIT;
    let c = SequenceEval::new(policy, &pair.obs, pair.chosen, &spec)?;
    let r = SequenceEval::new(policy, &pair.obs, pair.rejected, &spec)?;
    let delta = (c.sum() - ref_chosen) - (r.sum() - ref_rejected);
    let margin = beta * delta;
    let loss = softplus(-margin);
    if let Some(g) = grad {
        let dl_ddelta = -beta * sigmoid(-margin) * weight;
        c.backprop(policy, &spec, [dl_ddelta; 2], g);
        r.backprop(policy, &spec, [-dl_ddelta; 2], g);
    }
    Ok((loss, margin))
}

/// `-log sigmoid(beta * delta)` where delta is the difference of
/// policy/reference log-ratios of the chosen and rejected sequences. The
/// reference receives no gradient.
pub fn dpo_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta_dpo: f64,
) -> Result<DpoEval> {
    let spec = SamplingSpec::UNIT;
    let rc = SequenceEval::new(reference, &pair.obs, pair.chosen, &spec)?.sum();
    let rr = SequenceEval::new(reference, &pair.obs, pair.rejected, &spec)?.sum();
    let mut grad = policy.zero_grad();
    let (loss, margin) = dpo_eval_with_ref(policy, pair, rc, rr, beta_dpo, Some(&mut grad), 1.0)?;
    Ok(DpoEval { loss, margin, grad })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DpoReport {
    pub pairs: usize,
    pub mean_margin_start: f64,
    pub mean_margin_end: f64,
    pub mean_loss_start: f64,
    pub mean_loss_end: f64,
    pub steps: usize,
}

fn mean_margin_loss(policy: &PolicyParams, pairs: &[PreferencePair], refs: &[(f64, f64)], beta: f64) -> Result<(f64, f64)> {
    let mut m = 0.0;
    let mut l = 0.0;
    for (p, r) in pairs.iter().zip(refs) {
        let (loss, margin) = dpo_eval_with_ref(policy, p, r.0, r.1, beta, None, 0.0)?;
        m += margin;
        l += loss;
    }
    let n = pairs.len() as f64;
    Ok((m / n, l / n))
}

/// Minimises the mean DPO loss over `pairs`.
pub fn dpo_train<R: Rng + ?Sized>(
    policy: &mut PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
    rng: &mut R,
) -> Result<DpoReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    if !(cfg.beta_dpo > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config("beta_dpo and batch_size must be positive".into()));
    }
    let spec = SamplingSpec::UNIT;
    let refs = pairs
        .iter()
        .map(|p| {
            Ok((
                SequenceEval::new(reference, &p.obs, p.chosen, &spec)?.sum(),
                SequenceEval::new(reference, &p.obs, p.rejected, &spec)?.sum(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (m0, l0) = mean_margin_loss(policy, pairs, &refs, cfg.beta_dpo)?;
    let adam = AdamConfig::new(cfg.lr);
    let mut state = AdamState::new(policy.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = policy.zero_grad();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                dpo_eval_with_ref(policy, &pairs[i], refs[i].0, refs[i].1, cfg.beta_dpo, Some(&mut grad), w)?;
            }
            // minimise the loss: ascend its negative
            grad.iter_mut().for_each(|g| *g = -*g);
            optimizer_step(policy.values_mut(), &grad, &mut state, &adam);
            steps += 1;
        }
    }
    let (m1, l1) = mean_margin_loss(policy, pairs, &refs, cfg.beta_dpo)?;
    Ok(DpoReport {
        pairs: pairs.len(),
        mean_margin_start: m0,
        mean_margin_end: m1,
        mean_loss_start: l0,
        mean_loss_end: l1,
        steps,
    })
}

fn seq_text(s: TokenSeq) -> String {
    format!("{}:{}", s.usage.name(), s.label.tier())
}

fn parse_seq(s: &str) -> Option<TokenSeq> {
    let (u, l) = s.split_once(':')?;
    let usage = Usage::ALL.into_iter().find(|x| x.name() == u)?;
    let label = Label::from_tier(l.parse().ok()?)?;
    Some(TokenSeq::new(usage, label))
}

/// Pairs file: the dataset record of the source instance followed by the
/// chosen and rejected sequences (`USAGE:tier`), tab-separated.
pub fn write_pairs(
    path: &Path,
    pairs: &[PreferencePair],
    instances: &[Instance],
    prov: &Provenance,
) -> Result<()> {
    let by_id: std::collections::HashMap<u64, &Instance> = instances.iter().map(|i| (i.id, i)).collect();
    let mut s = prov.comment_line();
    s.push_str("\n# <dataset record>\tchosen\trejected\n");
    for p in pairs {
        let inst = by_id
            .get(&p.instance_id)
            .ok_or_else(|| Error::Config(format!("pair references unknown instance {}", p.instance_id)))?;
        writeln!(s, "{}\t{}\t{}", format_record(inst), seq_text(p.chosen), seq_text(p.rejected))
            .expect("write to String");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            what: "preference pair",
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut parts = line.rsplitn(3, '\t');
        let rejected = parts.next().and_then(parse_seq).ok_or_else(|| bad("bad rejected sequence".into()))?;
        let chosen = parts.next().and_then(parse_seq).ok_or_else(|| bad("bad chosen sequence".into()))?;
        let record = parts.next().ok_or_else(|| bad("missing record".into()))?;
        let inst = crate::data_io::parse_record(record).map_err(bad)?;
        out.push(PreferencePair {
            instance_id: inst.id,
            obs: build_observation(&inst, PromptVariant::WithContext),
            chosen,
            rejected,
        });
    }
    Ok(out)
}
