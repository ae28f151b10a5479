//! Supervised initialisation and posterior confidence scoring.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{build_observation, Instance};
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, AdamConfig, AdamState};
use crate::policy::{
    Label, PolicyParams, PromptVariant, SamplingSpec, SequenceEval, TokenSeq, Usage, LABEL_VOCAB,
};
use crate::seed::Provenance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Prompt variant the targets are trained under (RAG-SFT uses the
    /// with-context prompt, SFT-only the no-context prompt).
    pub variant: PromptVariant,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.01,
            variant: PromptVariant::WithContext,
        }
    }
}

/// Training target: usage from the latent utility, label from gold.
pub fn sft_target(inst: &Instance) -> TokenSeq {
    TokenSeq::new(inst.utility.usage_target(), inst.gold)
}

/// Mean negative sequence log-likelihood of the targets.
pub fn mean_nll(policy: &PolicyParams, data: &[Instance], variant: PromptVariant) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for inst in data {
        let obs = build_observation(inst, variant);
        total -= SequenceEval::new(policy, &obs, sft_target(inst), &SamplingSpec::UNIT)?.sum();
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SftReport {
    /// Mean training loss accumulated over each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Cross-entropy training on the structured (usage, label) targets.
pub fn sft_train<R: Rng + ?Sized>(
    policy: &mut PolicyParams,
    data: &[Instance],
    cfg: &SftConfig,
    rng: &mut R,
) -> Result<SftReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("sft batch_size and lr must be positive".into()));
    }
    let spec = SamplingSpec::UNIT;
    let adam = AdamConfig::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut state = AdamState::new(policy.len());
    let obs: Vec<_> = data.iter().map(|i| build_observation(i, cfg.variant)).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = SftReport::default();

    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = policy.zero_grad();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let eval = SequenceEval::new(policy, &obs[i], sft_target(&data[i]), &spec)?;
                epoch_loss -= eval.sum();
                eval.backprop(policy, &spec, [w, w], &mut grad);
            }
            optimizer_step(policy.values_mut(), &grad, &mut state, &adam);
            report.steps += 1;
        }
        report.epoch_losses.push(epoch_loss / data.len() as f64);
    }
    Ok(report)
}

/// Argmax tier and its softmax probability. Ties go to the lower tier.
pub fn label_confidence(logits: &[f64; LABEL_VOCAB]) -> (Label, f64) {
    let p = SamplingSpec::UNIT.probs(logits);
    let mut best = 0;
    for k in 1..LABEL_VOCAB {
        if p[k] > p[best] {
            best = k;
        }
    }
    (Label::ALL[best], p[best])
}

/// Greedy usage token, then the posterior of the predicted tier token.
pub fn confidence_score(
    policy: &PolicyParams,
    obs: &crate::policy::Observation,
) -> Result<(Usage, Label, f64)> {
    let act = policy.activations(obs)?;
    let usage = if act.usage_logits[1] > act.usage_logits[0] {
        Usage::Ignore
    } else {
        Usage::Adopt
    };
    let (label, conf) = label_confidence(&policy.label_logits(&act, usage));
    Ok((usage, label, conf))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub id: u64,
    pub predicted: Label,
    pub confidence: f64,
    pub gold: Label,
}

impl Score {
    pub fn correct(&self) -> bool {
        self.predicted == self.gold
    }
}

pub fn score_dataset(
    policy: &PolicyParams,
    data: &[Instance],
    variant: PromptVariant,
) -> Result<Vec<Score>> {
    data.iter()
        .map(|inst| {
            let (_, predicted, confidence) =
                confidence_score(policy, &build_observation(inst, variant))?;
            Ok(Score {
                id: inst.id,
                predicted,
                confidence,
                gold: inst.gold,
            })
        })
        .collect()
}

/// Scoring file: provenance comment, then `id  predicted  confidence  gold`
/// (tab-separated, tiers as 1..4).
pub fn write_scores(path: &Path, scores: &[Score], prov: &Provenance) -> Result<()> {
    let mut s = prov.comment_line();
    s.push_str("\n# id\tpredicted\tconfidence\tgold\n");
    for sc in scores {
        writeln!(
            s,
            "{}\t{}\t{}\t{}",
            sc.id,
            sc.predicted.tier(),
            sc.confidence,
            sc.gold.tier()
        )
        .expect("write to String");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<Score>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Parse {
        what: "score record",
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let tier = |s: &str| s.parse::<u8>().ok().and_then(Label::from_tier);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(i + 1, "expected 4 fields"));
        }
        out.push(Score {
            id: f[0].parse().map_err(|_| bad(i + 1, "bad id"))?,
            predicted: tier(f[1]).ok_or_else(|| bad(i + 1, "bad predicted tier"))?,
            confidence: f[2].parse().map_err(|_| bad(i + 1, "bad confidence"))?,
            gold: tier(f[3]).ok_or_else(|| bad(i + 1, "bad gold tier"))?,
        });
    }
    Ok(out)
}
