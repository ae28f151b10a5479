//! Synthetic noisy-context relevance task.
//!
//! Each instance carries a parametric signal (`item` block, a scaled one-hot
//! of the gold tier plus Gaussian noise) and a retrieved context chunk
//! (`context` block, a one-hot of either the gold tier or, with probability
//! `q_mislead`, a uniformly chosen wrong tier, plus noise). High-ambiguity
//! instances get a weak, noisy parametric signal, so the chunk is worth
//! adopting exactly when it is faithful.
//!
//! With `chunks = 3` the context block concatenates the top chunk with two
//! lower-ranked chunks. Lower-ranked chunks are drawn from a separate random
//! stream with mislead probability `lower_rank_mislead`, so a Top-3 dataset
//! is the Top-1 dataset with two extra blocks appended.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Arch, Label, Observation, PromptVariant, TokenSeq, Usage};

pub const ITEM_DIM: usize = 4;
pub const CHUNK_DIM: usize = 4;
pub const N_CATEGORIES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Negation,
    Alternative,
    Qa,
    Knowledge,
}

impl Category {
    pub const ALL: [Category; N_CATEGORIES] = [
        Category::Negation,
        Category::Alternative,
        Category::Qa,
        Category::Knowledge,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Negation => "negation",
            Category::Alternative => "alternative",
            Category::Qa => "qa",
            Category::Knowledge => "knowledge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ambiguity {
    Low,
    High,
}

impl Ambiguity {
    pub fn name(self) -> &'static str {
        match self {
            Ambiguity::Low => "low",
            Ambiguity::High => "high",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "low" => Some(Ambiguity::Low),
            "high" => Some(Ambiguity::High),
            _ => None,
        }
    }
}

/// Latent context-utilisation state of an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Utility {
    Adopt,
    Partial,
    Ignore,
}

impl Utility {
    pub const ALL: [Utility; 3] = [Utility::Adopt, Utility::Partial, Utility::Ignore];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Utility::Adopt => "adopt",
            Utility::Partial => "partial",
            Utility::Ignore => "ignore",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|u| u.name() == s)
    }

    /// Supervised usage target: the two-token output has no partial slot.
    pub fn usage_target(self) -> Usage {
        match self {
            Utility::Adopt | Utility::Partial => Usage::Adopt,
            Utility::Ignore => Usage::Ignore,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub category: Category,
    pub gold: Label,
    pub ambiguity: Ambiguity,
    pub utility: Utility,
    pub query_features: Vec<f64>,
    pub item_features: Vec<f64>,
    pub context_features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub n_instances: usize,
    /// P(L1), P(L2), P(L3), P(L4).
    pub label_probs: [f64; 4],
    pub p_high_ambiguity: f64,
    pub q_mislead: f64,
    pub sigma_low: f64,
    pub sigma_high: f64,
    /// One-hot amplitude of the parametric signal on high-ambiguity instances.
    pub high_signal: f64,
    pub context_noise_sigma: f64,
    pub query_dim: usize,
    /// 1 (Top-1) or 3 (Top-3 concatenated).
    pub chunks: usize,
    pub lower_rank_mislead: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_instances: 4000,
            label_probs: [0.06, 0.27, 0.07, 0.60],
            p_high_ambiguity: 0.40,
            q_mislead: 0.30,
            sigma_low: 0.15,
            sigma_high: 0.6,
            high_signal: 0.35,
            context_noise_sigma: 0.15,
            query_dim: 6,
            chunks: 1,
            lower_rank_mislead: 0.75,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_high_ambiguity", self.p_high_ambiguity),
            ("q_mislead", self.q_mislead),
            ("lower_rank_mislead", self.lower_rank_mislead),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.label_probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || (self.label_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "label_probs must be probabilities summing to 1, got {:?}",
                self.label_probs
            )));
        }
        for (name, s) in [
            ("sigma_low", self.sigma_low),
            ("sigma_high", self.sigma_high),
            ("context_noise_sigma", self.context_noise_sigma),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {s}")));
            }
        }
        if self.query_dim < N_CATEGORIES {
            return Err(Error::Config(format!(
                "query_dim must be >= {N_CATEGORIES}, got {}",
                self.query_dim
            )));
        }
        if self.chunks == 0 {
            return Err(Error::Config("chunks must be >= 1".into()));
        }
        Ok(())
    }

    /// (Dq, Di, Dc).
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.query_dim, ITEM_DIM, CHUNK_DIM * self.chunks)
    }

    pub fn arch(&self) -> Arch {
        let (q, i, c) = self.dims();
        Arch::new(q, i, c)
    }

    fn parametric_sigma(&self, a: Ambiguity) -> f64 {
        match a {
            Ambiguity::Low => self.sigma_low,
            Ambiguity::High => self.sigma_high,
        }
    }
}

fn noise(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("validated sigma")
}

fn pick_label<R: Rng + ?Sized>(probs: &[f64; 4], rng: &mut R) -> Label {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Label::ALL[i];
        }
    }
    // numerical tail: last tier with nonzero mass
    let i = probs.iter().rposition(|p| *p > 0.0).unwrap_or(3);
    Label::ALL[i]
}

fn other_label<R: Rng + ?Sized>(gold: Label, rng: &mut R) -> Label {
    let k = rng.random_range(0..3);
    let others: Vec<Label> = Label::ALL.into_iter().filter(|l| *l != gold).collect();
    others[k]
}

fn chunk<R: Rng + ?Sized>(label: Label, sigma: f64, rng: &mut R) -> Vec<f64> {
    let n = noise(sigma);
    (0..CHUNK_DIM)
        .map(|k| (k == label.index()) as u8 as f64 + n.sample(rng))
        .collect()
}

/// Generates `config.n_instances` instances; deterministic given the seed.
pub fn generate_dataset(config: &TaskConfig) -> Result<Vec<Instance>> {
    config.validate()?;
    if config.n_instances == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut extra = ChaCha8Rng::seed_from_u64(config.seed);
    extra.set_stream(1);
    let pad = noise(0.1);

    let mut out = Vec::with_capacity(config.n_instances);
    for id in 0..config.n_instances {
        let category = Category::ALL[rng.random_range(0..N_CATEGORIES)];
        let gold = pick_label(&config.label_probs, &mut rng);
        let ambiguity = if rng.random::<f64>() < config.p_high_ambiguity {
            Ambiguity::High
        } else {
            Ambiguity::Low
        };

        let amp = match ambiguity {
            Ambiguity::Low => 1.0,
            Ambiguity::High => config.high_signal,
        };
        let item_noise = noise(config.parametric_sigma(ambiguity));
        let item_features: Vec<f64> = (0..ITEM_DIM)
            .map(|k| amp * (k == gold.index()) as u8 as f64 + item_noise.sample(&mut rng))
            .collect();

        let mut query_features = vec![0.0; config.query_dim];
        query_features[category.index()] = 1.0;
        for v in &mut query_features[N_CATEGORIES..] {
            *v = pad.sample(&mut rng);
        }

        let misleading = rng.random::<f64>() < config.q_mislead;
        let (ctx_label, utility) = if misleading {
            (other_label(gold, &mut rng), Utility::Ignore)
        } else {
            let u = match ambiguity {
                Ambiguity::High => Utility::Adopt,
                Ambiguity::Low => Utility::Partial,
            };
            (gold, u)
        };
        let mut context_features = chunk(ctx_label, config.context_noise_sigma, &mut rng);
        for _ in 1..config.chunks {
            let l = if extra.random::<f64>() < config.lower_rank_mislead {
                other_label(gold, &mut extra)
            } else {
                gold
            };
            context_features.extend(chunk(l, config.context_noise_sigma, &mut extra));
        }

        out.push(Instance {
            id: id as u64,
            category,
            gold,
            ambiguity,
            utility,
            query_features,
            item_features,
            context_features,
        });
    }
    Ok(out)
}

/// Prompt observation for one of the two prompt variants.
pub fn build_observation(inst: &Instance, variant: PromptVariant) -> Observation {
    let (context, context_flag) = match variant {
        PromptVariant::WithContext => (inst.context_features.clone(), 1.0),
        PromptVariant::NoContext => (vec![0.0; inst.context_features.len()], 0.0),
    };
    Observation {
        query: inst.query_features.clone(),
        item: inst.item_features.clone(),
        context,
        context_flag,
    }
}

/// Binary outcome reward.
pub fn reward(predicted: Label, gold: Label) -> f64 {
    if predicted == gold {
        1.0
    } else {
        0.0
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Label read off the parametric (item) signal alone.
pub fn parametric_guess(inst: &Instance) -> Label {
    Label::ALL[argmax(&inst.item_features)]
}

/// Skyline policy that reads the latent utility flag.
pub fn oracle_policy(inst: &Instance) -> TokenSeq {
    match inst.utility {
        Utility::Ignore => TokenSeq::new(Usage::Ignore, parametric_guess(inst)),
        Utility::Adopt | Utility::Partial => TokenSeq::new(
            Usage::Adopt,
            Label::ALL[argmax(&inst.context_features[..CHUNK_DIM])],
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> TaskConfig {
        TaskConfig {
            n_instances: 500,
            seed,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_dataset(&small(9)).unwrap();
        let b = generate_dataset(&small(9)).unwrap();
        let c = generate_dataset(&small(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_dataset_error() {
        let cfg = TaskConfig {
            n_instances: 0,
            ..TaskConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::EmptyDataset)));
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let cfg = TaskConfig {
            q_mislead: 1.5,
            ..TaskConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        let cfg = TaskConfig {
            label_probs: [0.5, 0.5, 0.5, 0.0],
            ..TaskConfig::default()
        };
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn no_mislead_means_no_ignore() {
        let cfg = TaskConfig {
            q_mislead: 0.0,
            ..small(4)
        };
        let data = generate_dataset(&cfg).unwrap();
        assert!(data.iter().all(|i| i.utility != Utility::Ignore));
    }

    #[test]
    fn utility_consistent_with_construction() {
        for inst in generate_dataset(&small(5)).unwrap() {
            let ctx = Label::ALL[argmax(&inst.context_features[..CHUNK_DIM])];
            match inst.utility {
                // context noise is small relative to the one-hot gap
                Utility::Ignore => assert_ne!(ctx, inst.gold),
                Utility::Adopt => {
                    assert_eq!(inst.ambiguity, Ambiguity::High);
                    assert_eq!(ctx, inst.gold);
                }
                Utility::Partial => {
                    assert_eq!(inst.ambiguity, Ambiguity::Low);
                    assert_eq!(ctx, inst.gold);
                }
            }
        }
    }

    #[test]
    fn observation_variants() {
        let inst = &generate_dataset(&small(1)).unwrap()[0];
        let no = build_observation(inst, PromptVariant::NoContext);
        let with = build_observation(inst, PromptVariant::WithContext);
        assert!(no.context.iter().all(|v| *v == 0.0));
        assert_eq!(no.context_flag, 0.0);
        assert_eq!(with.context_flag, 1.0);
        assert_eq!(with.context, inst.context_features);
        assert_eq!(no.query, with.query);
        assert_eq!(no.item, with.item);
        assert_eq!(no.variant(), PromptVariant::NoContext);
        assert_eq!(with.variant(), PromptVariant::WithContext);
    }

    #[test]
    fn top3_extends_top1() {
        let one = generate_dataset(&small(3)).unwrap();
        let three = generate_dataset(&TaskConfig {
            chunks: 3,
            ..small(3)
        })
        .unwrap();
        for (a, b) in one.iter().zip(&three) {
            assert_eq!(b.context_features.len(), 12);
            assert_eq!(a.context_features[..], b.context_features[..4]);
            assert_eq!(a.item_features, b.item_features);
            assert_eq!(a.utility, b.utility);
        }
    }

    #[test]
    fn reward_and_oracle_basics() {
        assert_eq!(reward(Label::L4, Label::L4), 1.0);
        assert_eq!(reward(Label::L2, Label::L4), 0.0);
        for inst in generate_dataset(&small(2)).unwrap() {
            let o = oracle_policy(&inst);
            match inst.utility {
                Utility::Ignore => assert_eq!(o.usage, Usage::Ignore),
                Utility::Adopt => assert_eq!(o.usage, Usage::Adopt),
                Utility::Partial => assert_eq!(o.usage, Usage::Adopt),
            }
        }
    }
}
