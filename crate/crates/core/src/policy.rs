//! Small autoregressive categorical policy over two-token structured outputs.
//!
//! The first token is the context-usage decision (ADOPT / IGNORE), the second
//! the relevance tier (L1..L4), conditioned on the first through a learned
//! embedding. The network is a single tanh hidden layer shared by both heads:
//!
//! ```text
//! h        = tanh(W1 x + b1)
//! usage    = Wu h + bu                    (2 logits)
//! label    = Wl [h ; emb(usage)] + bl     (4 logits)
//! ```
//!
//! All gradients are written out by hand; every loss in the crate reduces to
//! a weight on the logits of one or both positions and is pushed through
//! [`PolicyParams::backward`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const USAGE_VOCAB: usize = 2;
pub const LABEL_VOCAB: usize = 4;
pub const SEQ_LEN: usize = 2;

/// Lower clamp for arguments of `ln`.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Usage {
    Adopt,
    Ignore,
}

impl Usage {
    pub const ALL: [Usage; USAGE_VOCAB] = [Usage::Adopt, Usage::Ignore];

    pub fn index(self) -> usize {
        match self {
            Usage::Adopt => 0,
            Usage::Ignore => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Usage::Adopt => "ADOPT",
            Usage::Ignore => "IGNORE",
        }
    }
}

/// Relevance tier. Token index 0 is the least relevant tier (1-Irrelevant).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    L1,
    L2,
    L3,
    L4,
}

impl Label {
    pub const ALL: [Label; LABEL_VOCAB] = [Label::L1, Label::L2, Label::L3, Label::L4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Tier number in 1..=4.
    pub fn tier(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_tier(tier: u8) -> Option<Self> {
        tier.checked_sub(1).and_then(|i| Self::from_index(i as usize))
    }
}

/// A complete output: usage token followed by label token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSeq {
    pub usage: Usage,
    pub label: Label,
}

impl TokenSeq {
    pub fn new(usage: Usage, label: Label) -> Self {
        Self { usage, label }
    }

    /// All eight possible sequences, usage-major.
    pub fn all() -> impl Iterator<Item = TokenSeq> {
        Usage::ALL
            .into_iter()
            .flat_map(|u| Label::ALL.into_iter().map(move |l| TokenSeq::new(u, l)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    NoContext,
    WithContext,
}

impl PromptVariant {
    pub fn name(self) -> &'static str {
        match self {
            PromptVariant::NoContext => "no_context",
            PromptVariant::WithContext => "with_context",
        }
    }
}

/// Prompt-level input to the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub query: Vec<f64>,
    pub item: Vec<f64>,
    pub context: Vec<f64>,
    pub context_flag: f64,
}

impl Observation {
    pub fn dim(&self) -> usize {
        self.query.len() + self.item.len() + self.context.len() + 1
    }

    pub fn variant(&self) -> PromptVariant {
        if self.context_flag > 0.5 {
            PromptVariant::WithContext
        } else {
            PromptVariant::NoContext
        }
    }

    fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        x.extend_from_slice(&self.query);
        x.extend_from_slice(&self.item);
        x.extend_from_slice(&self.context);
        x.push(self.context_flag);
        x
    }
}

/// Architecture header. The parameter count is a pure function of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    pub query_dim: usize,
    pub item_dim: usize,
    pub context_dim: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl Arch {
    pub const DEFAULT_HIDDEN: usize = 32;
    pub const DEFAULT_EMBED: usize = 4;

    pub fn new(query_dim: usize, item_dim: usize, context_dim: usize) -> Self {
        Self {
            query_dim,
            item_dim,
            context_dim,
            hidden: Self::DEFAULT_HIDDEN,
            embed: Self::DEFAULT_EMBED,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.query_dim + self.item_dim + self.context_dim + 1
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    fn layout(&self) -> Layout {
        let (d, h, e) = (self.input_dim(), self.hidden, self.embed);
        let w1 = 0;
        let b1 = w1 + h * d;
        let wu = b1 + h;
        let bu = wu + USAGE_VOCAB * h;
        let emb = bu + USAGE_VOCAB;
        let wl = emb + USAGE_VOCAB * e;
        let bl = wl + LABEL_VOCAB * (h + e);
        let total = bl + LABEL_VOCAB;
        Layout {
            w1,
            b1,
            wu,
            bu,
            emb,
            wl,
            bl,
            total,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    w1: usize,
    b1: usize,
    wu: usize,
    bu: usize,
    emb: usize,
    wl: usize,
    bl: usize,
    total: usize,
}

/// Flat parameter vector plus the architecture that gives it meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    arch: Arch,
    values: Vec<f64>,
}

/// Intermediate values of the shared trunk for one observation.
#[derive(Clone, Debug)]
pub struct Activations {
    input: Vec<f64>,
    hidden: Vec<f64>,
    pub usage_logits: [f64; USAGE_VOCAB],
}

impl PolicyParams {
    pub fn zeros(arch: Arch) -> Self {
        Self {
            arch,
            values: vec![0.0; arch.param_count()],
        }
    }

    /// Scaled Gaussian initialisation. Output heads start small so the
    /// initial policy is close to uniform.
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        let l = arch.layout();
        let d = arch.input_dim() as f64;
        let h = arch.hidden as f64;
        let trunk = Normal::new(0.0, 1.0 / d.sqrt()).expect("finite std");
        let head = Normal::new(0.0, 0.1 / h.sqrt()).expect("finite std");
        let emb = Normal::new(0.0, 0.5).expect("finite std");
        for v in &mut p.values[l.w1..l.b1] {
            *v = trunk.sample(rng);
        }
        for v in &mut p.values[l.wu..l.bu] {
            *v = head.sample(rng);
        }
        for v in &mut p.values[l.emb..l.wl] {
            *v = emb.sample(rng);
        }
        for v in &mut p.values[l.wl..l.bl] {
            *v = head.sample(rng);
        }
        p
    }

    pub fn from_values(arch: Arch, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite parameter value".into()));
        }
        Ok(Self { arch, values })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        let a = &self.arch;
        let parts = [
            (a.query_dim, obs.query.len()),
            (a.item_dim, obs.item.len()),
            (a.context_dim, obs.context.len()),
        ];
        for (expected, got) in parts {
            if expected != got {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        Ok(())
    }

    /// Runs the shared trunk and the usage head.
    pub fn activations(&self, obs: &Observation) -> Result<Activations> {
        self.check_obs(obs)?;
        let l = self.arch.layout();
        let d = self.arch.input_dim();
        let input = obs.input();
        let w = &self.values;
        let hidden: Vec<f64> = (0..self.arch.hidden)
            .map(|j| {
                let row = &w[l.w1 + j * d..l.w1 + (j + 1) * d];
                let pre = w[l.b1 + j] + row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>();
                pre.tanh()
            })
            .collect();
        let mut usage_logits = [0.0; USAGE_VOCAB];
        for (k, out) in usage_logits.iter_mut().enumerate() {
            let row = &w[l.wu + k * self.arch.hidden..l.wu + (k + 1) * self.arch.hidden];
            *out = w[l.bu + k] + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(Activations {
            input,
            hidden,
            usage_logits,
        })
    }

    /// Label-head logits given the trunk activations and the usage prefix.
    pub fn label_logits(&self, act: &Activations, usage: Usage) -> [f64; LABEL_VOCAB] {
        let l = self.arch.layout();
        let (h, e) = (self.arch.hidden, self.arch.embed);
        let w = &self.values;
        let emb = &w[l.emb + usage.index() * e..l.emb + (usage.index() + 1) * e];
        let mut out = [0.0; LABEL_VOCAB];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &w[l.wl + k * (h + e)..l.wl + (k + 1) * (h + e)];
            let from_hidden: f64 = row[..h].iter().zip(&act.hidden).map(|(a, b)| a * b).sum();
            let from_emb: f64 = row[h..].iter().zip(emb).map(|(a, b)| a * b).sum();
            *o = w[l.bl + k] + from_hidden + from_emb;
        }
        out
    }

    /// Logits for position 1 (`prev_usage == None`, 2 values) or position 2
    /// (`Some(usage)`, 4 values).
    pub fn forward(&self, obs: &Observation, prev_usage: Option<Usage>) -> Result<Vec<f64>> {
        let act = self.activations(obs)?;
        Ok(match prev_usage {
            None => act.usage_logits.to_vec(),
            Some(u) => self.label_logits(&act, u).to_vec(),
        })
    }

    /// Accumulates `J^T d` into `grad`, where `d_usage` / `d_label` are the
    /// derivatives of some scalar with respect to the position-1 logits and
    /// the position-2 logits (the latter evaluated with prefix `usage`).
    pub fn backward(
        &self,
        act: &Activations,
        usage: Usage,
        d_usage: &[f64; USAGE_VOCAB],
        d_label: &[f64; LABEL_VOCAB],
        grad: &mut [f64],
    ) {
        debug_assert_eq!(grad.len(), self.values.len());
        let l = self.arch.layout();
        let (h, e, d) = (self.arch.hidden, self.arch.embed, self.arch.input_dim());
        let w = &self.values;
        let mut d_hidden = vec![0.0; h];

        if d_label.iter().any(|v| *v != 0.0) {
            let emb_off = l.emb + usage.index() * e;
            for (k, &g) in d_label.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad[l.bl + k] += g;
                let row = l.wl + k * (h + e);
                for j in 0..h {
                    grad[row + j] += g * act.hidden[j];
                    d_hidden[j] += g * w[row + j];
                }
                for j in 0..e {
                    grad[row + h + j] += g * w[emb_off + j];
                    grad[emb_off + j] += g * w[row + h + j];
                }
            }
        }

        for (k, &g) in d_usage.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[l.bu + k] += g;
            let row = l.wu + k * h;
            for j in 0..h {
                grad[row + j] += g * act.hidden[j];
                d_hidden[j] += g * w[row + j];
            }
        }

        for j in 0..h {
            let dpre = d_hidden[j] * (1.0 - act.hidden[j] * act.hidden[j]);
            if dpre == 0.0 {
                continue;
            }
            grad[l.b1 + j] += dpre;
            let row = l.w1 + j * d;
            for (g, x) in grad[row..row + d].iter_mut().zip(&act.input) {
                *g += dpre * x;
            }
        }
    }
}

/// Temperature-scaled, top-k truncated categorical distribution over logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub temperature: f64,
    pub top_k: usize,
}

impl SamplingSpec {
    /// Plain softmax of the logits.
    pub const UNIT: SamplingSpec = SamplingSpec {
        temperature: 1.0,
        top_k: usize::MAX,
    };

    pub fn new(temperature: f64, top_k: usize) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be finite and > 0, got {temperature}"
            )));
        }
        if top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(Self { temperature, top_k })
    }

    /// Probabilities of the sampling distribution. Tokens outside the top-k
    /// set get probability exactly zero; ties at the cut keep lower indices.
    pub fn probs(&self, logits: &[f64]) -> Vec<f64> {
        let keep = self.kept(logits);
        let scaled: Vec<f64> = logits.iter().map(|z| z / self.temperature).collect();
        let max = scaled
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = scaled
            .iter()
            .zip(&keep)
            .map(|(s, k)| if *k { (s - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        p
    }

    /// Log-probabilities of the sampling distribution (`-inf` outside top-k).
    pub fn log_probs(&self, logits: &[f64]) -> Vec<f64> {
        let keep = self.kept(logits);
        let scaled: Vec<f64> = logits.iter().map(|z| z / self.temperature).collect();
        let max = scaled
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + scaled
                .iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(s, _)| (s - max).exp())
                .sum::<f64>()
                .ln();
        scaled
            .iter()
            .zip(&keep)
            .map(|(s, k)| if *k { s - lse } else { f64::NEG_INFINITY })
            .collect()
    }

    /// d log p(token) / d logits.
    pub fn dlogp_dlogits(&self, logits: &[f64], token: usize) -> Vec<f64> {
        let p = self.probs(logits);
        if p[token] == 0.0 {
            return vec![0.0; logits.len()];
        }
        p.iter()
            .enumerate()
            .map(|(k, pk)| ((k == token) as u8 as f64 - pk) / self.temperature)
            .collect()
    }

    fn kept(&self, logits: &[f64]) -> Vec<bool> {
        if self.top_k >= logits.len() {
            return vec![true; logits.len()];
        }
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        let mut keep = vec![false; logits.len()];
        for &i in &order[..self.top_k] {
            keep[i] = true;
        }
        keep
    }
}

/// One sampled output with the log-probabilities of the distribution it was
/// drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledSequence {
    pub tokens: TokenSeq,
    pub logprobs: [f64; SEQ_LEN],
    pub variant: PromptVariant,
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Draws a two-token sequence from the temperature-scaled, top-k truncated
/// policy.
pub fn sample_sequence<R: Rng + ?Sized>(
    params: &PolicyParams,
    obs: &Observation,
    temperature: f64,
    top_k: usize,
    rng: &mut R,
) -> Result<SampledSequence> {
    let spec = SamplingSpec::new(temperature, top_k)?;
    sample_with(params, obs, &spec, rng)
}

pub fn sample_with<R: Rng + ?Sized>(
    params: &PolicyParams,
    obs: &Observation,
    spec: &SamplingSpec,
    rng: &mut R,
) -> Result<SampledSequence> {
    let act = params.activations(obs)?;
    let pu = spec.probs(&act.usage_logits);
    let u = draw(&pu, rng);
    let usage = Usage::from_index(u).expect("usage index in range");
    let label_logits = params.label_logits(&act, usage);
    let pl = spec.probs(&label_logits);
    let k = draw(&pl, rng);
    let label = Label::from_index(k).expect("label index in range");
    Ok(SampledSequence {
        tokens: TokenSeq::new(usage, label),
        logprobs: [
            spec.log_probs(&act.usage_logits)[u],
            spec.log_probs(&label_logits)[k],
        ],
        variant: obs.variant(),
    })
}

fn argmax(values: &[f64]) -> usize {
    // first maximum wins, i.e. ties go to the lower index
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding (the zero-temperature limit of sampling).
pub fn greedy_sequence(params: &PolicyParams, obs: &Observation) -> Result<TokenSeq> {
    let act = params.activations(obs)?;
    let usage = Usage::from_index(argmax(&act.usage_logits)).expect("in range");
    let label = Label::from_index(argmax(&params.label_logits(&act, usage))).expect("in range");
    Ok(TokenSeq::new(usage, label))
}

/// Per-token log-probabilities of `tokens` together with the activations
/// needed to backpropagate through them.
#[derive(Clone, Debug)]
pub struct SequenceEval {
    pub act: Activations,
    pub label_logits: [f64; LABEL_VOCAB],
    pub logprobs: [f64; SEQ_LEN],
    pub tokens: TokenSeq,
}

impl SequenceEval {
    pub fn new(
        params: &PolicyParams,
        obs: &Observation,
        tokens: TokenSeq,
        spec: &SamplingSpec,
    ) -> Result<Self> {
        let act = params.activations(obs)?;
        let label_logits = params.label_logits(&act, tokens.usage);
        let logprobs = [
            spec.log_probs(&act.usage_logits)[tokens.usage.index()],
            spec.log_probs(&label_logits)[tokens.label.index()],
        ];
        Ok(Self {
            act,
            label_logits,
            logprobs,
            tokens,
        })
    }

    pub fn sum(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    /// Adds `weights[0] * grad log p(t1) + weights[1] * grad log p(t2)`.
    pub fn backprop(
        &self,
        params: &PolicyParams,
        spec: &SamplingSpec,
        weights: [f64; SEQ_LEN],
        grad: &mut [f64],
    ) {
        let mut d_usage = [0.0; USAGE_VOCAB];
        let mut d_label = [0.0; LABEL_VOCAB];
        if weights[0] != 0.0 {
            let g = spec.dlogp_dlogits(&self.act.usage_logits, self.tokens.usage.index());
            for (d, gk) in d_usage.iter_mut().zip(g) {
                *d = weights[0] * gk;
            }
        }
        if weights[1] != 0.0 {
            let g = spec.dlogp_dlogits(&self.label_logits, self.tokens.label.index());
            for (d, gk) in d_label.iter_mut().zip(g) {
                *d = weights[1] * gk;
            }
        }
        params.backward(&self.act, self.tokens.usage, &d_usage, &d_label, grad);
    }
}

/// Sum of per-token log-softmax values of `tokens` under the plain policy.
pub fn sequence_logprob(params: &PolicyParams, obs: &Observation, tokens: TokenSeq) -> Result<f64> {
    Ok(SequenceEval::new(params, obs, tokens, &SamplingSpec::UNIT)?.sum())
}

/// [`sequence_logprob`] and its gradient with respect to the parameters.
pub fn sequence_logprob_grad(
    params: &PolicyParams,
    obs: &Observation,
    tokens: TokenSeq,
) -> Result<(f64, Vec<f64>)> {
    let spec = SamplingSpec::UNIT;
    let eval = SequenceEval::new(params, obs, tokens, &spec)?;
    let mut grad = params.zero_grad();
    eval.backprop(params, &spec, [1.0, 1.0], &mut grad);
    Ok((eval.sum(), grad))
}

/// KL(p || q) over one categorical, with `ln` arguments clamped.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(pa, pb)| pa * (pa.max(LOG_CLAMP).ln() - pb.max(LOG_CLAMP).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// d KL(softmax(z) || q) / dz.
fn categorical_kl_dlogits(p: &[f64], q: &[f64]) -> Vec<f64> {
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(pa, pb)| pa * (pa.max(LOG_CLAMP).ln() - pb.max(LOG_CLAMP).ln()))
        .sum();
    p.iter()
        .zip(q)
        .map(|(pa, pb)| pa * (pa.max(LOG_CLAMP).ln() - pb.max(LOG_CLAMP).ln() - kl))
        .collect()
}

/// Exact KL between the two policies' next-token distributions at one state.
pub fn kl_exact(
    a: &PolicyParams,
    b: &PolicyParams,
    obs: &Observation,
    prev_usage: Option<Usage>,
) -> Result<f64> {
    if a.arch() != b.arch() {
        return Err(Error::Config("KL between different architectures".into()));
    }
    let spec = SamplingSpec::UNIT;
    let pa = spec.probs(&a.forward(obs, prev_usage)?);
    let pb = spec.probs(&b.forward(obs, prev_usage)?);
    Ok(categorical_kl(&pa, &pb))
}

/// [`kl_exact`] with `weight * grad_a KL` accumulated into `grad`.
pub fn kl_exact_grad(
    a: &PolicyParams,
    b: &PolicyParams,
    obs: &Observation,
    prev_usage: Option<Usage>,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if a.arch() != b.arch() {
        return Err(Error::Config("KL between different architectures".into()));
    }
    let spec = SamplingSpec::UNIT;
    let act_a = a.activations(obs)?;
    let act_b = b.activations(obs)?;
    match prev_usage {
        None => {
            let pa = spec.probs(&act_a.usage_logits);
            let pb = spec.probs(&act_b.usage_logits);
            let dz = categorical_kl_dlogits(&pa, &pb);
            let d_usage = [weight * dz[0], weight * dz[1]];
            a.backward(&act_a, Usage::Adopt, &d_usage, &[0.0; LABEL_VOCAB], grad);
            Ok(categorical_kl(&pa, &pb))
        }
        Some(u) => {
            let pa = spec.probs(&a.label_logits(&act_a, u));
            let pb = spec.probs(&b.label_logits(&act_b, u));
            let dz = categorical_kl_dlogits(&pa, &pb);
            let mut d_label = [0.0; LABEL_VOCAB];
            for (d, g) in d_label.iter_mut().zip(dz) {
                *d = weight * g;
            }
            a.backward(&act_a, u, &[0.0; USAGE_VOCAB], &d_label, grad);
            Ok(categorical_kl(&pa, &pb))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Arch {
        Arch {
            query_dim: 3,
            item_dim: 4,
            context_dim: 4,
            hidden: 5,
            embed: 2,
        }
    }

    fn obs(rng: &mut ChaCha8Rng) -> Observation {
        let n = Normal::new(0.0, 1.0).unwrap();
        Observation {
            query: (0..3).map(|_| n.sample(rng)).collect(),
            item: (0..4).map(|_| n.sample(rng)).collect(),
            context: (0..4).map(|_| n.sample(rng)).collect(),
            context_flag: 1.0,
        }
    }

    #[test]
    fn param_count_matches_layout() {
        let a = arch();
        let d = a.input_dim();
        assert_eq!(d, 12);
        assert_eq!(a.param_count(), 5 * 12 + 5 + 2 * 5 + 2 + 2 * 2 + 4 * 7 + 4);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PolicyParams::zeros(arch());
        let o = obs(&mut rng);
        assert_eq!(p.forward(&o, None).unwrap(), vec![0.0; 2]);
        assert_eq!(p.forward(&o, Some(Usage::Ignore)).unwrap(), vec![0.0; 4]);
        let lp = sequence_logprob(&p, &o, TokenSeq::new(Usage::Adopt, Label::L3)).unwrap();
        assert!((lp - (0.5f64.ln() + 0.25f64.ln())).abs() < 1e-12);
        assert!((lp + 2.0794).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = PolicyParams::zeros(arch());
        let o = Observation {
            query: vec![0.0; 2],
            item: vec![0.0; 4],
            context: vec![0.0; 4],
            context_flag: 0.0,
        };
        assert!(matches!(
            p.forward(&o, None),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn top_k_truncates_and_renormalises() {
        let spec = SamplingSpec::new(1.0, 2).unwrap();
        let p = spec.probs(&[0.0, 2.0, 1.0, -1.0]);
        assert_eq!(p[0], 0.0);
        assert_eq!(p[3], 0.0);
        assert!((p[1] + p[2] - 1.0).abs() < 1e-15);
        let lp = spec.log_probs(&[0.0, 2.0, 1.0, -1.0]);
        assert!(lp[0].is_infinite());
        assert!((lp[1].exp() - p[1]).abs() < 1e-15);
    }

    #[test]
    fn invalid_sampling_spec_rejected() {
        assert!(SamplingSpec::new(0.0, 1).is_err());
        assert!(SamplingSpec::new(f64::NAN, 1).is_err());
        assert!(SamplingSpec::new(1.0, 0).is_err());
    }

    #[test]
    fn kl_closed_form() {
        let kl = categorical_kl(&[0.75, 0.25], &[0.5, 0.5]);
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn label_round_trip() {
        for l in Label::ALL {
            assert_eq!(Label::from_tier(l.tier()), Some(l));
        }
        assert_eq!(Label::from_tier(0), None);
        assert_eq!(Label::from_tier(5), None);
        assert_eq!(TokenSeq::all().count(), 8);
    }
}
