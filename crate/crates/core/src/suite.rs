//! End-to-end comparison grid: baselines, the dual-group method on two
//! bases, gating ablations, inference-time context on/off, Top-1 vs Top-3
//! chunks and a high-noise setting. Every run shares seeds and data.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpo::{build_preference_pairs, dpo_train, DpoConfig};
use crate::env::{generate_dataset, Instance, TaskConfig};
use crate::error::Result;
use crate::eval::{evaluate, MetricsReport};
use crate::grpo::{self, Algorithm, GrpoConfig, ScalingMode, StepMetrics};
use crate::policy::{PolicyParams, PromptVariant};
use crate::pool::{build_rl_pool, uncertainty_report, PoolConfig, UncertaintyReport};
use crate::seed::sub_seed;
use crate::sft::{score_dataset, sft_train, SftConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteOptions {
    pub n_test: usize,
    /// Size of the separate candidate set scored for the RL pool.
    pub n_candidates: usize,
    pub high_noise_q_mislead: f64,
    pub gating_ablations: bool,
    pub chunk_ablation: bool,
    pub high_noise: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            n_test: 4000,
            n_candidates: 8000,
            high_noise_q_mislead: 0.5,
            gating_ablations: true,
            chunk_ablation: true,
            high_noise: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub task: TaskConfig,
    pub sft: SftConfig,
    pub pool: PoolConfig,
    pub dpo: DpoConfig,
    pub grpo: GrpoConfig,
    pub suite: SuiteOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub table: String,
    pub name: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub seed: u64,
    pub rows: Vec<SuiteRow>,
    pub uncertainty: UncertaintyReport,
    pub pool_size: usize,
    pub pairs: usize,
    /// `(run name, record)` for every GRPO wave.
    pub steps: Vec<(String, StepMetrics)>,
}

impl SuiteResult {
    pub fn row(&self, table: &str, name: &str, variant: PromptVariant) -> Option<&MetricsReport> {
        self.rows
            .iter()
            .find(|r| r.table == table && r.name == name && r.metrics.variant == variant)
            .map(|r| &r.metrics)
    }
}

pub const MAIN: &str = "main";
pub const GATING: &str = "gating";
pub const CONTEXT: &str = "context";
pub const CHUNKS: &str = "chunks";
pub const NOISE: &str = "high_noise";

pub const SFT_ONLY: &str = "SFT-only";
pub const RAG_SFT: &str = "RAG-SFT";
pub const RAG_DPO: &str = "RAG-DPO";
pub const RAG_GRPO: &str = "RAG-GRPO (SFT base)";
pub const DYKNOW_SFT: &str = "DyKnow-RAG (SFT base)";
pub const DYKNOW_DPO: &str = "DyKnow-RAG (DPO base)";

struct Pipeline {
    train: Vec<Instance>,
    test: Vec<Instance>,
    init: PolicyParams,
    rag_sft: PolicyParams,
    pool: Vec<Instance>,
    uncertainty: UncertaintyReport,
}

fn rng(seed: u64, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, stage))
}

fn dataset(task: &TaskConfig, n: usize, seed: u64, stage: &str) -> Result<Vec<Instance>> {
    generate_dataset(&TaskConfig {
        n_instances: n,
        seed: sub_seed(seed, stage),
        ..task.clone()
    })
}

fn pipeline(cfg: &SuiteConfig, task: &TaskConfig, seed: u64) -> Result<Pipeline> {
    let train = dataset(task, task.n_instances, seed, "data/train")?;
    let candidates = dataset(task, cfg.suite.n_candidates, seed, "data/candidates")?;
    let test = dataset(task, cfg.suite.n_test, seed, "data/test")?;
    let init = PolicyParams::init(task.arch(), &mut rng(seed, "init"));
    let mut rag_sft = init.clone();
    let sft_cfg = SftConfig {
        variant: PromptVariant::WithContext,
        ..cfg.sft.clone()
    };
    sft_train(&mut rag_sft, &train, &sft_cfg, &mut rng(seed, "sft"))?;
    let scores = score_dataset(&rag_sft, &candidates, PromptVariant::WithContext)?;
    let pool = build_rl_pool(&scores, &candidates, &cfg.pool, sub_seed(seed, "pool"))?;
    Ok(Pipeline {
        train,
        test,
        init,
        rag_sft,
        pool,
        uncertainty: uncertainty_report(&scores),
    })
}

struct Runner<'a> {
    seed: u64,
    steps: &'a mut Vec<(String, StepMetrics)>,
}

impl Runner<'_> {
    fn grpo(&mut self, name: &str, base: &PolicyParams, pool: &[Instance], cfg: &GrpoConfig) -> Result<PolicyParams> {
        let mut p = base.clone();
        let mut records = Vec::new();
        grpo::train(&mut p, pool, cfg, &mut rng(self.seed, "grpo"), |m| records.push(m.clone()))?;
        self.steps.extend(records.into_iter().map(|m| (name.to_string(), m)));
        Ok(p)
    }
}

fn push(rows: &mut Vec<SuiteRow>, table: &str, name: &str, m: MetricsReport) {
    rows.push(SuiteRow {
        table: table.into(),
        name: name.into(),
        metrics: m,
    });
}

/// Trains and evaluates the whole grid for one seed.
pub fn run_suite(cfg: &SuiteConfig, seed: u64) -> Result<SuiteResult> {
    cfg.task.validate()?;
    cfg.grpo.validate()?;
    let mut rows = Vec::new();
    let mut steps = Vec::new();
    let mut runner = Runner { seed, steps: &mut steps };
    let with = PromptVariant::WithContext;
    let without = PromptVariant::NoContext;

    let main = pipeline(cfg, &cfg.task, seed)?;
    let test = &main.test;

    let mut sft_only = main.init.clone();
    let only_cfg = SftConfig {
        variant: without,
        ..cfg.sft.clone()
    };
    sft_train(&mut sft_only, &main.train, &only_cfg, &mut rng(seed, "sft"))?;

    let pairs = build_preference_pairs(&main.rag_sft, &main.pool, &cfg.dpo, &mut rng(seed, "dpo/pairs"))?;
    let mut rag_dpo = main.rag_sft.clone();
    if cfg.dpo.epochs > 0 {
        dpo_train(&mut rag_dpo, &main.rag_sft, &pairs, &cfg.dpo, &mut rng(seed, "dpo/train"))?;
    }

    let dyk = GrpoConfig {
        algorithm: Algorithm::Dyknow,
        ..cfg.grpo.clone()
    };
    let van = GrpoConfig {
        algorithm: Algorithm::Vanilla,
        ..cfg.grpo.clone()
    };
    let rag_grpo = runner.grpo(RAG_GRPO, &main.rag_sft, &main.pool, &van)?;
    let dyk_sft = runner.grpo(DYKNOW_SFT, &main.rag_sft, &main.pool, &dyk)?;
    let dyk_dpo = runner.grpo(DYKNOW_DPO, &rag_dpo, &main.pool, &dyk)?;

    push(&mut rows, MAIN, SFT_ONLY, evaluate(&sft_only, test, without)?);
    for (name, p) in [
        (RAG_SFT, &main.rag_sft),
        (RAG_DPO, &rag_dpo),
        (RAG_GRPO, &rag_grpo),
        (DYKNOW_SFT, &dyk_sft),
        (DYKNOW_DPO, &dyk_dpo),
    ] {
        push(&mut rows, MAIN, name, evaluate(p, test, with)?);
    }

    for (name, p) in [(RAG_SFT, &main.rag_sft), (DYKNOW_SFT, &dyk_sft), (DYKNOW_DPO, &dyk_dpo)] {
        push(&mut rows, CONTEXT, name, evaluate(p, test, with)?);
        push(&mut rows, CONTEXT, name, evaluate(p, test, without)?);
    }

    if cfg.suite.gating_ablations {
        push(&mut rows, GATING, "posterior", evaluate(&dyk_sft, test, with)?);
        for (name, mode) in [("fixed", ScalingMode::FIXED_DEFAULT), ("label", ScalingMode::LabelGated)] {
            let c = GrpoConfig {
                scaling: mode,
                ..dyk.clone()
            };
            let p = runner.grpo(&format!("{DYKNOW_SFT} {name} gating"), &main.rag_sft, &main.pool, &c)?;
            push(&mut rows, GATING, name, evaluate(&p, test, with)?);
        }
    }

    if cfg.suite.chunk_ablation {
        push(&mut rows, CHUNKS, "top1", evaluate(&dyk_sft, test, with)?);
        let task3 = TaskConfig {
            chunks: 3,
            ..cfg.task.clone()
        };
        let p3 = pipeline(cfg, &task3, seed)?;
        let d3 = runner.grpo(&format!("{DYKNOW_SFT} top3"), &p3.rag_sft, &p3.pool, &dyk)?;
        push(&mut rows, CHUNKS, "top3", evaluate(&d3, &p3.test, with)?);
    }

    if cfg.suite.high_noise {
        let task_hn = TaskConfig {
            q_mislead: cfg.suite.high_noise_q_mislead,
            ..cfg.task.clone()
        };
        let hn = pipeline(cfg, &task_hn, seed)?;
        let d = runner.grpo(&format!("{DYKNOW_SFT} high noise"), &hn.rag_sft, &hn.pool, &dyk)?;
        for (name, p) in [(RAG_SFT, &hn.rag_sft), (DYKNOW_SFT, &d)] {
            push(&mut rows, NOISE, name, evaluate(p, &hn.test, with)?);
            push(&mut rows, NOISE, name, evaluate(p, &hn.test, without)?);
        }
    }

    Ok(SuiteResult {
        seed,
        rows,
        uncertainty: main.uncertainty,
        pool_size: main.pool.len(),
        pairs: pairs.len(),
        steps,
    })
}

const TITLES: [(&str, &str); 5] = [
    (MAIN, "Baselines and method"),
    (CONTEXT, "Context at inference (on / off)"),
    (GATING, "Inter-group scaling ablation (SFT base)"),
    (CHUNKS, "Top-1 vs Top-3 chunks (SFT base)"),
    (NOISE, "High-noise context"),
];

/// Aligned text tables; identical inputs give byte-identical output.
pub fn render_suite(results: &[SuiteResult]) -> String {
    let mut s = String::new();
    let seeds: Vec<String> = results.iter().map(|r| r.seed.to_string()).collect();
    writeln!(s, "seeds: {}", seeds.join(", ")).expect("write to String");
    for r in results {
        writeln!(s, "seed {}: RL pool {} instances, {} preference pairs", r.seed, r.pool_size, r.pairs)
            .expect("write to String");
    }
    for (table, title) in TITLES {
        let Some(first) = results.first() else { break };
        let names: Vec<(&str, PromptVariant)> = first
            .rows
            .iter()
            .filter(|r| r.table == table)
            .map(|r| (r.name.as_str(), r.metrics.variant))
            .collect();
        if names.is_empty() {
            continue;
        }
        writeln!(s, "\n{title} (mean over {} seed(s))", results.len()).expect("write to String");
        writeln!(
            s,
            "{:<26} {:<12} {:>6} {:>6} {:>6} {:>6} {:>7} {:>7} {:>8} {:>8}",
            "model", "context", "F1-L1", "F1-L2", "F1-L3", "F1-L4", "macro", "acc", "adopt|A", "adopt|I"
        )
        .expect("write to String");
        for (name, variant) in names {
            let ms: Vec<&MetricsReport> = results.iter().filter_map(|r| r.row(table, name, variant)).collect();
            let k = ms.len() as f64;
            let mean = |f: &dyn Fn(&MetricsReport) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / k;
            let adopt = |u: usize| {
                let v: Vec<f64> = ms.iter().filter_map(|m| m.adopt_rate_by_utility[u]).collect();
                if v.is_empty() {
                    "-".to_string()
                } else {
                    format!("{:.2}", v.iter().sum::<f64>() / v.len() as f64)
                }
            };
            writeln!(
                s,
                "{:<26} {:<12} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>7.2} {:>7.2} {:>8} {:>8}",
                name,
                variant.name(),
                mean(&|m| m.overall.per_class_f1[0]),
                mean(&|m| m.overall.per_class_f1[1]),
                mean(&|m| m.overall.per_class_f1[2]),
                mean(&|m| m.overall.per_class_f1[3]),
                mean(&|m| m.overall.macro_f1),
                mean(&|m| m.overall.accuracy),
                adopt(0),
                adopt(2),
            )
            .expect("write to String");
        }
    }
    if let Some(first) = results.first() {
        writeln!(s, "\nSFT confidence vs error (seed {})", first.seed).expect("write to String");
        s.push_str(&first.uncertainty.render());
    }
    s
}

/// One JSON object per row and seed.
pub fn suite_records(results: &[SuiteResult]) -> Vec<String> {
    let mut out = Vec::new();
    for r in results {
        for row in &r.rows {
            let v = serde_json::json!({
                "seed": r.seed,
                "table": row.table,
                "model": row.name,
                "context": row.metrics.variant,
                "accuracy": row.metrics.overall.accuracy,
                "macro_f1": row.metrics.overall.macro_f1,
                "per_class_f1": row.metrics.overall.per_class_f1,
                "adopt_rate": row.metrics.adopt_rate,
                "adopt_rate_by_utility": row.metrics.adopt_rate_by_utility,
            });
            out.push(v.to_string());
        }
    }
    out
}
