//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::*;
use dyknow::dpo::{build_preference_pairs, dpo_loss, DpoConfig};
use dyknow::env::{build_observation, generate_dataset, TaskConfig, Utility};
use dyknow::grpo::{
    clipped_term, intra_group_advantages, inter_group_advantages, posterior_scaling, surrogate_loss_intra,
    union_statistics, GrpoConfig, RolloutGroup,
};
use dyknow::policy::{PolicyParams, PromptVariant};
use dyknow::pool::{build_rl_pool, uncertainty_report, PoolConfig};
use dyknow::seed::sub_seed;
use dyknow::sft::{score_dataset, sft_train, SftConfig};
use dyknow::suite::{
    run_suite, SuiteConfig, SuiteResult, CHUNKS, CONTEXT, DYKNOW_SFT, MAIN, NOISE, RAG_GRPO, RAG_SFT,
};
use rand::Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    details: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { pass: true, details: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        self.details.push(format!("{} {what}", if ok { "ok  " } else { "FAIL" }));
        self.pass &= ok;
    }

    fn note(&mut self, what: impl Into<String>) {
        self.details.push(format!("info {}", what.into()));
    }

    fn within(&mut self, start: Instant, budget: Duration) {
        let el = start.elapsed();
        self.check(el < budget, format!("runtime {:.2}s < {:.0}s", el.as_secs_f64(), budget.as_secs_f64()));
    }
}

fn c1_formula_identities() -> Outcome {
    let t = Instant::now();
    let mut o = Outcome::new();
    let c = posterior_scaling(0.6, 0.6);
    o.check(c.beta == 2.0 && c.alpha == 0.05, format!("gap 0: beta {} alpha {}", c.beta, c.alpha));
    let mut r = rng(101);
    let worst = (0..1000)
        .map(|_| {
            let (a, b) = (r.random::<f64>(), r.random::<f64>());
            let c = posterior_scaling(a, b);
            (c.alpha * c.beta - 0.1).abs()
        })
        .fold(0.0, f64::max);
    o.check(worst <= 1e-12, format!("max |alpha*beta - 0.1| = {worst:e} over 1000 gaps"));
    let grid: Vec<f64> = (0..=1000).map(|i| posterior_scaling(i as f64 / 1000.0, 1.0 - i as f64 / 1000.0).beta).collect();
    let grid2: Vec<f64> = (0..=1000).map(|i| posterior_scaling(-1.0 + i as f64 / 500.0, 0.0).beta).collect();
    let mono = |g: &[f64]| g.windows(2).all(|w| w[1] > w[0]);
    o.check(mono(&grid) && mono(&grid2), "beta strictly increasing on 1001-point gap grids");
    o.within(t, Duration::from_secs(1));
    o
}

fn c2_advantage_suite() -> Outcome {
    let t = Instant::now();
    let mut o = Outcome::new();
    let mut r = rng(202);
    let (mut worst_mean, mut worst_std_dev, mut worst_union, mut worst_shift) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut continuous = (0usize, 0usize);
    let binary_mixed = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..n).map(|_| (r.random::<f64>() < 0.5) as u8 as f64).collect();
            if v.iter().any(|x| *x == 0.0) && v.iter().any(|x| *x == 1.0) {
                return v;
            }
        }
    };
    for _ in 0..10_000 {
        let n = r.random_range(2..=16);
        let r1 = binary_mixed(&mut r, n);
        let r0: Vec<f64> = (0..n).map(|_| (r.random::<f64>() < 0.5) as u8 as f64).collect();
        let (mu, _, a) = intra_group_advantages(&r1);
        let mean = a.iter().sum::<f64>() / n as f64;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        if !(1.0 - 1e-6..=1.0).contains(&std) {
            worst_std_dev = worst_std_dev.max((std - 1.0).abs());
        }

        let st = union_statistics(&r0, &r1).unwrap();
        let pooled: Vec<f64> = r0.iter().chain(&r1).copied().collect();
        let pm = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let ps = (pooled.iter().map(|x| (x - pm).powi(2)).sum::<f64>() / pooled.len() as f64 + 1e-8).sqrt();
        worst_union = worst_union.max((st.mu_star - pm).abs()).max((st.s_star - ps).abs());
        let inter = inter_group_advantages(&r0, &st);
        for (x, ret) in inter.iter().zip(&r0) {
            worst_union = worst_union.max((x - (ret - pm) / ps).abs());
        }

        let c = r.random_range(-10.0..10.0);
        let sh = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<f64>>();
        let (mu2, _, a2) = intra_group_advantages(&sh(&r1));
        worst_shift = worst_shift.max((mu2 - mu - c).abs());
        for (x, y) in a.iter().zip(&a2) {
            worst_shift = worst_shift.max((x - y).abs());
        }
        let st2 = union_statistics(&sh(&r0), &sh(&r1)).unwrap();
        for (x, y) in inter.iter().zip(inter_group_advantages(&sh(&r0), &st2)) {
            worst_shift = worst_shift.max((x - y).abs());
        }

        let cont: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let (_, s, ac) = intra_group_advantages(&cont);
        if (s * s - 1e-8).max(0.0).sqrt() >= 1e-3 {
            let m = ac.iter().sum::<f64>() / n as f64;
            let sd = (ac.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            continuous.0 += 1;
            continuous.1 += (1.0 - 1e-6..=1.0).contains(&sd) as usize;
        }
    }
    o.check(worst_mean <= 1e-9, format!("max |mean A| = {worst_mean:e} over 10^4 groups"));
    o.check(worst_std_dev == 0.0, "std(A) in [1-1e-6, 1] for every mixed binary group");
    o.check(worst_union <= 1e-12, format!("union/inter vs direct formula: max diff {worst_union:e}"));
    o.check(worst_shift <= 1e-9, format!("translation invariance: max diff {worst_shift:e}"));
    o.note(format!(
        "continuous returns with spread >= 1e-3: {}/{} groups inside the std band",
        continuous.1, continuous.0
    ));
    o.within(t, Duration::from_secs(5));
    o
}

fn c3_gradients() -> Outcome {
    let t = Instant::now();
    let mut o = Outcome::new();
    for (name, err) in gradient_oracle_errors(20) {
        o.check(err < 1e-4, format!("{name}: relative error {err:.2e}"));
    }
    o.within(t, Duration::from_secs(30));
    o
}

/// SFT model and RL pool built the way the suite builds them.
struct Desk {
    sft: PolicyParams,
    candidates: Vec<dyknow::env::Instance>,
}

fn desk(seed: u64) -> Desk {
    let task = TaskConfig::default();
    let split = |n: usize, stage: &str| {
        generate_dataset(&TaskConfig {
            n_instances: n,
            seed: sub_seed(seed, stage),
            ..task.clone()
        })
        .unwrap()
    };
    let train = split(task.n_instances, "data/train");
    let candidates = split(dyknow::suite::SuiteOptions::default().n_candidates, "data/candidates");
    let mut sft = PolicyParams::init(task.arch(), &mut rng(sub_seed(seed, "init")));
    sft_train(&mut sft, &train, &SftConfig::default(), &mut rng(sub_seed(seed, "sft"))).unwrap();
    Desk { sft, candidates }
}

fn c4_dpo_identity(d: &Desk) -> Outcome {
    let mut o = Outcome::new();
    let scores = score_dataset(&d.sft, &d.candidates, PromptVariant::WithContext).unwrap();
    let pool = build_rl_pool(&scores, &d.candidates, &PoolConfig::default(), 1).unwrap();
    let pairs = build_preference_pairs(&d.sft, &pool, &DpoConfig::default(), &mut rng(4)).unwrap();
    let worst = pairs
        .iter()
        .map(|p| (dpo_loss(&d.sft, &d.sft, p, 0.1).unwrap().loss - std::f64::consts::LN_2).abs())
        .fold(0.0, f64::max);
    o.check(!pairs.is_empty() && worst <= 1e-9, format!("{} pairs, max |loss - ln 2| = {worst:e}", pairs.len()));
    o
}

fn c5_clip() -> Outcome {
    let mut o = Outcome::new();
    let (v, active) = clipped_term(1.5, 1.0, 0.2);
    o.check((v - 1.2).abs() < 1e-15 && !active, format!("ratio 1.5, eps 0.2, A=+1 -> {v}"));
    let (v, active) = clipped_term(0.5, -1.0, 0.2);
    o.check((v + 0.8).abs() < 1e-15 && !active, format!("ratio 0.5, eps 0.2, A=-1 -> {v}"));
    let (v, active) = clipped_term(0.5, 1.0, 0.2);
    o.check(v == 0.5 && active, "ratio 0.5, A=+1 keeps the unclipped branch");

    let inst = &small_data(1, 55)[0];
    let policy = random_policy(5);
    let obs = build_observation(inst, PromptVariant::WithContext);
    let cfg = GrpoConfig::default();
    let base = mixed_group(&policy, inst, PromptVariant::WithContext, 2, 0);
    for (shift, returns, label) in [(-2.0, [1.0, 0.0], "ratio e^2, A>0"), (2.0, [0.0, 1.0], "ratio e^-2, A<0")] {
        let mut g = RolloutGroup::new(base.variant, base.rollouts.clone(), returns.to_vec());
        g.rollouts[0].logprobs = [g.rollouts[0].logprobs[0] + shift, g.rollouts[0].logprobs[1] + shift];
        let mut without = g.clone();
        without.advantages[0] = 0.0;
        let mut g_full = policy.zero_grad();
        let e = surrogate_loss_intra(&policy, &obs, &g, &cfg, 1.0, Some(&mut g_full)).unwrap();
        let mut g_rest = policy.zero_grad();
        surrogate_loss_intra(&policy, &obs, &without, &cfg, 1.0, Some(&mut g_rest)).unwrap();
        o.check(
            e.clipped_tokens == 2 && g_full == g_rest,
            format!("{label}: both tokens clipped, zero gradient contribution"),
        );
    }
    o
}

fn c6_filtering(d: &Desk) -> Outcome {
    let mut o = Outcome::new();
    let scores = score_dataset(&d.sft, &d.candidates, PromptVariant::WithContext).unwrap();
    let cfg = PoolConfig::default();
    let pool = build_rl_pool(&scores, &d.candidates, &cfg, 1).unwrap();
    let above = pool
        .iter()
        .filter(|i| scores.iter().find(|s| s.id == i.id).unwrap().confidence >= cfg.threshold)
        .count();
    o.check(above == 0, format!("{} pool instances, {above} with confidence >= {}", pool.len(), cfg.threshold));
    let rep = uncertainty_report(&scores);
    for b in rep.nonempty().filter(|b| b.hi <= cfg.threshold + 1e-12) {
        o.check(
            b.error_rate > rep.global_error_rate,
            format!(
                "bucket [{:.1},{:.1}) n={} error {:.4} vs global {:.4}",
                b.lo, b.hi, b.count, b.error_rate, rep.global_error_rate
            ),
        );
    }
    o
}

fn mean_over<F: Fn(&SuiteResult) -> f64>(rs: &[SuiteResult], f: F) -> f64 {
    rs.iter().map(f).sum::<f64>() / rs.len() as f64
}

fn c7_directional() -> Outcome {
    let t = Instant::now();
    let mut o = Outcome::new();
    let cfg = SuiteConfig::default();
    let rs: Vec<SuiteResult> = SEEDS.iter().map(|s| run_suite(&cfg, *s).unwrap()).collect();
    let with = PromptVariant::WithContext;
    let without = PromptVariant::NoContext;
    let acc = |table: &'static str, name: &'static str, v: PromptVariant| {
        mean_over(&rs, move |r| r.row(table, name, v).unwrap().overall.accuracy)
    };
    let adopt = |u: Utility| mean_over(&rs, move |r| r.row(MAIN, DYKNOW_SFT, with).unwrap().adopt_rate_given(u).unwrap());

    let (dyk, van, sft) = (acc(MAIN, DYKNOW_SFT, with), acc(MAIN, RAG_GRPO, with), acc(MAIN, RAG_SFT, with));
    o.check(dyk >= van, format!("(a) DyKnow-RAG {dyk:.2} >= vanilla GRPO {van:.2}"));
    o.check(dyk >= sft + 2.0, format!("(a) DyKnow-RAG {dyk:.2} >= RAG-SFT {sft:.2} + 2"));

    let (s_no, s_with) = (acc(NOISE, RAG_SFT, without), acc(NOISE, RAG_SFT, with));
    let (d_no, d_with) = (acc(NOISE, DYKNOW_SFT, without), acc(NOISE, DYKNOW_SFT, with));
    o.check(s_no >= s_with, format!("(b) high noise RAG-SFT no-context {s_no:.2} >= with-context {s_with:.2}"));
    o.check(d_with >= d_no, format!("(b) high noise DyKnow-RAG with-context {d_with:.2} >= no-context {d_no:.2}"));

    let (a_adopt, a_ignore) = (adopt(Utility::Adopt), adopt(Utility::Ignore));
    o.check(
        a_adopt - a_ignore >= 20.0,
        format!("(c) DyKnow-RAG ADOPT rate | utility ADOPT {a_adopt:.2} - | IGNORE {a_ignore:.2} >= 20"),
    );

    let (top1, top3) = (acc(CHUNKS, "top1", with), acc(CHUNKS, "top3", with));
    o.check(top3 <= top1, format!("(d) Top-3 {top3:.2} <= Top-1 {top1:.2}"));

    o.note(format!(
        "context table: RAG-SFT {:.2}/{:.2}, DyKnow-RAG {:.2}/{:.2} (with/without)",
        acc(CONTEXT, RAG_SFT, with),
        acc(CONTEXT, RAG_SFT, without),
        acc(CONTEXT, DYKNOW_SFT, with),
        acc(CONTEXT, DYKNOW_SFT, without)
    ));
    o.within(t, Duration::from_secs(600));
    o
}

fn c8_determinism() -> Outcome {
    let mut o = Outcome::new();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("[run]\noutput_dir = {:?}\nseed = 1\n", dir.path().join("out").display().to_string()))
        .unwrap();
    let mut reports = Vec::new();
    for _ in 0..2 {
        let st = Command::new(env!("CARGO_BIN_EXE_dyknow"))
            .args(["--config", cfg.to_str().unwrap(), "suite", "--seed", "2"])
            .output()
            .unwrap();
        o.check(st.status.success(), "suite --seed 2 exits successfully");
        reports.push(std::fs::read(dir.path().join("out/suite_report.txt")).unwrap_or_default());
    }
    o.check(!reports[0].is_empty() && reports[0] == reports[1], format!("reports byte-identical ({} bytes)", reports[0].len()));
    o
}

fn main() -> ExitCode {
    let t = Instant::now();
    let d = desk(1);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("formula identities", Box::new(c1_formula_identities)),
        ("advantage suite", Box::new(c2_advantage_suite)),
        ("gradient oracles", Box::new(c3_gradients)),
        ("DPO identity", Box::new(|| c4_dpo_identity(&d))),
        ("clip behavior", Box::new(c5_clip)),
        ("filtering contract", Box::new(|| c6_filtering(&d))),
        ("desk-scale directional reproduction", Box::new(c7_directional)),
        ("determinism", Box::new(c8_determinism)),
    ];
    let mut passed = 0;
    let n = criteria.len();
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let o = run();
        println!("criterion {} [{name}]: {}", i + 1, if o.pass { "PASS" } else { "FAIL" });
        for d in &o.details {
            println!("    {d}");
        }
        passed += o.pass as usize;
    }
    println!("acceptance: {passed}/{n} criteria passed in {:.1}s", t.elapsed().as_secs_f64());
    if passed == n {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
