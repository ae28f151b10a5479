use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use dyknow::checkpoint;
use dyknow::config::{Checkpoint, Config};
use dyknow::data_io::{read_dataset, write_dataset};
use dyknow::dpo::{build_preference_pairs, dpo_train, write_pairs};
use dyknow::env::{generate_dataset, Instance, TaskConfig};
use dyknow::eval::{evaluate, render_report};
use dyknow::grpo;
use dyknow::policy::PolicyParams;
use dyknow::pool::{build_rl_pool, read_pool_ids, uncertainty_report, write_pool};
use dyknow::seed::{sub_seed, Provenance};
use dyknow::sft::{score_dataset, sft_train, write_scores};
use dyknow::suite::{render_suite, run_suite, suite_records};

#[derive(Parser)]
#[command(name = "dyknow", version, about = "Dual-group GRPO laboratory on a synthetic noisy-context relevance task")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true, default_value = "dyknow.toml")]
    config: PathBuf,
    /// Overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, candidate and test datasets.
    GenData,
    /// Supervised training on the train set.
    Sft,
    /// Score the candidate set and build the RL pool.
    Filter,
    /// Preference pairs from the SFT model and DPO training.
    Dpo,
    /// GRPO on the RL pool (algorithm from `[grpo] algorithm`).
    Grpo,
    /// Evaluate a checkpoint on the test set.
    Eval,
    /// Full comparison grid.
    Suite,
    /// Summarise the suite records in the output directory.
    Report,
}

struct Ctx {
    cfg: Config,
    prov: Provenance,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn rng(&self, stage: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(sub_seed(self.cfg.run.seed, stage))
    }

    fn dataset(&self, name: &str) -> Result<Vec<Instance>> {
        let (_, data) = read_dataset(&self.path(name)).with_context(|| format!("run gen-data first ({name})"))?;
        Ok(data)
    }

    fn load(&self, which: Checkpoint) -> Result<PolicyParams> {
        let (p, _) = checkpoint::load(&self.path(which.file_name()))?;
        Ok(p)
    }

    fn save(&self, which: Checkpoint, p: &PolicyParams) -> Result<()> {
        let path = self.path(which.file_name());
        checkpoint::save(&path, p, None)?;
        let meta = format!("{}\narch = {:?}\nparams = {}\n", self.prov.comment_line(), p.arch(), p.len());
        fs::write(path.with_extension("ckpt.meta"), meta)?;
        Ok(())
    }

    fn pool(&self) -> Result<Vec<Instance>> {
        let ids = read_pool_ids(&self.path("pool.txt")).context("run filter first")?;
        let cands = self.dataset("candidates.tsv")?;
        let set: std::collections::HashSet<u64> = ids.into_iter().collect();
        Ok(cands.into_iter().filter(|i| set.contains(&i.id)).collect())
    }

    fn write_text(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, format!("{}\n{body}", self.prov.comment_line()))
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn data_split(task: &TaskConfig, n: usize, seed: u64, stage: &str) -> dyknow::Result<Vec<Instance>> {
    generate_dataset(&TaskConfig {
        n_instances: n,
        seed: sub_seed(seed, stage),
        ..task.clone()
    })
}

fn run(cli: Cli) -> Result<String> {
    if !cli.config.exists() {
        bail!("config file not found: {}", cli.config.display());
    }
    let mut cfg = Config::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
        cfg.run.suite_seeds = None;
    }
    let out = cfg.run.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    let ctx = Ctx {
        prov: cfg.provenance(),
        cfg,
        out,
    };
    let cfg = &ctx.cfg;
    let seed = cfg.run.seed;

    match cli.command {
        Command::GenData => {
            let mut counts = Vec::new();
            for (name, n, stage) in [
                ("train.tsv", cfg.task.n_instances, "data/train"),
                ("candidates.tsv", cfg.suite.n_candidates, "data/candidates"),
                ("test.tsv", cfg.suite.n_test, "data/test"),
            ] {
                let data = data_split(&cfg.task, n, seed, stage)?;
                write_dataset(&ctx.path(name), &data, &cfg.task, &ctx.prov)?;
                counts.push(format!("{name} {}", data.len()));
            }
            Ok(format!("gen-data: {}", counts.join(", ")))
        }
        Command::Sft => {
            let train = ctx.dataset("train.tsv")?;
            let mut p = PolicyParams::init(cfg.task.arch(), &mut ctx.rng("init"));
            let rep = sft_train(&mut p, &train, &cfg.sft, &mut ctx.rng("sft"))?;
            ctx.save(Checkpoint::Sft, &p)?;
            let losses: Vec<String> = rep.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
            Ok(format!("sft: {} steps, epoch losses [{}]", rep.steps, losses.join(", ")))
        }
        Command::Filter => {
            let p = ctx.load(Checkpoint::Sft)?;
            let cands = ctx.dataset("candidates.tsv")?;
            let scores = score_dataset(&p, &cands, dyknow::policy::PromptVariant::WithContext)?;
            write_scores(&ctx.path("scores.tsv"), &scores, &ctx.prov)?;
            let pool = build_rl_pool(&scores, &cands, &cfg.pool, sub_seed(seed, "pool"))?;
            write_pool(&ctx.path("pool.txt"), &pool, &cfg.pool, &ctx.prov)?;
            let rep = uncertainty_report(&scores);
            ctx.write_text("uncertainty.txt", &rep.render())?;
            Ok(format!(
                "filter: pool {} of {} candidates (threshold {}), global error rate {:.4}",
                pool.len(),
                cands.len(),
                cfg.pool.threshold,
                rep.global_error_rate
            ))
        }
        Command::Dpo => {
            let reference = ctx.load(Checkpoint::Sft)?;
            let pool = ctx.pool()?;
            let pairs = build_preference_pairs(&reference, &pool, &cfg.dpo, &mut ctx.rng("dpo/pairs"))?;
            write_pairs(&ctx.path("pairs.tsv"), &pairs, &pool, &ctx.prov)?;
            let mut p = reference.clone();
            let rep = dpo_train(&mut p, &reference, &pairs, &cfg.dpo, &mut ctx.rng("dpo/train"))?;
            ctx.save(Checkpoint::Dpo, &p)?;
            Ok(format!(
                "dpo: {} pairs, mean margin {:.4} -> {:.4}",
                rep.pairs, rep.mean_margin_start, rep.mean_margin_end
            ))
        }
        Command::Grpo => {
            let mut p = ctx.load(cfg.stages.grpo_init)?;
            let pool = ctx.pool()?;
            let path = ctx.path("grpo_metrics.jsonl");
            let mut sink = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            let mut io_err = None;
            let hash = ctx.prov.config_hash.clone();
            let records = grpo::train(&mut p, &pool, &cfg.grpo, &mut ctx.rng("grpo"), |m| {
                let line = json!({"record": "grpo_step", "config_hash": hash, "seed": seed, "metrics": m});
                if let Err(e) = writeln!(sink, "{line}") {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e).with_context(|| format!("writing {}", path.display()));
            }
            ctx.save(Checkpoint::Grpo, &p)?;
            let skipped = records.iter().filter(|m| m.skipped).count();
            Ok(format!("grpo: {} waves ({skipped} skipped), metrics in {}", records.len(), path.display()))
        }
        Command::Eval => {
            let which = cfg.stages.eval_checkpoint;
            let variant = cfg.stages.eval_variant;
            let p = ctx.load(which)?;
            let test = ctx.dataset("test.tsv")?;
            let rep = evaluate(&p, &test, variant)?;
            let stem = format!("eval_{}_{}", which.file_name().trim_end_matches(".ckpt"), variant.name());
            ctx.write_text(&format!("{stem}.txt"), &render_report(which.file_name(), &rep))?;
            let line = json!({"record": "eval", "config_hash": ctx.prov.config_hash, "seed": seed, "report": rep});
            fs::write(ctx.path(&format!("{stem}.jsonl")), format!("{line}\n"))?;
            Ok(format!(
                "eval: {} [{}] accuracy {:.2}, macro-F1 {:.2}",
                which.file_name(),
                variant.name(),
                rep.overall.accuracy,
                rep.overall.macro_f1
            ))
        }
        Command::Suite => {
            let sc = cfg.suite_config();
            let results = cfg
                .suite_seeds()
                .into_iter()
                .map(|s| run_suite(&sc, s))
                .collect::<dyknow::Result<Vec<_>>>()?;
            let report = ctx.write_text("suite_report.txt", &render_suite(&results))?;
            let mut rec = String::new();
            for r in suite_records(&results) {
                let mut v: serde_json::Value = serde_json::from_str(&r)?;
                v["config_hash"] = json!(ctx.prov.config_hash);
                rec.push_str(&format!("{v}\n"));
            }
            fs::write(ctx.path("suite_records.jsonl"), rec)?;
            let mut steps = String::new();
            for r in &results {
                for (run, m) in &r.steps {
                    let line = json!({"record": "grpo_step", "config_hash": ctx.prov.config_hash, "seed": r.seed, "run": run, "metrics": m});
                    steps.push_str(&format!("{line}\n"));
                }
            }
            fs::write(ctx.path("suite_steps.jsonl"), steps)?;
            Ok(format!("suite: {} seed(s), report in {}", results.len(), report.display()))
        }
        Command::Report => {
            let path = ctx.path("suite_records.jsonl");
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let body = summarise_records(&text, &path)?;
            print!("{body}");
            ctx.write_text("summary.txt", &body)?;
            Ok(format!("report: summary of {}", path.display()))
        }
    }
}

/// Mean accuracy and macro-F1 per (table, model, context) over seeds.
fn summarise_records(text: &str, path: &Path) -> Result<String> {
    let mut rows: Vec<(String, String, String, Vec<f64>, Vec<f64>)> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let field = |k: &str| v[k].as_str().map(str::to_string).with_context(|| format!("{}:{}: missing {k}", path.display(), i + 1));
        let key = (field("table")?, field("model")?, field("context")?);
        let acc = v["accuracy"].as_f64().unwrap_or(f64::NAN);
        let f1 = v["macro_f1"].as_f64().unwrap_or(f64::NAN);
        match rows.iter_mut().find(|r| (&r.0, &r.1, &r.2) == (&key.0, &key.1, &key.2)) {
            Some(r) => {
                r.3.push(acc);
                r.4.push(f1);
            }
            None => rows.push((key.0, key.1, key.2, vec![acc], vec![f1])),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut s = format!("{:<12} {:<26} {:<12} {:>5} {:>7} {:>7}\n", "table", "model", "context", "seeds", "acc", "macro");
    for (t, m, c, acc, f1) in &rows {
        s.push_str(&format!("{t:<12} {m:<26} {c:<12} {:>5} {:>7.2} {:>7.2}\n", acc.len(), mean(acc), mean(f1)));
    }
    Ok(s)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
