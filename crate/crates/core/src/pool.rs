//! Uncertainty-prioritised RL pool construction.
//!
//! Instances whose SFT confidence is below the threshold are kept, then each
//! query category is downsampled to at most `cap_ratio` times the smallest
//! category (and at most `max_per_category`, when set). Relevance tiers and
//! utilisation states that occur in the filtered set are guaranteed at least
//! one representative in the pool; coverage takes precedence over the caps.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Category, Instance, Utility, N_CATEGORIES};
use crate::error::{Error, Result};
use crate::policy::Label;
use crate::seed::Provenance;
use crate::sft::Score;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub threshold: f64,
    /// Largest allowed ratio between category counts; `0` disables.
    pub cap_ratio: f64,
    /// Absolute per-category cap; `0` disables.
    pub max_per_category: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            cap_ratio: 2.0,
            max_per_category: 0,
        }
    }
}

impl PoolConfig {
    pub fn uncapped(threshold: f64) -> Self {
        Self {
            threshold,
            cap_ratio: 0.0,
            max_per_category: 0,
        }
    }
}

/// Ten-bin histogram of confidences, rendered for error messages.
pub fn confidence_histogram(scores: &[Score]) -> String {
    let mut bins = [0usize; 10];
    for s in scores {
        bins[bucket_of(s.confidence)] += 1;
    }
    bins.iter()
        .enumerate()
        .map(|(i, n)| format!("[{:.1},{:.1}):{n}", i as f64 / 10.0, (i + 1) as f64 / 10.0))
        .collect::<Vec<_>>()
        .join(" ")
}

fn bucket_of(c: f64) -> usize {
    ((c * 10.0).floor() as isize).clamp(0, 9) as usize
}

/// Selects pool instances (returned in ascending id order).
pub fn build_rl_pool(
    scores: &[Score],
    dataset: &[Instance],
    cfg: &PoolConfig,
    seed: u64,
) -> Result<Vec<Instance>> {
    let by_id: HashMap<u64, f64> = scores.iter().map(|s| (s.id, s.confidence)).collect();
    let mut filtered: Vec<&Instance> = Vec::new();
    for inst in dataset {
        let conf = by_id.get(&inst.id).ok_or_else(|| {
            Error::Config(format!("no confidence score for instance {}", inst.id))
        })?;
        if *conf < cfg.threshold {
            filtered.push(inst);
        }
    }
    if filtered.is_empty() {
        return Err(Error::EmptyPool {
            threshold: cfg.threshold,
            histogram: confidence_histogram(scores),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: BTreeMap<Category, Vec<&Instance>> = BTreeMap::new();
    for inst in &filtered {
        strata.entry(inst.category).or_default().push(inst);
    }
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
    }

    let min_count = strata.values().map(Vec::len).min().unwrap_or(0);
    let mut cap = usize::MAX;
    if cfg.cap_ratio > 0.0 {
        cap = ((cfg.cap_ratio * min_count as f64).floor() as usize).max(1);
    }
    if cfg.max_per_category > 0 {
        cap = cap.min(cfg.max_per_category);
    }

    let mut chosen: HashSet<u64> = HashSet::new();
    for members in strata.values() {
        for inst in members.iter().take(cap) {
            chosen.insert(inst.id);
        }
    }

    // coverage: one representative per tier / utility present in the filtered set
    let tiers: HashSet<Label> = filtered.iter().map(|i| i.gold).collect();
    let utils: HashSet<Utility> = filtered.iter().map(|i| i.utility).collect();
    let mut tiers_sorted: Vec<Label> = tiers.into_iter().collect();
    tiers_sorted.sort();
    let mut utils_sorted: Vec<Utility> = utils.into_iter().collect();
    utils_sorted.sort();
    let ordered: Vec<&Instance> = strata.values().flat_map(|m| m.iter().copied()).collect();
    for tier in tiers_sorted {
        let present = ordered.iter().any(|i| chosen.contains(&i.id) && i.gold == tier);
        if !present {
            if let Some(i) = ordered.iter().find(|i| i.gold == tier) {
                chosen.insert(i.id);
            }
        }
    }
    for util in utils_sorted {
        let present = ordered.iter().any(|i| chosen.contains(&i.id) && i.utility == util);
        if !present {
            if let Some(i) = ordered.iter().find(|i| i.utility == util) {
                chosen.insert(i.id);
            }
        }
    }

    Ok(dataset
        .iter()
        .filter(|i| chosen.contains(&i.id))
        .cloned()
        .collect())
}

/// Per-category counts of a pool.
pub fn category_counts(pool: &[Instance]) -> [usize; N_CATEGORIES] {
    let mut c = [0; N_CATEGORIES];
    for i in pool {
        c[i.category.index()] += 1;
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub error_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// Ten fixed-width buckets over [0, 1]; empty buckets have `count == 0`.
    pub buckets: Vec<Bucket>,
    pub global_error_rate: f64,
    /// Whether error rate is non-increasing in confidence over nonempty
    /// buckets. Reported only.
    pub monotone: bool,
}

impl UncertaintyReport {
    pub fn nonempty(&self) -> impl Iterator<Item = &Bucket> {
        self.buckets.iter().filter(|b| b.count > 0)
    }

    /// Pooled error rate of all instances with confidence below `threshold`.
    pub fn error_rate_below(&self, threshold: f64) -> Option<f64> {
        let (n, e) = self
            .nonempty()
            .filter(|b| b.hi <= threshold + 1e-12)
            .fold((0usize, 0.0), |(n, e), b| (n + b.count, e + b.error_rate * b.count as f64));
        (n > 0).then(|| e / n as f64)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("confidence      n     mean_conf  error_rate\n");
        for b in self.nonempty() {
            writeln!(
                s,
                "[{:.1},{:.1})  {:>6}  {:>9.4}  {:>10.4}",
                b.lo, b.hi, b.count, b.mean_confidence, b.error_rate
            )
            .expect("write to String");
        }
        writeln!(s, "global error rate {:.4}; monotone: {}", self.global_error_rate, self.monotone)
            .expect("write to String");
        s
    }
}

pub fn uncertainty_report(scores: &[Score]) -> UncertaintyReport {
    let mut count = [0usize; 10];
    let mut conf_sum = [0.0f64; 10];
    let mut errors = [0usize; 10];
    for s in scores {
        let b = bucket_of(s.confidence);
        count[b] += 1;
        conf_sum[b] += s.confidence;
        errors[b] += (!s.correct()) as usize;
    }
    let buckets: Vec<Bucket> = (0..10)
        .map(|b| Bucket {
            lo: b as f64 / 10.0,
            hi: (b + 1) as f64 / 10.0,
            count: count[b],
            mean_confidence: if count[b] > 0 { conf_sum[b] / count[b] as f64 } else { 0.0 },
            error_rate: if count[b] > 0 { errors[b] as f64 / count[b] as f64 } else { 0.0 },
        })
        .collect();
    let total_err: usize = errors.iter().sum();
    let global_error_rate = if scores.is_empty() {
        0.0
    } else {
        total_err as f64 / scores.len() as f64
    };
    let rates: Vec<f64> = buckets.iter().filter(|b| b.count > 0).map(|b| b.error_rate).collect();
    let monotone = rates.windows(2).all(|w| w[1] <= w[0]);
    UncertaintyReport {
        buckets,
        global_error_rate,
        monotone,
    }
}

/// Pool file: provenance comment, threshold, then one instance id per line.
pub fn write_pool(path: &Path, pool: &[Instance], cfg: &PoolConfig, prov: &Provenance) -> Result<()> {
    let mut s = prov.comment_line();
    writeln!(s).expect("write to String");
    writeln!(s, "# threshold={} cap_ratio={} max_per_category={}", cfg.threshold, cfg.cap_ratio, cfg.max_per_category)
        .expect("write to String");
    for inst in pool {
        writeln!(s, "{}", inst.id).expect("write to String");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_pool_ids(path: &Path) -> Result<Vec<u64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.is_empty())
        .map(|(i, l)| {
            l.trim().parse::<u64>().map_err(|e| Error::Parse {
                what: "pool id",
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, TaskConfig};

    fn data(n: usize) -> Vec<Instance> {
        generate_dataset(&TaskConfig {
            n_instances: n,
            seed: 21,
            ..TaskConfig::default()
        })
        .unwrap()
    }

    fn scores_with(data: &[Instance], f: impl Fn(&Instance) -> f64) -> Vec<Score> {
        data.iter()
            .map(|i| Score {
                id: i.id,
                predicted: i.gold,
                confidence: f(i),
                gold: i.gold,
            })
            .collect()
    }

    #[test]
    fn all_confident_is_empty_pool_error() {
        let d = data(50);
        let s = scores_with(&d, |_| 0.9);
        match build_rl_pool(&s, &d, &PoolConfig::default(), 0) {
            Err(Error::EmptyPool { histogram, .. }) => assert!(histogram.contains("[0.9,1.0):50")),
            other => panic!("expected EmptyPool, got {other:?}"),
        }
    }

    #[test]
    fn threshold_one_without_caps_keeps_everything() {
        let d = data(80);
        let s = scores_with(&d, |i| 0.3 + 0.6 * ((i.id % 7) as f64 / 7.0));
        let pool = build_rl_pool(&s, &d, &PoolConfig::uncapped(1.0), 0).unwrap();
        assert_eq!(pool, d);
    }

    #[test]
    fn caps_balance_categories() {
        let d = data(400);
        // make one category much more uncertain than the others
        let s = scores_with(&d, |i| {
            if i.category == Category::Qa || i.id % 5 == 0 {
                0.4
            } else {
                0.95
            }
        });
        let pool = build_rl_pool(&s, &d, &PoolConfig::default(), 3).unwrap();
        let c = category_counts(&pool);
        let (mx, mn) = (*c.iter().max().unwrap(), *c.iter().min().unwrap());
        assert!(mn > 0);
        assert!(mx <= 2 * mn, "{c:?}");
        assert!(pool.iter().all(|i| s[i.id as usize].confidence < 0.7));
    }

    #[test]
    fn missing_score_is_an_error() {
        let d = data(5);
        let s = scores_with(&d[..4], |_| 0.5);
        assert!(build_rl_pool(&s, &d, &PoolConfig::default(), 0).is_err());
    }

    #[test]
    fn single_bucket_report() {
        let d = data(30);
        let s = scores_with(&d, |_| 0.55);
        let r = uncertainty_report(&s);
        assert_eq!(r.nonempty().count(), 1);
        assert_eq!(r.global_error_rate, 0.0);
    }
}
