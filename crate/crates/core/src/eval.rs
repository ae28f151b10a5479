//! Offline metrics: confusion matrix, per-class and macro F1, accuracy,
//! category slices and usage-decision statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::{build_observation, Category, Instance, Utility};
use crate::error::{Error, Result};
use crate::policy::{greedy_sequence, Label, PolicyParams, PromptVariant, TokenSeq, Usage, LABEL_VOCAB};

/// Rows are actual tiers, columns predicted tiers (L1..L4).
pub type Confusion = [[usize; LABEL_VOCAB]; LABEL_VOCAB];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub n: usize,
    pub confusion: Confusion,
    /// Percent; 0 when precision + recall is 0.
    pub per_class_f1: [f64; LABEL_VOCAB],
    pub macro_f1: f64,
    /// Percent.
    pub accuracy: f64,
}

impl LabelMetrics {
    pub fn from_confusion(confusion: Confusion) -> Self {
        let n: usize = confusion.iter().flatten().sum();
        let mut per_class_f1 = [0.0; LABEL_VOCAB];
        for (k, f1) in per_class_f1.iter_mut().enumerate() {
            let tp = confusion[k][k] as f64;
            let actual: usize = confusion[k].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[k]).sum();
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
            if precision + recall > 0.0 {
                *f1 = 100.0 * 2.0 * precision * recall / (precision + recall);
            }
        }
        let correct: usize = (0..LABEL_VOCAB).map(|k| confusion[k][k]).sum();
        Self {
            n,
            confusion,
            per_class_f1,
            macro_f1: per_class_f1.iter().sum::<f64>() / LABEL_VOCAB as f64,
            accuracy: if n > 0 { 100.0 * correct as f64 / n as f64 } else { 0.0 },
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = [[0; LABEL_VOCAB]; LABEL_VOCAB];
        for (gold, pred) in pairs {
            c[gold.index()][pred.index()] += 1;
        }
        Self::from_confusion(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySlice {
    pub category: Category,
    pub metrics: LabelMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: PromptVariant,
    pub overall: LabelMetrics,
    pub per_category: Vec<CategorySlice>,
    /// Percent of outputs whose usage token is ADOPT.
    pub adopt_rate: f64,
    /// ADOPT rate conditioned on the latent utility (ADOPT, PARTIAL,
    /// IGNORE); `None` when no instance has that utility.
    pub adopt_rate_by_utility: [Option<f64>; 3],
}

impl MetricsReport {
    pub fn adopt_rate_given(&self, u: Utility) -> Option<f64> {
        self.adopt_rate_by_utility[u.index()]
    }
}

/// Metrics of given outputs against `data` (aligned by position).
pub fn report_from_outputs(
    data: &[Instance],
    outputs: &[TokenSeq],
    variant: PromptVariant,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.len() != outputs.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: outputs.len(),
        });
    }
    let overall = LabelMetrics::from_pairs(data.iter().zip(outputs).map(|(i, o)| (i.gold, o.label)));
    let per_category = Category::ALL
        .into_iter()
        .filter(|c| data.iter().any(|i| i.category == *c))
        .map(|c| CategorySlice {
            category: c,
            metrics: LabelMetrics::from_pairs(
                data.iter()
                    .zip(outputs)
                    .filter(|(i, _)| i.category == c)
                    .map(|(i, o)| (i.gold, o.label)),
            ),
        })
        .collect();
    let rate = |sel: &dyn Fn(&Instance) -> bool| -> Option<f64> {
        let (n, a) = data
            .iter()
            .zip(outputs)
            .filter(|(i, _)| sel(i))
            .fold((0usize, 0usize), |(n, a), (_, o)| (n + 1, a + (o.usage == Usage::Adopt) as usize));
        (n > 0).then(|| 100.0 * a as f64 / n as f64)
    };
    let adopt_rate = rate(&|_| true).unwrap_or(0.0);
    let adopt_rate_by_utility = Utility::ALL.map(|u| rate(&|i: &Instance| i.utility == u));
    Ok(MetricsReport {
        variant,
        overall,
        per_category,
        adopt_rate,
        adopt_rate_by_utility,
    })
}

/// Greedy decoding of every instance under `variant`. Read-only on `policy`.
pub fn evaluate(policy: &PolicyParams, data: &[Instance], variant: PromptVariant) -> Result<MetricsReport> {
    let outputs = data
        .iter()
        .map(|i| greedy_sequence(policy, &build_observation(i, variant)))
        .collect::<Result<Vec<_>>>()?;
    report_from_outputs(data, &outputs, variant)
}

/// Aligned plain-text rendering of one report.
pub fn render_report(name: &str, r: &MetricsReport) -> String {
    let mut s = String::new();
    let m = &r.overall;
    writeln!(s, "{name} [{}] n={}", r.variant.name(), m.n).expect("write to String");
    writeln!(
        s,
        "  F1 L1 {:>6.2}  L2 {:>6.2}  L3 {:>6.2}  L4 {:>6.2}  macro {:>6.2}  acc {:>6.2}",
        m.per_class_f1[0], m.per_class_f1[1], m.per_class_f1[2], m.per_class_f1[3], m.macro_f1, m.accuracy
    )
    .expect("write to String");
    writeln!(s, "  confusion (rows actual L1..L4, cols predicted):").expect("write to String");
    for row in &m.confusion {
        writeln!(s, "    {:>6} {:>6} {:>6} {:>6}", row[0], row[1], row[2], row[3]).expect("write to String");
    }
    for c in &r.per_category {
        writeln!(
            s,
            "  {:<12} n={:<5} macro {:>6.2}  acc {:>6.2}",
            c.category.name(),
            c.metrics.n,
            c.metrics.macro_f1,
            c.metrics.accuracy
        )
        .expect("write to String");
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    writeln!(
        s,
        "  adopt rate {:.2}  | utility adopt {}  partial {}  ignore {}",
        r.adopt_rate,
        fmt(r.adopt_rate_by_utility[0]),
        fmt(r.adopt_rate_by_utility[1]),
        fmt(r.adopt_rate_by_utility[2])
    )
    .expect("write to String");
    s
}
