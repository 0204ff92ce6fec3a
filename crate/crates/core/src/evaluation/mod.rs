//! Full-catalog leave-one-out evaluation: accuracy (NDCG, Recall, MRR) and
//! diversity (category coverage, intra-list distance) metrics.

mod metrics;

pub use metrics::{category_coverage, intra_list_distance, mrr, ndcg_at, rank_all, recall_at, RankedList};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::{EvalExample, ItemId, TrainExample};
use crate::model::Model;
use crate::tensor::RngStream;
use crate::{Error, Result, Scalar};

/// Produces one score per catalog item (`1..=num_items`) for each example.
pub trait Scorer {
    fn num_items(&self) -> usize;
    fn score(&mut self, batch: &[&EvalExample]) -> Result<Vec<Vec<f64>>>;
}

/// Eval-mode model scores, averaged over `average` stochastic passes drawn
/// from one seeded stream.
pub struct ModelScorer<'a, T> {
    pub model: &'a Model<T>,
    pub rng: RngStream,
    pub average: usize,
    /// VAE collapse (`σ = 0`) at inference.
    pub collapse: bool,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, seed: u64) -> Self {
        ModelScorer {
            model,
            rng: RngStream::new(seed),
            average: 1,
            collapse: false,
        }
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    fn num_items(&self) -> usize {
        self.model.config.num_items
    }

    fn score(&mut self, batch: &[&EvalExample]) -> Result<Vec<Vec<f64>>> {
        let n = self.model.config.n;
        let mut items = Vec::with_capacity(batch.len() * n);
        let mut mask = Vec::with_capacity(batch.len() * n);
        for ex in batch {
            if ex.seq.len() != n {
                return Err(Error::Config(format!(
                    "sequence length {} does not match model length {n}",
                    ex.seq.len()
                )));
            }
            items.extend_from_slice(&ex.seq.items);
            mask.extend_from_slice(&ex.seq.mask);
        }
        let v = self.num_items();
        let mut acc = vec![0.0; batch.len() * v];
        let k = self.average.max(1);
        for _ in 0..k {
            let s = self.model.scores(&items, &mask, &mut self.rng, self.collapse)?;
            for (a, x) in acc.iter_mut().zip(s.data()) {
                *a += x.as_f64();
            }
        }
        if k > 1 {
            acc.iter_mut().for_each(|a| *a /= k as f64);
        }
        Ok(acc.chunks(v).map(<[f64]>::to_vec).collect())
    }
}

/// Scores every item by its training-interaction count.
pub struct PopularityScorer {
    counts: Vec<f64>,
}

impl PopularityScorer {
    pub fn from_train(train: &[TrainExample], num_items: usize) -> Self {
        let mut counts = vec![0.0; num_items];
        for ex in train {
            for &t in ex.targets.iter().filter(|&&t| t != 0) {
                counts[t - 1] += 1.0;
            }
        }
        PopularityScorer { counts }
    }
}

impl Scorer for PopularityScorer {
    fn num_items(&self) -> usize {
        self.counts.len()
    }

    fn score(&mut self, batch: &[&EvalExample]) -> Result<Vec<Vec<f64>>> {
        Ok(batch.iter().map(|_| self.counts.clone()).collect())
    }
}

/// Independent uniform scores.
pub struct RandomScorer {
    pub num_items: usize,
    pub rng: RngStream,
}

impl Scorer for RandomScorer {
    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score(&mut self, batch: &[&EvalExample]) -> Result<Vec<Vec<f64>>> {
        Ok(batch
            .iter()
            .map(|_| (0..self.num_items).map(|_| self.rng.uniform()).collect())
            .collect())
    }
}

/// Puts the held-out target strictly first.
pub struct OracleScorer {
    pub num_items: usize,
}

impl Scorer for OracleScorer {
    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score(&mut self, batch: &[&EvalExample]) -> Result<Vec<Vec<f64>>> {
        Ok(batch
            .iter()
            .map(|ex| {
                let mut s = vec![0.0; self.num_items];
                s[ex.seq.target - 1] = 1.0;
                s
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Drop the user's history (minus the target) from the candidates.
    pub exclude_history: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![5, 10, 20],
            exclude_history: true,
            batch_size: 256,
        }
    }
}

/// Ranks the catalog for every example, keeping the top `max(ks)` items.
pub fn rank_examples<S: Scorer + ?Sized>(
    scorer: &mut S,
    examples: &[EvalExample],
    cfg: &EvalConfig,
) -> Result<Vec<RankedList>> {
    let top = cfg.ks.iter().copied().max().unwrap_or(0);
    let mut out = Vec::with_capacity(examples.len());
    let refs: Vec<&EvalExample> = examples.iter().collect();
    for chunk in refs.chunks(cfg.batch_size.max(1)) {
        let scores = scorer.score(chunk)?;
        for (ex, s) in chunk.iter().zip(scores) {
            let exclusions: BTreeSet<ItemId> = if cfg.exclude_history {
                ex.seen.iter().copied().filter(|&i| i != ex.seq.target).collect()
            } else {
                BTreeSet::new()
            };
            out.push(rank_all(ex.user, &s, &exclusions, ex.seq.target, top)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricTable {
    pub users: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, metric: &str, n: Option<usize>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.n == n)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,N,value\n");
        for r in &self.rows {
            let n = r.n.map(|n| n.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", r.metric, n, r.value);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric table serializes")
    }

    /// Writes `metrics.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("metrics.json");
        fs::write(&json, self.to_json() + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// Per-metric means over users. ILD averages only over users where it is defined.
pub fn summarize(
    lists: &[RankedList],
    categories: &[BTreeSet<usize>],
    num_categories: usize,
    ks: &[usize],
) -> MetricTable {
    let users = lists.len().max(1) as f64;
    let mean = |f: &dyn Fn(&RankedList) -> f64| lists.iter().map(f).sum::<f64>() / users;
    let mut rows = Vec::new();
    let mut push = |metric: &str, n: Option<usize>, value: f64| {
        rows.push(MetricRow {
            metric: metric.to_string(),
            n,
            value,
        })
    };
    for &k in ks {
        push("ndcg", Some(k), mean(&|l| ndcg_at(l.target_rank, k)));
    }
    for &k in ks {
        push("recall", Some(k), mean(&|l| recall_at(l.target_rank, k)));
    }
    push("mrr", None, mean(&|l| mrr(l.target_rank)));
    for &k in ks {
        push(
            "cc",
            Some(k),
            mean(&|l| category_coverage(&l.items, categories, num_categories, k)),
        );
    }
    for &k in ks {
        let defined: Vec<f64> = lists
            .iter()
            .filter_map(|l| intra_list_distance(&l.items, categories, k))
            .collect();
        let v = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        push("ild", Some(k), v);
    }
    MetricTable {
        users: lists.len(),
        rows,
    }
}

pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &mut S,
    examples: &[EvalExample],
    categories: &[BTreeSet<usize>],
    num_categories: usize,
    cfg: &EvalConfig,
) -> Result<MetricTable> {
    let lists = rank_examples(scorer, examples, cfg)?;
    Ok(summarize(&lists, categories, num_categories, &cfg.ks))
}
