use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::data::ItemId;
use crate::{Error, Result};

/// Top of a full-catalog ranking plus the target's position in it.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: usize,
    /// Best-first item ids (ties broken by ascending id).
    pub items: Vec<ItemId>,
    /// 1-based rank of the target among all non-excluded items.
    pub target_rank: usize,
}

/// Ranks items `1..=scores.len()` (`scores[i]` belongs to item `i + 1`).
///
/// Excluded items are ranked below every candidate, which is the same as
/// dropping them; the returned list holds the best `top_n` candidates.
pub fn rank_all(
    user: usize,
    scores: &[f64],
    exclusions: &BTreeSet<ItemId>,
    target: ItemId,
    top_n: usize,
) -> Result<RankedList> {
    if target == 0 || target > scores.len() {
        return Err(Error::Protocol(format!("target {target} outside the catalog")));
    }
    if exclusions.contains(&target) {
        return Err(Error::Protocol(format!("target {target} is excluded for user {user}")));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("NaN score for item {}", i + 1)));
    }
    let st = scores[target - 1];
    let mut target_rank = 1;
    let mut cands: Vec<ItemId> = Vec::with_capacity(scores.len());
    for item in 1..=scores.len() {
        if exclusions.contains(&item) {
            continue;
        }
        let s = scores[item - 1];
        if item != target && (s > st || (s == st && item < target)) {
            target_rank += 1;
        }
        cands.push(item);
    }
    let order = |a: &ItemId, b: &ItemId| {
        scores[b - 1]
            .partial_cmp(&scores[a - 1])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let k = top_n.min(cands.len());
    if k > 0 && k < cands.len() {
        cands.select_nth_unstable_by(k - 1, order);
        cands.truncate(k);
    }
    cands.sort_unstable_by(order);
    cands.truncate(k);
    Ok(RankedList {
        user,
        items: cands,
        target_rank,
    })
}

/// `1 / log2(rank + 1)` inside the cutoff, else 0.
pub fn ndcg_at(rank: usize, n: usize) -> f64 {
    if rank >= 1 && rank <= n {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn recall_at(rank: usize, n: usize) -> f64 {
    if rank >= 1 && rank <= n {
        1.0
    } else {
        0.0
    }
}

pub fn mrr(rank: usize) -> f64 {
    1.0 / rank as f64
}

/// Fraction of all categories present among the top-`n` items.
pub fn category_coverage(items: &[ItemId], categories: &[BTreeSet<usize>], num_categories: usize, n: usize) -> f64 {
    if num_categories == 0 {
        return 0.0;
    }
    let covered: BTreeSet<usize> = items
        .iter()
        .take(n)
        .filter_map(|&i| categories.get(i))
        .flatten()
        .copied()
        .collect();
    covered.len() as f64 / num_categories as f64
}

/// Mean `1 - cosine` over unordered pairs of binary category vectors of the
/// top-`n` items. Items without categories are skipped; `None` when fewer
/// than two remain.
pub fn intra_list_distance(items: &[ItemId], categories: &[BTreeSet<usize>], n: usize) -> Option<f64> {
    let sets: Vec<&BTreeSet<usize>> = items
        .iter()
        .take(n)
        .filter_map(|&i| categories.get(i))
        .filter(|c| !c.is_empty())
        .collect();
    if sets.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let inter = sets[i].intersection(sets[j]).count() as f64;
            let cos = inter / ((sets[i].len() * sets[j].len()) as f64).sqrt();
            total += 1.0 - cos;
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}
