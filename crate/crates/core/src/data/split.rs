use std::collections::BTreeMap;

use serde::Serialize;

use super::{InteractionLog, ItemId};

/// Length-`n` left-padded item window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedSequence {
    /// `n` item ids, `0` = padding; padding precedes real items.
    pub items: Vec<ItemId>,
    /// `true` at real items.
    pub mask: Vec<bool>,
    /// Next item to predict from the final position (`0` if none).
    pub target: ItemId,
}

impl FixedSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Keeps the last `n` items and left-pads with zeros.
pub fn pad_truncate(seq: &[ItemId], n: usize) -> FixedSequence {
    let keep = &seq[seq.len().saturating_sub(n)..];
    let pad = n - keep.len();
    let mut items = vec![0; pad];
    items.extend_from_slice(keep);
    let mut mask = vec![false; pad];
    mask.extend(keep.iter().map(|_| true));
    FixedSequence { items, mask, target: 0 }
}

/// One user's training sequence with a next-item target at every real position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub user: usize,
    pub seq: FixedSequence,
    /// `targets[i]` is the item that follows the prefix ending at position `i` (`0` = none).
    pub targets: Vec<ItemId>,
}

/// Held-out example: predict `seq.target` from the final position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalExample {
    pub user: usize,
    pub seq: FixedSequence,
    /// Every item in the untruncated input history.
    pub seen: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitSet {
    pub train: Vec<TrainExample>,
    pub valid: Vec<EvalExample>,
    pub test: Vec<EvalExample>,
    /// Users with fewer than three interactions.
    pub skipped: usize,
}

fn eval_example(user: usize, history: &[ItemId], target: ItemId, n: usize) -> EvalExample {
    let mut seq = pad_truncate(history, n);
    seq.target = target;
    EvalExample {
        user,
        seq,
        seen: history.to_vec(),
    }
}

/// Leave-one-out split: last item is the test target, second-to-last the
/// validation target, and every earlier transition supervises training.
pub fn leave_one_out_split(log: &InteractionLog, n: usize) -> SplitSet {
    let mut split = SplitSet::default();
    for (u, user) in log.users.iter().enumerate() {
        let items = &user.items;
        let m = items.len();
        if m < 3 {
            split.skipped += 1;
            continue;
        }
        let train_region = &items[..m - 2];
        let mut seq = pad_truncate(&train_region[..train_region.len() - 1], n);
        // Aligning the targets with the whole region also yields the
        // empty-prefix pair, so every training-region item is supervised once.
        let shifted = pad_truncate(train_region, n);
        seq.target = items[m - 3];
        split.train.push(TrainExample {
            user: u,
            seq,
            targets: shifted.items,
        });
        split.valid.push(eval_example(u, &items[..m - 2], items[m - 2], n));
        split.test.push(eval_example(u, &items[..m - 1], items[m - 1], n));
    }
    if split.skipped > 0 {
        log::warn!(
            "leave-one-out: skipped {} users with fewer than 3 interactions",
            split.skipped
        );
    }
    split
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub test_target: String,
    pub valid_target: String,
}

/// Audit view of the split: raw user id → raw held-out item ids.
pub fn split_manifest(log: &InteractionLog, split: &SplitSet) -> BTreeMap<String, ManifestEntry> {
    split
        .test
        .iter()
        .zip(&split.valid)
        .map(|(t, v)| {
            (
                log.users[t.user].name.clone(),
                ManifestEntry {
                    test_target: log.item_names[t.seq.target - 1].clone(),
                    valid_target: log.item_names[v.seq.target - 1].clone(),
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UserHistory;
    use proptest::prelude::*;

    #[test]
    fn truncates_from_the_start() {
        let s = pad_truncate(&[1, 2, 3, 4, 5, 6, 7], 5);
        assert_eq!(s.items, vec![3, 4, 5, 6, 7]);
        assert!(s.mask.iter().all(|&m| m));
    }

    #[test]
    fn left_pads_short_sequences() {
        let s = pad_truncate(&[1, 2, 3], 5);
        assert_eq!(s.items, vec![0, 0, 1, 2, 3]);
        assert_eq!(s.mask, vec![false, false, true, true, true]);
        let e = pad_truncate(&[], 3);
        assert_eq!(e.items, vec![0, 0, 0]);
        assert_eq!(e.real_len(), 0);
    }

    fn one_user(items: Vec<usize>) -> InteractionLog {
        let k = items.iter().copied().max().unwrap_or(0);
        InteractionLog {
            users: vec![UserHistory {
                name: "u".into(),
                items,
            }],
            item_names: (1..=k).map(|i| i.to_string()).collect(),
            categories: vec![Default::default(); k + 1],
            category_names: vec![],
        }
    }

    #[test]
    fn four_item_split() {
        let split = leave_one_out_split(&one_user(vec![1, 2, 3, 4]), 5);
        let t = &split.test[0];
        assert_eq!(t.seq.items, vec![0, 0, 1, 2, 3]);
        assert_eq!(t.seq.target, 4);
        let v = &split.valid[0];
        assert_eq!(v.seq.items, vec![0, 0, 0, 1, 2]);
        assert_eq!(v.seq.target, 3);
        let tr = &split.train[0];
        assert_eq!(tr.seq.items, vec![0, 0, 0, 0, 1]);
        assert_eq!(tr.targets, vec![0, 0, 0, 1, 2]);
    }

    #[test]
    fn length_three_gives_one_training_target() {
        let split = leave_one_out_split(&one_user(vec![5, 6, 7]), 4);
        let targets: Vec<_> = split.train[0].targets.iter().filter(|&&t| t != 0).collect();
        assert_eq!(targets, vec![&5]);
    }

    #[test]
    fn short_users_are_skipped() {
        let split = leave_one_out_split(&one_user(vec![1, 2]), 4);
        assert_eq!(split.skipped, 1);
        assert!(split.train.is_empty());
    }

    proptest! {
        #[test]
        fn pad_truncate_is_idempotent(seq in proptest::collection::vec(1usize..50, 0..20), n in 1usize..12) {
            let once = pad_truncate(&seq, n);
            let real: Vec<usize> = once.items.iter().copied().filter(|&i| i != 0).collect();
            let twice = pad_truncate(&real, n);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(once.real_len(), seq.len().min(n));
            // Padding strictly precedes real items.
            let first_real = once.mask.iter().position(|&m| m).unwrap_or(n);
            prop_assert!(once.mask[first_real..].iter().all(|&m| m));
        }
    }
}
