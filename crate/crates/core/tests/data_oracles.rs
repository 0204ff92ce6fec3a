//! Loading, filtering and splitting against naive re-implementations.

use std::collections::{BTreeSet, HashMap};
use std::fs;

use genatt::data::synthetic::{generate, SyntheticSpec};
use genatt::data::{
    filter_min_interactions, leave_one_out_split, load_interactions, pad_truncate, InteractionLog, UserHistory,
};
use proptest::prelude::*;

fn log_from(rows: &[Vec<usize>], num_items: usize) -> InteractionLog {
    InteractionLog {
        users: rows
            .iter()
            .enumerate()
            .map(|(u, items)| UserHistory {
                name: format!("u{u}"),
                items: items.clone(),
            })
            .collect(),
        item_names: (1..=num_items).map(|i| format!("i{i}")).collect(),
        categories: vec![BTreeSet::new(); num_items + 1],
        category_names: Vec::new(),
    }
}

/// Raw-name view: user name → item names in order.
fn named(log: &InteractionLog) -> Vec<(String, Vec<String>)> {
    log.users
        .iter()
        .map(|u| {
            (
                u.name.clone(),
                u.items.iter().map(|&i| log.item_names[i - 1].clone()).collect(),
            )
        })
        .collect()
}

/// Fixpoint filter over raw names with hash-map counting.
fn naive_filter(log: &InteractionLog, k: usize) -> Vec<(String, Vec<String>)> {
    let mut rows = named(log);
    loop {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for (_, items) in &rows {
            for i in items {
                *counts.entry(i.clone()).or_default() += 1;
            }
        }
        let next: Vec<(String, Vec<String>)> = rows
            .iter()
            .map(|(u, items)| (u.clone(), items.iter().filter(|i| counts[*i] >= k).cloned().collect()))
            .filter(|(_, items): &(String, Vec<String>)| items.len() >= k)
            .collect();
        if next == rows {
            return rows;
        }
        rows = next;
    }
}

fn arb_log() -> impl Strategy<Value = InteractionLog> {
    (1usize..10).prop_flat_map(|num_items| {
        prop::collection::vec(prop::collection::vec(1..=num_items, 0..12), 1..14)
            .prop_map(move |rows| log_from(&rows, num_items))
    })
}

#[test]
fn loader_indexes_by_first_appearance_and_sorts_by_time() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.tsv");
    fs::write(
        &path,
        "# user item time\nbob\tpear\t5\nann\tfig\t2\nbob\tfig\t1\nann\tplum\t3\nbob\tplum\t9\n",
    )
    .unwrap();
    let cats = dir.path().join("cats.tsv");
    fs::write(&cats, "fig\tfruit\nplum\tstone\nplum\tfruit\nkiwi\tfruit\n").unwrap();
    let log = load_interactions(&path, Some(&cats)).unwrap();
    assert_eq!(log.item_names, ["pear", "fig", "plum"]);
    assert_eq!(log.users[0].name, "bob");
    assert_eq!(log.users[0].items, [2, 1, 3]);
    assert_eq!(log.users[1].items, [2, 3]);
    assert_eq!(log.category_names, ["fruit", "stone"]);
    assert_eq!(log.categories[3], BTreeSet::from([0, 1]));
    assert!(log.categories[1].is_empty());
    let s = log.stats();
    assert_eq!((s.users, s.items, s.interactions, s.categories), (2, 3, 5, 2));
    assert!((s.density - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn loader_reports_path_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.tsv");
    fs::write(&path, "a\tb\t1\na\tc\n").unwrap();
    let msg = load_interactions(&path, None).unwrap_err().to_string();
    assert!(msg.contains("bad.tsv:2"), "{msg}");
    let missing = dir.path().join("missing.tsv");
    let msg = load_interactions(&missing, None).unwrap_err().to_string();
    assert!(msg.contains("missing.tsv"), "{msg}");
}

#[test]
fn write_then_load_preserves_the_log() {
    let log = filter_min_interactions(&generate(&SyntheticSpec::default()).unwrap(), 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (ip, cp) = (dir.path().join("i.tsv"), dir.path().join("c.tsv"));
    log.write_interactions(&ip).unwrap();
    log.write_categories(&cp).unwrap();
    let back = load_interactions(&ip, Some(&cp)).unwrap();
    assert_eq!(named(&back), named(&log));
    assert_eq!(back.stats(), log.stats());
}

#[test]
fn filter_cascades_until_stable() {
    // Item 3 occurs twice, so user 2 falls to one interaction and leaves;
    // that takes item 2 down to two occurrences on the next pass.
    let log = log_from(&[vec![1, 1, 2, 1, 2], vec![1, 1, 1], vec![3, 3, 2]], 3);
    let got = filter_min_interactions(&log, 3).unwrap();
    assert_eq!(named(&got), naive_filter(&log, 3));
    assert_eq!(got.num_users(), 2);
    assert_eq!(got.num_items(), 1);
    assert_eq!(got.users[0].items, [1, 1, 1]);
    assert!(filter_min_interactions(&log, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn filter_matches_naive_fixpoint(log in arb_log(), k in 1usize..5) {
        let naive = naive_filter(&log, k);
        match filter_min_interactions(&log, k) {
            Ok(got) => {
                prop_assert_eq!(named(&got), naive);
                // Dense ids, kept in original relative order.
                let mut seen = BTreeSet::new();
                for u in &got.users {
                    seen.extend(u.items.iter().copied());
                }
                prop_assert_eq!(seen, (1..=got.num_items()).collect::<BTreeSet<_>>());
                let old: Vec<usize> = got
                    .item_names
                    .iter()
                    .map(|n| log.item_names.iter().position(|m| m == n).unwrap())
                    .collect();
                prop_assert!(old.windows(2).all(|w| w[0] < w[1]));
            }
            Err(_) => prop_assert!(naive.is_empty()),
        }
    }

    #[test]
    fn filter_is_idempotent(log in arb_log(), k in 1usize..5) {
        if let Ok(once) = filter_min_interactions(&log, k) {
            let twice = filter_min_interactions(&once, k).unwrap();
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn split_holds_out_the_last_two(log in arb_log(), n in 1usize..8) {
        let split = leave_one_out_split(&log, n);
        let eligible: Vec<&UserHistory> = log.users.iter().filter(|u| u.items.len() >= 3).collect();
        prop_assert_eq!(split.skipped, log.num_users() - eligible.len());
        prop_assert_eq!(split.train.len(), eligible.len());
        for ((tr, (va, te)), u) in split.train.iter().zip(split.valid.iter().zip(&split.test)).zip(&eligible) {
            let m = u.items.len();
            prop_assert_eq!(te.seq.target, u.items[m - 1]);
            prop_assert_eq!(va.seq.target, u.items[m - 2]);
            prop_assert_eq!(&te.seen, &u.items[..m - 1].to_vec());
            prop_assert_eq!(&va.seen, &u.items[..m - 2].to_vec());
            prop_assert_eq!(&te.seq.items, &pad_truncate(&u.items[..m - 1], n).items);
            // Training never sees the last two positions.
            let region = &u.items[..m - 2];
            prop_assert_eq!(&tr.targets, &pad_truncate(region, n).items);
            prop_assert_eq!(&tr.seq.items, &pad_truncate(&region[..region.len() - 1], n).items);
            for (i, (&x, &y)) in tr.seq.items.iter().zip(&tr.targets).enumerate() {
                prop_assert_eq!(tr.seq.mask[i], x != 0);
                if i + 1 < n {
                    // Input at i+1 is the target at i.
                    prop_assert_eq!(tr.seq.items[i + 1], y);
                }
            }
        }
    }
}

#[test]
fn no_held_out_item_reaches_training() {
    // The synthetic users never repeat an item, so positional leakage shows
    // up as an item-level overlap.
    let log = filter_min_interactions(&generate(&SyntheticSpec::default()).unwrap(), 10).unwrap();
    let split = leave_one_out_split(&log, 50);
    for ((tr, va), te) in split.train.iter().zip(&split.valid).zip(&split.test) {
        let visible: BTreeSet<usize> = tr.seq.items.iter().chain(&tr.targets).copied().collect();
        assert!(!visible.contains(&va.seq.target));
        assert!(!visible.contains(&te.seq.target));
        assert!(!va.seq.items.contains(&te.seq.target));
    }
}

#[test]
fn synthetic_corpus_is_seed_deterministic() {
    let spec = SyntheticSpec::parse(&["users=500 items=200 cats=10 seed=4"]).unwrap();
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate(&SyntheticSpec { seed: 5, ..spec }).unwrap();
    assert_ne!(a, c);
    assert_eq!(a.num_users(), 500);
    assert_eq!(a.num_categories(), 10);
    for u in &a.users {
        let distinct: BTreeSet<_> = u.items.iter().collect();
        assert_eq!(distinct.len(), u.items.len());
    }
}
