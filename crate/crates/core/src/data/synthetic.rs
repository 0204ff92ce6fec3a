//! Preference-cluster toy corpus with learnable sequential structure.
//!
//! Items are split round-robin into `cats` category clusters, each ordered
//! into a ring by id, with Zipf-like popularity inside the cluster. A user
//! favours two clusters; each next item is either the ring successor of the
//! previous one, a popularity-weighted pick from the favoured clusters, or
//! (rarely) uniform noise. Users never repeat an item.

use std::collections::BTreeSet;

use super::{InteractionLog, ItemId, UserHistory};
use crate::tensor::RngStream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub cats: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of stepping to the ring successor.
    pub p_chain: f64,
    /// Probability of a uniform draw from the whole catalog.
    pub p_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 500,
            items: 200,
            cats: 10,
            seed: 0,
            min_len: 12,
            max_len: 30,
            p_chain: 0.5,
            p_noise: 0.1,
        }
    }
}

impl SyntheticSpec {
    /// Parses `key=value` tokens (`users`, `items`, `cats`, `seed`, `min_len`,
    /// `max_len`, `p_chain`, `p_noise`) over the defaults.
    pub fn parse<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for tok in tokens.iter().flat_map(|t| {
            t.as_ref()
                .split([',', ' '])
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect::<Vec<_>>()
        }) {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::config(format!("synthetic option {tok:?} is not key=value")))?;
            let bad = || Error::config(format!("bad value for synthetic {k}: {v:?}"));
            match k {
                "users" => spec.users = v.parse().map_err(|_| bad())?,
                "items" => spec.items = v.parse().map_err(|_| bad())?,
                "cats" => spec.cats = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "min_len" => spec.min_len = v.parse().map_err(|_| bad())?,
                "max_len" => spec.max_len = v.parse().map_err(|_| bad())?,
                "p_chain" => spec.p_chain = v.parse().map_err(|_| bad())?,
                "p_noise" => spec.p_noise = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::config(format!("unknown synthetic option {k:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.cats < 2 || self.items < 2 * self.cats {
            return Err(Error::config("synthetic corpus needs cats >= 2 and items >= 2*cats"));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return Err(Error::config("synthetic lengths need 3 <= min_len <= max_len"));
        }
        if self.max_len > 2 * (self.items / self.cats) {
            return Err(Error::config("max_len exceeds the items in two clusters"));
        }
        if !(0.0..=1.0).contains(&(self.p_chain + self.p_noise)) {
            return Err(Error::config("p_chain + p_noise must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn cluster_of(&self, item: ItemId) -> usize {
        (item - 1) % self.cats
    }

    fn popularity(&self, item: ItemId) -> f64 {
        let rank = (item - 1) / self.cats;
        1.0 / ((rank + 1) as f64).powf(0.8)
    }

    /// Next item after `item` on its cluster ring.
    fn successor(&self, item: ItemId) -> ItemId {
        let next = item + self.cats;
        if next > self.items {
            self.cluster_of(item) + 1
        } else {
            next
        }
    }
}

fn weighted_pick(cands: &[ItemId], spec: &SyntheticSpec, rng: &mut RngStream) -> Option<ItemId> {
    let total: f64 = cands.iter().map(|&i| spec.popularity(i)).sum();
    if cands.is_empty() || total <= 0.0 {
        return None;
    }
    let mut r = rng.uniform() * total;
    for &i in cands {
        r -= spec.popularity(i);
        if r < 0.0 {
            return Some(i);
        }
    }
    cands.last().copied()
}

/// Generates the corpus deterministically from `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<InteractionLog> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let mut users = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let c1 = rng.below(spec.cats);
        let c2 = (c1 + 1 + rng.below(spec.cats - 1)) % spec.cats;
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let favoured: Vec<ItemId> = (1..=spec.items)
            .filter(|&i| {
                let c = spec.cluster_of(i);
                c == c1 || c == c2
            })
            .collect();
        let mut used = BTreeSet::new();
        let mut seq: Vec<ItemId> = Vec::with_capacity(len);
        while seq.len() < len {
            let roll = rng.uniform();
            let mut next = None;
            if let Some(&prev) = seq.last() {
                if roll < spec.p_chain {
                    let mut cand = spec.successor(prev);
                    while used.contains(&cand) && cand != prev {
                        cand = spec.successor(cand);
                    }
                    if cand != prev {
                        next = Some(cand);
                    }
                }
            }
            if next.is_none() && roll < 1.0 - spec.p_noise {
                let free: Vec<ItemId> = favoured.iter().copied().filter(|i| !used.contains(i)).collect();
                next = weighted_pick(&free, spec, &mut rng);
            }
            let next = match next {
                Some(i) => i,
                None => {
                    let free: Vec<ItemId> = (1..=spec.items).filter(|i| !used.contains(i)).collect();
                    free[rng.below(free.len())]
                }
            };
            used.insert(next);
            seq.push(next);
        }
        users.push(UserHistory {
            name: format!("u{}", u + 1),
            items: seq,
        });
    }
    let mut categories = vec![BTreeSet::new(); spec.items + 1];
    for (item, cats) in categories.iter_mut().enumerate().skip(1) {
        let c = spec.cluster_of(item);
        cats.insert(c);
        // A slice of items straddles two clusters so list diversity is graded.
        if item % 7 == 0 {
            cats.insert((c + 1) % spec.cats);
        }
    }
    Ok(InteractionLog {
        users,
        item_names: (1..=spec.items).map(|i| format!("i{i}")).collect(),
        categories,
        category_names: (0..spec.cats).map(|c| format!("c{c}")).collect(),
    })
}
