use std::collections::BTreeSet;

use super::ItemId;
use crate::tensor::RngStream;
use crate::{Error, Result};

/// Uniform draw over items in `1..=num_items` that the user has not interacted with.
pub fn negative_sample(user_items: &BTreeSet<ItemId>, num_items: usize, rng: &mut RngStream) -> Result<ItemId> {
    let owned = user_items.iter().filter(|&&i| (1..=num_items).contains(&i)).count();
    if owned >= num_items {
        return Err(Error::NoNegative { owned, num_items });
    }
    if owned * 2 <= num_items {
        loop {
            let cand = 1 + rng.below(num_items);
            if !user_items.contains(&cand) {
                return Ok(cand);
            }
        }
    }
    // Dense ownership: enumerate the complement instead of rejecting.
    let free: Vec<ItemId> = (1..=num_items).filter(|i| !user_items.contains(i)).collect();
    Ok(free[rng.below(free.len())])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_outcome() {
        let owned: BTreeSet<_> = [1].into();
        let mut rng = RngStream::new(0);
        for _ in 0..50 {
            assert_eq!(negative_sample(&owned, 2, &mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn never_returns_pad_or_owned() {
        let owned: BTreeSet<_> = [2, 3, 5, 7, 11].into();
        let mut rng = RngStream::new(1);
        for _ in 0..10_000 {
            let s = negative_sample(&owned, 12, &mut rng).unwrap();
            assert!(s != 0 && s <= 12 && !owned.contains(&s));
        }
    }

    #[test]
    fn exhausted_catalog_is_an_error() {
        let owned: BTreeSet<_> = [1, 2].into();
        assert!(matches!(
            negative_sample(&owned, 2, &mut RngStream::new(0)),
            Err(Error::NoNegative { .. })
        ));
    }

    /// Pearson chi-square against uniform over the free items.
    fn chi_square(owned: &BTreeSet<ItemId>, num_items: usize, draws: usize, seed: u64) -> (f64, usize) {
        let mut rng = RngStream::new(seed);
        let mut counts = vec![0usize; num_items + 1];
        for _ in 0..draws {
            counts[negative_sample(owned, num_items, &mut rng).unwrap()] += 1;
        }
        let free: Vec<usize> = (1..=num_items).filter(|i| !owned.contains(i)).collect();
        let expected = draws as f64 / free.len() as f64;
        let stat = free
            .iter()
            .map(|&i| (counts[i] as f64 - expected).powi(2) / expected)
            .sum();
        (stat, free.len() - 1)
    }

    #[test]
    fn empirical_distribution_is_uniform() {
        // Upper 1% critical values of chi-square for the degrees of freedom used.
        // df = 16 -> 32.00 ; df = 4 -> 13.28
        let sparse: BTreeSet<_> = [3, 9, 14].into();
        let (stat, df) = chi_square(&sparse, 20, 10_000, 11);
        assert_eq!(df, 16);
        assert!(stat < 32.00, "chi2 = {stat}");
        // Dense ownership takes the enumeration branch.
        let dense: BTreeSet<_> = (1..=15).collect();
        let (stat, df) = chi_square(&dense, 20, 10_000, 12);
        assert_eq!(df, 4);
        assert!(stat < 13.28, "chi2 = {stat}");
    }
}
