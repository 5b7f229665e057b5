use rand::Rng as _;

use crate::error::{ensure, Result};
use crate::rng::{rng_from_seed, Rng};

/// In-place Fisher-Yates: for `i` from `len - 1` down to 1, swap `i` with a
/// uniform `j` in `0..=i`.
pub fn fisher_yates<T>(items: &mut [T], rng: &mut Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// A shuffled permutation of `0..len`, padded to `total` entries with
/// indices drawn uniformly with replacement when `len < total`.
pub fn paired_order(len: usize, total: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..len).collect();
    fisher_yates(&mut order, &mut rng);
    while order.len() < total {
        order.push(rng.random_range(0..len));
    }
    order.truncate(total.max(len));
    order
}

/// Shuffled index batches over `0..n`; a final short batch is dropped.
pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    ensure!(batch_size >= 2, "batch size must be at least 2, got {batch_size}");
    ensure!(batch_size <= n, "batch size {batch_size} exceeds dataset size {n}");
    Ok(chunk(&paired_order(n, n, seed), batch_size))
}

/// Full `batch_size` chunks of `order`, dropping the remainder.
pub(crate) fn chunk(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_a_permutation() {
        let b = make_batches(6, 2, 1).unwrap();
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn drops_last_partial_batch() {
        let b = make_batches(7, 2, 1).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|x| x.len() == 2));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 6);
    }

    #[test]
    fn seeded_order_repeats() {
        assert_eq!(make_batches(50, 4, 9).unwrap(), make_batches(50, 4, 9).unwrap());
        assert_ne!(make_batches(50, 4, 9).unwrap(), make_batches(50, 4, 10).unwrap());
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(make_batches(3, 4, 0).is_err());
        assert!(make_batches(3, 1, 0).is_err());
    }

    #[test]
    fn padding_resamples_shorter_domain() {
        let o = paired_order(3, 10, 4);
        assert_eq!(o.len(), 10);
        assert!(o.iter().all(|&i| i < 3));
        let mut head = o[..3].to_vec();
        head.sort_unstable();
        assert_eq!(head, vec![0, 1, 2]);
    }
}
