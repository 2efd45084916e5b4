use rand::Rng;

use crate::corpus::Dataset;
use crate::{Error, Result};

/// A `(user, positive item, negative item)` training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub user: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws a training edge uniformly, so a positive item `i` is chosen with
/// probability `n_i / |D|`, then a negative uniformly from the items the
/// user has not interacted with.
#[derive(Debug, Clone)]
pub struct TripletSampler<'a> {
    dataset: &'a Dataset,
}

impl<'a> TripletSampler<'a> {
    pub fn new(dataset: &'a Dataset) -> Result<Self> {
        let qualifies = dataset.train_edges.iter().any(|&(u, _)| dataset.train_items(u).len() < dataset.n_items);
        if !qualifies {
            return Err(Error::NoSamplableUser);
        }
        Ok(TripletSampler { dataset })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Triplet {
        let ds = self.dataset;
        loop {
            let (user, positive) = ds.train_edges[rng.random_range(0..ds.train_edges.len())];
            if ds.train_items(user).len() >= ds.n_items {
                continue;
            }
            loop {
                let negative = rng.random_range(0..ds.n_items);
                if !ds.has_train_edge(user, negative) {
                    return Triplet { user, positive, negative };
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_positive_distribution() {
        // all interactions on item 0; items 1..3 only serve as negatives
        let ds = Dataset::from_edges(3, 4, [(0, 0), (1, 0), (2, 0)], []).unwrap();
        let s = TripletSampler::new(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| s.sample(&mut rng).positive == 0));
    }

    #[test]
    fn positive_frequency_tracks_popularity() {
        let ds = Dataset::from_edges(3, 2, [(0, 0), (1, 0), (2, 1)], []).unwrap();
        let s = TripletSampler::new(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hits = (0..30_000).filter(|_| s.sample(&mut rng).positive == 0).count();
        let freq = hits as f64 / 30_000.0;
        assert!((0.64..=0.69).contains(&freq), "{freq}");
    }

    #[test]
    fn negatives_are_never_positives() {
        let ds = Dataset::from_edges(4, 6, [(0, 0), (0, 1), (0, 2), (1, 3), (2, 0), (2, 5), (3, 4)], []).unwrap();
        let s = TripletSampler::new(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            let t = s.sample(&mut rng);
            assert!(ds.has_train_edge(t.user, t.positive));
            assert!(!ds.has_train_edge(t.user, t.negative));
        }
    }

    #[test]
    fn saturated_users_are_skipped() {
        // user 0 owns every item; only user 1 can be sampled
        let ds = Dataset::from_edges(2, 2, [(0, 0), (0, 1), (1, 0)], []).unwrap();
        let s = TripletSampler::new(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let t = s.sample(&mut rng);
            assert_eq!((t.user, t.positive, t.negative), (1, 0, 1));
        }
        let full = Dataset::from_edges(1, 2, [(0, 0), (0, 1)], []).unwrap();
        assert!(matches!(TripletSampler::new(&full), Err(Error::NoSamplableUser)));
    }
}
