use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::session::{window, Session};

/// Seeded epoch-wise mini-batching over a fixed dataset.
///
/// Each call to [`BatchIter::epoch`] reshuffles. With `augment_window` on,
/// every session gets a freshly drawn targeted turn (uniform over its turns)
/// before windowing; otherwise the stored targeted turn is kept. A trailing
/// batch with fewer than two sessions is dropped.
#[derive(Clone, Debug)]
pub struct BatchIter<'a> {
    data: &'a [Session],
    batch_size: usize,
    context: usize,
    augment_window: bool,
    rng: ChaCha8Rng,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        data: &'a [Session],
        batch_size: usize,
        context: usize,
        seed: u64,
        augment_window: bool,
    ) -> Self {
        assert!(batch_size >= 2, "batch size must be at least 2");
        Self {
            data,
            batch_size,
            context,
            augment_window,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        let full = self.data.len() / self.batch_size;
        let rem = self.data.len() % self.batch_size;
        full + usize::from(rem >= 2)
    }

    pub fn epoch(&mut self) -> Vec<Vec<Session>> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(self.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| c.iter().map(|&i| self.prepare(i)).collect())
            .collect()
    }

    fn prepare(&mut self, i: usize) -> Session {
        let s = &self.data[i];
        if self.augment_window {
            let mut s = s.clone();
            s.targeted_index = self.rng.gen_range(0..s.turns.len());
            window(&s, self.context)
        } else {
            window(s, self.context)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Turn;

    fn sessions(n: usize, len: usize) -> Vec<Session> {
        (0..n)
            .map(|i| {
                let turns = (0..len)
                    .map(|t| Turn {
                        utterance: vec![t],
                        response: vec![],
                        raw_utterance: format!("{i}-{t}"),
                        raw_response: String::new(),
                    })
                    .collect();
                Session::new(turns, len / 2, "s", None, None).unwrap()
            })
            .collect()
    }

    #[test]
    fn batch_sizes() {
        let data = sessions(10, 1);
        let mut it = BatchIter::new(&data, 4, 2, 1, false);
        let sizes: Vec<usize> = it.epoch().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let data = sessions(9, 1);
        let mut it = BatchIter::new(&data, 4, 2, 1, false);
        assert_eq!(it.epoch().len(), 2);
        assert_eq!(it.batches_per_epoch(), 2);
    }

    #[test]
    fn augmentation_moves_targets() {
        let data = sessions(4, 9);
        let mut it = BatchIter::new(&data, 2, 8, 3, true);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10 {
            for b in it.epoch() {
                for s in b {
                    seen.insert(s.targeted().raw_utterance.clone());
                }
            }
        }
        assert!(seen.len() > 4);
    }

    #[test]
    fn no_augmentation_keeps_target() {
        let data = sessions(6, 5);
        let mut it = BatchIter::new(&data, 3, 2, 3, false);
        for b in it.epoch() {
            for s in b {
                assert!(s.targeted().raw_utterance.ends_with("-2"));
            }
        }
    }

    #[test]
    fn seeded() {
        let data = sessions(20, 5);
        let a = BatchIter::new(&data, 4, 2, 11, true).epoch();
        let b = BatchIter::new(&data, 4, 2, 11, true).epoch();
        assert_eq!(a, b);
    }
}
