use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use crate::error::{Error, Result};

/// Sorted train and validation item indices of one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified `k`-fold split. Within each label, items are ordered by
/// source id and shuffled with an RNG keyed by `(seed, label)`, then dealt
/// round-robin to folds, continuing where the previous label stopped. Fold
/// membership therefore depends only on labels, source ids and the seed, not
/// on the order of `ds.items`.
pub fn kfold_split(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || ds.len() < k {
        return Err(Error::TooFewItems(format!("{} items cannot form {k} folds", ds.len())));
    }
    let mut fold_of = vec![0; ds.len()];
    let mut next = 0;
    for label in 0..ds.classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.items[i].1 == label).collect();
        members.sort_by(|&a, &b| ds.items[a].0.source_id.cmp(&ds.items[b].0.source_id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label as u64);
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| fold_of[i] == f);
            Fold { train, val }
        })
        .collect())
}
