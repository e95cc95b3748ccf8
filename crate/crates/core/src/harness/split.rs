use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::FeatureBag;
use crate::error::{ensure, Result};

/// Indices into the bag list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per class sizes of the 4:3:3 partition: `⌊0.4n⌋` train, `⌊0.3n⌋` val, the
/// remainder test.
pub fn partition_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 4 / 10;
    let val = n * 3 / 10;
    (train, val, n - train - val)
}

/// Shuffles each class with `seed`, cuts it 4:3:3, keeps `shots` of the
/// training share, and trims every class's test share to the smallest one.
pub fn few_shot_split(labels: &[usize], num_classes: usize, shots: usize, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let (tr, va, te) = partition_sizes(idx.len());
        ensure!(
            tr >= shots && va >= 1 && te >= 1,
            Config,
            "class {c} has {} bags; a {shots}-shot split needs at least {} training, 1 validation and 1 test bag",
            idx.len(),
            shots
        );
        let train = idx[..shots].to_vec();
        let val = idx[tr..tr + va].to_vec();
        let test = idx[tr + va..].to_vec();
        parts.push((train, val, test));
    }
    let balanced = parts.iter().map(|p| p.2.len()).min().unwrap_or(0);
    let mut split = Split {
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for (tr, va, te) in parts {
        split.train.extend(tr);
        split.val.extend(va);
        split.test.extend(&te[..balanced]);
    }
    Ok(split)
}

pub fn split_bags(bags: &[FeatureBag], num_classes: usize, shots: usize, seed: u64) -> Result<Split> {
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    few_shot_split(&labels, num_classes, shots, seed)
}
