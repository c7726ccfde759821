use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};

/// Trial indices of one train/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub label: String,
    pub subject: Option<u32>,
    pub repeat: Option<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per subject, testing on that subject and training on the rest.
pub fn split_loo(ds: &LabeledDataset) -> Result<Vec<Fold>> {
    if ds.subjects.len() < 2 {
        return Err(Error::invalid(
            "leave-one-subject-out needs at least two subjects; use the subject-specific scheme for one",
        ));
    }
    Ok(ds
        .subjects
        .iter()
        .map(|&s| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.trials.len()).partition(|&i| ds.trials[i].subject == s);
            Fold {
                label: format!("subject {s}"),
                subject: Some(s),
                repeat: None,
                train,
                test,
            }
        })
        .collect())
}

/// Seeded 4:1 split of `indices`; `|test| = round(n / 5)`. With
/// `stratify`, each class contributes to the test set in proportion to its
/// size, remainders going to the largest fractional parts.
pub fn split_ratio(indices: &[usize], labels: &[usize], seed: u64, stratify: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = indices.len();
    if n < 5 {
        return Err(Error::invalid(format!("a 4:1 split needs at least 5 trials, got {n}")));
    }
    let n_test = (n as f64 / 5.0).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::with_capacity(n_test);
    let mut train = Vec::with_capacity(n - n_test);
    if stratify {
        let mut groups: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for &i in indices {
            let y = labels[i];
            if y > 1 {
                return Err(Error::invalid(format!("label {y} is not binary")));
            }
            groups[y].push(i);
        }
        let exact: Vec<f64> = groups.iter().map(|g| g.len() as f64 * n_test as f64 / n as f64).collect();
        let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut left = n_test - quota.iter().sum::<usize>();
        let mut by_fraction: Vec<usize> = vec![0, 1];
        by_fraction.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        for &c in &by_fraction {
            if left > 0 && quota[c] < groups[c].len() {
                quota[c] += 1;
                left -= 1;
            }
        }
        for (g, &q) in groups.iter_mut().zip(&quota) {
            g.shuffle(&mut rng);
            test.extend_from_slice(&g[..q]);
            train.extend_from_slice(&g[q..]);
        }
    } else {
        let mut all = indices.to_vec();
        all.shuffle(&mut rng);
        test.extend_from_slice(&all[..n_test]);
        train.extend_from_slice(&all[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    for (name, part) in [("train", &train), ("test", &test)] {
        for class in 0..2 {
            if !part.iter().any(|&i| labels[i] == class) {
                log::warn!("class {class} is absent from the {name} side of a 4:1 split");
            }
        }
    }
    Ok((train, test))
}
