use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ManifestRecord;
use crate::error::{Error, Result};

/// Unit of random assignment to train or test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SplitMode {
    /// Every scene lands wholly on one side.
    #[default]
    Scene,
    /// Individual records are assigned; scenes may leak across the split.
    Image,
}

/// Record indices of one train/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Distinct scene ids in order of first appearance.
pub fn scene_ids(records: &[ManifestRecord]) -> Vec<&str> {
    let mut seen = Vec::new();
    for r in records {
        if !seen.contains(&r.scene_id.as_str()) {
            seen.push(r.scene_id.as_str());
        }
    }
    seen
}

fn test_count(units: usize, train_fraction: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::config(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let n = ((1.0 - train_fraction) * units as f64).round() as usize;
    if n == 0 || n >= units {
        return Err(Error::data(format!(
            "{units} split units cannot give both a nonempty train and test set at train fraction {train_fraction}"
        )));
    }
    Ok(n)
}

/// `k` independent seeded random train/test partitions.
pub fn kfold_split(
    records: &[ManifestRecord],
    k: usize,
    train_fraction: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<Vec<Fold>> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if records.len() < k {
        return Err(Error::data(format!("{} records cannot form {k} folds", records.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = scene_ids(records);
    let units = match mode {
        SplitMode::Scene => scenes.len(),
        SplitMode::Image => records.len(),
    };
    let n_test = test_count(units, train_fraction)?;
    let mut folds = Vec::with_capacity(k);
    for _ in 0..k {
        let mut order: Vec<usize> = (0..units).collect();
        order.shuffle(&mut rng);
        let mut in_test = vec![false; units];
        for &u in &order[..n_test] {
            in_test[u] = true;
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, r) in records.iter().enumerate() {
            let unit = match mode {
                SplitMode::Scene => scenes.iter().position(|s| *s == r.scene_id).expect("listed"),
                SplitMode::Image => i,
            };
            if in_test[unit] { test.push(i) } else { train.push(i) }
        }
        folds.push(Fold { train, test });
    }
    Ok(folds)
}

/// Moves a seeded `fraction` of the scenes in `indices` into a validation
/// set, returning `(train, validation)`.
pub fn holdout_scenes(
    records: &[ManifestRecord],
    indices: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let subset: Vec<ManifestRecord> = indices.iter().map(|&i| records[i].clone()).collect();
    let fold = kfold_split(&subset, 1, 1.0 - fraction, seed, SplitMode::Scene)?.remove(0);
    Ok((fold.train.iter().map(|&i| indices[i]).collect(), fold.test.iter().map(|&i| indices[i]).collect()))
}
