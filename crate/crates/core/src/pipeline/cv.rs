use super::{evaluate_images, train, TrainRunConfig};
use crate::data::{holdout_scenes, kfold_split, load_patches, ManifestRecord, PatchPair, SplitMode};
use crate::error::Result;
use crate::evalmetrics::MetricsReport;

/// Per-fold metrics and their mean.
#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

impl CvReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, f) in self.folds.iter().enumerate() {
            s.push_str(&format!("[fold {}]\n{}", i + 1, f.to_text()));
        }
        s.push_str(&format!("[mean]\n{}", self.mean.to_text()));
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("fold,{}\n", MetricsReport::CSV_HEADER);
        for (i, f) in self.folds.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, f.to_csv_row()));
        }
        s.push_str(&format!("mean,{}\n", self.mean.to_csv_row()));
        s
    }
}

fn flatten(images: &[Vec<PatchPair>], idx: &[usize]) -> Vec<PatchPair> {
    idx.iter().flat_map(|&i| images[i].iter().cloned()).collect()
}

fn pick(images: &[Vec<PatchPair>], idx: &[usize]) -> Vec<Vec<PatchPair>> {
    idx.iter().map(|&i| images[i].clone()).collect()
}

/// Trains on `train_idx`, optionally carving a validation split out of it,
/// and evaluates per image on `test_idx`.
fn fit_and_score(
    run: &TrainRunConfig,
    records: &[ManifestRecord],
    images: &[Vec<PatchPair>],
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<MetricsReport> {
    let (fit_idx, val_idx) = match run.validation_fraction {
        Some(f) => holdout_scenes(records, train_idx, f, run.seed)?,
        None => (train_idx.to_vec(), Vec::new()),
    };
    let val = flatten(images, &val_idx);
    let outcome = train(run, &flatten(images, &fit_idx), (!val.is_empty()).then_some(val.as_slice()))?;
    let model = match outcome.best_checkpoint() {
        Some(best) => best.model,
        None => outcome.model,
    };
    evaluate_images(&model, &pick(images, test_idx))
}

/// `k` random train/test splits of one manifest; one model per fold.
pub fn run_cv(run: &TrainRunConfig, records: &[ManifestRecord], k: usize, mode: SplitMode) -> Result<CvReport> {
    let folds = kfold_split(records, k, 0.8, run.seed, mode)?;
    let images = load_patches(records, run.parallel_loading)?;
    let mut reports = Vec::with_capacity(k);
    for fold in &folds {
        reports.push(fit_and_score(run, records, &images, &fold.train, &fold.test)?);
    }
    let mean = MetricsReport::mean(&reports)?;
    Ok(CvReport { folds: reports, mean })
}

/// Trains on every record of one manifest and tests on every record of
/// another.
pub fn cross_dataset(
    run: &TrainRunConfig,
    train_records: &[ManifestRecord],
    test_records: &[ManifestRecord],
) -> Result<MetricsReport> {
    let train_images = load_patches(train_records, run.parallel_loading)?;
    let test_images = load_patches(test_records, run.parallel_loading)?;
    let all: Vec<usize> = (0..train_records.len()).collect();
    let mut images = train_images;
    let offset = images.len();
    images.extend(test_images);
    let test: Vec<usize> = (offset..images.len()).collect();
    let mut records = train_records.to_vec();
    records.extend_from_slice(test_records);
    fit_and_score(run, &records, &images, &all, &test)
}
