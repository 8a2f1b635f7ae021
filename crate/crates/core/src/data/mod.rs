//! Manifests, image I/O, patch extraction, dataset splits and the synthetic
//! dataset generator.

mod image;
mod manifest;
mod split;
pub mod synth;

pub use image::{decode_ppm, encode_ppm, read_image, write_ppm};
pub use manifest::{load_manifest, parse_manifest, write_manifest, Distortion, ManifestRecord, MANIFEST_COLUMNS};
pub use split::{holdout_scenes, kfold_split, scene_ids, Fold, SplitMode};
pub use synth::{synth_generate, synthetic_score, SynthSpec, SynthSummary};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::satnet::PATCH_SIZE;
use crate::tensor::Tensor;

/// A decoded stereo pair.
#[derive(Clone, Debug)]
pub struct StereoSample {
    pub record: ManifestRecord,
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
}

impl StereoSample {
    pub fn new(record: ManifestRecord, left: Tensor<f32>, right: Tensor<f32>) -> Result<Self> {
        if left.shape() != right.shape() {
            return Err(Error::data(format!(
                "left view is {:?} but right view is {:?}",
                left.shape(),
                right.shape()
            )));
        }
        Ok(StereoSample { record, left, right })
    }

    pub fn load(record: &ManifestRecord) -> Result<Self> {
        let left = read_image(&record.left_path)?;
        let right = read_image(&record.right_path)?;
        StereoSample::new(record.clone(), left, right).map_err(|e| e.at_path(&record.left_path))
    }
}

/// Co-located `3×40×40` crops from both views.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// The score of the image the patch came from.
    pub label: f64,
    pub parent: String,
}

/// `(rows, cols)` of the non-overlapping patch grid of an `h×w` image.
pub fn patch_grid(h: usize, w: usize) -> (usize, usize) {
    (h / PATCH_SIZE, w / PATCH_SIZE)
}

fn crop(img: &Tensor<f32>, top: usize, left: usize) -> Tensor<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut data = Vec::with_capacity(3 * PATCH_SIZE * PATCH_SIZE);
    for c in 0..3 {
        for y in top..top + PATCH_SIZE {
            let row = c * h * w + y * w + left;
            data.extend_from_slice(&src[row..row + PATCH_SIZE]);
        }
    }
    Tensor::new(vec![3, PATCH_SIZE, PATCH_SIZE], data).expect("sized above")
}

/// Row-major grid of non-overlapping crops; partial rows and columns are
/// dropped. Every patch inherits the image score.
pub fn crop_patches(sample: &StereoSample) -> Result<Vec<PatchPair>> {
    let &[3, h, w] = sample.left.shape() else {
        return Err(Error::data(format!("expected a 3×H×W image, got {:?}", sample.left.shape())));
    };
    if h < PATCH_SIZE || w < PATCH_SIZE {
        return Err(Error::data(format!("image is {h}×{w}, smaller than the {PATCH_SIZE}×{PATCH_SIZE} patch")));
    }
    let (rows, cols) = patch_grid(h, w);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r * PATCH_SIZE, c * PATCH_SIZE);
            out.push(PatchPair {
                left: crop(&sample.left, y, x),
                right: crop(&sample.right, y, x),
                label: sample.record.score,
                parent: sample.record.scene_id.clone(),
            });
        }
    }
    Ok(out)
}

/// Loads and crops every record. The parallel path decodes on the rayon
/// pool; results come back in record order either way.
pub fn load_patches(records: &[ManifestRecord], parallel: bool) -> Result<Vec<Vec<PatchPair>>> {
    let one = |r: &ManifestRecord| StereoSample::load(r).and_then(|s| crop_patches(&s));
    if parallel {
        records.par_iter().map(one).collect()
    } else {
        records.iter().map(one).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> StereoSample {
        let rec = ManifestRecord {
            left_path: "l".into(),
            right_path: "r".into(),
            score: 42.0,
            scene_id: "s".into(),
            distortion: Distortion::None,
            level: 0,
        };
        let img = Tensor::from_fn(&[3, h, w], |i| i as f32);
        StereoSample::new(rec, img.clone(), img.map(|v| -v)).unwrap()
    }

    #[test]
    fn grid_counts() {
        assert_eq!(crop_patches(&sample(40, 40)).unwrap().len(), 1);
        assert_eq!(crop_patches(&sample(79, 79)).unwrap().len(), 1);
        assert_eq!(crop_patches(&sample(120, 81)).unwrap().len(), 6);
        assert!(crop_patches(&sample(39, 100)).is_err());
        assert_eq!(patch_grid(360, 640), (9, 16));
    }

    #[test]
    fn crops_are_colocated() {
        let s = sample(80, 120);
        let p = crop_patches(&s).unwrap();
        // patch (1, 2): rows 40.., cols 80..
        let expected = s.left.at(&[2, 40 + 3, 80 + 5]);
        assert_eq!(p[5].left.at(&[2, 3, 5]), expected);
        assert_eq!(p[5].right.at(&[2, 3, 5]), -expected);
        assert!(p.iter().all(|q| q.label == 42.0));
    }

    #[test]
    fn mismatched_views_rejected() {
        let s = sample(40, 40);
        assert!(StereoSample::new(s.record, Tensor::zeros(&[3, 40, 40]), Tensor::zeros(&[3, 40, 48])).is_err());
    }
}
