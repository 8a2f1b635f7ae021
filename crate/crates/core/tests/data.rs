use std::collections::BTreeSet;
use std::path::Path;

use satnet::data::{
    crop_patches, kfold_split, load_manifest, parse_manifest, read_image, synth_generate, synthetic_score, write_ppm,
    Distortion, ManifestRecord, SplitMode, StereoSample, SynthSpec,
};
use satnet::tensor::Tensor;

fn record() -> ManifestRecord {
    ManifestRecord {
        left_path: "l.ppm".into(),
        right_path: "r.ppm".into(),
        score: 42.5,
        scene_id: "s".into(),
        distortion: Distortion::Jpeg,
        level: 2,
    }
}

fn blank_pair(h: usize, w: usize) -> StereoSample {
    StereoSample::new(record(), Tensor::zeros(&[3, h, w]), Tensor::zeros(&[3, h, w])).unwrap()
}

fn touch(dir: &Path, names: &[&str]) {
    for n in names {
        write_ppm(&dir.join(n), &Tensor::zeros(&[3, 2, 2])).unwrap();
    }
}

#[test]
fn dmos_scores_load_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    touch(dir.path(), &["a.ppm", "b.ppm"]);
    let scores = [0.0, 31.416, 74.25, 99.9];
    let mut text = String::from("left_path,right_path,score,scene_id,distortion,level\n");
    for (i, s) in scores.iter().enumerate() {
        text += &format!("a.ppm,b.ppm,{s},im{i},ff,{}\n", i + 1);
    }
    let recs = parse_manifest(text.as_bytes(), dir.path()).unwrap();
    let got: Vec<f64> = recs.iter().map(|r| r.score).collect();
    assert_eq!(got, scores);
    assert!(recs.iter().all(|r| r.distortion == Distortion::Ff));
    assert_eq!(recs[3].scene_id, "im3");
}

#[test]
fn manifest_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    touch(dir.path(), &["a.ppm"]);
    let missing = "left_path,right_path,scene_id,distortion,level\na.ppm,a.ppm,s,blur,1\n";
    let e = parse_manifest(missing.as_bytes(), dir.path()).unwrap_err().to_string();
    assert!(e.contains("score"), "{e}");
    let dangling = "left_path,right_path,score,scene_id,distortion,level\na.ppm,a.ppm,1,s,blur,1\na.ppm,gone.ppm,1,s,blur,1\n";
    let e = parse_manifest(dangling.as_bytes(), dir.path()).unwrap_err().to_string();
    assert!(e.contains("gone.ppm") && e.contains('3'), "{e}");
    let bad = "left_path,right_path,score,scene_id,distortion,level\na.ppm,a.ppm,lots,s,blur,1\n";
    assert!(parse_manifest(bad.as_bytes(), dir.path()).is_err());
}

#[test]
fn hand_written_red_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("red.ppm");
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    for _ in 0..4 {
        bytes.extend_from_slice(&[255, 0, 0]);
    }
    std::fs::write(&path, bytes).unwrap();
    let img = read_image(&path).unwrap();
    assert_eq!(img.shape(), [3, 2, 2]);
    assert_eq!(&img.data()[..4], [1.0; 4]);
    assert!(img.data()[4..].iter().all(|&v| v == 0.0));
}

#[test]
fn truncated_ppm_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.ppm");
    std::fs::write(&path, b"P6\n4 4\n255\n\x00\x01").unwrap();
    assert!(read_image(&path).is_err());
    std::fs::write(&path, b"P3\n1 1\n255\n0 0 0\n").unwrap();
    assert!(read_image(&path).is_err());
}

#[test]
fn full_view_reads_channel_major() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("view.ppm");
    let img = Tensor::from_fn(&[3, 360, 640], |i| ((i * 7) % 256) as f32 / 255.0);
    write_ppm(&path, &img).unwrap();
    let back = read_image(&path).unwrap();
    assert_eq!(back.shape(), [3, 360, 640]);
    assert_eq!(back.data(), img.data());
}

#[test]
fn patch_grid_counts() {
    assert_eq!(crop_patches(&blank_pair(360, 640)).unwrap().len(), 144);
    assert_eq!(crop_patches(&blank_pair(40, 40)).unwrap().len(), 1);
    assert_eq!(crop_patches(&blank_pair(79, 79)).unwrap().len(), 1);
    assert!(crop_patches(&blank_pair(39, 80)).is_err());
}

#[test]
fn patches_are_aligned_and_labelled() {
    // Each pixel encodes its own coordinates; the right view is offset by a constant.
    let (h, w) = (85, 130);
    let code = |i: usize| ((i / w) % h * 1000 + i % w) as f32;
    let left = Tensor::from_fn(&[3, h, w], code);
    let right = left.map(|v| v + 0.5);
    let s = StereoSample::new(record(), left, right).unwrap();
    let patches = crop_patches(&s).unwrap();
    assert_eq!(patches.len(), 2 * 3);
    for (n, p) in patches.iter().enumerate() {
        let (top, lft) = (n / 3 * 40, n % 3 * 40);
        assert_eq!(p.left.shape(), [3, 40, 40]);
        assert_eq!(p.left.at(&[2, 0, 0]), (top * 1000 + lft) as f32);
        assert_eq!(p.left.at(&[0, 39, 39]), ((top + 39) * 1000 + lft + 39) as f32);
        for (a, b) in p.left.data().iter().zip(p.right.data()) {
            assert_eq!(a + 0.5, *b);
        }
        assert_eq!(p.label, 42.5);
    }
}

#[test]
fn synthetic_counts_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = SynthSpec { scenes: 6, seed: 1, ..SynthSpec::default() };
    let sa = synth_generate(&spec, a.path()).unwrap();
    let sb = synth_generate(&spec, b.path()).unwrap();
    assert_eq!((sa.distorted, sa.pristine), (72, 6));
    assert_eq!(std::fs::read(&sa.manifest).unwrap(), std::fs::read(&sb.manifest).unwrap());
    for (ra, rb) in sa.records.iter().zip(&sb.records) {
        assert_eq!(std::fs::read(&ra.left_path).unwrap(), std::fs::read(&rb.left_path).unwrap());
        assert_eq!(std::fs::read(&ra.right_path).unwrap(), std::fs::read(&rb.right_path).unwrap());
    }
    let loaded = load_manifest(&sa.manifest).unwrap();
    assert_eq!(loaded, sa.records);
    for r in &loaded {
        let s = StereoSample::load(r).unwrap();
        assert!(s.left.data().iter().chain(s.right.data()).all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn asymmetric_pairs_double_the_distorted_set() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { scenes: 2, seed: 3, asymmetric: true, ..SynthSpec::default() };
    let s = synth_generate(&spec, dir.path()).unwrap();
    assert_eq!((s.distorted, s.pristine), (48, 2));
    let asym: Vec<_> = s.records.iter().filter(|r| r.left_path.to_string_lossy().ends_with("a_L.ppm")).collect();
    assert_eq!(asym.len(), 24);
    for r in asym {
        assert_eq!(r.score, synthetic_score(r.level - 1, true));
    }
}

#[test]
fn score_formula_is_monotone() {
    assert_eq!(synthetic_score(0, false), 100.0);
    let ladder: Vec<f64> = (0..=4).flat_map(|l| [synthetic_score(l, false), synthetic_score(l, true)]).collect();
    assert!(ladder.windows(2).all(|w| w[0] > w[1]), "{ladder:?}");
    assert!(ladder.iter().all(|s| (0.0..=100.0).contains(s)));
}

#[test]
fn ten_scenes_ten_folds_test_two_scenes_each() {
    let recs: Vec<ManifestRecord> = (0..40)
        .map(|i| ManifestRecord { scene_id: format!("s{}", i % 10), ..record() })
        .collect();
    let folds = kfold_split(&recs, 10, 0.8, 5, SplitMode::Scene).unwrap();
    assert_eq!(folds.len(), 10);
    for f in &folds {
        let scenes: BTreeSet<&str> = f.test.iter().map(|&i| recs[i].scene_id.as_str()).collect();
        assert_eq!(scenes.len(), 2);
        assert_eq!(f.test.len(), 8);
    }
    assert_eq!(folds, kfold_split(&recs, 10, 0.8, 5, SplitMode::Scene).unwrap());
    assert_ne!(folds, kfold_split(&recs, 10, 0.8, 6, SplitMode::Scene).unwrap());
}

#[test]
fn too_few_scenes_is_an_error() {
    let recs = vec![record(), record()];
    assert!(kfold_split(&recs, 2, 0.8, 0, SplitMode::Scene).is_err());
}
