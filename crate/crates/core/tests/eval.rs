mod common;

use asymgan::data::{make_dataset, ClassMap, Dataset, DatasetCounts, SceneSpec};
use asymgan::eval::*;
use asymgan::infer::IdentityTranslator;
use asymgan::model::Mode;
use asymgan::nets::build_feature_extractor;
use asymgan::Tensor;
use common::{rng, seg_oracle, tiny_bundle, RealPhotos};
use proptest::prelude::*;
use rand::Rng;

fn map(h: usize, w: usize, data: Vec<u8>) -> ClassMap {
    ClassMap::new(h, w, data).unwrap()
}

#[test]
fn hand_example() {
    let gt = map(2, 2, vec![0, 1, 0, 1]);
    let pred = map(2, 2, vec![0, 1, 1, 1]);
    let m = seg_metrics(&pred, &gt, 2).unwrap();
    assert_eq!(m.per_pixel_acc, 0.75);
    assert_eq!(m.per_class_recall, vec![Some(0.5), Some(1.0)]);
    assert_eq!(m.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
    assert_eq!(m.per_class_acc, 0.75);
    assert!((m.class_iou - 0.583_333_333_333).abs() < 1e-9);
}

#[test]
fn perfect_and_constant_predictions() {
    let gt = map(2, 2, vec![0, 1, 0, 1]);
    let m = seg_metrics(&gt, &gt, 3).unwrap();
    assert_eq!((m.per_pixel_acc, m.per_class_acc, m.class_iou), (1.0, 1.0, 1.0));
    assert_eq!(m.per_class_recall[2], None);
    let m = seg_metrics(&map(2, 2, vec![1; 4]), &gt, 2).unwrap();
    assert_eq!(m.per_pixel_acc, 0.5);
}

#[test]
fn argument_errors() {
    let a = map(2, 2, vec![0; 4]);
    assert!(seg_metrics(&a, &map(1, 4, vec![0; 4]), 2).is_err());
    assert!(seg_metrics(&map(2, 2, vec![0, 0, 0, 5]), &a, 2).is_err());
}

#[test]
fn matches_loop_oracle_on_random_maps() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let k = r.random_range(1..=6);
        let gt = map(8, 8, (0..64).map(|_| r.random_range(0..k) as u8).collect());
        let pred = map(8, 8, (0..64).map(|_| r.random_range(0..k) as u8).collect());
        assert_eq!(seg_metrics(&pred, &gt, k).unwrap(), seg_oracle(&pred, &gt, k));
    }
}

fn dataset(dir: &std::path::Path) -> Dataset<f32> {
    let counts = DatasetCounts {
        train_x: 40,
        train_y: 4,
        val: 8,
    };
    make_dataset(&SceneSpec::with_size(32), counts, 2, dir).unwrap();
    Dataset::open(dir).unwrap()
}

#[test]
fn proxy_segmenter_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = ProxyConfig::default();
    let seg = train_proxy_segmenter(&data, &cfg).unwrap();
    let again = train_proxy_segmenter(&data, &cfg).unwrap();
    assert_eq!(seg.ceiling, again.ceiling);
    assert_eq!(seg.net.params().values(), again.net.params().values());

    // Real photos in place of generated ones give the ceiling exactly.
    let real = fcn_score(&seg, &RealPhotos(&data), &data, 0).unwrap();
    assert_eq!(real, seg.ceiling);
    assert!(seg.ceiling.per_pixel_acc > 0.5, "{:?}", seg.ceiling);
}

#[test]
fn proxy_ceiling_on_default_dataset() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(&SceneSpec::default(), DatasetCounts::default(), 7, dir.path()).unwrap();
    let data = Dataset::<f32>::open(dir.path()).unwrap();
    let seg = train_proxy_segmenter(&data, &ProxyConfig::default()).unwrap();
    assert!(seg.ceiling.per_pixel_acc >= 0.85, "{:?}", seg.ceiling);
}

#[test]
fn photo_to_label_on_identity_labels_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = dataset(dir.path());
    for pair in &mut data.val {
        pair.photo = pair.label.clone();
    }
    let m = eval_photo_to_label(&IdentityTranslator, &data).unwrap();
    assert_eq!((m.per_pixel_acc, m.per_class_acc, m.class_iou), (1.0, 1.0, 1.0));
    data.val.clear();
    assert!(eval_photo_to_label(&IdentityTranslator, &data).is_err());
}

#[test]
fn diversity_definitions() {
    let phi = build_feature_extractor::<f64>();
    let mut r = rng(2);
    let a = Tensor::<f64>::rand_uniform([1, 3, 16, 16], -1.0, 1.0, &mut r);
    let b = Tensor::<f64>::rand_uniform([1, 3, 16, 16], -1.0, 1.0, &mut r);
    let c = Tensor::<f64>::rand_uniform([1, 3, 16, 16], -1.0, 1.0, &mut r);
    let (l1, _) = sample_diversity(&phi, &[a.clone(), b.clone()]).unwrap();
    assert_eq!(l1, a.mean_abs_diff(&b).unwrap());
    assert_eq!(sample_diversity(&phi, &[a.clone(), a.clone(), a.clone()]).unwrap(), (0.0, 0.0));
    let (p1, f1) = sample_diversity(&phi, &[a.clone(), b.clone(), c.clone()]).unwrap();
    let (p2, f2) = sample_diversity(&phi, &[c, a, b]).unwrap();
    assert!((p1 - p2).abs() < 1e-12 && (f1 - f2).abs() < 1e-12);
    assert!(sample_diversity(&phi, &[Tensor::zeros([1, 3, 4, 4])]).is_err());
}

#[test]
fn diversity_of_code_free_model_is_zero() {
    let phi = build_feature_extractor::<f64>();
    let labels = vec![Tensor::<f64>::rand_uniform([1, 3, 16, 16], -1.0, 1.0, &mut rng(3))];
    let base = tiny_bundle(Mode::BaselineCyclegan, 16, 1);
    let rep = diversity_score(&base, &phi, &labels, 4, 0).unwrap();
    assert_eq!((rep.mean_pixel_l1, rep.mean_feature_l2), (0.0, 0.0));
    assert!(diversity_score(&base, &phi, &labels, 1, 0).is_err());
    // A fresh ext bundle starts with identity modulation, so codes do not
    // matter yet either.
    let ext = tiny_bundle(Mode::AsymExt, 16, 1);
    let rep = diversity_score(&ext, &phi, &labels, 3, 0).unwrap();
    assert_eq!(rep.mean_pixel_l1, 0.0);
    // Concatenated spatial codes do change the output at initialization.
    let mid = tiny_bundle(Mode::AsymNoExt, 16, 1);
    let rep = diversity_score(&mid, &phi, &labels, 3, 0).unwrap();
    assert!(rep.mean_pixel_l1 > 0.0 && rep.per_input.len() == 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_never_exceeds_recall(seed in any::<u64>(), k in 1usize..6) {
        let mut r = rng(seed);
        let gt = map(6, 6, (0..36).map(|_| r.random_range(0..k) as u8).collect());
        let pred = map(6, 6, (0..36).map(|_| r.random_range(0..k) as u8).collect());
        let m = seg_metrics(&pred, &gt, k).unwrap();
        for (iou, rec) in m.per_class_iou.iter().zip(&m.per_class_recall) {
            if let (Some(i), Some(r)) = (iou, rec) {
                prop_assert!(i <= r);
            }
        }
        for v in [m.per_pixel_acc, m.per_class_acc, m.class_iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
