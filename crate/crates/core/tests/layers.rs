mod support;

use proptest::prelude::*;
use saep::layers::{
    build_report, build_report_from_tensors, inter_layer_similarity, intra_layer_similarity,
    select_layers, v_shaped_report,
};
use saep::npy::tensor_to_npy;
use saep::{Rng, Tensor};
use support::uniform;

#[test]
fn intra_matches_pairwise_mean() {
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let n = 2 + rng.below(63);
        let d = 1 + rng.below(32);
        let t = uniform(&mut rng, &[n, d]);
        let fast = intra_layer_similarity(&t).unwrap();
        assert!(
            (fast - support::pairwise_intra(&t)).abs() <= 1e-6,
            "seed {seed} n {n}"
        );
    }
}

#[test]
fn identical_rows_give_one() {
    let row = [0.3f32, -1.2, 2.5, 0.01];
    let t = Tensor::from_fn(&[16, 4], |i| row[i % 4]).unwrap();
    assert!((intra_layer_similarity(&t).unwrap() - 1.0).abs() <= 1e-6);
}

#[test]
fn inter_matches_rowwise_oracle() {
    let mut rng = Rng::new(2);
    let a = uniform(&mut rng, &[30, 7]);
    let b = uniform(&mut rng, &[30, 7]);
    let got = inter_layer_similarity(&a, &b).unwrap();
    assert!((got - support::rowwise_inter(&a, &b)).abs() <= 1e-9);
    assert!((inter_layer_similarity(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
}

#[test]
fn degenerate_inputs_are_rejected() {
    let one = Tensor::full(&[1, 4], 1.0).unwrap();
    assert_eq!(intra_layer_similarity(&one).unwrap_err().code(), "E_ARG");
    let zero_row = Tensor::from_fn(&[3, 2], |i| if i < 2 { 0.0 } else { 1.0 }).unwrap();
    assert_eq!(
        intra_layer_similarity(&zero_row).unwrap_err().code(),
        "E_NUMERIC"
    );
}

fn synthetic_images(seed: u64, images: usize, layers: usize) -> Vec<Vec<Tensor>> {
    let mut rng = Rng::new(seed);
    (0..images)
        .map(|_| (0..layers).map(|_| uniform(&mut rng, &[9, 5])).collect())
        .collect()
}

#[test]
fn report_averages_per_image_statistics() {
    let images = synthetic_images(3, 3, 4);
    let report = build_report_from_tensors(&images).unwrap();
    assert_eq!((report.num_layers, report.images_averaged), (4, 3));
    for l in 0..4 {
        let want = images
            .iter()
            .map(|img| support::pairwise_intra(&img[l]))
            .sum::<f64>()
            / 3.0;
        assert!((report.intra[l] - want).abs() <= 1e-9);
    }
    for l in 0..3 {
        let want = images
            .iter()
            .map(|img| support::rowwise_inter(&img[l], &img[l + 1]))
            .sum::<f64>()
            / 3.0;
        assert!((report.inter[l] - want).abs() <= 1e-9);
    }
    // averaging copies of one image changes nothing
    let copies = vec![images[0].clone(); 4];
    let single = build_report_from_tensors(&images[..1]).unwrap();
    let repeated = build_report_from_tensors(&copies).unwrap();
    for (a, b) in single.intra.iter().zip(&repeated.intra) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn report_from_dump_directory() {
    let dir = tempfile::tempdir().unwrap();
    let images = synthetic_images(8, 2, 3);
    for (i, layers) in images.iter().enumerate() {
        let sub = dir.path().join(format!("img{i}"));
        std::fs::create_dir(&sub).unwrap();
        for (l, t) in layers.iter().enumerate() {
            // with a leading CLS row that must be dropped
            let mut data = vec![9.0f32; 5];
            data.extend_from_slice(t.data());
            tensor_to_npy(
                &Tensor::new(vec![10, 5], data).unwrap(),
                sub.join(format!("layer_{:02}.npy", l + 1)),
            )
            .unwrap();
        }
    }
    let from_disk = build_report(dir.path()).unwrap();
    let in_memory = build_report_from_tensors(&images).unwrap();
    assert_eq!(from_disk, in_memory);
}

#[test]
fn dump_with_missing_layer_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("img0");
    std::fs::create_dir(&sub).unwrap();
    let t = Tensor::from_fn(&[4, 3], |i| i as f32 + 1.0).unwrap();
    tensor_to_npy(&t, sub.join("layer_01.npy")).unwrap();
    tensor_to_npy(&t, sub.join("layer_03.npy")).unwrap();
    assert_eq!(build_report(dir.path()).unwrap_err().code(), "E_FORMAT");
}

#[test]
fn selection_on_reference_curves() {
    let report = v_shaped_report(24, 10, 21);
    let sel = select_layers(&report, 5, Some(23)).unwrap();
    assert_eq!(sel.selected, vec![10, 14, 18, 21, 23]);
    assert_eq!((sel.anchor_low, sel.pivot), (10, 21));
    let three = select_layers(&report, 3, Some(23)).unwrap();
    assert_eq!(three.selected, vec![10, 21, 23]);
    assert_eq!(
        select_layers(&report, 2, Some(23)).unwrap_err().code(),
        "E_ARG"
    );
}

proptest! {
    #[test]
    fn intra_is_invariant_to_row_order_and_scale(seed in any::<u64>(), scale in 0.01f32..100.0) {
        let mut rng = Rng::new(seed);
        let t = uniform(&mut rng, &[12, 6]);
        let mut order: Vec<usize> = (0..12).collect();
        rng.shuffle(&mut order);
        let permuted = Tensor::from_fn(&[12, 6], |i| t.data()[order[i / 6] * 6 + i % 6]).unwrap();
        let base = intra_layer_similarity(&t).unwrap();
        prop_assert!((intra_layer_similarity(&permuted).unwrap() - base).abs() <= 1e-6);
        prop_assert!((intra_layer_similarity(&t.scale(scale)).unwrap() - base).abs() <= 1e-6);
    }

    #[test]
    fn selection_ignores_a_constant_shift(delta in -0.5f64..0.5) {
        let report = v_shaped_report(24, 10, 21);
        let a = select_layers(&report, 5, Some(23)).unwrap();
        let b = select_layers(&report.shifted(delta), 5, Some(23)).unwrap();
        prop_assert_eq!(a, b);
    }
}
