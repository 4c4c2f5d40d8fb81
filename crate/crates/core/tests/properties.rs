use ccnn::cnn::{batch_gradient, encode_weights, decode_weights, init_params, HyperParams, LossKind};
use ccnn::estimator::{pool_average, pool_median};
use ccnn::evaluation::{angular_error_raw, summarize};
use ccnn::image::{
    cast_illuminant, compose_two_illuminants, correct_von_kries, decode_ppm16, encode_ppm16, Illuminant, LinearImage,
};
use ccnn::manifest::{DatasetManifest, ManifestEntry};
use ccnn::patch::{histogram_stretch, Patch};
use ccnn::statistics::{minkowski_estimate, minkowski_response, preset, EdgeFrameworkParams, MinkowskiNorm, Preset};
use proptest::prelude::*;

fn image(max_side: usize) -> impl Strategy<Value = LinearImage> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(w, h)| {
        prop::collection::vec(prop::array::uniform3(0.0..1.0f64), w * h)
            .prop_map(move |px| LinearImage::new(w, h, px).unwrap())
    })
}

fn illuminant() -> impl Strategy<Value = Illuminant> {
    prop::array::uniform3(0.05..1.0f64).prop_map(|v| Illuminant::normalize(v).unwrap())
}

fn unit_any() -> impl Strategy<Value = Illuminant> {
    prop::array::uniform3(0.0..1.0f64)
        .prop_filter("nonzero", |v| v.iter().any(|c| *c > 1e-3))
        .prop_map(|v| Illuminant::normalize(v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn von_kries_roundtrip(img in image(12), ill in illuminant()) {
        let back = correct_von_kries(&cast_illuminant(&img, &ill), &ill).unwrap().image;
        for (a, b) in back.pixels().iter().zip(img.pixels()) {
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn cast_scales_each_channel(img in image(8), ill in illuminant()) {
        let cast = cast_illuminant(&img, &ill);
        let i = ill.rgb();
        for (a, b) in cast.pixels().iter().zip(img.pixels()) {
            for c in 0..3 {
                prop_assert_eq!(a[c], b[c] * i[c]);
            }
        }
    }

    #[test]
    fn equal_halves_match_single_cast(img in image(10), ill in illuminant()) {
        prop_assume!(img.width() >= 2);
        let (two, _) = compose_two_illuminants(&img, &ill, &ill).unwrap();
        prop_assert_eq!(two, cast_illuminant(&img, &ill));
    }

    #[test]
    fn ppm_roundtrip_within_one_step(img in image(10)) {
        let back = decode_ppm16(&encode_ppm16(&img, Some("prop"))).unwrap();
        for (a, b) in back.pixels().iter().zip(img.pixels()) {
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() <= 1.0 / 65535.0 + 1e-15);
            }
        }
    }

    #[test]
    fn estimates_ignore_exposure(img in image(12), alpha in 0.05..20.0f64, k in 0usize..6) {
        let params = Preset::ALL[k].params();
        let a = minkowski_estimate(&img, &params);
        let b = minkowski_estimate(&img.scaled(alpha).unwrap(), &params);
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!(angular_error_raw(a.rgb(), b.rgb()).unwrap() < 1e-6);
        }
    }

    #[test]
    fn max_dominates_finite_norms(img in image(10), p in 0.5..12.0f64) {
        let wp = minkowski_response(&img, &preset("WP").unwrap()).unwrap();
        let fin = minkowski_response(&img, &EdgeFrameworkParams::new(0, MinkowskiNorm::Finite(p), 0.0).unwrap()).unwrap();
        for c in 0..3 {
            prop_assert!(wp[c] >= fin[c] * (1.0 - 1e-12));
        }
    }

    #[test]
    fn gray_world_is_normalized_mean(img in image(10)) {
        let n = img.pixels().len() as f64;
        let mean = [0, 1, 2].map(|c| img.pixels().iter().map(|p| p[c]).sum::<f64>() / n);
        let est = minkowski_estimate(&img, &preset("GW").unwrap()).unwrap();
        prop_assert_eq!(est, Illuminant::normalize(mean).unwrap());
    }

    #[test]
    fn self_consistency_after_correction(img in image(12), ill in illuminant(), k in 0usize..3) {
        // Zero-order presets: correcting by the estimate leaves a neutral scene.
        let params = [Preset::GW, Preset::WP, Preset::SoG][k].params();
        let cast = cast_illuminant(&img, &ill);
        if let Ok(est) = minkowski_estimate(&cast, &params) {
            prop_assume!(est.is_strictly_positive());
            let corrected = correct_von_kries(&cast, &est).unwrap().image;
            let again = minkowski_estimate(&corrected, &params).unwrap();
            prop_assert!(angular_error_raw(again.rgb(), [1.0; 3]).unwrap() < 0.2);
        }
    }

    #[test]
    fn median_returns_majority(e in unit_any(), others in prop::collection::vec(unit_any(), 0..6), rot in 0usize..13) {
        let k = others.len();
        let mut all = vec![e; k + 1];
        all.extend(others);
        let r = rot % all.len();
        all.rotate_left(r);
        prop_assert_eq!(pool_median(&all).unwrap(), e);
    }

    #[test]
    fn poolings_agree_on_identical(e in unit_any(), n in 1usize..10) {
        let all = vec![e; n];
        prop_assert_eq!(pool_average(&all).unwrap(), pool_median(&all).unwrap());
        prop_assert_eq!(pool_median(&all).unwrap(), e);
    }

    #[test]
    fn angular_error_symmetric_and_scale_free(
        a in prop::array::uniform3(0.01..1.0f64),
        b in prop::array::uniform3(0.01..1.0f64),
        s in 1e-3..1e3f64,
        t in 1e-3..1e3f64,
    ) {
        let e = angular_error_raw(a, b).unwrap();
        prop_assert_eq!(e, angular_error_raw(b, a).unwrap());
        let scaled = angular_error_raw(a.map(|v| v * s), b.map(|v| v * t)).unwrap();
        prop_assert!((e - scaled).abs() <= 1e-12);
        prop_assert!((0.0..=180.0).contains(&e));
    }

    #[test]
    fn summary_ordered_and_permutation_free(mut v in prop::collection::vec(0.0..180.0f64, 1..60), seed in any::<u64>()) {
        let s = summarize(&v).unwrap();
        prop_assert!(s.min <= s.prc10 && s.prc10 <= s.median && s.median <= s.prc90 && s.prc90 <= s.max);
        prop_assert!(s.min <= s.mean && s.mean <= s.max && s.min >= 0.0);
        let n = v.len();
        for i in 0..n {
            v.swap(i, (seed as usize).wrapping_add(i * 7919) % n);
        }
        prop_assert_eq!(summarize(&v).unwrap(), s);
    }

    #[test]
    fn stretched_patch_spans_unit_range(img in image(8)) {
        let size = img.width().min(img.height());
        let p = histogram_stretch(&Patch::from_image(&img, (0, 0), size));
        if !p.degenerate {
            let lo = p.data.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = p.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!((lo, hi), (0.0, 1.0));
        }
    }

    #[test]
    fn manifest_roundtrip(
        gts in prop::collection::vec(prop::array::uniform3(0.01..1.0f64), 1..6),
        rects in prop::collection::vec(prop::array::uniform4(0usize..50), 0..3),
    ) {
        let entries = gts.iter().enumerate().map(|(i, g)| ManifestEntry {
            id: format!("i{i}"),
            image_path: format!("i{i}.ppm"),
            ground_truth: *g,
            fold: i % 3,
            exclusion_rects: rects.clone(),
            gt_map_path: (i % 2 == 1).then(|| format!("i{i}_gt.ppm")),
        }).collect();
        let m = DatasetManifest::new(entries);
        prop_assert_eq!(DatasetManifest::from_json(&m.to_json()).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weights_reencode_bit_exact(seed in any::<u64>(), k in 1usize..6, h in 1usize..6) {
        let hyper = HyperParams { patch_size: 8, kernel_count: k, pool_size: 4, fc_units: h, ..HyperParams::default() };
        let p = decode_weights(&encode_weights(&init_params(&hyper, seed).unwrap())).unwrap();
        let bytes = encode_weights(&p);
        prop_assert_eq!(&decode_weights(&bytes).unwrap(), &p);
        prop_assert_eq!(encode_weights(&decode_weights(&bytes).unwrap()), bytes);
    }

    #[test]
    fn batch_gradient_is_repeatable(seed in any::<u64>(), n in 1usize..20) {
        let hyper = HyperParams { patch_size: 8, kernel_count: 3, pool_size: 4, fc_units: 4, ..HyperParams::default() };
        let params = init_params(&hyper, seed).unwrap();
        let gt = Illuminant::normalize([0.3, 0.5, 0.4]).unwrap();
        let patches: Vec<Patch> = (0..n).map(|i| {
            let img = LinearImage::from_fn(8, 8, |x, y| {
                let t = (seed % 1000) as f64 + (i * 64 + y * 8 + x) as f64;
                [(t * 0.31).sin().abs(), (t * 0.17).cos().abs(), (t * 0.07).sin().abs()]
            }).unwrap();
            histogram_stretch(&Patch::from_image(&img, (0, 0), 8))
        }).collect();
        let batch: Vec<_> = patches.iter().map(|p| (p, gt)).collect();
        let a = batch_gradient(&params, &batch, LossKind::Euclidean).unwrap();
        let b = batch_gradient(&params, &batch, LossKind::Euclidean).unwrap();
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
    }
}
