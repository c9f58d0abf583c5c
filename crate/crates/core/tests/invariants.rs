//! Property tests for the algebraic invariants of the augmentation and
//! loss primitives.

use proptest::prelude::*;

use invar::attention::{attention_loss, binarize, dice, soft_dice, AttentionLossMode, AttentionMap, FeatureMap};
use invar::localaug::{glt, sample_plan, AugmentationPlan, PlanConfig};
use invar::prototypes::{explicit_loss, implicit_loss, PredictedDist, PrototypeRegistry, RoiFeature};
use invar::raster::{disjointify, extract_object, BoxRect, GrayMask, ObjectSet, Raster};
use invar::spectral::{dft2, global_transform};

fn raster_strategy(max: usize) -> impl Strategy<Value = Raster> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.0..=1.0f64, h * w * 3)
            .prop_map(move |data| Raster::from_data(h, w, data).unwrap())
    })
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = GrayMask> {
    proptest::collection::vec(0..=1u8, h * w).prop_map(move |data| GrayMask::from_data(h, w, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_complement_partitions_exactly(x in raster_strategy(12)) {
        let m = GrayMask::from_fn(x.height(), x.width(), |y, xx| (y * 31 + xx * 7) % 3 == 0);
        let a = extract_object(&x, &m).unwrap();
        let b = extract_object(&x, &m.complement()).unwrap();
        for i in 0..x.data().len() {
            prop_assert_eq!(a.data()[i] + b.data()[i], x.data()[i]);
        }
    }

    #[test]
    fn quantized_rasters_round_trip(x in raster_strategy(8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ppm");
        invar::raster::save_image(&x, &path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let loaded = invar::raster::load_image(&path).unwrap();
        invar::raster::save_image(&loaded, &path).unwrap();
        prop_assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn disjointify_preserves_union_and_disjointness(
        masks in (2..=4usize).prop_flat_map(|n| proptest::collection::vec(mask_strategy(9, 9), n))
    ) {
        let n = masks.len();
        let boxes = vec![BoxRect::new(0, 0, 9, 9); n];
        let objs = ObjectSet::from_parts(masks, boxes, vec![0; n]).unwrap();
        let out = disjointify(&objs);
        let union_in = objs.union_mask(9, 9).unwrap();
        let union_out = out.union_mask(9, 9).unwrap();
        prop_assert_eq!(union_in, union_out);
        for i in 0..n {
            for j in i + 1..n {
                prop_assert!(out.masks()[i].is_disjoint(&out.masks()[j]));
            }
        }
    }

    #[test]
    fn parseval_on_random_grids(data in proptest::collection::vec(0.0..=1.0f64, 16 * 16)) {
        let s = dft2(&data, 16, 16).unwrap();
        let spatial: f64 = data.iter().map(|v| v * v).sum();
        let spectral: f64 = s.data().iter().map(|c| c.norm_sqr()).sum::<f64>() / 256.0;
        // relative check; an all-zero grid satisfies it trivially
        if spatial > 1e-12 {
            prop_assert!((spatial - spectral).abs() / spatial <= 1e-4);
        } else {
            prop_assert!(spectral.abs() <= 1e-12);
        }
    }

    #[test]
    fn global_transform_stays_real_and_in_range(seed in any::<u64>()) {
        let x = Raster::from_fn(12, 10, |y, xx, c| ((y * 5 + xx * 3 + c) % 9) as f64 / 9.0);
        // idft2 inside errors if the imaginary residue exceeds 1e-5
        let out = global_transform(&x, 2.0, seed).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn glt_outputs_stay_in_range_and_replay(seed in any::<u64>()) {
        let x = Raster::from_fn(16, 16, |y, xx, c| ((y * 7 + xx * 5 + c * 3) % 11) as f64 / 11.0);
        let m1 = GrayMask::from_fn(16, 16, |y, xx| y < 6 && xx < 6);
        let m2 = GrayMask::from_fn(16, 16, |y, xx| y >= 9 && xx >= 9);
        let objs = ObjectSet::from_parts(
            vec![m1.clone(), m2.clone()],
            vec![m1.bounding_box().unwrap(), m2.bounding_box().unwrap()],
            vec![0, 1],
        ).unwrap();
        let plan = sample_plan(seed, objs.boxes(), 16, 16, &PlanConfig { r_min: 1, r_max: 2, identity_background: false });
        let out = glt(&x, &objs, &plan).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let replay = AugmentationPlan::from_text(&plan.to_text()).unwrap();
        let replayed = glt(&x, &objs, &replay).unwrap();
        prop_assert_eq!(out.data(), replayed.data());
    }

    #[test]
    fn identity_plan_at_alpha_zero_is_identity(x in raster_strategy(10)) {
        let objs = ObjectSet::empty();
        let plan = AugmentationPlan::identity(0);
        let out = glt(&x, &objs, &plan).unwrap();
        prop_assert_eq!(out.data(), x.data());
    }

    #[test]
    fn dice_is_symmetric_and_bounded(
        a in proptest::collection::vec(0.0..=1.0f64, 24),
        b in proptest::collection::vec(0.0..=1.0f64, 24),
    ) {
        let am = AttentionMap::from_values(2, 3, 4, a).unwrap();
        let bm = AttentionMap::from_values(2, 3, 4, b).unwrap();
        let sa = binarize(&am, 0.5).unwrap();
        let sb = binarize(&bm, 0.5).unwrap();
        let d1 = dice(&sa, &sb).unwrap();
        let d2 = dice(&sb, &sa).unwrap();
        prop_assert_eq!(d1, d2);
        prop_assert!((0.0..1.0).contains(&d1));
    }

    #[test]
    fn soft_dice_equals_hard_on_binary_maps(bits in proptest::collection::vec(0..=1u8, 24)) {
        let values: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
        let am = AttentionMap::from_values(2, 3, 4, values).unwrap();
        let sig = binarize(&am, 0.5).unwrap();
        let soft = soft_dice(&am, &am).unwrap();
        let hard = dice(&sig, &sig).unwrap();
        prop_assert!((soft - hard).abs() < 1e-12);
    }

    #[test]
    fn attention_loss_invariant_under_channel_permutation(
        f0 in proptest::collection::vec(-3.0..3.0f64, 3 * 2 * 2),
        fk in proptest::collection::vec(-3.0..3.0f64, 3 * 2 * 2),
        mode_idx in 0..3usize,
    ) {
        let mode = [AttentionLossMode::DiceHard, AttentionLossMode::DiceSoft, AttentionLossMode::Mse][mode_idx];
        let perm = [2usize, 0, 1];
        let apply = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            for (dst, &src) in perm.iter().enumerate() {
                out[dst * 4..(dst + 1) * 4].copy_from_slice(&v[src * 4..(src + 1) * 4]);
            }
            out
        };
        let base = attention_loss(
            &FeatureMap::from_values(3, 2, 2, f0.clone()).unwrap(),
            &FeatureMap::from_values(3, 2, 2, fk.clone()).unwrap(),
            mode,
        ).unwrap();
        let permuted = attention_loss(
            &FeatureMap::from_values(3, 2, 2, apply(&f0)).unwrap(),
            &FeatureMap::from_values(3, 2, 2, apply(&fk)).unwrap(),
            mode,
        ).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(
        raw0 in proptest::collection::vec(1e-3..1.0f64, 5),
        rawk in proptest::collection::vec(1e-3..1.0f64, 5),
    ) {
        let norm = |raw: &[f64]| {
            let s: f64 = raw.iter().sum();
            PredictedDist::new(raw.iter().map(|v| v / s).collect()).unwrap()
        };
        let p = norm(&raw0);
        let q = norm(&rawk);
        prop_assert!(explicit_loss(&[p.clone()], &[q]).unwrap() >= 0.0);
        prop_assert!(explicit_loss(&[p.clone()], &[p]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn implicit_loss_scale_invariant(
        v0 in proptest::collection::vec(0.1..1.0f64, 6),
        vk in proptest::collection::vec(0.1..1.0f64, 6),
        scale0 in 0.1..10.0f64,
        scalek in 0.1..10.0f64,
    ) {
        let build = |a: &[f64], b: &[f64], s0: f64, s1: f64| {
            let mut reg = PrototypeRegistry::new(2, 3);
            reg.update(&RoiFeature { vector: a.iter().map(|v| v * s0).collect(), category: 0, confidence: 1.0 }).unwrap();
            reg.update(&RoiFeature { vector: b.iter().map(|v| v * s1).collect(), category: 1, confidence: 1.0 }).unwrap();
            reg
        };
        let base = implicit_loss(
            &build(&v0[..3], &v0[3..], 1.0, 1.0),
            &build(&vk[..3], &vk[3..], 1.0, 1.0),
            0.2,
        ).unwrap();
        let scaled = implicit_loss(
            &build(&v0[..3], &v0[3..], scale0, scalek),
            &build(&vk[..3], &vk[3..], scalek, scale0),
            0.2,
        ).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn registry_update_is_order_insensitive(
        samples in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 3), 1..40)
    ) {
        let mut fwd = PrototypeRegistry::new(1, 3);
        let mut rev = PrototypeRegistry::new(1, 3);
        for s in &samples {
            fwd.update(&RoiFeature { vector: s.clone(), category: 0, confidence: 1.0 }).unwrap();
        }
        for s in samples.iter().rev() {
            rev.update(&RoiFeature { vector: s.clone(), category: 0, confidence: 1.0 }).unwrap();
        }
        for d in 0..3 {
            prop_assert!((fwd.mean(0).unwrap()[d] - rev.mean(0).unwrap()[d]).abs() < 1e-6);
        }
    }
}
