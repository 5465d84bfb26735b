mod common;

use ndarray::{s, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saunet::augmentation::{augment, AugmentationConfig};
use saunet::metrics::{avd, connected_components_3d, dice, evaluate_case, lesion_f1, Connectivity, MetricsConfig};
use saunet::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use saunet::phantom::{generate, PhantomConfig};
use saunet::preprocessing::{normalize_intensity, slice_z, unslice_z, CanonicalGrid, PipelineConfig};
use saunet::volume_io::{load_mask, load_volume, save_mask, save_volume, LabelMask, Volume};

fn shape3() -> impl Strategy<Value = [usize; 3]> {
    (1usize..9, 1usize..9, 1usize..6).prop_map(|(a, b, c)| [a, b, c])
}

fn mask_pair() -> impl Strategy<Value = (Array3<u8>, Array3<u8>)> {
    (shape3(), any::<u64>(), 0.0f64..0.6, 0.0f64..0.6).prop_map(|(shape, seed, dp, dg)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (common::random_mask(&mut rng, shape, dp), common::random_mask(&mut rng, shape, dg))
    })
}

fn labels(shape: [usize; 3], seed: u64) -> Array3<u8> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn(shape, |_| rng.random_range(0..=2u8))
}

const CONNS: [u8; 3] = [6, 18, 26];

fn conn(n: u8) -> Connectivity {
    Connectivity::try_from(n).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_oracles((p, g) in mask_pair()) {
        prop_assert_eq!(dice(p.view(), g.view(), None).unwrap(), common::oracle_dice(&p, &g));
        match common::oracle_avd(&p, &g) {
            Some(want) => prop_assert!((avd(p.view(), g.view(), None).unwrap() - want).abs() <= 1e-12),
            None => prop_assert!(avd(p.view(), g.view(), None).is_err()),
        }
        for n in CONNS {
            let f = lesion_f1(p.view(), g.view(), conn(n)).unwrap();
            let (f1, nt, nd, nf) = common::oracle_f1(&p, &g, n);
            prop_assert_eq!((f.f1, f.n_truth, f.n_detected, f.n_false), (f1, nt, nd, nf));
        }
    }

    #[test]
    fn dice_symmetric_and_bounded((p, g) in mask_pair()) {
        let a = dice(p.view(), g.view(), None).unwrap();
        prop_assert_eq!(a, dice(g.view(), p.view(), None).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        if let Ok(v) = avd(p.view(), g.view(), None) {
            prop_assert!(v >= 0.0);
        }
        for n in CONNS {
            let f = lesion_f1(p.view(), g.view(), conn(n)).unwrap().f1;
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn component_count_non_increasing_with_connectivity((p, _) in mask_pair()) {
        let counts: Vec<usize> = CONNS.iter().map(|&n| connected_components_3d(p.view(), conn(n)).1).collect();
        prop_assert!(counts[0] >= counts[1] && counts[1] >= counts[2], "{:?}", counts);
        prop_assert_eq!(counts[2], common::oracle_components(&p, 26).len());
    }

    #[test]
    fn ignored_voxels_do_not_affect_metrics(shape in shape3(), seed in any::<u64>()) {
        let truth = LabelMask::new(labels(shape, seed)).unwrap();
        let pred = LabelMask::new(labels(shape, seed ^ 1).mapv(|v| u8::from(v == 1))).unwrap();
        let cfg = MetricsConfig::default();
        let base = evaluate_case("c", "s", &pred, &truth, &cfg).ok();
        let flipped = LabelMask::new(ndarray::Zip::from(&pred.data).and(&truth.data).map_collect(|&p, &t| if t == 2 { 1 - p } else { p })).unwrap();
        prop_assert_eq!(base, evaluate_case("c", "s", &flipped, &truth, &cfg).ok());
    }

    #[test]
    fn slices_partition_depth(h in 1usize..6, w in 1usize..6, depth in 1usize..5, chunks in 1usize..5, seed in any::<u64>()) {
        let grid = CanonicalGrid { shape: [h, w, depth * chunks], chunks };
        let a = labels(grid.shape, seed);
        let parts = slice_z(&a, &grid).unwrap();
        prop_assert_eq!(parts.len(), chunks);
        for (i, part) in parts.iter().enumerate() {
            prop_assert_eq!(part, &a.slice(s![.., .., i * depth..(i + 1) * depth]).to_owned());
        }
        prop_assert_eq!(unslice_z(&parts, &grid).unwrap(), a);
    }

    #[test]
    fn normalization_is_idempotent(shape in shape3(), seed in any::<u64>(), offset in -50.0f32..50.0, scale in 0.1f32..100.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn(shape, |_| if rng.random_bool(0.2) { 0.0 } else { offset + scale * rng.random_range(-1.0f32..1.0) });
        let v = Volume::new(data, [1.0, 1.0, 3.0]).unwrap();
        let once = normalize_intensity(&v);
        let twice = normalize_intensity(&once);
        for (a, b) in once.data.iter().zip(&twice.data) {
            prop_assert!((a - b).abs() <= 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn augmentation_keeps_labels_and_determinism(seed in any::<u64>(), square in any::<bool>()) {
        use rand::Rng;
        let shape = if square { [16, 16, 3] } else { [16, 12, 3] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Array3::from_shape_fn(shape, |_| rng.random_range(0.0f32..1.0));
        let mask = labels(shape, seed);
        let cfg = AugmentationConfig::default();
        let (a1, m1) = augment(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a2, m2) = augment(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(m1.iter().all(|&v| v <= 2));
        prop_assert_eq!(&m1, &m2);
        prop_assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));

        let (a, m) = augment(&img, &mask, &AugmentationConfig::disabled(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(a.iter().zip(&img).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(m, mask);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn volume_files_round_trip(shape in shape3(), seed in any::<u64>(), sz in 0.5f32..6.0, gz in any::<bool>()) {
        use rand::Rng;
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn(shape, |_| rng.random_range(-1e4f32..1e4));
        let v = Volume::new(data, [0.9, 1.1, sz]).unwrap();
        let m = LabelMask::with_spacing(labels(shape, seed), v.spacing).unwrap();
        let ext = if gz { "nii.gz" } else { "nii" };
        for (vp, mp) in [(dir.path().join("v.raw"), dir.path().join("m.raw")), (dir.path().join(format!("v.{ext}")), dir.path().join(format!("m.{ext}")))] {
            save_volume(&v, &vp).unwrap();
            save_mask(&m, &mp).unwrap();
            let v2 = load_volume(&vp).unwrap();
            prop_assert!(v2.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(v2.spacing, v.spacing);
            let m2 = load_mask(&mp).unwrap();
            prop_assert_eq!(&m2.data, &m.data);
            prop_assert_eq!(m2.spacing, m.spacing);
        }
    }

    #[test]
    fn phantom_contract(seed in 0u64..1000, label2 in any::<bool>()) {
        let case = generate(&PhantomConfig { include_label2: label2, seed, ..PhantomConfig::default() }).unwrap();
        let truth = case.truth.unwrap();
        let top = if label2 { 2 } else { 1 };
        prop_assert!(truth.data.iter().all(|&v| v <= top));
        let (mut lesion, mut nl, mut bg, mut nb) = (0.0f64, 0usize, 0.0f64, 0usize);
        for (&x, &t) in case.image.data.iter().zip(&truth.data) {
            match t {
                1 => { lesion += x as f64; nl += 1; }
                0 if x != 0.0 => { bg += x as f64; nb += 1; }
                _ => {}
            }
        }
        prop_assume!(nl > 0);
        prop_assert!(lesion / nl as f64 > bg / nb as f64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), sam in any::<bool>(), aspp in any::<bool>()) {
        let cfg = ModelConfig {
            base_channels: 4,
            levels: 2,
            gn_groups: 2,
            aspp_rates: vec![[1, 1, 1], [2, 2, 1]],
            use_sam: sam,
            use_aspp: aspp,
            seed,
            ..ModelConfig::default()
        };
        let model = Model::<f32>::build(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&path, &model, &PipelineConfig::default(), 17).unwrap();
        let back = load_checkpoint(&path).unwrap();
        prop_assert_eq!(back.manifest.step, 17);
        prop_assert_eq!(&back.manifest.model, &cfg);
        for (a, b) in model.params.entries().iter().zip(back.model.params.entries()) {
            prop_assert_eq!(&a.path, &b.path);
            prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
