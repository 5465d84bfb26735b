//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any fails. A substring argument runs only matching criteria.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saunet::augmentation::{AugmentDraw, AugmentationConfig, EnabledTransforms};
use saunet::cli::{cmd_ablate, ABLATION_CSV_HEADER};
use saunet::metrics::{avd, dice, evaluate_case, lesion_f1, Connectivity, MetricsConfig};
use saunet::model::{predict_case, spatial_attention_3d, LayerKind, Model, ModelConfig, NormKind};
use saunet::phantom::{generate_dataset, generate_with_info, PhantomConfig};
use saunet::preprocessing::{from_canonical, slice_z, to_canonical, training_target, unslice_z, CanonicalGrid, PipelineConfig};
use saunet::training::{combined_loss, combined_loss_grad, train, TrainConfig};
use saunet::volume_io::{save_dataset, LabelMask, Volume, CHALLENGE_SCANNERS};
use saunet::Tensor5;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Check); 10] = [
        ("metric oracle equivalence", metric_oracles),
        ("spatial attention conformance", attention_conformance),
        ("gradient check", gradient_check),
        ("shape and anisotropy contract", shape_contract),
        ("round-trip geometry", round_trip_geometry),
        ("overfit capability", overfit),
        ("descent and determinism", descent_and_determinism),
        ("ablation structure", ablation_structure),
        ("augmentation suite", augmentation_suite),
        ("ignore-mask exactness", ignore_mask_exactness),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(t0: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let el = t0.elapsed();
    ensure(el < limit, || format!("{what} took {el:?}, limit {limit:?}"))
}

fn metric_oracles() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let shape = [16, 16, 8];
    let mut worst = 0.0f64;
    for i in 0..200 {
        let (p, g) = if i % 2 == 0 {
            let d = rng.random_range(0.0..0.35);
            (common::random_mask(&mut rng, shape, d), common::random_mask(&mut rng, shape, d))
        } else {
            let (a, b) = (rng.random_range(0..8), rng.random_range(0..8));
            (common::random_blobs(&mut rng, shape, a), common::random_blobs(&mut rng, shape, b))
        };
        let d = dice(p.view(), g.view(), None).map_err(|e| e.to_string())?;
        let od = common::oracle_dice(&p, &g);
        worst = worst.max((d - od).abs());
        ensure((d - od).abs() <= 1e-12, || format!("pair {i}: dice {d} vs oracle {od}"))?;
        match (avd(p.view(), g.view(), None), common::oracle_avd(&p, &g)) {
            (Ok(a), Some(oa)) => {
                worst = worst.max((a - oa).abs());
                ensure((a - oa).abs() <= 1e-12, || format!("pair {i}: avd {a} vs oracle {oa}"))?;
            }
            (Err(_), None) => {}
            (a, oa) => return Err(format!("pair {i}: avd {a:?} vs oracle {oa:?}")),
        }
        for conn in [6u8, 18, 26] {
            let f = lesion_f1(p.view(), g.view(), Connectivity::try_from(conn).unwrap()).map_err(|e| e.to_string())?;
            let (of1, nt, nd, nf) = common::oracle_f1(&p, &g, conn);
            worst = worst.max((f.f1 - of1).abs());
            ensure(
                (f.f1 - of1).abs() <= 1e-12 && (f.n_truth, f.n_detected, f.n_false) == (nt, nd, nf),
                || format!("pair {i}, {conn}-conn: {f:?} vs oracle ({of1}, {nt}, {nd}, {nf})"),
            )?;
        }
    }
    within(t0, Duration::from_secs(30), "200 pairs")?;
    Ok(format!("200 pairs, max |diff| {worst:.1e}, {:.2}s", t0.elapsed().as_secs_f64()))
}

fn attention_conformance() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kernel = [14, 14, 1];
    let taps = 14 * 14;
    let mut worst = 0.0f64;
    for i in 0..20 {
        let shape = [rng.random_range(1..=2), rng.random_range(6..=20), rng.random_range(6..=20), rng.random_range(1..=4), rng.random_range(1..=6)];
        let f = Tensor5::<f64>::from_fn(shape, |_| rng.random_range(-2.0..2.0));
        let w: Vec<f64> = (0..taps * 2).map(|_| rng.random_range(-0.3..0.3)).collect();
        let b = rng.random_range(-1.0..1.0);
        let out = spatial_attention_3d(&f, &w, b, kernel);
        let [n, h, wd, d, c] = shape;
        for s in 0..n {
            let m = common::oracle_attention(f.sample(s), [h, wd, d, c], &w, b, kernel);
            for v in 0..h * wd * d {
                let got = out.attention.sample(s)[v];
                ensure(got > 0.0 && got < 1.0, || format!("input {i}: M = {got} outside (0,1)"))?;
                worst = worst.max((got - m[v]).abs());
                for ch in 0..c {
                    let want = f.sample(s)[v * c + ch] * m[v];
                    let y = out.output.sample(s)[v * c + ch];
                    worst = worst.max((y - want).abs());
                }
            }
        }
        ensure(worst <= 1e-6, || format!("input {i}: deviation {worst:e}"))?;
        let zero = Tensor5::<f64>::zeros(shape);
        let z = spatial_attention_3d(&zero, &w, b, kernel);
        ensure(z.output.data().iter().all(|&v| v == 0.0), || format!("input {i}: zero input gave nonzero output"))?;
    }
    Ok(format!("20 inputs, max |diff| {worst:.1e}"))
}

fn gradient_check() -> Result<String, String> {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        levels: 2,
        base_channels: 2,
        gn_groups: 2,
        aspp_rates: vec![[1, 1, 1], [2, 2, 1]],
        seed: 5,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::build(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shape = [1, 8, 8, 4, 1];
    let x = Tensor5::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let voxels = 8 * 8 * 4;
    let target: Vec<u8> = (0..voxels).map(|_| u8::from(rng.random_bool(0.3))).collect();
    let ignore: Vec<u8> = (0..voxels).map(|_| u8::from(rng.random_bool(0.1))).collect();
    let weights = [0.5, 0.5];

    let (logits, cache) = model.forward_train(&x).map_err(|e| e.to_string())?;
    let (_, dlogits) = combined_loss_grad(&logits, &target, &ignore, weights).map_err(|e| e.to_string())?;
    let grads = model.backward(&cache, &dlogits);

    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    let ids: Vec<usize> = (0..model.params.len()).filter(|&i| model.params.entries()[i].kind.trainable()).collect();
    for id in ids {
        for j in 0..model.params.get(id).len() {
            let orig = model.params.get(id)[j];
            let mut loss_at = |v: f64| {
                model.params.get_mut(id)[j] = v;
                let y = model.forward(&x).expect("forward");
                combined_loss(&y, &target, &ignore, weights).expect("loss").total
            };
            let numeric = (loss_at(orig + h) - loss_at(orig - h)) / (2.0 * h);
            model.params.get_mut(id)[j] = orig;
            let analytic = grads.get(id)[j];
            // floor keeps round-off on near-zero gradients (~1e-11 at this h) from dominating
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{}[{j}]: analytic {analytic:e}, numeric {numeric:e}", model.params.entries()[id].path));
            }
            checked += 1;
        }
    }
    ensure(worst.0 < 1e-4, || format!("max relative error {:.2e} at {}", worst.0, worst.1))?;
    within(t0, Duration::from_secs(300), "gradient check")?;
    Ok(format!("{checked} parameters, max relative error {:.2e}", worst.0))
}

fn shape_contract() -> Result<String, String> {
    let cfg = ModelConfig::default();
    ensure(cfg.resample_kernel == [2, 2, 1], || "default resample kernel is not (2,2,1)".into())?;
    let model = Model::<f32>::build(&cfg).map_err(|e| e.to_string())?;
    for l in model.layers() {
        if let LayerKind::MaxPool { kernel } | LayerKind::ConvTranspose { kernel, .. } = l.kind {
            ensure(kernel[2] == 1, || format!("{} resamples depth: {kernel:?}", l.path))?;
        }
    }
    // an odd depth survives every pooling stage
    let small = Model::<f32>::build(&ModelConfig { base_channels: 8, gn_groups: 4, ..cfg.clone() }).map_err(|e| e.to_string())?;
    let y = small.forward(&Tensor5::zeros([1, 64, 64, 3, 1])).map_err(|e| e.to_string())?;
    ensure(y.shape() == [1, 64, 64, 3, 2], || format!("depth-3 input gave {:?}", y.shape()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor5::<f32>::from_fn([1, 256, 256, 32, 1], |_| rng.random_range(-1.0..1.0));
    let y = model.forward(&x).map_err(|e| e.to_string())?;
    ensure(y.shape() == [1, 256, 256, 32, 2], || format!("output {:?}", y.shape()))?;
    ensure(y.all_finite(), || "non-finite logits".into())?;
    drop((x, y));
    for bad in [[1, 250, 256, 32, 1], [1, 256, 252, 32, 1]] {
        ensure(model.forward(&Tensor5::zeros(bad)).is_err(), || format!("{bad:?} was accepted"))?;
    }
    Ok("(1,256,256,32,1) -> (1,256,256,32,2); indivisible H/W rejected".into())
}

fn round_trip_geometry() -> Result<String, String> {
    let grid = CanonicalGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut notes = Vec::new();
    for (name, shape) in CHALLENGE_SCANNERS {
        let mask = Array3::from_shape_fn(shape, |_| rng.random_range(0..=2u8));
        let image = Volume::new(Array3::from_shape_fn(shape, |_| rng.random_range(0.5f32..2.0)), [1.0, 1.0, 3.0]).map_err(|e| e.to_string())?;
        let truth = LabelMask::new(mask.clone()).map_err(|e| e.to_string())?;
        let (cimg, cmask, geom) = to_canonical(&image, Some(&truth)).map_err(|e| e.to_string())?;
        let cmask = cmask.expect("mask");
        ensure(cimg.shape() == grid.shape && cmask.shape() == grid.shape, || format!("{name}: canonical shape"))?;
        let chunks = slice_z(&cmask.data, &grid).map_err(|e| e.to_string())?;
        ensure(chunks.len() == 4 && chunks.iter().all(|c| c.shape() == [256, 256, 32]), || format!("{name}: chunk shapes"))?;
        let joined = LabelMask::new(unslice_z(&chunks, &grid).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let back = from_canonical(&joined, &geom).map_err(|e| e.to_string())?;
        ensure(back.shape() == shape, || format!("{name}: restored {:?}", back.shape()))?;

        let pad_only = shape.iter().zip(grid.shape).all(|(&o, c)| o <= c);
        if pad_only {
            ensure(back.data == mask, || format!("{name}: pad-only round trip not bit-exact"))?;
        } else {
            // retained window along cropped axes
            let keep: [std::ops::Range<usize>; 3] = std::array::from_fn(|a| {
                if shape[a] > grid.shape[a] {
                    let lo = (shape[a] - grid.shape[a]) / 2;
                    lo..lo + grid.shape[a]
                } else {
                    0..shape[a]
                }
            });
            let mut inside = 0usize;
            for ((i, j, k), &v) in back.data.indexed_iter() {
                let kept = keep[0].contains(&i) && keep[1].contains(&j) && keep[2].contains(&k);
                if kept {
                    inside += 1;
                    ensure(v == mask[[i, j, k]], || format!("{name}: retained voxel ({i},{j},{k}) changed"))?;
                } else {
                    ensure(v == 0, || format!("{name}: voxel ({i},{j},{k}) outside crop is {v}"))?;
                }
            }
            notes.push(format!("{name} {shape:?} cropped, {inside} retained voxels exact, rest zero"));
        }
    }
    Ok(format!("5 shapes; {}", notes.join("; ")))
}

fn overfit() -> Result<String, String> {
    let t0 = Instant::now();
    let data = generate_dataset(2, &PhantomConfig::default(), 0).map_err(|e| e.to_string())?;
    let model_cfg = ModelConfig {
        base_channels: 8,
        levels: 3,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        steps: 300,
        augmentation: AugmentationConfig::disabled(),
        ..TrainConfig::default()
    };
    let pipeline = PipelineConfig {
        grid: CanonicalGrid { shape: [64, 64, 16], chunks: 4 },
        ..PipelineConfig::default()
    };
    let out = train(&model_cfg, &train_cfg, &pipeline, &data, None).map_err(|e| e.to_string())?;
    let mut dices = Vec::new();
    for c in &data {
        let (pred, _) = predict_case(&out.model, &pipeline, c).map_err(|e| e.to_string())?;
        let m = evaluate_case(&c.id, &c.scanner, &pred, c.truth.as_ref().unwrap(), &MetricsConfig::default()).map_err(|e| e.to_string())?;
        dices.push(m.dice);
    }
    ensure(dices.iter().all(|&d| d >= 0.95), || format!("train DICE {dices:?}"))?;
    within(t0, Duration::from_secs(600), "overfit run")?;
    Ok(format!("train DICE {:.3} / {:.3} after 300 steps", dices[0], dices[1]))
}

fn descent_and_determinism() -> Result<String, String> {
    let data = generate_dataset(2, &PhantomConfig::default(), 100).map_err(|e| e.to_string())?;
    let model_cfg = ModelConfig {
        base_channels: 4,
        levels: 3,
        gn_groups: 4,
        seed: 9,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        steps: 200,
        seed: 9,
        ..TrainConfig::default()
    };
    let pipeline = PipelineConfig {
        grid: CanonicalGrid { shape: [64, 64, 16], chunks: 4 },
        ..PipelineConfig::default()
    };
    let a = train(&model_cfg, &train_cfg, &pipeline, &data, None).map_err(|e| e.to_string())?.trace;
    let b = train(&model_cfg, &train_cfg, &pipeline, &data, None).map_err(|e| e.to_string())?.trace;
    ensure(a.len() == 200, || format!("{} records", a.len()))?;
    let bits = |t: &saunet::training::LossTrace| t.records.iter().map(|r| (r.step, r.total.to_bits(), r.ce.to_bits(), r.dice.to_bits())).collect::<Vec<_>>();
    ensure(bits(&a) == bits(&b), || "repeated run produced a different trace".into())?;
    let (first, last) = (a.first_mean(10), a.last_mean(10));
    ensure(last < first, || format!("loss did not descend: first-10 {first:.4}, last-10 {last:.4}"))?;
    Ok(format!("first-10 {first:.4} -> last-10 {last:.4}; traces bit-identical"))
}

fn ablation_structure() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let phantom = PhantomConfig {
        shape: [32, 32, 8],
        n_lesions: [2, 4],
        lesion_radius_vox: [1.0, 2.0],
        ..PhantomConfig::default()
    };
    let data = generate_dataset(2, &phantom, 0).map_err(|e| e.to_string())?;
    save_dataset(&dir.path().join("data"), &data).map_err(|e| e.to_string())?;
    let suite = serde_json::json!({
        "base": {
            "model": {"base_channels": 4, "levels": 2, "gn_groups": 2, "aspp_rates": [[1, 1, 1], [2, 2, 1]]},
            "train": {"steps": 3, "batch_size": 2},
            "pipeline": {"grid": {"shape": [32, 32, 8], "chunks": 2}}
        },
        "variants": [
            {"name": "backbone", "model": {"encoder_kernel": [3, 3, 3], "resample_kernel": [2, 2, 2], "norm": "batch", "use_sam": false, "use_aspp": false}},
            {"name": "+GN", "model": {"use_sam": false, "use_aspp": false}},
            {"name": "+ASPP", "model": {"use_sam": false, "use_aspp": true}},
            {"name": "+SAM", "model": {"use_sam": true, "use_aspp": false}},
            {"name": "full", "model": {"use_sam": true, "use_aspp": true}}
        ]
    });
    let suite_path = dir.path().join("suite.json");
    std::fs::write(&suite_path, suite.to_string()).map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let rows = cmd_ablate(&suite_path, &dir.path().join("data"), &out, None).map_err(|e| e.message)?;

    let csv = std::fs::read_to_string(out.join("ablation.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    ensure(lines.len() == 6 && lines[0] == ABLATION_CSV_HEADER, || format!("CSV shape: {lines:?}"))?;
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    ensure(names == ["backbone", "+GN", "+ASPP", "+SAM", "full"], || format!("variant names {names:?}"))?;
    for l in &lines[1..] {
        ensure(l.split(',').count() == 4 && !l.contains("NA,NA"), || format!("row {l}"))?;
    }

    let kinds = |i: usize| rows[i].layers.iter().map(|l| l.kind.clone()).collect::<Vec<_>>();
    let has = |i: usize, f: &dyn Fn(&LayerKind) -> bool| kinds(i).iter().any(f);
    let sam = |k: &LayerKind| matches!(k, LayerKind::SpatialAttention { .. });
    let aspp = |k: &LayerKind| matches!(k, LayerKind::Aspp { .. });
    let gn = |k: &LayerKind| matches!(k, LayerKind::GroupNorm { .. });
    let bn = |k: &LayerKind| matches!(k, LayerKind::BatchNorm { .. });
    let iso = |k: &LayerKind| matches!(k, LayerKind::MaxPool { kernel: [2, 2, 2] });
    let expected = [
        // (sam, aspp, gn, bn, isotropic pooling)
        (false, false, false, true, true),
        (false, false, true, false, false),
        (false, true, true, false, false),
        (true, false, true, false, false),
        (true, true, true, false, false),
    ];
    for (i, want) in expected.iter().enumerate() {
        let got = (has(i, &sam), has(i, &aspp), has(i, &gn), has(i, &bn), has(i, &iso));
        ensure(got == *want, || format!("{}: (sam, aspp, gn, bn, iso) = {got:?}, declared {want:?}", rows[i].variant))?;
    }
    let backbone = ModelConfig::backbone_isotropic();
    ensure(backbone.norm == NormKind::Batch && !backbone.use_sam && !backbone.use_aspp, || "backbone preset".into())?;
    let encoder_kernels_333 = rows[0].layers.iter().all(|l| match &l.kind {
        LayerKind::Conv { kernel, .. } if l.path.starts_with("enc") || l.path.starts_with("dec") => *kernel == [3, 3, 3],
        _ => true,
    });
    ensure(encoder_kernels_333, || "backbone encoder/decoder kernels are not (3,3,3)".into())?;
    Ok("5 rows named as the suite; SAM/ASPP/GN/kernel toggles visible in layer lists".into())
}

/// Where the mask value at output `(y, x)` comes from in the input plane,
/// or `None` when it falls outside (zero fill). Independent coordinate chain:
/// undo transpose, undo flips, elastic lookup, rotation lookup.
fn source_of(d: &AugmentDraw, [h, w]: [usize; 2], y: usize, x: usize) -> Option<(usize, usize)> {
    let (mut y, mut x) = (y as i64, x as i64);
    if d.transpose && h == w {
        std::mem::swap(&mut y, &mut x);
    }
    if d.flip_w {
        x = w as i64 - 1 - x;
    }
    if d.flip_h {
        y = h as i64 - 1 - y;
    }
    let nearest = |v: f64| (v + 0.5).floor() as i64;
    let inside = |a: i64, b: i64| a >= 0 && b >= 0 && a < h as i64 && b < w as i64;
    if let Some((dh, dw)) = &d.elastic {
        let (u, v) = (y as usize, x as usize);
        let (sy, sx) = (nearest(y as f64 + dh[[u, v]]), nearest(x as f64 + dw[[u, v]]));
        if !inside(sy, sx) {
            return None;
        }
        (y, x) = (sy, sx);
    }
    if let Some(deg) = d.angle_deg {
        let t = deg.to_radians();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (py, px) = (y as f64 - cy, x as f64 - cx);
        // inverse rotation R(−θ) maps output to source
        let sy = nearest(t.cos() * py + t.sin() * px + cy);
        let sx = nearest(-t.sin() * py + t.cos() * px + cx);
        if !inside(sy, sx) {
            return None;
        }
        (y, x) = (sy, sx);
    }
    Some((y as usize, x as usize))
}

fn augmentation_suite() -> Result<String, String> {
    let geometric = AugmentationConfig::only(EnabledTransforms {
        rotation: true,
        flip: true,
        transpose: true,
        elastic: true,
        ..EnabledTransforms::none()
    });
    let intensity = AugmentationConfig::only(EnabledTransforms {
        channel_shift: true,
        bias_field: true,
        ghosting: true,
        ..EnabledTransforms::none()
    });
    let flips = AugmentationConfig::only(EnabledTransforms {
        flip: true,
        ..EnabledTransforms::none()
    });
    let full = AugmentationConfig::default();
    let mut master = ChaCha8Rng::seed_from_u64(77);
    for i in 0..100u64 {
        let shape = if i % 4 == 3 { [24, 20, 3] } else { [24, 24, 3] };
        let [h, w, d] = shape;
        let img = Array3::from_shape_fn(shape, |_| master.random_range(0.0f32..1.0));
        let labels = Array3::from_shape_fn(shape, |_| master.random_range(0..=2u8));

        // double flip
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let draw = AugmentDraw::draw(&flips, shape, &mut rng);
        let (a1, m1) = draw.apply(&flips, &img, &labels).map_err(|e| e.to_string())?;
        let (a2, m2) = draw.apply(&flips, &a1, &m1).map_err(|e| e.to_string())?;
        ensure(a2 == img && m2 == labels, || format!("draw {i}: double flip is not the identity"))?;

        // label closure; intensity transforms never touch the mask
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let (_, m) = saunet::augmentation::augment(&img, &labels, &full, &mut rng).map_err(|e| e.to_string())?;
        ensure(m.iter().all(|&v| v <= 2), || format!("draw {i}: label outside {{0,1,2}}"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let (_, m) = saunet::augmentation::augment(&img, &labels, &intensity, &mut rng).map_err(|e| e.to_string())?;
        ensure(m == labels, || format!("draw {i}: intensity-only transform changed the mask"))?;

        // determinism
        let run = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            saunet::augmentation::augment(&img, &labels, &full, &mut r).unwrap()
        };
        let ((x1, y1), (x2, y2)) = (run(1000 + i), run(1000 + i));
        let same = x1.iter().zip(&x2).all(|(a, b)| a.to_bits() == b.to_bits()) && y1 == y2;
        ensure(same, || format!("draw {i}: same seed, different output"))?;

        // single-voxel geometric pairing
        let mut single = Array3::<u8>::zeros(shape);
        let at = [master.random_range(0..h), master.random_range(0..w), master.random_range(0..d)];
        single[at] = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + i);
        let draw = AugmentDraw::draw(&geometric, shape, &mut rng);
        let (_, moved) = draw.apply(&geometric, &img, &single).map_err(|e| e.to_string())?;
        let out_shape = [moved.shape()[0], moved.shape()[1]];
        for y in 0..out_shape[0] {
            for x in 0..out_shape[1] {
                for z in 0..d {
                    let want = match source_of(&draw, [h, w], y, x) {
                        Some((sy, sx)) => single[[sy, sx, z]],
                        None => 0,
                    };
                    ensure(moved[[y, x, z]] == want, || format!("draw {i}: voxel ({y},{x},{z}) is {}, oracle {want}", moved[[y, x, z]]))?;
                }
            }
        }
    }
    Ok("100 draws: double flip, label closure, determinism, single-voxel pairing".into())
}

fn ignore_mask_exactness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let cfg = MetricsConfig::default();
    let mut trials = 0;
    for seed in 0..10 {
        let (case, _) = generate_with_info(&PhantomConfig {
            include_label2: true,
            seed,
            ..PhantomConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let truth = case.truth.unwrap();
        ensure(truth.data.iter().any(|&v| v == 2), || format!("phantom {seed} has no label 2"))?;
        let pred = LabelMask::new(truth.data.mapv(|v| u8::from(v == 1 && rng.random_bool(0.8)) | u8::from(rng.random_bool(0.01)))).map_err(|e| e.to_string())?;
        let mut perturbed = pred.clone();
        for (p, &t) in perturbed.data.iter_mut().zip(&truth.data) {
            if t == 2 {
                *p = u8::from(rng.random_bool(0.5));
            }
        }
        let a = evaluate_case("c", "s", &pred, &truth, &cfg).map_err(|e| e.to_string())?;
        let b = evaluate_case("c", "s", &perturbed, &truth, &cfg).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("phantom {seed}: metrics changed {a:?} -> {b:?}"))?;

        // loss on the first chunk holding label 2
        let [h, w, dd] = truth.shape();
        let (target, ignore) = training_target(&truth);
        let n = h * w * dd;
        let logits = Tensor5::<f32>::from_fn([1, h, w, dd, 2], |_| rng.random_range(-3.0..3.0));
        let mut bent = logits.clone();
        for v in 0..n {
            if ignore.as_slice().unwrap()[v] != 0 {
                bent.data_mut()[2 * v] = rng.random_range(-50.0..50.0);
                bent.data_mut()[2 * v + 1] = rng.random_range(-50.0..50.0);
            }
        }
        let t = target.as_slice().unwrap();
        let ig = ignore.as_slice().unwrap();
        let la = combined_loss(&logits, t, ig, [0.5, 0.5]).map_err(|e| e.to_string())?;
        let lb = combined_loss(&bent, t, ig, [0.5, 0.5]).map_err(|e| e.to_string())?;
        ensure(la == lb, || format!("phantom {seed}: loss changed {la:?} -> {lb:?}"))?;
        let (_, g) = combined_loss_grad(&bent, t, ig, [0.5, 0.5]).map_err(|e| e.to_string())?;
        let leaked = (0..n).any(|v| ig[v] != 0 && (g.data()[2 * v] != 0.0 || g.data()[2 * v + 1] != 0.0));
        ensure(!leaked, || format!("phantom {seed}: gradient flows into ignored voxels"))?;
        trials += 1;
    }
    Ok(format!("{trials} phantoms: metrics, loss and gradient unchanged by label-2 edits"))
}
