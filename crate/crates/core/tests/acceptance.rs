//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use focus_bench::attribution::{map_path, AttributionMap};
use focus_bench::focus::{aggregate, compute_focus, score_run, FocusResult};
use focus_bench::mosaic::{emit_mosaic_set, plan_mosaics, PlanConfig, QuadrantSource, Quadrants, MANIFEST_FILE};
use focus_bench::sanity::{
    generate_synthetic, layout_experiment, plan_layout_study, score_synthetic, LayoutRunInput, SyntheticExplainer,
    SyntheticKind,
};
use focus_bench::{
    DatasetIndex, Execution, Layout, LayoutPolicy, MosaicManifest, MosaicMode, MosaicSpec, Quadrant, Split, SplitRule,
};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($fmt)+)),
        }
    };
}

fn within_budget(start: Instant, budget: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure!(took <= budget, "took {took:.2?}, budget {budget:?}");
    Ok(took)
}

fn write_png(path: &Path, color: [u8; 3]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_pixel(12, 10, Rgb(color)).save(path).unwrap();
}

/// `classes` × `per_class` PNGs on disk; the first `train` files of each class go to training.
fn disk_dataset(root: &Path, classes: usize, per_class: usize, train: usize) -> DatasetIndex {
    for c in 0..classes {
        for i in 0..per_class {
            write_png(
                &root.join(format!("class{c}/img{i:03}.png")),
                [(c * 23) as u8, (i * 2) as u8, 90],
            );
        }
    }
    DatasetIndex::build(root, &SplitRule::FirstPerClass(train)).unwrap().0
}

fn uniform_exactness() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let index = disk_dataset(dir.path(), 4, 10, 0);
    let explainer = SyntheticExplainer::new(SyntheticKind::Uniform, 0);
    let mut worst = 0.0f64;
    let mut total = 0;
    for (w, h) in [(448, 448), (6, 10), (2, 2), (448, 224)] {
        let config = PlanConfig {
            per_class: 50,
            width: w,
            height: h,
            ..PlanConfig::default()
        };
        let specs = plan_mosaics(&index, &config, 11).unwrap();
        let results = score_synthetic(&specs, &explainer, Execution::default()).unwrap();
        ensure!(results.len() >= 200, "only {} mosaics", results.len());
        for r in &results {
            let f = r.focus.ok_or(format!("{} undefined", r.mosaic_id))?;
            worst = worst.max((f - 0.5).abs());
        }
        let d = aggregate("uniform", &results).unwrap();
        ensure!(d.std == 0.0, "{w}x{h}: std {}", d.std);
        total += results.len();
    }
    ensure!(worst <= 1e-9, "max |F - 0.5| = {worst:e}");

    // once more through files
    let specs = plan_mosaics(&index, &PlanConfig { per_class: 50, width: 16, height: 16, ..PlanConfig::default() }, 11)
        .unwrap();
    let manifest = emit_mosaic_set(&specs, &index, &dir.path().join("m"), 11, Execution::default()).unwrap();
    generate_synthetic(&manifest, &explainer, &dir.path().join("a"), Execution::default()).unwrap();
    let results = score_run(&manifest, &dir.path().join("a"), Execution::default()).unwrap();
    ensure!(
        results.iter().all(|r| r.focus.is_some_and(|f| (f - 0.5).abs() <= 1e-9)),
        "file-based run not at 0.5"
    );
    let took = within_budget(start, Duration::from_secs(10))?;
    Ok(format!("{total} mosaics in 4 geometries, max |F-0.5| = {worst:e}, std 0, {took:.2?}"))
}

fn random_baseline() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let index = disk_dataset(dir.path(), 10, 10, 0);
    let specs = plan_mosaics(&index, &PlanConfig { per_class: 100, ..PlanConfig::default() }, 5).unwrap();
    ensure!(specs.len() == 1000 && specs.iter().all(|s| (s.width, s.height) == (448, 448)), "bad mosaic set");
    let explainer = SyntheticExplainer::new(SyntheticKind::IidUniformRandom, 5);
    let results = score_synthetic(&specs, &explainer, Execution::default()).unwrap();
    let d = aggregate("iid", &results).unwrap();
    ensure!(d.n_defined == 1000, "{} defined", d.n_defined);
    ensure!((0.49..=0.51).contains(&d.mean), "mean {}", d.mean);
    let took = within_budget(start, Duration::from_secs(120))?;
    Ok(format!("mean {:.6} over 1000 448x448 mosaics, {took:.2?}", d.mean))
}

fn extremes() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let index = disk_dataset(dir.path(), 5, 8, 0);
    let mut checked = 0;
    for mode in [MosaicMode::Standard, MosaicMode::TwoClass] {
        let config = PlanConfig {
            per_class: 60,
            mode,
            width: 64,
            height: 48,
            ..PlanConfig::default()
        };
        let specs = plan_mosaics(&index, &config, 3).unwrap();
        for (kind, want) in [(SyntheticKind::TargetPerfect, 1.0), (SyntheticKind::AntiTarget, 0.0)] {
            let results = score_synthetic(&specs, &SyntheticExplainer::new(kind, 0), Execution::default()).unwrap();
            for r in &results {
                ensure!(r.focus == Some(want), "{kind} on {}: {:?}", r.mosaic_id, r.focus);
            }
            checked += results.len();
        }
    }
    let took = within_budget(start, Duration::from_secs(10))?;
    Ok(format!("{checked} scores exactly 1.0 / 0.0, {took:.2?}"))
}

/// Spec with the target class on `targets` and distinct outer classes elsewhere.
fn spec_with_targets(targets: [Quadrant; 2], width: u32, height: u32) -> MosaicSpec {
    let mut outer = 0;
    let src = |q: Quadrant, outer: &mut usize| {
        if targets.contains(&q) {
            QuadrantSource {
                image_id: format!("t/{}", q.name()),
                class: "t".into(),
            }
        } else {
            *outer += 1;
            QuadrantSource {
                image_id: format!("o{outer}/x"),
                class: format!("o{outer}"),
            }
        }
    };
    let quadrants = Quadrants {
        tl: src(Quadrant::TL, &mut outer),
        tr: src(Quadrant::TR, &mut outer),
        bl: src(Quadrant::BL, &mut outer),
        br: src(Quadrant::BR, &mut outer),
    };
    MosaicSpec {
        id: "t/00000".into(),
        target_class: "t".into(),
        mode: MosaicMode::Standard,
        quadrants,
        width,
        height,
    }
}

/// Per-pixel loop deciding membership from the class painted into each quadrant.
fn brute_force_focus(map: &AttributionMap, spec: &MosaicSpec) -> Option<f64> {
    let (mut on, mut all) = (0.0f64, 0.0f64);
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.values[(y * map.width + x) as usize];
            let v = if v > 0.0 { v as f64 } else { 0.0 };
            let source = match (2 * y < map.height, 2 * x < map.width) {
                (true, true) => &spec.quadrants.tl,
                (true, false) => &spec.quadrants.tr,
                (false, true) => &spec.quadrants.bl,
                (false, false) => &spec.quadrants.br,
            };
            if source.class == spec.target_class {
                on += v;
            }
            all += v;
        }
    }
    (all > 0.0).then(|| on / all)
}

fn random_layout(rng: &mut ChaCha8Rng) -> Layout {
    Layout::ALL[rng.random_range(0..6)]
}

fn random_map(rng: &mut ChaCha8Rng, w: u32, h: u32) -> AttributionMap {
    AttributionMap::from_fn(w, h, |_, _| match rng.random_range(0..4) {
        0 => 0.0,
        1 => -rng.random::<f32>() * 10.0,
        _ => rng.random::<f32>() * 10.0,
    })
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut undefined = 0;
    for case in 0..1000 {
        let spec = spec_with_targets(random_layout(&mut rng).target_positions(), 8, 8);
        let map = if case % 250 == 0 {
            AttributionMap::filled(8, 8, -1.0)
        } else {
            random_map(&mut rng, 8, 8)
        };
        let fast = compute_focus(&map, &spec).unwrap().focus;
        let slow = brute_force_focus(&map, &spec);
        match (fast, slow) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => undefined += 1,
            other => return Err(format!("case {case}: {other:?}")),
        }
    }
    ensure!(worst <= 1e-6, "max deviation {worst:e}");
    let took = within_budget(start, Duration::from_secs(5))?;
    Ok(format!("1000 maps, max deviation {worst:e}, {undefined} undefined on both sides, {took:.2?}"))
}

fn metric_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // scale invariance on mosaic-size maps
    let mut worst_scale = 0.0f64;
    for _ in 0..12 {
        let spec = spec_with_targets(random_layout(&mut rng).target_positions(), 448, 448);
        let base = AttributionMap::from_fn(448, 448, |_, _| rng.random::<f32>());
        let f1 = compute_focus(&base, &spec).unwrap().focus.unwrap();
        for c in [1e-6f32, 1.0, 1e6] {
            let scaled = AttributionMap::new(448, 448, base.values.iter().map(|v| v * c).collect()).unwrap();
            let fc = compute_focus(&scaled, &spec).unwrap().focus.unwrap();
            worst_scale = worst_scale.max((fc - f1).abs());
        }
    }
    ensure!(worst_scale < 1e-9, "scale invariance: |dF| = {worst_scale:e}");

    // negative injection where relevance is not positive
    for _ in 0..200 {
        let spec = spec_with_targets(random_layout(&mut rng).target_positions(), 16, 12);
        let map = AttributionMap::from_fn(16, 12, |_, _| if rng.random_bool(0.5) { 0.0 } else { rng.random::<f32>() });
        let mut noisy = map.clone();
        for v in noisy.values.iter_mut().filter(|v| **v == 0.0) {
            *v = -rng.random::<f32>() * 1e6;
        }
        let (a, b) = (compute_focus(&map, &spec).unwrap(), compute_focus(&noisy, &spec).unwrap());
        ensure!(a.focus == b.focus, "negative injection changed {:?} -> {:?}", a.focus, b.focus);
    }

    // complement identity
    let mut worst_complement = 0.0f64;
    for _ in 0..200 {
        let layout = random_layout(&mut rng);
        let map = random_map(&mut rng, 10, 14);
        let f = compute_focus(&map, &spec_with_targets(layout.target_positions(), 10, 14)).unwrap().focus;
        let g = compute_focus(&map, &spec_with_targets(layout.complement().target_positions(), 10, 14))
            .unwrap()
            .focus;
        if let (Some(f), Some(g)) = (f, g) {
            worst_complement = worst_complement.max((f + g - 1.0).abs());
        } else {
            ensure!(f.is_none() && g.is_none(), "complement defined on one side only");
        }
    }
    ensure!(worst_complement <= 1e-12, "complement: |F + F' - 1| = {worst_complement:e}");

    // zero map
    let spec = spec_with_targets(Layout::TopRow.target_positions(), 8, 8);
    let zero = compute_focus(&AttributionMap::filled(8, 8, 0.0), &spec).unwrap();
    ensure!(zero.focus.is_none(), "zero map scored {:?}", zero.focus);
    let mut results: Vec<FocusResult> = (0..3)
        .map(|k| {
            let mut r = zero.clone();
            r.mosaic_id = format!("t/z{k}");
            r
        })
        .collect();
    for (k, v) in [0.8f32, 1.0, 0.4].into_iter().enumerate() {
        let mut r = compute_focus(
            &AttributionMap::from_fn(8, 8, |_, y| if y < 4 { v } else { 1.0 - v }),
            &spec,
        )
        .unwrap();
        r.mosaic_id = format!("t/d{k}");
        results.push(r);
    }
    let d = aggregate("mixed", &results).unwrap();
    ensure!(d.n_defined == 3 && d.n_undefined == 3, "counts {} / {}", d.n_defined, d.n_undefined);
    let hand = (0.8 + 1.0 + 0.4) / 3.0;
    ensure!((d.mean - hand).abs() < 1e-6, "mean {} vs {hand}", d.mean);
    Ok(format!(
        "scale |dF| max {worst_scale:e}, complement max {worst_complement:e}, clamping exact, zero maps excluded"
    ))
}

fn mosaic_construction() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let index = disk_dataset(&dir.path().join("data"), 10, 100, 20);
    let config = PlanConfig {
        per_class: 600,
        ..PlanConfig::default()
    };
    let specs = plan_mosaics(&index, &config, 42).unwrap();
    ensure!(specs.len() == 6000, "{} mosaics", specs.len());

    let mut layout_counts: BTreeMap<Layout, usize> = BTreeMap::new();
    for s in &specs {
        let sources = Quadrant::ALL.map(|q| s.quadrants.get(q));
        let targets = sources.iter().filter(|q| q.class == s.target_class).count();
        ensure!(targets == 2, "{}: {targets} target quadrants", s.id);
        for src in sources {
            let rec = index.get(&src.image_id).ok_or(format!("{} not indexed", src.image_id))?;
            ensure!(rec.split == Split::Eval, "{} leaks the training split", rec.id);
            ensure!(rec.class_label == src.class, "{} class mismatch", rec.id);
        }
        *layout_counts.entry(s.validate().map_err(|e| e.to_string())?).or_default() += 1;
    }
    ensure!(layout_counts.len() == 6, "only {} layouts seen", layout_counts.len());
    let expected = specs.len() as f64 / 6.0;
    let chi2: f64 = layout_counts
        .values()
        .map(|&n| (n as f64 - expected).powi(2) / expected)
        .sum();
    let critical = ChiSquared::new(5.0).unwrap().inverse_cdf(1.0 - 0.001);
    ensure!(chi2 < critical, "chi-square {chi2:.3} >= {critical:.3}");

    let two = plan_mosaics(&index, &PlanConfig { mode: MosaicMode::TwoClass, ..config }, 42).unwrap();
    for s in &two {
        let outer = s.outer_class().ok_or(format!("{}: outer classes differ", s.id))?;
        ensure!(outer != s.target_class, "{}: outer equals target", s.id);
        for q in s.layout().outer_positions() {
            ensure!(index.get(&s.quadrants.get(q).image_id).unwrap().split == Split::Eval, "leak in {}", s.id);
        }
    }

    let again = plan_mosaics(&index, &config, 42).unwrap();
    let fp = index.fingerprint();
    ensure!(
        MosaicManifest::from_specs(&specs, 42, &fp).unwrap().to_json()
            == MosaicManifest::from_specs(&again, 42, &fp).unwrap().to_json(),
        "replanning changed the manifest"
    );
    let small = PlanConfig { per_class: 3, width: 16, height: 16, ..config };
    let mut manifests = Vec::new();
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        emit_mosaic_set(&plan_mosaics(&index, &small, 42).unwrap(), &index, &out, 42, Execution::default()).unwrap();
        manifests.push(fs::read(out.join(MANIFEST_FILE)).unwrap());
    }
    ensure!(manifests[0] == manifests[1], "emitted manifests differ");
    let took = within_budget(start, Duration::from_secs(60))?;
    Ok(format!("6000 mosaics, chi-square {chi2:.3} < {critical:.3}, no leakage, manifests identical, {took:.2?}"))
}

fn format_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = tempfile::tempdir().unwrap();
    let specials = [0.0f32, -0.0, f32::MIN_POSITIVE, 1e-45, f32::MAX, f32::MIN, -1.5];
    for i in 0..200 {
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let map = AttributionMap::from_fn(w, h, |_, _| {
            if rng.random_bool(0.1) {
                specials[rng.random_range(0..specials.len())]
            } else {
                f32::from_bits(rng.random::<u32>() & 0xBFFF_FFFF)
            }
        });
        let path = map_path(dir.path(), &format!("c/{i}"));
        focus_bench::write_map(&map, &path).unwrap();
        let back = focus_bench::read_map(&path).unwrap();
        ensure!((back.width, back.height) == (w, h), "dimensions changed");
        ensure!(
            back.values.iter().zip(&map.values).all(|(a, b)| a.to_bits() == b.to_bits()),
            "values changed for map {i}"
        );
    }

    let mut rejected = 0;
    for iter in 0..10_000 {
        let (w, h) = (rng.random_range(1..9), rng.random_range(1..9));
        let map = AttributionMap::from_fn(w, h, |_, _| rng.random::<f32>());
        let mut bytes = map.to_bytes().unwrap();
        let pos = rng.random_range(0..focus_bench::attribution::HEADER_LEN);
        let flip = rng.random_range(1..=255u8);
        bytes[pos] ^= flip;
        match AttributionMap::from_bytes(&bytes) {
            Err(_) => rejected += 1,
            Ok(parsed) => {
                return Err(format!(
                    "iteration {iter}: byte {pos} ^ {flip:#04x} parsed as {}x{}",
                    parsed.width, parsed.height
                ))
            }
        }
    }
    Ok(format!("200 maps bit-exact, {rejected}/10000 header mutations rejected"))
}

fn layout_study() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let index = disk_dataset(&dir.path().join("data"), 4, 6, 0);
    let base = PlanConfig {
        per_class: 10,
        width: 24,
        height: 24,
        ..PlanConfig::default()
    };
    let explainer = SyntheticExplainer::new(SyntheticKind::Uniform, 0);
    let mut inputs = Vec::new();
    for (policy, specs) in plan_layout_study(&index, &base, 8).unwrap() {
        if let LayoutPolicy::Fixed(layout) = policy {
            ensure!(specs.iter().all(|s| s.layout() == layout), "{policy} run has other layouts");
        }
        let run = dir.path().join(policy.name());
        let manifest = emit_mosaic_set(&specs, &index, &run.join("mosaics"), 8, Execution::default()).unwrap();
        generate_synthetic(&manifest, &explainer, &run.join("att"), Execution::default()).unwrap();
        inputs.push(LayoutRunInput {
            policy,
            manifest,
            attribution_dir: run.join("att"),
        });
    }
    let table = layout_experiment(&inputs, Execution::default()).unwrap();
    ensure!(table.rows.len() == 7, "{} rows", table.rows.len());
    for row in &table.rows {
        ensure!(row.n == 40, "{}: n = {}", row.layout, row.n);
        ensure!((row.mean - 0.5).abs() <= 1e-9 && row.std == 0.0, "{}: {} ± {}", row.layout, row.mean, row.std);
    }
    let names: Vec<&str> = table.rows.iter().map(|r| r.layout.as_str()).collect();
    Ok(format!("7 configurations flat at 0.5 with std 0: {}", names.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("uniform attribution exactness", uniform_exactness),
        ("random baseline mean", random_baseline),
        ("target-perfect and anti-target extremes", extremes),
        ("oracle equivalence", oracle_equivalence),
        ("metric properties", metric_properties),
        ("mosaic construction properties", mosaic_construction),
        ("attribution format round trip", format_round_trip),
        ("layout study harness", layout_study),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
