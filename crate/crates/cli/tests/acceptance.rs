//! Acceptance suite. Prints one `PASS` or `FAIL` line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tractfov::context::{build_index, local_context, ContextInput};
use tractfov::eval::{
    evaluate_split, macro_f1, tir, tract_to_atlas_distance, Atlas, Confusion, Parcellation, atd,
};
use tractfov::experiment::{run_experiment, ExperimentConfig};
use tractfov::fovcut::{apply_cut, clip_runs, sample_cut_plane, CutPlane, MAX_TILT_DEG, Z_OFFSET_RANGE};
use tractfov::jsonl::{read_jsonl, write_jsonl};
use tractfov::net::{cross_entropy, forward, loss_and_grad, Architecture, ModelParams};
use tractfov::tract::{arc_length, mdf_points};
use tractfov::trk::{decode_trk, encode_trk, TrkHeader};
use tractfov::{CutStatus, Error, Point, Streamline, Tractogram};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1. Cut-streamline accuracy gain from FOV cut augmentation.

const C1_SEEDS: [u64; 3] = [1, 2, 3];
const C1_MIN_CUT_GAIN_PP: f64 = 5.0;
const C1_MAX_UNAFFECTED_LOSS_PP: f64 = 2.0;
const C1_MAX_RUNTIME: Duration = Duration::from_secs(15 * 60);

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in C1_SEEDS {
        let cfg = ExperimentConfig::desk(seed);
        check(cfg.cohort.bundles.len() == 8, || "cohort must have 8 classes".into())?;
        check(cfg.cohort.inferior_classes().len() == 3, || "cohort must flag 3 inferior classes".into())?;
        check(cfg.cohort.streamlines_per_subject() == 2000, || "cohort must have 2000 streamlines per subject".into())?;
        check(cfg.planes_per_subject == 10, || "arm A must use 10 planes per subject".into())?;
        let r = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let pct = |v: Option<f64>| v.map(|x| 100.0 * x).ok_or_else(|| format!("seed {seed}: empty group"));
        let a_cut = pct(r.with_fovca.cut.cut.accuracy)?;
        let b_cut = pct(r.without_fovca.cut.cut.accuracy)?;
        let a_unaff = pct(r.with_fovca.cut.unaffected.accuracy)?;
        let b_unaff = pct(r.without_fovca.cut.unaffected.accuracy)?;
        lines.push(format!(
            "seed {seed}: cut {a_cut:.2} vs {b_cut:.2} (+{:.2} pp), unaffected {a_unaff:.2} vs {b_unaff:.2}",
            a_cut - b_cut
        ));
        if a_cut - b_cut < C1_MIN_CUT_GAIN_PP {
            failures.push(format!("seed {seed}: cut gain {:.2} pp < {C1_MIN_CUT_GAIN_PP}", a_cut - b_cut));
        }
        if a_unaff < b_unaff - C1_MAX_UNAFFECTED_LOSS_PP {
            failures.push(format!("seed {seed}: unaffected {a_unaff:.2} more than 2 pp below {b_unaff:.2}"));
        }
    }
    let elapsed = start.elapsed();
    if elapsed > C1_MAX_RUNTIME {
        failures.push(format!("runtime {:.0}s over {}s", elapsed.as_secs_f64(), C1_MAX_RUNTIME.as_secs()));
    }
    let summary = format!("{}; {:.0}s", lines.join("; "), elapsed.as_secs_f64());
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}: {summary}", failures.join("; ")))
    }
}

// 2. Analytic gradients against central finite differences.

const C2_DRAWS: usize = 200;
const C2_REL_TOL: f64 = 1e-4;
const C2_ABS_FLOOR: f64 = 1e-6;
/// Central-difference steps. Smaller steps are tried only when the first
/// straddles a ReLU or max-pool kink.
const C2_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
const C2_MAX_RUNTIME: Duration = Duration::from_secs(60);

fn random_input(rng: &mut impl Rng, half_width: usize, rows: usize) -> ContextInput {
    let mut row = || -> Vec<f64> { (0..half_width).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let anchor = row();
    let others: Vec<Vec<f64>> = (1..rows).map(|_| row()).collect();
    let refs: Vec<&[f64]> = others.iter().map(Vec::as_slice).collect();
    ContextInput::new(&anchor, &refs).expect("finite input")
}

fn random_arch(rng: &mut impl Rng, d0: usize, c: usize) -> Architecture {
    let depth = rng.random_range(1..=2);
    Architecture {
        half_width: 3 * rng.random_range(2..=4),
        repr_dim: d0,
        head_widths: (0..depth).map(|_| rng.random_range(2..=6)).collect(),
        num_classes: c,
        batch_norm: rng.random_bool(0.3),
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ad);
    let mut entries = 0usize;
    let mut retried = 0usize;
    let mut worst: f64 = 0.0;
    for draw in 0..C2_DRAWS {
        let m = [1, 3, 8][draw % 3];
        let d0 = [2, 4, 8][(draw / 3) % 3];
        let c = [2, 3, 5][(draw / 9) % 3];
        let arch = random_arch(&mut rng, d0, c);
        let mut p = ModelParams::init(&arch, &mut rng);
        for v in p.values_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        let batch = rng.random_range(if arch.batch_norm { 2..=4 } else { 1..=4 });
        let inputs: Vec<ContextInput> = (0..batch).map(|_| random_input(&mut rng, arch.half_width, m)).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..c)).collect();
        let samples: Vec<usize> = (0..batch).collect();
        let loss = |p: &ModelParams| loss_and_grad(p, inputs.as_slice(), &samples, &labels).map(|r| r.0);
        let (_, grad) = loss_and_grad(&p, inputs.as_slice(), &samples, &labels).map_err(|e| e.to_string())?;
        for i in 0..grad.len() {
            let mut passed = None;
            for (attempt, h) in C2_STEPS.into_iter().enumerate() {
                let orig = p.values()[i];
                p.values_mut()[i] = orig + h;
                let up = loss(&p).map_err(|e| e.to_string())?;
                p.values_mut()[i] = orig - h;
                let down = loss(&p).map_err(|e| e.to_string())?;
                p.values_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (grad[i] - numeric).abs();
                let tol = (C2_REL_TOL * grad[i].abs().max(numeric.abs())).max(C2_ABS_FLOOR);
                if err <= tol {
                    passed = Some((attempt, err / tol));
                    break;
                }
                if attempt + 1 == C2_STEPS.len() {
                    return Err(format!(
                        "draw {draw} (m={m}, d0={d0}, C={c}, bn={}): param {i} analytic {} numeric {numeric}",
                        arch.batch_norm, grad[i]
                    ));
                }
            }
            let (attempt, ratio) = passed.expect("loop returns on failure");
            retried += usize::from(attempt > 0);
            worst = worst.max(ratio);
            entries += 1;
        }
    }
    let elapsed = start.elapsed();
    check(elapsed <= C2_MAX_RUNTIME, || format!("runtime {:.1}s over 60s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "{C2_DRAWS} draws, {entries} entries ({retried} near a kink, rechecked with a smaller step), worst error {worst:.3} of tolerance, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// 3. Plane clipping against a dense-sampling oracle, and sampler bounds.

const C3_PAIRS: usize = 1000;
const C3_LENGTH_TOL_MM: f64 = 1e-3;
const C3_PLANE_DRAWS: usize = 100_000;
const C3_DENSE_STEP_MM: f64 = 0.05;

/// Longest arc length of the polyline kept by `plane`, found by sampling
/// every edge at `C3_DENSE_STEP_MM` and bisecting each sign change.
fn dense_oracle(points: &[Point], plane: &CutPlane) -> (CutStatus, f64) {
    let side = |p: &Point| plane.signed_distance(p) >= 0.0;
    if points.iter().all(side) {
        return (CutStatus::Unaffected, arc_length(points));
    }
    let mut best: f64 = 0.0;
    let mut run = 0.0;
    let mut any = false;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let pieces = ((b - a).norm() / C3_DENSE_STEP_MM).ceil().max(1.0) as usize;
        for k in 0..pieces {
            let p = a + (b - a) * (k as f64 / pieces as f64);
            let q = a + (b - a) * ((k + 1) as f64 / pieces as f64);
            match (side(&p), side(&q)) {
                (true, true) => {
                    run += (q - p).norm();
                    any = true;
                }
                (false, false) => {}
                (sp, _) => {
                    let (mut inside, mut outside) = if sp { (p, q) } else { (q, p) };
                    for _ in 0..80 {
                        let mid = Point::from((inside.coords + outside.coords) / 2.0);
                        if side(&mid) {
                            inside = mid;
                        } else {
                            outside = mid;
                        }
                    }
                    any = true;
                    if sp {
                        run += (inside - p).norm();
                        best = best.max(run);
                        run = 0.0;
                    } else {
                        run = (q - inside).norm();
                    }
                }
            }
        }
    }
    best = best.max(run);
    if !any || points.iter().all(|p| !side(p)) {
        return (CutStatus::Removed, 0.0);
    }
    (CutStatus::Cut, best)
}

fn random_streamline(rng: &mut impl Rng) -> Streamline {
    let n = rng.random_range(3..=20);
    let mut p = Point::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-90.0..20.0));
    let mut pts = vec![p];
    for _ in 1..n {
        let step = nalgebra::Vector3::new(
            rng.random_range(-8.0..8.0),
            rng.random_range(-8.0..8.0),
            rng.random_range(-12.0..12.0),
        );
        p += step;
        pts.push(p);
    }
    Streamline::new(pts).expect("valid streamline")
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc07);
    let center = Point::origin();
    let mut seen = [0usize; 3];
    let mut worst: f64 = 0.0;
    for i in 0..C3_PAIRS {
        let s = random_streamline(&mut rng);
        let plane = sample_cut_plane(&mut rng, center, "ras");
        let t = Tractogram::new(vec![s.clone()], "s", "ras", vec![]).map_err(|e| e.to_string())?;
        let r = apply_cut(&t, &plane, 2).map_err(|e| e.to_string())?;
        let (status, length) = match r.tractogram.streamlines().first() {
            None => (CutStatus::Removed, 0.0),
            Some(c) if c.cut_status == CutStatus::Unaffected => (CutStatus::Unaffected, c.arc_length()),
            Some(c) => {
                let run = clip_runs(s.points(), &plane)
                    .into_iter()
                    .max_by(|a, b| arc_length(a).total_cmp(&arc_length(b)))
                    .ok_or_else(|| format!("pair {i}: cut without a run"))?;
                check(c.n_points() == s.n_points(), || format!("pair {i}: point count changed"))?;
                check((c.points()[0] - run[0]).norm() < 1e-9, || format!("pair {i}: start moved"))?;
                check((c.points()[c.n_points() - 1] - run[run.len() - 1]).norm() < 1e-9, || {
                    format!("pair {i}: end moved")
                })?;
                check(c.points().iter().all(|p| plane.signed_distance(p) >= -1e-9), || {
                    format!("pair {i}: output crosses the plane")
                })?;
                (CutStatus::Cut, arc_length(&run))
            }
        };
        let (o_status, o_length) = dense_oracle(s.points(), &plane);
        check(status == o_status, || format!("pair {i}: {status:?} vs oracle {o_status:?}"))?;
        let err = (length - o_length).abs();
        check(err <= C3_LENGTH_TOL_MM, || format!("pair {i}: length {length} vs oracle {o_length}"))?;
        worst = worst.max(err);
        seen[match status {
            CutStatus::Unaffected => 0,
            CutStatus::Cut => 1,
            _ => 2,
        }] += 1;
    }
    check(seen.iter().all(|&n| n > 0), || format!("categories not all exercised: {seen:?}"))?;

    let mut violations = 0usize;
    for _ in 0..C3_PLANE_DRAWS {
        let center = Point::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let p = sample_cut_plane(&mut rng, center, "ras");
        let tilt = p.normal.z.clamp(-1.0, 1.0).acos().to_degrees();
        let ok = (Z_OFFSET_RANGE.0..=Z_OFFSET_RANGE.1).contains(&p.z_offset)
            && (Z_OFFSET_RANGE.0..=Z_OFFSET_RANGE.1).contains(&(p.anchor.z - center.z))
            && p.tilt_deg <= MAX_TILT_DEG
            && tilt <= MAX_TILT_DEG + 1e-9
            && (p.normal.norm() - 1.0).abs() < 1e-12;
        violations += usize::from(!ok);
    }
    check(violations == 0, || format!("{violations} plane draws out of bounds"))?;
    Ok(format!(
        "{C3_PAIRS} pairs (unaffected {}, cut {}, removed {}), worst length error {worst:.2e} mm; {C3_PLANE_DRAWS} planes, 0 violations",
        seen[0], seen[1], seen[2]
    ))
}

// 4. Exact k nearest neighbors.

const C4_TRACTOGRAMS: usize = 100;
const C4_MAX_STREAMLINES: usize = 200;

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4a4);
    let mut queries = 0usize;
    let mut ties = 0usize;
    for t_index in 0..C4_TRACTOGRAMS {
        let n = rng.random_range(1..=C4_MAX_STREAMLINES);
        let n_points = rng.random_range(2..=8);
        let mut lines: Vec<Streamline> = Vec::with_capacity(n);
        while lines.len() < n {
            if !lines.is_empty() && rng.random_bool(0.15) {
                // Exact duplicates and reversed copies force distance ties.
                let src = lines[rng.random_range(0..lines.len())].clone();
                let mut pts = src.points().to_vec();
                if rng.random_bool(0.5) {
                    pts.reverse();
                }
                lines.push(Streamline::new(pts).unwrap());
                continue;
            }
            let scale = if rng.random_bool(0.5) { 1.0 } else { 40.0 };
            let pts: Vec<Point> = (0..n_points)
                .map(|_| {
                    // Coarse grid coordinates produce further exact ties.
                    let g = |r: &mut ChaCha8Rng| (r.random_range(-4i32..=4) as f64) * scale / 4.0;
                    Point::new(g(&mut rng), g(&mut rng), g(&mut rng))
                })
                .collect();
            if let Ok(s) = Streamline::new(pts) {
                lines.push(s);
            }
        }
        let t = Tractogram::new(lines, "s", "ras", vec![]).map_err(|e| e.to_string())?;
        let index = build_index(&t).map_err(|e| e.to_string())?;
        for k in [1, 5, 20] {
            for q in 0..n {
                let mut ranked: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != q)
                    .map(|j| (mdf_points(t.streamlines()[q].points(), t.streamlines()[j].points()), j))
                    .collect();
                ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                ties += ranked.windows(2).filter(|w| w[0].0 == w[1].0).count();
                let top: Vec<usize> = ranked.iter().map(|r| r.1).take(k).collect();
                let expected: Vec<usize> = if top.is_empty() {
                    vec![q; k]
                } else {
                    top.iter().copied().cycle().take(k).collect()
                };
                let got = local_context(&index, q, k).map_err(|e| e.to_string())?;
                check(got == expected, || format!("tractogram {t_index}, query {q}, k {k}: {got:?} vs {expected:?}"))?;
                queries += 1;
            }
        }
    }
    check(ties > 0, || "no distance ties exercised".into())?;
    Ok(format!("{C4_TRACTOGRAMS} tractograms, {queries} queries, {ties} tied neighbor pairs"))
}

// 5. Metric cases.

fn criterion_5() -> Outcome {
    let names: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
    let mut pred = vec![0usize; 20];
    pred.extend(vec![1; 19]);
    let parc = Parcellation::from_predictions("s", &names, &pred).map_err(|e| e.to_string())?;
    let t20 = tir(&parc, &[0], 20).map_err(|e| e.to_string())?;
    let t19 = tir(&parc, &[1], 20).map_err(|e| e.to_string())?;
    check(t20 == 1.0 && t19 == 0.0, || format!("TIR boundary: 20 -> {t20}, 19 -> {t19}"))?;

    let f1 = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], &[0, 1]).map_err(|e| e.to_string())?;
    check((f1 - 11.0 / 15.0).abs() <= 1e-15, || format!("macro-F1 {f1} vs 11/15"))?;

    // Atlas: a dense grid on the plane x = 0. Tract: grid points shifted by 2 mm in x.
    let grid: Vec<Point> = (-40..=40)
        .flat_map(|i| (-40..=40).map(move |j| Point::new(0.0, i as f64 * 0.5, j as f64 * 0.5)))
        .collect();
    let tract: Vec<Point> = (0..10)
        .flat_map(|s| (0..15).map(move |k| Point::new(2.0, -10.0 + s as f64, -7.0 + k as f64)))
        .collect();
    let d = tract_to_atlas_distance(&tract, &grid).map_err(|e| e.to_string())?;
    check(d == 2.0, || format!("ATD translation case {d}"))?;
    let lines: Vec<Streamline> = (0..10)
        .map(|s| Streamline::new(tract[s * 15..(s + 1) * 15].to_vec()).unwrap().with_label(Some(1)))
        .collect();
    let subject = Tractogram::new(lines, "s", "ras", names.clone()).map_err(|e| e.to_string())?;
    let atlas_lines: Vec<Streamline> = (0..81)
        .map(|i| Streamline::new(grid[i * 81..(i + 1) * 81].to_vec()).unwrap().with_label(Some(1)))
        .collect();
    let atlas_t = Tractogram::new(atlas_lines, "atlas", "ras", names.clone()).map_err(|e| e.to_string())?;
    let atlas = Atlas::from_tractogram(&atlas_t, 3).map_err(|e| e.to_string())?;
    let p = Parcellation::from_predictions("s", &names, &[1; 10]).map_err(|e| e.to_string())?;
    let report = atd(&p, &subject, &atlas, &[1], 1).map_err(|e| e.to_string())?;
    check(report.mean == Some(2.0), || format!("ATD report {:?}", report.mean))?;

    let mut ln_worst: f64 = 0.0;
    for c in 2..=64 {
        for label in [0, c - 1] {
            let err = (cross_entropy(&vec![0.0; c], label) - (c as f64).ln()).abs();
            ln_worst = ln_worst.max(err / (c as f64).ln());
        }
    }
    check(ln_worst <= 4.0 * f64::EPSILON, || format!("uniform cross-entropy off ln C by {ln_worst:e} relative"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5e7);
    for case in 0..200 {
        let c = rng.random_range(2..6);
        let n = rng.random_range(1..60);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let status: Vec<CutStatus> = (0..n)
            .map(|_| [CutStatus::Cut, CutStatus::Unaffected, CutStatus::Unknown][rng.random_range(0..3)])
            .collect();
        let scope: Vec<usize> = (0..c).collect();
        let m = evaluate_split(&pred, &truth, &status, c, &scope).map_err(|e| e.to_string())?;
        let sum = m.cut.confusion.add(&m.unaffected.confusion).map_err(|e| e.to_string())?;
        let all = Confusion::from_labels(&pred, &truth, c).map_err(|e| e.to_string())?;
        check(sum == m.all.confusion && sum == all, || format!("recombination case {case}"))?;
    }
    Ok(format!(
        "TIR 20/19 -> 1/0; macro-F1 {f1:.6}; ATD {d:.1} mm; ln C relative error {ln_worst:.1e}; 200 recombination cases"
    ))
}

// 6. Format robustness.

const C6_TRK_TRACTOGRAMS: usize = 200;
const C6_FUZZ_CASES: usize = 10_000;

fn random_tractogram(rng: &mut impl Rng) -> Tractogram {
    let n = rng.random_range(0..30);
    let lines: Vec<Streamline> = (0..n)
        .map(|_| {
            let k = rng.random_range(2..25);
            let pts: Vec<Point> = (0..k)
                .map(|_| Point::new(rng.random_range(-120.0..120.0), rng.random_range(-120.0..120.0), rng.random_range(-120.0..120.0)))
                .collect();
            Streamline::new(pts).unwrap()
        })
        .collect();
    Tractogram::new(lines, "s", "ras", vec![]).unwrap()
}

fn scaled_header(rng: &mut impl Rng) -> TrkHeader {
    let mut h = TrkHeader::identity();
    let vs: [f32; 3] = [rng.random_range(0.5f32..3.0), rng.random_range(0.5f32..3.0), rng.random_range(0.5f32..3.0)];
    h.voxel_size = vs;
    for (k, &v) in vs.iter().enumerate() {
        h.vox_to_ras[k][k] = v;
        h.vox_to_ras[k][3] = rng.random_range(-100.0f32..100.0);
    }
    h
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e6);
    let mut worst: f64 = 0.0;
    let mut encoded = Vec::new();
    for i in 0..C6_TRK_TRACTOGRAMS {
        let t = random_tractogram(&mut rng);
        let header = if i % 2 == 0 { TrkHeader::identity() } else { scaled_header(&mut rng) };
        let bytes = encode_trk(&header, &t).map_err(|e| e.to_string())?;
        let back = decode_trk(&bytes).map_err(|e| format!("tractogram {i}: {e}"))?.tractogram;
        check(back.len() == t.len(), || format!("tractogram {i}: count changed"))?;
        for (a, b) in t.streamlines().iter().zip(back.streamlines()) {
            check(a.n_points() == b.n_points(), || format!("tractogram {i}: point count changed"))?;
            for (p, q) in a.points().iter().zip(b.points()) {
                for k in 0..3 {
                    // f32 rounding happens in the stored frame, offset by the header translation.
                    let stored = p[k].abs().max(header.vox_to_ras[k][3].abs() as f64).max(1.0);
                    let ulp = f32::EPSILON as f64 * stored;
                    let err = (p[k] - q[k]).abs() / ulp;
                    check(err <= 4.0, || format!("tractogram {i}: coordinate {} vs {}", p[k], q[k]))?;
                    worst = worst.max(err);
                }
            }
        }
        if !t.is_empty() {
            encoded.push(bytes);
        }
    }

    let mut typed = 0usize;
    let mut accepted = 0usize;
    for case in 0..C6_FUZZ_CASES {
        let base = &encoded[rng.random_range(0..encoded.len())];
        let mut bytes = base.clone();
        let truncation = case % 2 == 0;
        if truncation {
            bytes.truncate(rng.random_range(0..bytes.len()));
        } else {
            for _ in 0..rng.random_range(1..=8) {
                let at = if rng.random_bool(0.5) { rng.random_range(0..1000.min(bytes.len())) } else { rng.random_range(0..bytes.len()) };
                bytes[at] = rng.random();
            }
        }
        let result = catch_unwind(AssertUnwindSafe(|| decode_trk(&bytes).map(|_| ())));
        match result {
            Err(_) => return Err(format!("fuzz case {case} panicked")),
            Ok(Ok(())) if truncation => return Err(format!("fuzz case {case}: truncated file accepted")),
            Ok(Ok(())) => accepted += 1,
            Ok(Err(
                Error::NotATrkFile
                | Error::UnsupportedTrk(_)
                | Error::TruncatedFile(_)
                | Error::CorruptRecord(_)
                | Error::BadTransform
                | Error::InvalidStreamline(_)
                | Error::NonFiniteInput,
            )) => typed += 1,
            Ok(Err(other)) => return Err(format!("fuzz case {case}: unexpected error {other}")),
        }
    }

    let classes: Vec<String> = ["other", "a", "b"].iter().map(|s| s.to_string()).collect();
    for i in 0..100 {
        let plain = random_tractogram(&mut rng);
        let lines: Vec<Streamline> = plain
            .streamlines()
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let status = [CutStatus::Unaffected, CutStatus::Cut, CutStatus::Unknown][rng.random_range(0..3)];
                let label = rng.random_bool(0.8).then(|| rng.random_range(0..3));
                // Records carry no index; readers number streamlines by line.
                s.clone().with_label(label).with_cut_status(status).with_source_index(Some(j))
            })
            .collect();
        let t = Tractogram::new(lines, format!("sub-{i:03}"), "ras", classes.clone()).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_jsonl(&t, &mut buf).map_err(|e| e.to_string())?;
        let back = read_jsonl(Cursor::new(&buf), Some(&classes)).map_err(|e| format!("jsonl {i}: {e}"))?;
        check(back.streamlines() == t.streamlines(), || format!("jsonl {i}: streamlines differ"))?;
        // The subject rides on each record, so an empty file has none.
        check(t.is_empty() || back.subject_id() == t.subject_id(), || format!("jsonl {i}: subject differs"))?;
        let mut again = Vec::new();
        write_jsonl(&back, &mut again).map_err(|e| e.to_string())?;
        check(again == buf, || format!("jsonl {i}: rewrite differs"))?;
    }
    Ok(format!(
        "{C6_TRK_TRACTOGRAMS} trk round trips within {worst:.2} f32 ulp; {C6_FUZZ_CASES} fuzz cases: {typed} typed errors, {accepted} still-valid corruptions, 0 panics; 100 lossless JSONL round trips"
    ))
}

// 7. Pipeline determinism across reruns and worker counts.

fn criterion_7() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = [("a", Some(1)), ("b", Some(1)), ("c", Some(4)), ("d", None)];
    let mut digests = Vec::new();
    for (name, jobs) in runs {
        let dir = root.path().join(name);
        common::pipeline(&dir, 21, jobs);
        digests.push((name, jobs, common::digest_tree(&dir)));
    }
    let reference = &digests[0].2;
    check(reference.len() > 20, || format!("only {} artifacts", reference.len()))?;
    for (name, jobs, d) in &digests[1..] {
        if d != reference {
            let differing: Vec<&String> =
                reference.keys().filter(|k| d.get(*k) != reference.get(*k)).take(5).collect();
            return Err(format!("run {name} (jobs {jobs:?}) differs in {differing:?}"));
        }
    }
    Ok(format!("{} artifacts identical over 2 reruns and --jobs 1, 4 and unset", reference.len()))
}

// 8. Permutation invariance of the context rows.

const C8_SAMPLES: usize = 100;

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x8e8);
    let mut compared = 0usize;
    for i in 0..C8_SAMPLES {
        let arch = Architecture {
            half_width: 3 * rng.random_range(2..=15),
            repr_dim: rng.random_range(1..=16),
            head_widths: (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=12)).collect(),
            num_classes: rng.random_range(2..=8),
            batch_norm: rng.random_bool(0.3),
        };
        let p = ModelParams::init(&arch, &mut rng);
        let rows = rng.random_range(2..=40);
        let x = random_input(&mut rng, arch.half_width, rows);
        let mut perm: Vec<usize> = (1..rows).collect();
        for j in (1..perm.len()).rev() {
            perm.swap(j, rng.random_range(0..=j));
        }
        let y = x.permuted(&perm).map_err(|e| e.to_string())?;
        let a = forward(&p, std::slice::from_ref(&x), None).map_err(|e| e.to_string())?;
        let b = forward(&p, std::slice::from_ref(&y), None).map_err(|e| e.to_string())?;
        check(a.scores == b.scores, || format!("sample {i}: logits changed under {perm:?}"))?;
        compared += a.scores.len();
    }
    Ok(format!("{C8_SAMPLES} samples, {compared} logits bit-identical"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 fov-ca benefit", criterion_1),
        ("2 gradient check", criterion_2),
        ("3 geometry oracles", criterion_3),
        ("4 knn exactness", criterion_4),
        ("5 metric cases", criterion_5),
        ("6 format robustness", criterion_6),
        ("7 determinism", criterion_7),
        ("8 permutation invariance", criterion_8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|s| name.contains(s.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
