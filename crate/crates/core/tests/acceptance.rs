//! Acceptance suite. Runs without the libtest harness so every criterion prints
//! one PASS/FAIL line even when the output is not captured per test.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use attrsim::attention::{channel_attention, spatial_attention, BoundBranch};
use attrsim::commands::{self, StageSelection, TrainArgs};
use attrsim::gradcheck::{op_cases, small_branch};
use attrsim::localize::{
    connected_components, region_bbox, squarify, BBox, BinaryMap, Connectivity,
};
use attrsim::loss::{alignment_loss, joint_loss, triplet_loss, LossWeights};
use attrsim::manifest::{AttributeSchema, Role, Split};
use attrsim::metrics::{
    average_precision, mean_average_precision, recall_at_k, QueryRelevance, RecallVariant,
};
use attrsim::retrieval::{
    evaluate, rerank, EmbeddingIndex, EmbeddingPair, EvalConfig, FusionConfig, IndexedImage,
    RankedList,
};
use attrsim::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, detail: String) -> Outcome {
    let took = start.elapsed();
    check(
        took < limit,
        format!(
            "{detail}; {:.1}s of {}s",
            took.as_secs_f64(),
            limit.as_secs()
        ),
    )
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------- gradients

const STEP: f64 = 1e-5;

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> attrsim::Result<Var> + 'a;

/// Value of `Σ build(inputs) ⊙ weights` and the sign pattern of every ReLU input.
fn scalar_probe(build: &Build, inputs: &[Tensor], weights: &[f64]) -> (f64, Vec<bool>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let v: f64 = tape
        .value(out)
        .data()
        .iter()
        .zip(weights)
        .map(|(a, b)| a * b)
        .sum();
    (v, tape.relu_pattern())
}

/// Worst relative error between the tape gradient and central differences,
/// plus checked and skipped (kink-straddling) coordinate counts.
fn fd_compare(
    build: &Build,
    inputs: &[Tensor],
    seed: u64,
    max_coords: usize,
) -> (f64, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let weights: Vec<f64> = (0..tape.value(out).numel())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let w = tape.constant(Tensor::new(shape, weights.clone()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let base = tape.relu_pattern();
    let grads = tape.backward(loss).unwrap();

    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let n = inputs[i].numel();
        let stride = n.div_ceil(max_coords).max(1);
        for j in (0..n).step_by(stride) {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + STEP;
            let (plus, pp) = scalar_probe(build, &work, &weights);
            work[i].data_mut()[j] = x - STEP;
            let (minus, pm) = scalar_probe(build, &work, &weights);
            work[i].data_mut()[j] = x;
            if pp != base || pm != base {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[j];
            // Gradients that vanish up to rounding are compared absolutely.
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    (worst, checked, skipped)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let instances = 20;
    let mut op_worst = 0.0f64;
    let mut worst_name = "";
    let mut op_checked = 0;
    for (k, case) in op_cases().into_iter().enumerate() {
        for i in 0..instances {
            let seed = 7_000 + (k * 100 + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .map(|s| rand_tensor(s, &mut rng))
                .collect();
            let (err, n, _) = fd_compare(case.build.as_ref(), &inputs, seed, usize::MAX);
            if err > op_worst {
                op_worst = err;
                worst_name = case.name;
            }
            op_checked += n;
        }
    }

    let mut branch_worst = 0.0f64;
    let (mut branch_checked, mut branch_skipped) = (0, 0);
    for seed in 0..instances as u64 {
        let branch = small_branch(100 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let side = branch.backbone.input_side;
        let mut inputs = vec![
            rand_tensor(&[3, side, side], &mut rng).map(|x| 0.5 + 0.5 * x),
            rand_tensor(&[branch.dims.ca], &mut rng),
        ];
        inputs.extend(branch.params().iter().map(|p| p.value.map(|x| 2.0 * x)));
        let n_blocks = branch.blocks.len();
        let build = |t: &mut Tape, v: &[Var]| -> attrsim::Result<Var> {
            let bound = BoundBranch::from_vars(n_blocks, &v[2..])?;
            Ok(attrsim::attention::branch_forward_on(t, v[0], v[1], &bound, &branch)?.f)
        };
        let (err, n, s) = fd_compare(&build, &inputs, seed, 12);
        branch_worst = branch_worst.max(err);
        branch_checked += n;
        branch_skipped += s;
    }
    let ok = op_worst < 1e-5 && branch_worst < 1e-4 && op_checked > 0 && branch_checked > 0;
    let detail = format!(
        "ops max rel {op_worst:.2e} ({worst_name}) over {op_checked} coords; branch max rel {branch_worst:.2e} over {branch_checked} coords, {branch_skipped} kink coords skipped"
    );
    if ok {
        within(Duration::from_secs(60), start, detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- attention

fn attention_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut failures = Vec::new();
    let mut worst_sum: f64 = 0.0;
    for case in 0..1000 {
        let mut branch = small_branch(case).unwrap();
        let gain = rng.gen_range(0.5..4.0);
        for p in branch.params_mut() {
            p.value = p.value.map(|x| gain * x);
        }
        let c = branch.dims.c;
        let (h, w) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let scale = rng.gen_range(0.1..5.0);
        let x = rand_tensor(&[c, h, w], &mut rng).map(|v| scale * v);
        let a = rand_tensor(&[branch.dims.ca], &mut rng).map(|v| 2.0 * v);

        let mut tape = Tape::new();
        let bound = branch.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let av = tape.constant(a);
        let (x_s, alpha_s) = spatial_attention(&mut tape, xv, av, &bound, &branch.dims).unwrap();
        let (x_c, alpha_c) = channel_attention(&mut tape, x_s, av, &bound, &branch.dims).unwrap();
        let (x_s, alpha_s) = (tape.value(x_s), tape.value(alpha_s));
        let (x_c, alpha_c) = (tape.value(x_c), tape.value(alpha_c));

        let dev = (alpha_s.data().iter().sum::<f64>() - 1.0).abs();
        worst_sum = worst_sum.max(dev);
        if dev > 1e-9 {
            failures.push(format!("case {case}: alpha_s sums to 1{dev:+e}"));
        }
        if !alpha_c.data().iter().all(|&g| g > 0.0 && g < 1.0) {
            failures.push(format!("case {case}: channel gate outside (0,1)"));
        }
        for ch in 0..c {
            let plane = x.channel(ch);
            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = x_s.data()[ch];
            // A convex combination can overshoot its envelope only by rounding.
            let slack = 1e-12 * hi.abs().max(lo.abs()).max(1.0);
            if v < lo - slack || v > hi + slack {
                failures.push(format!("case {case}: x_s[{ch}] = {v} outside [{lo}, {hi}]"));
            }
            if x_c.data()[ch].abs() > x_s.data()[ch].abs() {
                failures.push(format!("case {case}: |x_c[{ch}]| > |x_s[{ch}]|"));
            }
        }
    }
    let detail = format!(
        "1000 random inputs, max |Σα_s − 1| {worst_sum:.1e}, {} violations{}",
        failures.len(),
        failures
            .first()
            .map_or(String::new(), |f| format!(" (first: {f})"))
    );
    if failures.is_empty() {
        within(Duration::from_secs(30), start, detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- localization

fn random_map(rng: &mut impl Rng) -> BinaryMap {
    let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
    let density = rng.gen_range(0.05..0.8);
    BinaryMap::new(h, w, (0..h * w).map(|_| rng.gen_bool(density)).collect()).unwrap()
}

/// Depth-first flood fill from every unvisited foreground pixel in raster order,
/// then a stable sort by decreasing area. Pixels within a component are sorted.
fn flood_fill(map: &BinaryMap, eight: bool) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (map.height as isize, map.width as isize);
    let mut label = vec![false; (h * w) as usize];
    let mut comps = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if !map.get(r0 as usize, c0 as usize) || label[(r0 * w + c0) as usize] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(r0, c0)];
            label[(r0 * w + c0) as usize] = true;
            while let Some((r, c)) = stack.pop() {
                comp.push((r as usize, c as usize));
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                            continue;
                        }
                        let (nr, nc) = (r + dr, c + dc);
                        if nr >= 0 && nc >= 0 && nr < h && nc < w {
                            let idx = (nr * w + nc) as usize;
                            if map.get(nr as usize, nc as usize) && !label[idx] {
                                label[idx] = true;
                                stack.push((nr, nc));
                            }
                        }
                    }
                }
            }
            comp.sort();
            comps.push(comp);
        }
    }
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    comps
}

fn localization_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut mismatches = Vec::new();
    for case in 0..500 {
        let map = random_map(&mut rng);
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let ours: Vec<Vec<(usize, usize)>> = connected_components(&map, conn)
                .into_iter()
                .map(|r| {
                    let mut p = r.pixels;
                    p.sort();
                    p
                })
                .collect();
            if ours != flood_fill(&map, eight) {
                mismatches.push(format!(
                    "case {case}: components differ ({}-connected)",
                    conn.number()
                ));
            }
            for px in &ours {
                let b = region_bbox(px).unwrap();
                let brute = BBox::new(
                    px.iter().map(|p| p.0).min().unwrap(),
                    px.iter().map(|p| p.1).min().unwrap(),
                    px.iter().map(|p| p.0).max().unwrap(),
                    px.iter().map(|p| p.1).max().unwrap(),
                );
                if b != brute {
                    mismatches.push(format!("case {case}: bbox {b:?} vs {brute:?}"));
                }
            }
        }
        let side = rng.gen_range(1..=16usize);
        let (ra, rb) = (rng.gen_range(0..side), rng.gen_range(0..side));
        let (ca, cb) = (rng.gen_range(0..side), rng.gen_range(0..side));
        let bbox = BBox::new(ra.min(rb), ca.min(cb), ra.max(rb), ca.max(cb));
        let min_side = rng.gen_range(1..=side + 4);
        let sq = squarify(bbox, side, min_side);
        let square = sq.row1 - sq.row0 == sq.col1 - sq.col0;
        let in_bounds = sq.row1 < side && sq.col1 < side;
        let contains = sq.row0 <= bbox.row0
            && sq.col0 <= bbox.col0
            && sq.row1 >= bbox.row1
            && sq.col1 >= bbox.col1;
        if !(square && in_bounds && contains) {
            mismatches.push(format!(
                "case {case}: squarify({bbox:?}, {side}, {min_side}) = {sq:?}"
            ));
        }
    }
    check(
        mismatches.is_empty(),
        format!(
            "500 random maps, both connectivities, {} mismatches{}",
            mismatches.len(),
            mismatches
                .first()
                .map_or(String::new(), |m| format!(" (first: {m})"))
        ),
    )
}

// ---------------------------------------------------------------- metrics

/// Σ_k P@k · rel_k / R with P@k recounted from scratch at every k.
fn ap_terms(rel: &[bool], total: usize) -> f64 {
    let mut acc = 0.0;
    for k in 1..=rel.len() {
        if rel[k - 1] {
            let p_at_k = rel.iter().take(k).filter(|&&r| r).count() as f64 / k as f64;
            acc += p_at_k;
        }
    }
    acc / total as f64
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let mut queries = Vec::new();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let len = rng.gen_range(1..=8);
        let rel: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.45)).collect();
        let listed = rel.iter().filter(|&&r| r).count();
        let total = listed.max(1) + rng.gen_range(0..3);
        let ap = average_precision(&rel, total).map_err(|e| e.to_string())?;
        worst = worst.max((ap - ap_terms(&rel, total)).abs());
        queries.push(QueryRelevance {
            relevance: rel,
            total_relevant: total,
        });
    }
    let map = mean_average_precision(&queries).map_err(|e| e.to_string())?;
    let map_direct = queries
        .iter()
        .map(|q| ap_terms(&q.relevance, q.total_relevant))
        .sum::<f64>()
        / 200.0;
    let mut recall_dev: f64 = 0.0;
    for k in 1..=9 {
        let mut hit = 0.0;
        let mut frac = 0.0;
        for q in &queries {
            let found = q.relevance.iter().take(k).filter(|&&r| r).count();
            hit += if found > 0 { 1.0 } else { 0.0 };
            frac += found as f64 / q.total_relevant as f64;
        }
        let ours =
            recall_at_k(&queries, k, RecallVariant::AtLeastOne).map_err(|e| e.to_string())?;
        let ours_f =
            recall_at_k(&queries, k, RecallVariant::Fraction).map_err(|e| e.to_string())?;
        recall_dev = recall_dev
            .max((ours - hit / 200.0).abs())
            .max((ours_f - frac / 200.0).abs());
    }
    let map_dev = (map - map_direct).abs();
    check(
        worst <= 1e-12 && map_dev <= 1e-12 && recall_dev <= 1e-12,
        format!("200 random lists: AP dev {worst:.1e}, MAP dev {map_dev:.1e}, Recall@1..9 dev {recall_dev:.1e}"),
    )
}

// ---------------------------------------------------------------- losses

fn loss_anchors() -> Outcome {
    let mut failed = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol || got.is_nan() {
            failed.push(format!("{name}: {got} vs {want}"));
        }
    };
    expect(
        "triplet maximal separation",
        triplet_loss(1.0, -1.0, 0.2),
        0.0,
        0.0,
    );
    for s in [-1.0, -0.3, 0.0, 0.5, 1.0] {
        expect("triplet zero gap", triplet_loss(s, s, 0.2), 0.2, 0.0);
    }
    expect("triplet 0.9/0.2", triplet_loss(0.9, 0.2, 0.2), 0.0, 0.0);

    let g: [&[f64]; 3] = [&[3.0, 4.0], &[0.0, 2.0], &[-1.0, 0.0]];
    let same =
        alignment_loss(&[(g[0], g[0]), (g[1], g[1]), (g[2], g[2])]).map_err(|e| e.to_string())?;
    expect("alignment identical", same, 0.0, 0.0);
    let neg: [Vec<f64>; 3] = [vec![-3.0, -4.0], vec![0.0, -2.0], vec![1.0, 0.0]];
    let anti = alignment_loss(&[(g[0], &neg[0]), (g[1], &neg[1]), (g[2], &neg[2])])
        .map_err(|e| e.to_string())?;
    expect("alignment antipodal", anti, 6.0, 0.0);
    let perp: [Vec<f64>; 3] = [vec![-4.0, 3.0], vec![5.0, 0.0], vec![0.0, 7.0]];
    let orth = alignment_loss(&[(g[0], &perp[0]), (g[1], &perp[1]), (g[2], &perp[2])])
        .map_err(|e| e.to_string())?;
    expect("alignment orthogonal", orth, 3.0, 0.0);

    let w = LossWeights {
        alpha: 1.0,
        beta: 0.1,
        gamma: 0.1,
        margin: 0.2,
    };
    let d = LossWeights::default();
    expect("default alpha", d.alpha, w.alpha, 0.0);
    expect("default beta", d.beta, w.beta, 0.0);
    expect("default gamma", d.gamma, w.gamma, 0.0);
    expect("default margin", d.margin, w.margin, 0.0);
    expect("joint 1,2,3", joint_loss(1.0, 2.0, 3.0, &w), 1.5, 1e-12);
    expect("joint zeros", joint_loss(0.0, 0.0, 0.0, &w), 0.0, 0.0);
    let stage1 = LossWeights {
        beta: 0.0,
        gamma: 0.0,
        ..w
    };
    expect(
        "joint stage-1",
        joint_loss(0.7312, 4.0, 9.0, &stage1),
        0.7312,
        0.0,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (lg, ll, la) = (
            rng.gen_range(0.0..3.0),
            rng.gen_range(0.0..3.0),
            rng.gen_range(0.0..6.0),
        );
        expect(
            "joint arithmetic",
            joint_loss(lg, ll, la, &w),
            lg + 0.1 * ll + 0.1 * la,
            1e-12,
        );
    }
    check(
        failed.is_empty(),
        if failed.is_empty() {
            "triplet, alignment and joint anchors reproduced".to_string()
        } else {
            failed.join("; ")
        },
    )
}

// ---------------------------------------------------------------- end to end

fn random_baseline(index: &EmbeddingIndex, cfg: &EvalConfig, seeds: u64) -> Vec<f64> {
    let mut acc = vec![0.0; index.attributes.len()];
    for s in 0..seeds {
        let rep = evaluate(&index.randomized(1000 + s), cfg).unwrap();
        for r in &rep.per_attribute {
            acc[r.attribute] += r.map / seeds as f64;
        }
    }
    acc
}

fn end_to_end(work: &Path) -> Outcome {
    let start = Instant::now();
    let data = work.join("synth");
    let manifest = commands::gen_data(&data, "glyph:3,stripe:3", 100, 64, 0.1, 1)
        .map_err(|e| e.to_string())?;
    if manifest.records.len() != 600 {
        return Err(format!(
            "expected 600 images, got {}",
            manifest.records.len()
        ));
    }
    let ckpt = work.join("desk.ckpt");
    let trace = commands::train(&TrainArgs {
        data: data.clone(),
        config: None,
        stage: StageSelection::Both,
        out: ckpt.clone(),
        resume: None,
        seed: Some(3),
        verbose: false,
    })
    .map_err(|e| e.to_string())?;
    let index_path = work.join("test.idx");
    commands::embed(&data, &ckpt, Split::Test, &index_path, None).map_err(|e| e.to_string())?;
    let (fused, index) =
        commands::eval_cmd(&index_path, Split::Test, 100, Some(0.6)).map_err(|e| e.to_string())?;
    let (global_only, _) =
        commands::eval_cmd(&index_path, Split::Test, 100, Some(1.0)).map_err(|e| e.to_string())?;
    let baseline = random_baseline(&index, &fused.config, 5);

    let mut notes = Vec::new();
    let mut ok = true;
    for r in &fused.per_attribute {
        let base = baseline[r.attribute];
        ok &= r.map >= 2.0 * base;
        notes.push(format!(
            "attr {} MAP {:.3} vs random {:.3}",
            r.attribute, r.map, base
        ));
    }
    ok &= fused.overall_map >= global_only.overall_map - 0.05;
    notes.push(format!(
        "fused {:.3} vs global-only {:.3}",
        fused.overall_map, global_only.overall_map
    ));
    let s1: Vec<f64> = trace
        .iter()
        .filter(|e| e.stage == 1)
        .map(|e| e.joint)
        .collect();
    match (s1.first(), s1.last()) {
        (Some(first), Some(last)) if s1.len() >= 2 => {
            ok &= last < first;
            notes.push(format!("stage-1 loss {first:.4} -> {last:.4}"));
        }
        _ => {
            ok = false;
            notes.push("stage-1 trace too short".into());
        }
    }
    let detail = notes.join("; ");
    if ok {
        within(Duration::from_secs(15 * 60), start, detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- determinism

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_attrsim"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "attrsim {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn determinism(work: &Path) -> Outcome {
    let data = work.join("det");
    commands::gen_data(&data, "glyph:3,stripe:2", 12, 64, 0.1, 9).map_err(|e| e.to_string())?;
    let config = work.join("short.conf");
    std::fs::write(
        &config,
        "epochs_stage1 = 2\nepochs_stage2 = 1\ntriplets_per_epoch = 48\n",
    )
    .map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut ckpts = Vec::new();
    for run in 0..2 {
        let out = work.join(format!("det{run}.ckpt"));
        cli(&[
            "train",
            "--data",
            &s(&data),
            "--config",
            &s(&config),
            "--out",
            &s(&out),
            "--seed",
            "42",
            "--quiet",
        ])?;
        ckpts.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    let mut indices = Vec::new();
    for run in 0..2 {
        let out = work.join(format!("det{run}.idx"));
        cli(&[
            "embed",
            "--data",
            &s(&data),
            "--ckpt",
            &s(&work.join("det0.ckpt")),
            "--split",
            "test",
            "--out",
            &s(&out),
        ])?;
        indices.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    let other = work.join("det_other.ckpt");
    cli(&[
        "train",
        "--data",
        &s(&data),
        "--config",
        &s(&config),
        "--out",
        &s(&other),
        "--seed",
        "43",
        "--quiet",
    ])?;
    let differs = std::fs::read(&other).map_err(|e| e.to_string())? != ckpts[0];
    check(
        ckpts[0] == ckpts[1] && indices[0] == indices[1] && differs,
        format!(
            "checkpoints identical: {} ({} bytes); indices identical: {} ({} bytes); other seed differs: {differs}",
            ckpts[0] == ckpts[1],
            ckpts[0].len(),
            indices[0] == indices[1],
            indices[0].len()
        ),
    )
}

// ---------------------------------------------------------------- rerank

fn pair(v: [f64; 2]) -> EmbeddingPair {
    EmbeddingPair {
        global: v.to_vec(),
        local: v.to_vec(),
    }
}

fn rerank_contract() -> Outcome {
    let images: Vec<IndexedImage> = (0..5)
        .map(|id| IndexedImage {
            id,
            role: Some(if id == 0 {
                Role::Query
            } else {
                Role::Candidate
            }),
            labels: BTreeMap::from([(0, 0), (1, 0)]),
        })
        .collect();
    let attrs = vec![
        AttributeSchema {
            name: "shape".into(),
            value_count: 1,
        },
        AttributeSchema {
            name: "texture".into(),
            value_count: 1,
        },
    ];
    let mut index = EmbeddingIndex::new(Split::Test, 2, attrs, images);
    // Summed over both attributes with cosines in {0, 1}: item 1 scores 0,
    // items 2 and 3 tie at 1 through different attributes, item 4 scores 2.
    let vectors: [([f64; 2], [f64; 2]); 5] = [
        ([1.0, 0.0], [1.0, 0.0]),
        ([0.0, 1.0], [0.0, 1.0]),
        ([1.0, 0.0], [0.0, 3.0]),
        ([0.0, 2.0], [5.0, 0.0]),
        ([4.0, 0.0], [2.0, 0.0]),
    ];
    for (id, (a0, a1)) in vectors.iter().enumerate() {
        index.insert(0, id as u32, pair(*a0)).unwrap();
        index.insert(1, id as u32, pair(*a1)).unwrap();
    }
    let cfg = FusionConfig::new(0.5).unwrap();
    let list = |ids: &[u32]| RankedList {
        query: 0,
        items: ids.iter().map(|&id| (id, 0.0)).collect(),
    };
    let run = |ids: &[u32], n: usize| rerank(&list(ids), &[0, 1], &index, &cfg, n).map(|r| r.ids());

    let cases: [(&[u32], usize, &[u32]); 5] = [
        // Head of three reordered, item 4 stays in the suffix.
        (&[1, 2, 3, 4], 3, &[2, 3, 1, 4]),
        // Tied items keep their incoming order.
        (&[1, 3, 2, 4], 3, &[3, 2, 1, 4]),
        (&[1, 2, 3, 4], 4, &[4, 2, 3, 1]),
        (&[4, 1, 3, 2], 1, &[4, 1, 3, 2]),
        // top_n beyond the list length covers the whole list.
        (&[3, 1, 2], 10, &[3, 2, 1]),
    ];
    let mut bad = Vec::new();
    for (input, n, want) in cases {
        let got = run(input, n).map_err(|e| e.to_string())?;
        if got != want {
            bad.push(format!("{input:?} top {n}: {got:?}, expected {want:?}"));
        }
    }
    let scores =
        rerank(&list(&[1, 2, 3, 4]), &[0, 1], &index, &cfg, 4).map_err(|e| e.to_string())?;
    let want_scores = [(4, 2.0), (2, 1.0), (3, 1.0), (1, 0.0)];
    if scores.items != want_scores {
        bad.push(format!("scores {:?}", scores.items));
    }
    check(
        bad.is_empty(),
        if bad.is_empty() {
            "4-item hand-set case: head reordered, suffix kept, ties stable".into()
        } else {
            bad.join("; ")
        },
    )
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("1 gradient suite", Box::new(gradient_suite)),
        ("2 attention invariants", Box::new(attention_invariants)),
        ("3 localization oracle", Box::new(localization_oracle)),
        ("4 metric oracle", Box::new(metric_oracle)),
        ("5 loss anchors", Box::new(loss_anchors)),
        (
            "6 end-to-end synthetic",
            Box::new(|| end_to_end(work.path())),
        ),
        ("7 determinism", Box::new(|| determinism(work.path()))),
        ("8 rerank contract", Box::new(rerank_contract)),
    ];
    let mut all = true;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                all = false;
                println!("FAIL criterion {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
