//! Gradient checks and brute-force oracle comparisons behind the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{branch_check, op_suite, GradCheck};
use crate::localize::{connected_components, region_bbox, squarify, BBox, BinaryMap, Connectivity};
use crate::metrics::average_precision;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn result(name: impl Into<String>, passed: bool, detail: String) -> SuiteResult {
    SuiteResult {
        name: name.into(),
        passed,
        detail,
    }
}

fn grad_line(name: &str, r: &GradCheck, tol: f64) -> SuiteResult {
    result(
        format!("grad {name}"),
        r.max_rel_error < tol && r.checked > 0,
        format!(
            "max rel err {:.2e} over {} coords ({} on kinks skipped)",
            r.max_rel_error, r.checked, r.skipped_kinks
        ),
    )
}

/// Component labels by union-find over the grid, as sorted pixel sets.
fn union_find_components(map: &BinaryMap, eight: bool) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (map.height, map.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for r in 0..h {
        for c in 0..w {
            if !map.get(r, c) {
                continue;
            }
            let mut nbrs = vec![(0isize, 1isize), (1, 0)];
            if eight {
                nbrs.extend([(1, 1), (1, -1)]);
            }
            for (dr, dc) in nbrs {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < h as isize
                    && cc >= 0
                    && cc < w as isize
                    && map.get(rr as usize, cc as usize)
                {
                    let a = find(&mut parent, r * w + c);
                    let b = find(&mut parent, rr as usize * w + cc as usize);
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for r in 0..h {
        for c in 0..w {
            if map.get(r, c) {
                let root = find(&mut parent, r * w + c);
                groups.entry(root).or_default().push((r, c));
            }
        }
    }
    let mut out: Vec<_> = groups.into_values().collect();
    out.sort();
    out
}

fn random_map(rng: &mut impl Rng) -> BinaryMap {
    let h = rng.gen_range(1..=16);
    let w = rng.gen_range(1..=16);
    let density = rng.gen_range(0.1..0.7);
    let bits = (0..h * w).map(|_| rng.gen_bool(density)).collect();
    BinaryMap::new(h, w, bits).expect("sized")
}

fn localization_oracle(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..cases {
        let map = random_map(&mut rng);
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let mut ours: Vec<Vec<(usize, usize)>> = connected_components(&map, conn)
                .into_iter()
                .map(|r| {
                    let mut p = r.pixels;
                    p.sort();
                    p
                })
                .collect();
            ours.sort();
            let expect = union_find_components(&map, conn == Connectivity::Eight);
            let boxes_ok = ours.iter().all(|px| {
                let b = region_bbox(px).expect("non-empty");
                let r0 = px.iter().map(|p| p.0).min().unwrap();
                let r1 = px.iter().map(|p| p.0).max().unwrap();
                let c0 = px.iter().map(|p| p.1).min().unwrap();
                let c1 = px.iter().map(|p| p.1).max().unwrap();
                b == BBox::new(r0, c0, r1, c1)
            });
            if ours != expect || !boxes_ok {
                failures += 1;
            }
        }
        let side = rng.gen_range(1..=16);
        let r0 = rng.gen_range(0..side);
        let c0 = rng.gen_range(0..side);
        let bbox = BBox::new(r0, c0, rng.gen_range(r0..side), rng.gen_range(c0..side));
        let min_side = rng.gen_range(1..=side);
        let sq = squarify(bbox, side, min_side);
        if !(sq.is_square() && sq.within(side) && sq.contains(&bbox)) {
            failures += 1;
        }
    }
    result(
        "oracle localization",
        failures == 0,
        format!("{cases} random maps, {failures} mismatches"),
    )
}

fn ap_by_definition(rel: &[bool], total: usize) -> f64 {
    let mut sum = 0.0;
    for k in 0..rel.len() {
        if rel[k] {
            let hits = rel[..=k].iter().filter(|&&r| r).count();
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / total as f64
}

fn metric_oracle(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let len = rng.gen_range(1..=8);
        let rel: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.4)).collect();
        let listed = rel.iter().filter(|&&r| r).count();
        let total = listed + rng.gen_range(usize::from(listed == 0)..3);
        let ap = average_precision(&rel, total).expect("valid query");
        worst = worst.max((ap - ap_by_definition(&rel, total)).abs());
    }
    result(
        "oracle average precision",
        worst <= 1e-12,
        format!("{cases} random lists, max deviation {worst:.1e}"),
    )
}

/// Runs every suite; `quick` trims instance counts.
pub fn run_selftest(seed: u64, quick: bool) -> Result<Vec<SuiteResult>> {
    let instances = if quick { 3 } else { 20 };
    let mut out = Vec::new();
    for (name, r) in op_suite(instances, seed)? {
        out.push(grad_line(name, &r, 1e-5));
    }
    let mut branch = GradCheck::default();
    for i in 0..instances as u64 {
        branch.merge(branch_check(seed.wrapping_add(i), 60)?);
    }
    out.push(grad_line("branch composition", &branch, 1e-4));
    out.push(localization_oracle(if quick { 50 } else { 500 }, seed));
    out.push(metric_oracle(if quick { 50 } else { 200 }, seed));
    Ok(out)
}
