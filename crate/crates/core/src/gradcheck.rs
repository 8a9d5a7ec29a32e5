//! Central finite-difference checks of the reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{branch_forward_on, BoundBranch, BranchDims, BranchMode, BranchParams};
use crate::backbone::{BackboneConfig, ConvBlockSpec};
use crate::error::Result;
use crate::loss::{alignment_term, triplet_term};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Lower bound on the relative-error denominator, so that gradients that are
/// zero up to rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step straddled a ReLU kink and so have no valid difference.
    pub skipped_kinks: usize,
}

impl GradCheck {
    pub fn merge(&mut self, other: GradCheck) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Scalar probe `Σ out ⊙ weights` and the ReLU pattern of one evaluation.
fn probe(build: &Builder, inputs: &[Tensor], weights: &Tensor) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let w = tape.constant(weights.reshape(tape.value(out).shape())?);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    Ok((tape.value(loss).item()?, tape.relu_pattern()))
}

/// Compares the reverse-sweep gradient of `Σ build(inputs) ⊙ r` (with seeded
/// random `r`) against central differences, on at most `max_coords` evenly
/// spaced coordinates per input.
pub fn check_gradient(
    inputs: &[Tensor],
    seed: u64,
    max_coords: usize,
    build: &Builder,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).numel()
    };
    let weights = Tensor::vector((0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect());

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let w = tape.constant(weights.reshape(tape.value(out).shape())?);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(loss)?;

    let mut report = GradCheck::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let n = inputs[i].numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let (plus, pat_plus) = probe(build, &work, &weights)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let (minus, pat_minus) = probe(build, &work, &weights)?;
            work[i].data_mut()[j] = orig;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("product shape")
}

/// One differentiable operation with its input shapes.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<Builder<'static>>,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable tape operation, plus the two loss terms.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("linear", &[&[3, 4], &[4], &[3]], |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        }),
        case(
            "conv2d_s1_p1",
            &[&[2, 5, 5], &[3, 2, 3, 3], &[3]],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        case("conv2d_s2_p1", &[&[2, 6, 6], &[2, 2, 3, 3]], |t, v| {
            t.conv2d(v[0], v[1], None, 2, 1)
        }),
        case("conv2d_1x1", &[&[3, 4, 4], &[2, 3, 1, 1], &[2]], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 0)
        }),
        case("tanh", &[&[7]], |t, v| Ok(t.tanh(v[0]))),
        case("sigmoid", &[&[7]], |t, v| Ok(t.sigmoid(v[0]))),
        case("relu", &[&[7]], |t, v| Ok(t.relu(v[0]))),
        case("softmax_axis0", &[&[4, 3]], |t, v| t.softmax(v[0], 0)),
        case("softmax_axis1", &[&[2, 5]], |t, v| t.softmax(v[0], 1)),
        case("add", &[&[5], &[5]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[5], &[5]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[5], &[5]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[5]], |t, v| Ok(t.scale(v[0], -1.7))),
        case("sum", &[&[2, 3]], |t, v| Ok(t.sum(v[0]))),
        case("reshape", &[&[2, 3]], |t, v| t.reshape(v[0], &[3, 2])),
        case("concat", &[&[2], &[3, 1]], |t, v| t.concat(&[v[0], v[1]])),
        case("row", &[&[3, 4]], |t, v| t.row(v[0], 1)),
        case("cosine", &[&[6], &[6]], |t, v| t.cosine(v[0], v[1])),
        case("triplet_term", &[&[6], &[6], &[6]], |t, v| {
            triplet_term(t, v[0], v[1], v[2], 0.2)
        }),
        case("alignment_term", &[&[6], &[6]], |t, v| {
            alignment_term(t, v[0], v[1])
        }),
    ]
}

/// Runs `instances` seeded random draws of every op case.
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut out = Vec::new();
    for (k, c) in op_cases().into_iter().enumerate() {
        let mut total = GradCheck::default();
        for i in 0..instances {
            let s = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((k * 10_000 + i) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let inputs: Vec<Tensor> = c
                .shapes
                .iter()
                .map(|sh| rand_tensor(sh, &mut rng))
                .collect();
            total.merge(check_gradient(&inputs, s, usize::MAX, c.build.as_ref())?);
        }
        out.push((c.name, total));
    }
    Ok(out)
}

/// A small attention branch for composition checks.
pub fn small_branch(seed: u64) -> Result<BranchParams> {
    let dims = BranchDims {
        c: 8,
        c1: 6,
        c2: 5,
        ca: 4,
        co: 5,
        r: 2,
    };
    let backbone = BackboneConfig::from_blocks(
        12,
        vec![
            ConvBlockSpec {
                out_channels: 4,
                kernel: 3,
                stride: 2,
            },
            ConvBlockSpec {
                out_channels: 8,
                kernel: 3,
                stride: 1,
            },
        ],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BranchParams::init("check", backbone, dims, BranchMode::Attention, &mut rng)
}

/// Gradient of one full branch evaluation with respect to the image, the
/// attribute vector and every parameter. Each input tensor is probed on at
/// most `max_coords` coordinates.
pub fn branch_check(seed: u64, max_coords: usize) -> Result<GradCheck> {
    let branch = small_branch(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let side = branch.backbone.input_side;
    let mut inputs = vec![
        rand_tensor(&[3, side, side], &mut rng).map(|x| 0.5 + 0.5 * x),
        rand_tensor(&[branch.dims.ca], &mut rng),
    ];
    // Larger attention weights than the initialiser gives, so the softmax is not flat.
    inputs.extend(branch.params().iter().map(|p| p.value.map(|x| 2.0 * x)));
    let n_blocks = branch.blocks.len();
    let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let bound = BoundBranch::from_vars(n_blocks, &v[2..])?;
        Ok(branch_forward_on(t, v[0], v[1], &bound, &branch)?.f)
    };
    check_gradient(&inputs, seed, max_coords, &build)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_match_differences() {
        for (name, r) in op_suite(3, 11).unwrap() {
            assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
            assert!(r.checked > 0, "{name}");
        }
    }

    #[test]
    fn branch_matches_differences() {
        let r = branch_check(4, 6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked > 50);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A builder whose forward value disagrees with the recorded op: detach hides x·x.
        let build = |t: &mut Tape, v: &[Var]| {
            let d = t.detach(v[0]);
            t.mul(v[0], d)
        };
        let r = check_gradient(&[Tensor::vector(vec![0.7, -1.3])], 1, 10, &build).unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
