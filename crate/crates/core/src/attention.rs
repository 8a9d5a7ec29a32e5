//! Attribute-aware spatial attention, attribute-aware channel attention and
//! the projection head: one branch maps `(image, attribute)` to an
//! attribute-specific embedding.

use rand::Rng;

use crate::backbone::{
    embed_attribute, extract_features, mean_pool_features, xavier, AttributeEmbeddingTable,
    BackboneConfig, ConvBlock,
};
use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Param, Tensor};

/// Widths of one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchDims {
    /// Feature-map channels.
    pub c: usize,
    /// Spatial-attention projection width.
    pub c1: usize,
    /// Channel-attention attribute width.
    pub c2: usize,
    /// Attribute embedding width.
    pub ca: usize,
    /// Output embedding width.
    pub co: usize,
    /// Channel-attention reduction rate.
    pub r: usize,
}

impl Default for BranchDims {
    fn default() -> Self {
        BranchDims {
            c: 64,
            c1: 64,
            c2: 64,
            ca: 32,
            co: 64,
            r: 4,
        }
    }
}

impl BranchDims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.c, self.c1, self.c2, self.ca, self.co, self.r];
        if all.contains(&0) {
            return Err(Error::Config(format!("zero width in {self:?}")));
        }
        if self.c % self.r != 0 {
            return Err(Error::Config(format!(
                "c = {} not divisible by reduction rate {}",
                self.c, self.r
            )));
        }
        Ok(())
    }

    pub fn reduced(&self) -> usize {
        self.c / self.r
    }
}

/// How a branch pools its feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BranchMode {
    /// Spatial then channel attention, conditioned on the attribute.
    #[default]
    Attention,
    /// Plain spatial mean pooling (the attribute-agnostic triplet baseline).
    MeanPool,
}

impl BranchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchMode::Attention => "attention",
            BranchMode::MeanPool => "meanpool",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(BranchMode::Attention),
            "meanpool" => Ok(BranchMode::MeanPool),
            other => Err(Error::Config(format!("unknown branch mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub backbone: BackboneConfig,
    pub dims: BranchDims,
    pub mode: BranchMode,
    pub blocks: Vec<ConvBlock>,
    /// 1×1 convolution `[c1, c, 1, 1]` producing p(x), with bias.
    pub asa_conv: Param,
    pub asa_bias: Param,
    /// `[c1, ca]`, no bias.
    pub w_s: Param,
    /// `[c2, ca]`, no bias.
    pub w_c: Param,
    /// `[c/r, c + c2]` reduction layer.
    pub w1: Param,
    pub b1: Param,
    /// `[c, c/r]` expansion layer.
    pub w2: Param,
    pub b2: Param,
    /// `[co, c]` projection head.
    pub proj_w: Param,
    pub proj_b: Param,
}

impl BranchParams {
    pub fn init(
        prefix: &str,
        backbone: BackboneConfig,
        dims: BranchDims,
        mode: BranchMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        backbone.validate()?;
        dims.validate()?;
        if backbone.feature_channels != dims.c {
            return Err(Error::Config(format!(
                "backbone emits {} channels, branch expects c = {}",
                backbone.feature_channels, dims.c
            )));
        }
        let BranchDims {
            c, c1, c2, ca, co, ..
        } = dims;
        let cr = dims.reduced();
        let blocks = backbone.init_params(prefix, rng);
        let p = |name: &str, t: Tensor| Param::new(format!("{prefix}.{name}"), t);
        Ok(BranchParams {
            asa_conv: p("asa_conv", xavier(&[c1, c, 1, 1], c, c1, rng)),
            asa_bias: p("asa_bias", Tensor::zeros(&[c1])),
            w_s: p("w_s", xavier(&[c1, ca], ca, c1, rng)),
            w_c: p("w_c", xavier(&[c2, ca], ca, c2, rng)),
            w1: p("w1", xavier(&[cr, c + c2], c + c2, cr, rng)),
            b1: p("b1", Tensor::zeros(&[cr])),
            w2: p("w2", xavier(&[c, cr], cr, c, rng)),
            b2: p("b2", Tensor::zeros(&[c])),
            proj_w: p("proj_w", xavier(&[co, c], c, co, rng)),
            proj_b: p("proj_b", Tensor::zeros(&[co])),
            backbone,
            dims,
            mode,
            blocks,
        })
    }

    /// Expected shape of every parameter, in [`BranchParams::params`] order.
    pub fn expected_shapes(backbone: &BackboneConfig, dims: &BranchDims) -> Vec<Vec<usize>> {
        let BranchDims {
            c, c1, c2, ca, co, ..
        } = *dims;
        let cr = dims.reduced();
        let mut shapes = Vec::new();
        let mut c_in = 3;
        for b in &backbone.blocks {
            shapes.push(vec![b.out_channels, c_in, b.kernel, b.kernel]);
            shapes.push(vec![b.out_channels]);
            c_in = b.out_channels;
        }
        shapes.extend([
            vec![c1, c, 1, 1],
            vec![c1],
            vec![c1, ca],
            vec![c2, ca],
            vec![cr, c + c2],
            vec![cr],
            vec![c, cr],
            vec![c],
            vec![co, c],
            vec![co],
        ]);
        shapes
    }

    /// Checks every parameter against the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        let expected = Self::expected_shapes(&self.backbone, &self.dims);
        let params = self.params();
        if expected.len() != params.len() {
            return Err(Error::shape("parameter count does not match backbone"));
        }
        for (p, shape) in params.iter().zip(&expected) {
            if p.value.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{} has shape {:?}, dims require {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for b in &self.blocks {
            out.push(&b.kernel);
            out.push(&b.bias);
        }
        out.extend([
            &self.asa_conv,
            &self.asa_bias,
            &self.w_s,
            &self.w_c,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.proj_w,
            &self.proj_b,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.kernel);
            out.push(&mut b.bias);
        }
        out.extend([
            &mut self.asa_conv,
            &mut self.asa_bias,
            &mut self.w_s,
            &mut self.w_c,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.proj_w,
            &mut self.proj_b,
        ]);
        out
    }

    /// Places every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBranch {
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        BoundBranch::from_vars(self.blocks.len(), &vars).expect("parameter count")
    }

    /// Adds the gradients of `bound` into the parameters (zero where the loss
    /// did not reach a parameter).
    pub fn accumulate_grads(&mut self, bound: &BoundBranch, grads: &Gradients) -> Result<()> {
        for (p, var) in self.params_mut().into_iter().zip(bound.vars()) {
            match grads.get(var) {
                Some(g) => p.accumulate_grad(&g)?,
                None => p.accumulate_grad(&Tensor::zeros(p.value.shape()))?,
            }
        }
        Ok(())
    }
}

/// Tape handles for one [`BranchParams`].
#[derive(Clone, Debug)]
pub struct BoundBranch {
    pub blocks: Vec<(Var, Var)>,
    pub asa_conv: Var,
    pub asa_bias: Var,
    pub w_s: Var,
    pub w_c: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl BoundBranch {
    /// Rebuilds the handles from vars laid out in [`BranchParams::params`] order.
    pub fn from_vars(n_blocks: usize, vars: &[Var]) -> Result<Self> {
        if vars.len() != 2 * n_blocks + 10 {
            return Err(Error::shape(format!(
                "{} vars for a branch with {n_blocks} blocks",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let blocks = (0..n_blocks).map(|_| (next(), next())).collect();
        Ok(BoundBranch {
            blocks,
            asa_conv: next(),
            asa_bias: next(),
            w_s: next(),
            w_c: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            proj_w: next(),
            proj_b: next(),
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flat_map(|&(k, b)| [k, b]).collect();
        out.extend([
            self.asa_conv,
            self.asa_bias,
            self.w_s,
            self.w_c,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.proj_w,
            self.proj_b,
        ]);
        out
    }
}

fn expect_shape(tape: &Tape, v: Var, shape: &[usize], what: &str) -> Result<()> {
    if tape.value(v).shape() != shape {
        return Err(Error::shape(format!(
            "{what}: expected {shape:?}, got {:?}",
            tape.value(v).shape()
        )));
    }
    Ok(())
}

/// Softmax over `logits` (one per location, any shape with `h·w` entries) and
/// the resulting weighted sum of the columns of `x[c,h,w]`. Returns `(x_s, alpha[h,w])`.
pub fn attention_pool(tape: &mut Tape, x: Var, logits: Var) -> Result<(Var, Var)> {
    let shape = tape.value(x).shape().to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::shape(format!(
            "attention_pool expects [c,h,w], got {shape:?}"
        )));
    };
    if tape.value(logits).numel() != h * w {
        return Err(Error::shape(format!(
            "{} logits for a {h}x{w} map",
            tape.value(logits).numel()
        )));
    }
    let row = tape.reshape(logits, &[1, h * w])?;
    let alpha = tape.softmax(row, 1)?;
    let col = tape.reshape(alpha, &[h * w, 1])?;
    let flat = tape.reshape(x, &[c, h * w])?;
    let pooled = tape.matmul(flat, col)?;
    let x_s = tape.reshape(pooled, &[c])?;
    let alpha_s = tape.reshape(alpha, &[h, w])?;
    Ok((x_s, alpha_s))
}

/// Attribute-aware spatial attention. Returns `(x_s[c], alpha_s[h,w])`.
pub fn spatial_attention(
    tape: &mut Tape,
    x: Var,
    a: Var,
    params: &BoundBranch,
    dims: &BranchDims,
) -> Result<(Var, Var)> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[0] != dims.c {
        return Err(Error::shape(format!(
            "spatial attention expects [{}, h, w], got {shape:?}",
            dims.c
        )));
    }
    expect_shape(tape, a, &[dims.ca], "attribute vector")?;
    let hw = shape[1] * shape[2];
    let conv = tape.conv2d(x, params.asa_conv, Some(params.asa_bias), 1, 0)?;
    let px = tape.tanh(conv);
    let wa = tape.linear(params.w_s, a, None)?;
    let pa = tape.tanh(wa);
    // Σ_i p(a)_i · p(x)_{i,j}: the duplicated attribute vector against every location.
    let pa_row = tape.reshape(pa, &[1, dims.c1])?;
    let px_flat = tape.reshape(px, &[dims.c1, hw])?;
    let dots = tape.matmul(pa_row, px_flat)?;
    let logits = tape.scale(dots, 1.0 / (dims.c1 as f64).sqrt());
    attention_pool(tape, x, logits)
}

/// Attribute-aware channel attention. Returns `(x_c[c], alpha_c[c])`.
pub fn channel_attention(
    tape: &mut Tape,
    x_s: Var,
    a: Var,
    params: &BoundBranch,
    dims: &BranchDims,
) -> Result<(Var, Var)> {
    expect_shape(tape, x_s, &[dims.c], "attended feature")?;
    expect_shape(tape, a, &[dims.ca], "attribute vector")?;
    let wa = tape.linear(params.w_c, a, None)?;
    let q = tape.relu(wa);
    let joined = tape.concat(&[q, x_s])?;
    let reduced = tape.linear(params.w1, joined, Some(params.b1))?;
    let hidden = tape.relu(reduced);
    let gate_logits = tape.linear(params.w2, hidden, Some(params.b2))?;
    let alpha_c = tape.sigmoid(gate_logits);
    let x_c = tape.mul(x_s, alpha_c)?;
    Ok((x_c, alpha_c))
}

/// `W·x_c + b`.
pub fn project_embedding(
    tape: &mut Tape,
    x_c: Var,
    params: &BoundBranch,
    dims: &BranchDims,
) -> Result<Var> {
    expect_shape(tape, x_c, &[dims.c], "gated feature")?;
    tape.linear(params.proj_w, x_c, Some(params.proj_b))
}

/// Tape handles of one branch evaluation.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub features: Var,
    pub alpha_s: Option<Var>,
    pub x_s: Var,
    pub alpha_c: Option<Var>,
    pub x_c: Var,
    pub f: Var,
}

/// Backbone → (spatial attention → channel attention | mean pool) → projection.
pub fn branch_forward_on(
    tape: &mut Tape,
    image: Var,
    a: Var,
    params: &BoundBranch,
    branch: &BranchParams,
) -> Result<BranchVars> {
    let dims = &branch.dims;
    let features = extract_features(tape, image, &branch.backbone, &params.blocks)?;
    match branch.mode {
        BranchMode::Attention => {
            let (x_s, alpha_s) = spatial_attention(tape, features, a, params, dims)?;
            let (x_c, alpha_c) = channel_attention(tape, x_s, a, params, dims)?;
            let f = project_embedding(tape, x_c, params, dims)?;
            Ok(BranchVars {
                features,
                alpha_s: Some(alpha_s),
                x_s,
                alpha_c: Some(alpha_c),
                x_c,
                f,
            })
        }
        BranchMode::MeanPool => {
            let pooled = mean_pool_features(tape, features)?;
            let f = project_embedding(tape, pooled, params, dims)?;
            Ok(BranchVars {
                features,
                alpha_s: None,
                x_s: pooled,
                alpha_c: None,
                x_c: pooled,
                f,
            })
        }
    }
}

/// Materialised intermediates of one branch evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutputs {
    /// Spatial weights `[h, w]`; uniform in mean-pool mode.
    pub alpha_s: Tensor,
    pub x_s: Tensor,
    /// Channel gates `[c]`; all ones in mean-pool mode.
    pub alpha_c: Tensor,
    pub x_c: Tensor,
    pub f: Tensor,
}

/// Inference-only forward pass of one branch.
pub fn branch_forward(
    image: &Tensor,
    attribute_id: usize,
    params: &BranchParams,
    table: &AttributeEmbeddingTable,
) -> Result<AttentionOutputs> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let t = tape.constant(table.table.value.clone());
    let a = embed_attribute(&mut tape, t, attribute_id)?;
    let img = tape.constant(image.clone());
    let vars = branch_forward_on(&mut tape, img, a, &bound, params)?;
    Ok(collect_outputs(&tape, &vars, params))
}

pub(crate) fn collect_outputs(
    tape: &Tape,
    vars: &BranchVars,
    params: &BranchParams,
) -> AttentionOutputs {
    let side = params.backbone.feature_side();
    let hw = side * side;
    AttentionOutputs {
        alpha_s: vars.alpha_s.map_or_else(
            || Tensor::full(&[side, side], 1.0 / hw as f64),
            |v| tape.value(v).clone(),
        ),
        x_s: tape.value(vars.x_s).clone(),
        alpha_c: vars.alpha_c.map_or_else(
            || Tensor::full(&[params.dims.c], 1.0),
            |v| tape.value(v).clone(),
        ),
        x_c: tape.value(vars.x_c).clone(),
        f: tape.value(vars.f).clone(),
    }
}
