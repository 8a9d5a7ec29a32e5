//! Two-stage training: the global branch alone, then both branches under the joint loss.

use std::collections::BTreeMap;

use crate::attention::{branch_forward_on, BoundBranch, BranchParams};
use crate::backbone::embed_attribute;
use crate::dataset::{epoch_pool, Dataset, Triplet};
use crate::error::{Error, Result};
use crate::localize::{localize, LocalizationConfig};
use crate::loss::{alignment_term, joint_term, triplet_term, LossWeights};
use crate::manifest::{ImageId, Split};
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::retrieval::{build_index_with, evaluate, EvalConfig, FusionConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub triplets_per_epoch: usize,
    pub lr_global_s1: f64,
    /// Stage-1 learning rate is multiplied by this every `decay_every_s1` epochs.
    pub decay_s1: f64,
    pub decay_every_s1: usize,
    pub lr_global_s2: f64,
    pub lr_local_s2: f64,
    /// Per-epoch multiplier for both stage-2 learning rates.
    pub decay_s2: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Blocks the alignment gradient from reaching the global embedding.
    pub align_stop_grad: bool,
    /// Keep the epoch with the best validation MAP when a validation split exists.
    pub select_by_val: bool,
    pub localization: LocalizationConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 8,
            epochs_stage2: 4,
            batch_size: 16,
            triplets_per_epoch: 2000,
            lr_global_s1: 1e-3,
            decay_s1: 0.9,
            decay_every_s1: 3,
            lr_global_s2: 1e-4,
            lr_local_s2: 1e-3,
            decay_s2: 0.95,
            seed: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            align_stop_grad: false,
            select_by_val: true,
            localization: LocalizationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs_stage1", self.epochs_stage1),
            ("epochs_stage2", self.epochs_stage2),
            ("batch_size", self.batch_size),
            ("triplets_per_epoch", self.triplets_per_epoch),
            ("decay_every_s1", self.decay_every_s1),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let rates = [
            ("lr_global_s1", self.lr_global_s1),
            ("lr_global_s2", self.lr_global_s2),
            ("lr_local_s2", self.lr_local_s2),
            ("decay_s1", self.decay_s1),
            ("decay_s2", self.decay_s2),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "{name} must be finite and non-negative, got {v}"
            )));
        }
        self.weights.validate()?;
        self.localization.validate()
    }

    /// Global learning rate for 0-based stage-1 epoch `epoch`.
    pub fn lr_stage1(&self, epoch: usize) -> f64 {
        self.lr_global_s1 * self.decay_s1.powi((epoch / self.decay_every_s1) as i32)
    }

    /// `(global, local)` learning rates for 0-based stage-2 epoch `epoch`.
    pub fn lr_stage2(&self, epoch: usize) -> (f64, f64) {
        let d = self.decay_s2.powi(epoch as i32);
        (self.lr_global_s2 * d, self.lr_local_s2 * d)
    }
}

/// Where training stands: the stage and the number of epochs finished in it,
/// plus both optimizer groups (global branch with the attribute table, local branch).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: u8,
    pub epoch: usize,
    pub global_opt: AdamState,
    pub local_opt: AdamState,
}

impl TrainState {
    pub fn fresh(adam: AdamConfig) -> Self {
        TrainState {
            stage: 1,
            epoch: 0,
            global_opt: AdamState::new(adam),
            local_opt: AdamState::new(adam),
        }
    }
}

/// Loss sums over one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub l_g: f64,
    pub l_l: f64,
    pub l_a: f64,
    pub joint: f64,
}

/// Per-triplet mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub stage: u8,
    /// 1-based, counted across both stages.
    pub epoch: usize,
    pub l_g: f64,
    pub l_l: f64,
    pub l_a: f64,
    pub joint: f64,
    pub val_map: Option<f64>,
}

impl EpochLoss {
    pub const CSV_HEADER: &'static str = "epoch,L_g,L_l,L_a,joint";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.l_g, self.l_l, self.l_a, self.joint
        )
    }
}

pub type EpochHook<'a> = dyn FnMut(&Model, &TrainState, &EpochLoss) -> Result<()> + 'a;

fn global_group(model: &mut Model) -> Vec<&mut Param> {
    let mut group = vec![&mut model.table.table];
    group.extend(model.global.params_mut());
    group
}

fn accumulate_table(model: &mut Model, grads: &crate::tape::Gradients, table: Var) -> Result<()> {
    let p = &mut model.table.table;
    match grads.get(table) {
        Some(g) => p.accumulate_grad(&g),
        None => p.accumulate_grad(&Tensor::zeros(p.value.shape())),
    }
}

/// Embeds each distinct `(image, attribute)` of a batch once on `tape`.
struct BranchCache<'a> {
    data: &'a Dataset,
    branch: &'a BranchParams,
    bound: &'a BoundBranch,
    table: Var,
    attr_rows: BTreeMap<usize, Var>,
    done: BTreeMap<(ImageId, usize), (Var, Option<Var>)>,
}

impl<'a> BranchCache<'a> {
    fn attr(&mut self, tape: &mut Tape, attribute: usize) -> Result<Var> {
        if let Some(&v) = self.attr_rows.get(&attribute) {
            return Ok(v);
        }
        let v = embed_attribute(tape, self.table, attribute)?;
        self.attr_rows.insert(attribute, v);
        Ok(v)
    }

    /// Returns `(f, alpha_s)` for the image.
    fn embed(
        &mut self,
        tape: &mut Tape,
        id: ImageId,
        attribute: usize,
    ) -> Result<(Var, Option<Var>)> {
        if let Some(&hit) = self.done.get(&(id, attribute)) {
            return Ok(hit);
        }
        let a = self.attr(tape, attribute)?;
        let img = tape.constant(self.data.image(id)?.clone());
        let vars = branch_forward_on(tape, img, a, self.bound, self.branch)?;
        let out = (vars.f, vars.alpha_s);
        self.done.insert((id, attribute), out);
        Ok(out)
    }
}

/// Stage-1 forward and backward on one batch; leaves gradients on the table and
/// global parameters and returns the summed global triplet loss.
pub fn stage1_batch(
    model: &mut Model,
    data: &Dataset,
    batch: &[Triplet],
    cfg: &TrainConfig,
) -> Result<BatchLosses> {
    let mut tape = Tape::new();
    let table = tape.param(model.table.table.value.clone());
    let bound = model.global.bind(&mut tape, true);
    let mut terms = Vec::with_capacity(batch.len());
    {
        let mut cache = BranchCache {
            data,
            branch: &model.global,
            bound: &bound,
            table,
            attr_rows: BTreeMap::new(),
            done: BTreeMap::new(),
        };
        for t in batch {
            let (fa, _) = cache.embed(&mut tape, t.anchor, t.attribute)?;
            let (fp, _) = cache.embed(&mut tape, t.positive, t.attribute)?;
            let (fn_, _) = cache.embed(&mut tape, t.negative, t.attribute)?;
            terms.push(triplet_term(&mut tape, fa, fp, fn_, cfg.weights.margin)?);
        }
    }
    let loss = tape.add_all(&terms)?;
    let l_g = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    accumulate_table(model, &grads, table)?;
    model.global.accumulate_grads(&bound, &grads)?;
    Ok(BatchLosses {
        l_g,
        l_l: 0.0,
        l_a: 0.0,
        joint: l_g,
    })
}

/// Uniform attention for branches that have none.
fn alpha_or_uniform(tape: &Tape, alpha: Option<Var>, branch: &BranchParams) -> Tensor {
    match alpha {
        Some(v) => tape.value(v).clone(),
        None => {
            let s = branch.backbone.feature_side();
            Tensor::full(&[s, s], 1.0 / (s * s) as f64)
        }
    }
}

/// Stage-2 forward and backward on one batch under the joint loss; leaves
/// gradients on every parameter.
pub fn stage2_batch(
    model: &mut Model,
    data: &Dataset,
    batch: &[Triplet],
    cfg: &TrainConfig,
) -> Result<BatchLosses> {
    let loc = LocalizationConfig {
        local_input_side: model.config.local_backbone.input_side,
        ..cfg.localization
    };
    let mut tape = Tape::new();
    let table = tape.param(model.table.table.value.clone());
    let g_bound = model.global.bind(&mut tape, true);
    let l_bound = model.local.bind(&mut tape, true);
    let mut attr_rows: BTreeMap<usize, Var> = BTreeMap::new();
    let mut done: BTreeMap<(ImageId, usize), (Var, Var)> = BTreeMap::new();
    let (mut g_terms, mut l_terms, mut a_terms) = (Vec::new(), Vec::new(), Vec::new());
    for t in batch {
        let a = match attr_rows.get(&t.attribute) {
            Some(&v) => v,
            None => {
                let v = embed_attribute(&mut tape, table, t.attribute)?;
                attr_rows.insert(t.attribute, v);
                v
            }
        };
        let mut f = Vec::with_capacity(3);
        for id in [t.anchor, t.positive, t.negative] {
            if let Some(&hit) = done.get(&(id, t.attribute)) {
                f.push(hit);
                continue;
            }
            let image = data.image(id)?;
            let img = tape.constant(image.clone());
            let g = branch_forward_on(&mut tape, img, a, &g_bound, &model.global)?;
            let alpha = alpha_or_uniform(&tape, g.alpha_s, &model.global);
            let roi = localize(image, &alpha, &loc)?;
            let roi = tape.constant(roi);
            let l = branch_forward_on(&mut tape, roi, a, &l_bound, &model.local)?;
            done.insert((id, t.attribute), (g.f, l.f));
            f.push((g.f, l.f));
        }
        let m = cfg.weights.margin;
        g_terms.push(triplet_term(&mut tape, f[0].0, f[1].0, f[2].0, m)?);
        l_terms.push(triplet_term(&mut tape, f[0].1, f[1].1, f[2].1, m)?);
        for (fg, fl) in f {
            let fg = if cfg.align_stop_grad {
                tape.detach(fg)
            } else {
                fg
            };
            a_terms.push(alignment_term(&mut tape, fg, fl)?);
        }
    }
    let l_g = tape.add_all(&g_terms)?;
    let l_l = tape.add_all(&l_terms)?;
    let l_a = tape.add_all(&a_terms)?;
    let joint = joint_term(&mut tape, l_g, l_l, l_a, &cfg.weights)?;
    let losses = BatchLosses {
        l_g: tape.value(l_g).item()?,
        l_l: tape.value(l_l).item()?,
        l_a: tape.value(l_a).item()?,
        joint: tape.value(joint).item()?,
    };
    let grads = tape.backward(joint)?;
    accumulate_table(model, &grads, table)?;
    model.global.accumulate_grads(&g_bound, &grads)?;
    model.local.accumulate_grads(&l_bound, &grads)?;
    Ok(losses)
}

/// MAP on the validation split, or `None` when there is nothing to evaluate.
pub fn validation_map(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<Option<f64>> {
    if data.manifest.split(Split::Val).next().is_none() {
        return Ok(None);
    }
    let attributes: Vec<usize> = (0..model.config.n_attributes).collect();
    let index = build_index_with(
        &data.manifest,
        Split::Val,
        model,
        &attributes,
        &cfg.localization,
        |r| data.image(r.id).cloned(),
    )?;
    let eval = EvalConfig {
        fusion: FusionConfig { lambda },
        ..cfg.eval
    };
    match evaluate(&index, &eval) {
        Ok(report) => Ok(Some(report.overall_map)),
        Err(Error::Contract(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

struct Selector {
    enabled: bool,
    best: Option<(f64, Model)>,
}

impl Selector {
    fn offer(&mut self, map: Option<f64>, model: &Model) {
        let Some(map) = map else { return };
        if self.enabled && self.best.as_ref().map_or(true, |(b, _)| map > *b) {
            self.best = Some((map, model.clone()));
        }
    }

    fn finish(self, model: &mut Model) {
        if let Some((_, best)) = self.best {
            *model = best;
        }
    }
}

fn check_finite(losses: &BatchLosses, stage: u8, epoch: usize, batch: usize) -> Result<()> {
    if !losses.joint.is_finite() {
        return Err(Error::NonFinite {
            stage,
            epoch,
            batch,
            value: losses.joint,
        });
    }
    Ok(())
}

/// Runs the remaining stage-1 epochs. After each epoch `hook` sees the model and cursor.
/// With validation selection on, `model` ends as the best epoch's parameters.
pub fn train_stage1(
    model: &mut Model,
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    if state.stage != 1 {
        return Err(Error::contract(format!(
            "stage-1 training resumed from a stage-{} cursor",
            state.stage
        )));
    }
    let mut trace = Vec::new();
    let mut selector = Selector {
        enabled: cfg.select_by_val,
        best: None,
    };
    for epoch in state.epoch..cfg.epochs_stage1 {
        state.global_opt.set_lr(cfg.lr_stage1(epoch));
        let pool = epoch_pool(&data.manifest, cfg.triplets_per_epoch, cfg.seed, 1, epoch)?;
        let mut sum = BatchLosses::default();
        for (b, batch) in pool.chunks(cfg.batch_size).enumerate() {
            let losses = stage1_batch(model, data, batch, cfg)?;
            check_finite(&losses, 1, epoch + 1, b)?;
            adam_step(&mut global_group(model), &mut state.global_opt)?;
            sum.l_g += losses.l_g;
        }
        state.epoch = epoch + 1;
        let val_map = if cfg.select_by_val {
            validation_map(model, data, cfg, 1.0)?
        } else {
            None
        };
        selector.offer(val_map, model);
        let n = pool.len() as f64;
        let row = EpochLoss {
            stage: 1,
            epoch: epoch + 1,
            l_g: sum.l_g / n,
            l_l: 0.0,
            l_a: 0.0,
            joint: sum.l_g / n,
            val_map,
        };
        hook(model, state, &row)?;
        trace.push(row);
    }
    selector.finish(model);
    Ok(trace)
}

/// Runs the remaining stage-2 epochs. A stage-1 cursor is moved to stage 2
/// with fresh optimizer moments.
pub fn train_stage2(
    model: &mut Model,
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    if state.stage == 1 {
        *state = TrainState {
            stage: 2,
            ..TrainState::fresh(cfg.adam)
        };
    }
    let mut trace = Vec::new();
    let mut selector = Selector {
        enabled: cfg.select_by_val,
        best: None,
    };
    for epoch in state.epoch..cfg.epochs_stage2 {
        let (lr_g, lr_l) = cfg.lr_stage2(epoch);
        state.global_opt.set_lr(lr_g);
        state.local_opt.set_lr(lr_l);
        let pool = epoch_pool(&data.manifest, cfg.triplets_per_epoch, cfg.seed, 2, epoch)?;
        let mut sum = BatchLosses::default();
        for (b, batch) in pool.chunks(cfg.batch_size).enumerate() {
            let losses = stage2_batch(model, data, batch, cfg)?;
            check_finite(&losses, 2, epoch + 1, b)?;
            adam_step(&mut global_group(model), &mut state.global_opt)?;
            adam_step(&mut model.local.params_mut(), &mut state.local_opt)?;
            sum.l_g += losses.l_g;
            sum.l_l += losses.l_l;
            sum.l_a += losses.l_a;
            sum.joint += losses.joint;
        }
        state.epoch = epoch + 1;
        let val_map = if cfg.select_by_val {
            validation_map(model, data, cfg, cfg.eval.fusion.lambda)?
        } else {
            None
        };
        selector.offer(val_map, model);
        let n = pool.len() as f64;
        let row = EpochLoss {
            stage: 2,
            epoch: cfg.epochs_stage1 + epoch + 1,
            l_g: sum.l_g / n,
            l_l: sum.l_l / n,
            l_a: sum.l_a / n,
            joint: sum.joint / n,
            val_map,
        };
        hook(model, state, &row)?;
        trace.push(row);
    }
    selector.finish(model);
    Ok(trace)
}
