//! Binary checkpoints: model widths, training cursor, parameters and optimizer moments.
//!
//! Layout (little-endian):
//! ```text
//! "ATSIMCKP" u32 version
//! u32 n c c1 c2 ca co r
//! backbone ×2: u32 input_side, u32 blocks, (u32 out, u32 kernel, u32 stride)*
//! u8 mode
//! u8 stage, u32 epoch
//! optimizer ×2: f64 lr beta1 beta2 eps, u64 step
//! u32 arrays, each: str name, u32 ndim, u32 dims…, u32 len, f64…
//! ```
//! Optimizer moments are stored as arrays named `adam.<group>.m.<param>` and
//! `adam.<group>.v.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attention::{BranchDims, BranchMode};
use crate::backbone::{BackboneConfig, ConvBlockSpec};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState, Moments};
use crate::tensor::Tensor;
use crate::train::TrainState;

const MAGIC: &[u8; 8] = b"ATSIMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const GROUPS: [&str; 2] = ["global", "local"];

fn write_backbone(w: &mut Writer, bb: &BackboneConfig) {
    w.len_u32(bb.input_side);
    w.len_u32(bb.blocks.len());
    for b in &bb.blocks {
        w.len_u32(b.out_channels);
        w.len_u32(b.kernel);
        w.len_u32(b.stride);
    }
}

fn read_backbone(r: &mut Reader) -> Result<BackboneConfig> {
    let side = r.usize("backbone input side")?;
    let n = r.usize("backbone block count")?;
    let mut blocks = Vec::new();
    for _ in 0..n.min(1024) {
        blocks.push(ConvBlockSpec {
            out_channels: r.usize("block channels")?,
            kernel: r.usize("block kernel")?,
            stride: r.usize("block stride")?,
        });
    }
    BackboneConfig::from_blocks(side, blocks).map_err(|e| Error::Compat(e.to_string()))
}

fn write_array(w: &mut Writer, name: &str, shape: &[usize], data: &[f64]) {
    w.str(name);
    w.len_u32(shape.len());
    for &d in shape {
        w.len_u32(d);
    }
    w.f64s(data);
}

pub fn checkpoint_bytes(model: &Model, state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let cfg = &model.config;
    let d = cfg.dims;
    for v in [cfg.n_attributes, d.c, d.c1, d.c2, d.ca, d.co, d.r] {
        w.len_u32(v);
    }
    write_backbone(&mut w, &cfg.global_backbone);
    write_backbone(&mut w, &cfg.local_backbone);
    w.u8(match cfg.mode {
        BranchMode::Attention => 0,
        BranchMode::MeanPool => 1,
    });
    w.u8(state.stage);
    w.len_u32(state.epoch);
    let opts = [&state.global_opt, &state.local_opt];
    for opt in opts {
        let c = opt.config;
        for x in [c.lr, c.beta1, c.beta2, c.eps] {
            w.f64(x);
        }
        w.u64(opt.step);
    }
    let params = model.params();
    let n_moments: usize = opts.iter().map(|o| 2 * o.moments.len()).sum();
    w.len_u32(params.len() + n_moments);
    for p in &params {
        write_array(&mut w, &p.name, p.value.shape(), p.value.data());
    }
    for (group, opt) in GROUPS.iter().zip(opts) {
        for (name, m) in &opt.moments {
            write_array(
                &mut w,
                &format!("adam.{group}.m.{name}"),
                &[m.m.len()],
                &m.m,
            );
            write_array(
                &mut w,
                &format!("adam.{group}.v.{name}"),
                &[m.v.len()],
                &m.v,
            );
        }
    }
    w.buf
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Model, TrainState)> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Compat(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let mut h = [0usize; 7];
    for (slot, what) in h.iter_mut().zip(["n", "c", "c1", "c2", "ca", "co", "r"]) {
        *slot = r.usize(what)?;
    }
    let dims = BranchDims {
        c: h[1],
        c1: h[2],
        c2: h[3],
        ca: h[4],
        co: h[5],
        r: h[6],
    };
    let global_backbone = read_backbone(&mut r)?;
    let local_backbone = read_backbone(&mut r)?;
    let at = r.pos;
    let mode = match r.u8("mode")? {
        0 => BranchMode::Attention,
        1 => BranchMode::MeanPool,
        other => return Err(Error::format(at, format!("bad mode byte {other}"))),
    };
    let config = ModelConfig {
        n_attributes: h[0],
        dims,
        global_backbone,
        local_backbone,
        mode,
    };
    config
        .validate()
        .map_err(|e| Error::Compat(e.to_string()))?;
    let stage = r.u8("stage")?;
    let epoch = r.usize("epoch")?;
    let mut opts = Vec::new();
    for _ in GROUPS {
        let config = AdamConfig {
            lr: r.f64("lr")?,
            beta1: r.f64("beta1")?,
            beta2: r.f64("beta2")?,
            eps: r.f64("eps")?,
        };
        let mut st = AdamState::new(config);
        st.step = r.u64("adam step")?;
        opts.push(st);
    }

    let n_arrays = r.usize("array count")?;
    let mut arrays: BTreeMap<String, (usize, Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..n_arrays {
        let at = r.pos;
        let name = r.str("array name")?;
        let ndim = r.usize("array rank")?;
        let shape = (0..ndim.min(8))
            .map(|_| r.usize("array extent"))
            .collect::<Result<Vec<_>>>()?;
        let data = r.f64s("array data")?;
        if ndim > 8 || shape.iter().product::<usize>() != data.len() {
            return Err(Error::format(
                at,
                format!("array {name}: shape {shape:?} vs {} values", data.len()),
            ));
        }
        if arrays.insert(name.clone(), (at, shape, data)).is_some() {
            return Err(Error::format(at, format!("duplicate array {name}")));
        }
    }
    r.expect_end()?;

    let mut model = Model::init(config, 0)?;
    for p in model.params_mut() {
        let (_, shape, data) = arrays
            .remove(&p.name)
            .ok_or_else(|| Error::Compat(format!("checkpoint lacks parameter {}", p.name)))?;
        if shape != p.value.shape() {
            return Err(Error::Compat(format!(
                "parameter {} stored as {shape:?}, header implies {:?}",
                p.name,
                p.value.shape()
            )));
        }
        p.value = Tensor::new(shape, data)?;
    }
    let sizes: BTreeMap<String, usize> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.numel()))
        .collect();
    for (group, opt) in GROUPS.iter().zip(opts.iter_mut()) {
        let prefix = format!("adam.{group}.m.");
        let names: Vec<String> = arrays
            .keys()
            .filter_map(|k| k.strip_prefix(&prefix))
            .map(String::from)
            .collect();
        for name in names {
            let (at, _, m) = arrays.remove(&format!("{prefix}{name}")).expect("listed");
            let (_, _, v) = arrays
                .remove(&format!("adam.{group}.v.{name}"))
                .ok_or_else(|| Error::format(at, format!("moment m of {name} without v")))?;
            if sizes.get(&name) != Some(&m.len()) || m.len() != v.len() {
                return Err(Error::Compat(format!(
                    "optimizer moments for {name} do not fit the model"
                )));
            }
            opt.moments.insert(name, Moments { m, v });
        }
    }
    if let Some((name, (at, ..))) = arrays.into_iter().next() {
        return Err(Error::format(at, format!("unknown array {name}")));
    }
    let local_opt = opts.pop().expect("two groups");
    let global_opt = opts.pop().expect("two groups");
    Ok((
        model,
        TrainState {
            stage,
            epoch,
            global_opt,
            local_opt,
        },
    ))
}

pub fn save_checkpoint(model: &Model, state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model, state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, TrainState)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
