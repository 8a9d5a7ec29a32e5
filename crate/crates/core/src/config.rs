//! `key = value` run configuration covering model widths, training, localization and retrieval.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{BranchDims, BranchMode};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::localize::{Connectivity, RegionMode};
use crate::metrics::RecallVariant;
use crate::model::ModelConfig;
use crate::retrieval::FusionConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BackbonePreset {
    /// 64 px global / 32 px local inputs.
    #[default]
    Desk,
    /// 224 px global / 112 px local inputs.
    Full,
}

impl BackbonePreset {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(BackbonePreset::Desk),
            "full" => Ok(BackbonePreset::Full),
            other => Err(Error::Config(format!(
                "backbone must be desk or full, got {other:?}"
            ))),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            BackbonePreset::Desk => "desk",
            BackbonePreset::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub backbone: BackbonePreset,
    pub dims: BranchDims,
    pub mode: BranchMode,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn model_config(&self, n_attributes: usize) -> Result<ModelConfig> {
        let c = self.dims.c;
        let (global_backbone, local_backbone) = match self.backbone {
            BackbonePreset::Desk => (
                BackboneConfig::global_desk(c),
                BackboneConfig::local_desk(c),
            ),
            BackbonePreset::Full => (
                BackboneConfig::global_full(c),
                BackboneConfig::local_full(c),
            ),
        };
        let cfg = ModelConfig {
            n_attributes,
            dims: self.dims,
            global_backbone,
            local_backbone,
            mode: self.mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let l = &t.localization;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("backbone", self.backbone.as_str().into());
        kv("mode", self.mode.as_str().into());
        let d = self.dims;
        for (k, v) in [
            ("c", d.c),
            ("c1", d.c1),
            ("c2", d.c2),
            ("ca", d.ca),
            ("co", d.co),
            ("r", d.r),
        ] {
            kv(k, v.to_string());
        }
        kv("epochs_stage1", t.epochs_stage1.to_string());
        kv("epochs_stage2", t.epochs_stage2.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("triplets_per_epoch", t.triplets_per_epoch.to_string());
        kv("lr_global_s1", t.lr_global_s1.to_string());
        kv("decay_s1", t.decay_s1.to_string());
        kv("decay_every_s1", t.decay_every_s1.to_string());
        kv("lr_global_s2", t.lr_global_s2.to_string());
        kv("lr_local_s2", t.lr_local_s2.to_string());
        kv("decay_s2", t.decay_s2.to_string());
        kv("seed", t.seed.to_string());
        kv("alpha", t.weights.alpha.to_string());
        kv("beta", t.weights.beta.to_string());
        kv("gamma", t.weights.gamma.to_string());
        kv("margin", t.weights.margin.to_string());
        kv("adam_beta1", t.adam.beta1.to_string());
        kv("adam_beta2", t.adam.beta2.to_string());
        kv("adam_eps", t.adam.eps.to_string());
        kv("align_stop_grad", t.align_stop_grad.to_string());
        kv("select_by_val", t.select_by_val.to_string());
        kv("tau", l.tau.to_string());
        kv("connectivity", l.connectivity.number().to_string());
        kv("region_mode", l.region_mode.as_str().into());
        kv("min_side", l.min_side.to_string());
        kv("lambda", t.eval.fusion.lambda.to_string());
        kv("k", t.eval.k.to_string());
        kv("recall", t.eval.recall.as_str().into());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Config(format!("config line {}: {msg}", n + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("expected `key = value`, got {line:?}")))?;
            if !seen.insert(key.to_string()) {
                return Err(bad(format!("duplicate key {key}")));
            }
            cfg.set(key, value).map_err(|e| bad(e.to_string()))?;
        }
        cfg.train.validate()?;
        cfg.dims.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        let t = &mut self.train;
        match key {
            "backbone" => self.backbone = BackbonePreset::parse(value)?,
            "mode" => {
                self.mode = BranchMode::parse(value).map_err(|e| Error::Config(e.to_string()))?
            }
            "c" => self.dims.c = num(key, value)?,
            "c1" => self.dims.c1 = num(key, value)?,
            "c2" => self.dims.c2 = num(key, value)?,
            "ca" => self.dims.ca = num(key, value)?,
            "co" => self.dims.co = num(key, value)?,
            "r" => self.dims.r = num(key, value)?,
            "epochs_stage1" => t.epochs_stage1 = num(key, value)?,
            "epochs_stage2" => t.epochs_stage2 = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "triplets_per_epoch" => t.triplets_per_epoch = num(key, value)?,
            "lr_global_s1" => t.lr_global_s1 = num(key, value)?,
            "decay_s1" => t.decay_s1 = num(key, value)?,
            "decay_every_s1" => t.decay_every_s1 = num(key, value)?,
            "lr_global_s2" => t.lr_global_s2 = num(key, value)?,
            "lr_local_s2" => t.lr_local_s2 = num(key, value)?,
            "decay_s2" => t.decay_s2 = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "alpha" => t.weights.alpha = num(key, value)?,
            "beta" => t.weights.beta = num(key, value)?,
            "gamma" => t.weights.gamma = num(key, value)?,
            "margin" => t.weights.margin = num(key, value)?,
            "adam_beta1" => t.adam.beta1 = num(key, value)?,
            "adam_beta2" => t.adam.beta2 = num(key, value)?,
            "adam_eps" => t.adam.eps = num(key, value)?,
            "align_stop_grad" => t.align_stop_grad = num(key, value)?,
            "select_by_val" => t.select_by_val = num(key, value)?,
            "tau" => t.localization.tau = num(key, value)?,
            "connectivity" => {
                t.localization.connectivity = Connectivity::from_number(num(key, value)?)
                    .map_err(|e| Error::Config(e.to_string()))?
            }
            "region_mode" => {
                t.localization.region_mode =
                    RegionMode::parse(value).map_err(|e| Error::Config(e.to_string()))?
            }
            "min_side" => t.localization.min_side = num(key, value)?,
            "lambda" => t.eval.fusion = FusionConfig::new(num(key, value)?)?,
            "k" => t.eval.k = num(key, value)?,
            "recall" => t.eval.recall = RecallVariant::parse(value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
