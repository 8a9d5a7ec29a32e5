//! The two-branch model: global and local branches sharing one attribute table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    branch_forward_on, collect_outputs, AttentionOutputs, BranchDims, BranchMode, BranchParams,
};
use crate::backbone::{embed_attribute, AttributeEmbeddingTable, BackboneConfig};
use crate::error::{Error, Result};
use crate::localize::{localize_detailed, Localization, LocalizationConfig};
use crate::tape::Tape;
use crate::tensor::{Param, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_attributes: usize,
    pub dims: BranchDims,
    pub global_backbone: BackboneConfig,
    pub local_backbone: BackboneConfig,
    pub mode: BranchMode,
}

impl ModelConfig {
    pub fn desk(n_attributes: usize) -> Self {
        let dims = BranchDims::default();
        ModelConfig {
            n_attributes,
            global_backbone: BackboneConfig::global_desk(dims.c),
            local_backbone: BackboneConfig::local_desk(dims.c),
            dims,
            mode: BranchMode::Attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_attributes == 0 {
            return Err(Error::Config("model needs at least one attribute".into()));
        }
        self.dims.validate()?;
        self.global_backbone.validate()?;
        self.local_backbone.validate()?;
        for (name, bb) in [
            ("global", &self.global_backbone),
            ("local", &self.local_backbone),
        ] {
            if bb.feature_channels != self.dims.c {
                return Err(Error::Config(format!(
                    "{name} backbone emits {} channels but c = {}",
                    bb.feature_channels, self.dims.c
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub table: AttributeEmbeddingTable,
    pub global: BranchParams,
    pub local: BranchParams,
}

/// Both embeddings of one image under one attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEmbedding {
    pub global: AttentionOutputs,
    pub localization: Localization,
    pub local: AttentionOutputs,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = AttributeEmbeddingTable::new(config.n_attributes, config.dims.ca, &mut rng);
        let global = BranchParams::init(
            "global",
            config.global_backbone.clone(),
            config.dims,
            config.mode,
            &mut rng,
        )?;
        let local = BranchParams::init(
            "local",
            config.local_backbone.clone(),
            config.dims,
            config.mode,
            &mut rng,
        )?;
        Ok(Model {
            config,
            table,
            global,
            local,
        })
    }

    /// All parameters in checkpoint order: table, global, local.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.table.table];
        out.extend(self.global.params());
        out.extend(self.local.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.table.table];
        out.extend(self.global.params_mut());
        out.extend(self.local.params_mut());
        out
    }

    pub fn check_attribute(&self, attribute: usize) -> Result<()> {
        if attribute >= self.config.n_attributes {
            return Err(Error::Domain(format!(
                "attribute id {attribute} outside [0, {})",
                self.config.n_attributes
            )));
        }
        Ok(())
    }

    pub fn forward_global(&self, image: &Tensor, attribute: usize) -> Result<AttentionOutputs> {
        forward_inference(&self.global, &self.table, image, attribute)
    }

    pub fn forward_local(&self, roi: &Tensor, attribute: usize) -> Result<AttentionOutputs> {
        forward_inference(&self.local, &self.table, roi, attribute)
    }

    /// Global pass, RoI localization from its spatial attention, local pass on the RoI.
    pub fn embed(
        &self,
        image: &Tensor,
        attribute: usize,
        loc: &LocalizationConfig,
    ) -> Result<PairEmbedding> {
        self.check_attribute(attribute)?;
        let global = self.forward_global(image, attribute)?;
        let loc_cfg = LocalizationConfig {
            local_input_side: self.config.local_backbone.input_side,
            ..*loc
        };
        let localization = localize_detailed(image, &global.alpha_s, &loc_cfg)?;
        let local = self.forward_local(&localization.roi, attribute)?;
        Ok(PairEmbedding {
            global,
            localization,
            local,
        })
    }
}

fn forward_inference(
    branch: &BranchParams,
    table: &AttributeEmbeddingTable,
    image: &Tensor,
    attribute: usize,
) -> Result<AttentionOutputs> {
    let mut tape = Tape::new();
    let bound = branch.bind(&mut tape, false);
    let t = tape.constant(table.table.value.clone());
    let a = embed_attribute(&mut tape, t, attribute)?;
    let img = tape.constant(image.clone());
    let vars = branch_forward_on(&mut tape, img, a, &bound, branch)?;
    Ok(collect_outputs(&tape, &vars, branch))
}
