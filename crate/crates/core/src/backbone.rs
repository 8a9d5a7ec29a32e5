//! Convolutional feature extractor and the attribute embedding table.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// A plain stack of `conv → relu` blocks, each padded by `kernel/2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_side: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub feature_channels: usize,
    pub downsample_factor: usize,
}

impl BackboneConfig {
    /// Builds a config from block specs, deriving `feature_channels` and
    /// `downsample_factor`.
    pub fn from_blocks(input_side: usize, blocks: Vec<ConvBlockSpec>) -> Result<Self> {
        let feature_channels = blocks
            .last()
            .map(|b| b.out_channels)
            .ok_or_else(|| Error::Config("backbone needs at least one block".into()))?;
        let downsample_factor = blocks.iter().map(|b| b.stride).product();
        let cfg = BackboneConfig {
            input_side,
            blocks,
            feature_channels,
            downsample_factor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whole-image backbone at desk scale: 64 px in, `c × 8 × 8` out.
    pub fn global_desk(c: usize) -> Self {
        Self::from_blocks(
            64,
            vec![
                ConvBlockSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 2,
                },
                ConvBlockSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                },
                ConvBlockSpec {
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                },
            ],
        )
        .expect("valid preset")
    }

    /// Lighter RoI backbone: 32 px in, `c × 8 × 8` out.
    pub fn local_desk(c: usize) -> Self {
        Self::from_blocks(
            32,
            vec![
                ConvBlockSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 2,
                },
                ConvBlockSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                },
                ConvBlockSpec {
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                },
            ],
        )
        .expect("valid preset")
    }

    /// Full-size input stand-in (224 px, `c × 14 × 14` out).
    pub fn global_full(c: usize) -> Self {
        Self::from_blocks(
            224,
            vec![
                ConvBlockSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                },
                ConvBlockSpec {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                },
                ConvBlockSpec {
                    out_channels: 64,
                    kernel: 3,
                    stride: 2,
                },
                ConvBlockSpec {
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                },
            ],
        )
        .expect("valid preset")
    }

    /// Full-size RoI stand-in (112 px, `c × 14 × 14` out).
    pub fn local_full(c: usize) -> Self {
        Self::from_blocks(
            112,
            vec![
                ConvBlockSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                },
                ConvBlockSpec {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                },
                ConvBlockSpec {
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                },
            ],
        )
        .expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self
            .blocks
            .iter()
            .any(|b| b.out_channels == 0 || b.kernel == 0 || b.stride == 0)
        {
            return Err(Error::Config(format!(
                "degenerate backbone block in {:?}",
                self.blocks
            )));
        }
        let product: usize = self.blocks.iter().map(|b| b.stride).product();
        if product != self.downsample_factor {
            return Err(Error::Config(format!(
                "block strides multiply to {product}, downsample factor says {}",
                self.downsample_factor
            )));
        }
        if self.blocks.last().map(|b| b.out_channels) != Some(self.feature_channels) {
            return Err(Error::Config(
                "last block width must equal feature_channels".into(),
            ));
        }
        if self.input_side == 0 || self.input_side % self.downsample_factor != 0 {
            return Err(Error::Config(format!(
                "input side {} not divisible by downsample factor {}",
                self.input_side, self.downsample_factor
            )));
        }
        Ok(())
    }

    pub fn feature_side(&self) -> usize {
        self.input_side / self.downsample_factor
    }

    /// Declared output shape `[c, h, w]`.
    pub fn feature_shape(&self) -> [usize; 3] {
        let s = self.feature_side();
        [self.feature_channels, s, s]
    }

    pub(crate) fn init_params(&self, prefix: &str, rng: &mut impl Rng) -> Vec<ConvBlock> {
        let mut c_in = 3;
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let kk = b.kernel * b.kernel;
                let kernel = xavier(
                    &[b.out_channels, c_in, b.kernel, b.kernel],
                    c_in * kk,
                    b.out_channels * kk,
                    rng,
                );
                c_in = b.out_channels;
                ConvBlock {
                    kernel: Param::new(format!("{prefix}.backbone.{i}.kernel"), kernel),
                    bias: Param::new(
                        format!("{prefix}.backbone.{i}.bias"),
                        Tensor::zeros(&[b.out_channels]),
                    ),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: Param,
    pub bias: Param,
}

/// Uniform Glorot initialisation in `±√(6/(fan_in+fan_out))`.
pub(crate) fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from product")
}

/// Runs the conv stack over a `[3, s, s]` image. `blocks` holds bound `(kernel, bias)` vars.
pub fn extract_features(
    tape: &mut Tape,
    image: Var,
    config: &BackboneConfig,
    blocks: &[(Var, Var)],
) -> Result<Var> {
    let s = config.input_side;
    if tape.value(image).shape() != [3, s, s] {
        return Err(Error::shape(format!(
            "backbone expects a [3, {s}, {s}] image, got {:?}",
            tape.value(image).shape()
        )));
    }
    if blocks.len() != config.blocks.len() {
        return Err(Error::shape(format!(
            "{} bound blocks for a {}-block backbone",
            blocks.len(),
            config.blocks.len()
        )));
    }
    let mut x = image;
    for (spec, &(kernel, bias)) in config.blocks.iter().zip(blocks) {
        let y = tape.conv2d(x, kernel, Some(bias), spec.stride, spec.kernel / 2)?;
        x = tape.relu(y);
    }
    Ok(x)
}

/// Per-channel spatial mean of a `[c, h, w]` map.
pub fn mean_pool_features(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "mean pool expects [c,h,w], got {shape:?}"
        )));
    }
    let hw = shape[1] * shape[2];
    let flat = tape.reshape(x, &[shape[0], hw])?;
    let weights = tape.constant(Tensor::full(&[hw, 1], 1.0 / hw as f64));
    let pooled = tape.matmul(flat, weights)?;
    tape.reshape(pooled, &[shape[0]])
}

/// The learnable `n × c_a` attribute table shared by both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeEmbeddingTable {
    pub table: Param,
}

pub const TABLE_PARAM: &str = "attribute_table";

impl AttributeEmbeddingTable {
    pub fn new(n: usize, c_a: usize, rng: &mut impl Rng) -> Self {
        AttributeEmbeddingTable {
            table: Param::new(TABLE_PARAM, xavier(&[n, c_a], n, c_a, rng)),
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.ndim() != 2 {
            return Err(Error::shape(format!("attribute table {:?}", t.shape())));
        }
        Ok(AttributeEmbeddingTable {
            table: Param::new(TABLE_PARAM, t),
        })
    }

    pub fn n(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.table.value.shape()[1]
    }
}

/// Row `attribute_id` of the bound table (a one-hot selection).
pub fn embed_attribute(tape: &mut Tape, table: Var, attribute_id: usize) -> Result<Var> {
    let n = tape.value(table).shape()[0];
    if attribute_id >= n {
        return Err(Error::Domain(format!(
            "attribute id {attribute_id} outside [0, {n})"
        )));
    }
    tape.row(table, attribute_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind(tape: &mut Tape, blocks: &[ConvBlock]) -> Vec<(Var, Var)> {
        blocks
            .iter()
            .map(|b| {
                (
                    tape.param(b.kernel.value.clone()),
                    tape.param(b.bias.value.clone()),
                )
            })
            .collect()
    }

    #[test]
    fn feature_shape_follows_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BackboneConfig::global_desk(32);
        assert_eq!(cfg.downsample_factor, 8);
        let blocks = cfg.init_params("g", &mut rng);
        let mut tape = Tape::new();
        let b = bind(&mut tape, &blocks);
        let img = tape.constant(Tensor::full(&[3, 64, 64], 0.5));
        let x = extract_features(&mut tape, img, &cfg, &b).unwrap();
        assert_eq!(tape.value(x).shape(), &[32, 8, 8]);

        for cfg in [
            BackboneConfig::local_desk(64),
            BackboneConfig::global_full(64),
            BackboneConfig::local_full(16),
        ] {
            let blocks = cfg.init_params("g", &mut rng);
            let mut tape = Tape::new();
            let b = bind(&mut tape, &blocks);
            let s = cfg.input_side;
            let img = tape.constant(Tensor::full(&[3, s, s], 0.1));
            let x = extract_features(&mut tape, img, &cfg, &b).unwrap();
            assert_eq!(tape.value(x).shape(), &cfg.feature_shape());
        }
    }

    #[test]
    fn wrong_side_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BackboneConfig::local_desk(16);
        let blocks = cfg.init_params("l", &mut rng);
        let mut tape = Tape::new();
        let b = bind(&mut tape, &blocks);
        let img = tape.constant(Tensor::zeros(&[3, 64, 64]));
        assert!(matches!(
            extract_features(&mut tape, img, &cfg, &b),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = BackboneConfig::global_desk(16);
        let mut tape = Tape::new();
        let mut c_in = 3;
        let b: Vec<(Var, Var)> = cfg
            .blocks
            .iter()
            .map(|s| {
                let k = tape.constant(Tensor::zeros(&[s.out_channels, c_in, s.kernel, s.kernel]));
                let bias = tape.constant(Tensor::zeros(&[s.out_channels]));
                c_in = s.out_channels;
                (k, bias)
            })
            .collect();
        let img = tape.constant(Tensor::zeros(&[3, 64, 64]));
        let x = extract_features(&mut tape, img, &cfg, &b).unwrap();
        assert!(tape.value(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_side() {
        let r = BackboneConfig::from_blocks(
            30,
            vec![ConvBlockSpec {
                out_channels: 4,
                kernel: 3,
                stride: 4,
            }],
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn mean_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 3], 1.25));
        let m = mean_pool_features(&mut tape, x).unwrap();
        assert!(tape
            .value(m)
            .data()
            .iter()
            .all(|&v| (v - 1.25).abs() < 1e-15));

        let y = tape.constant(Tensor::new(vec![1, 2, 2], vec![0., 2., 4., 6.]).unwrap());
        let m = mean_pool_features(&mut tape, y).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);
    }

    #[test]
    fn embedding_selects_rows_sparsely() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = AttributeEmbeddingTable::new(4, 5, &mut rng);
        let mut tape = Tape::new();
        let t = tape.param(table.table.value.clone());
        let a = embed_attribute(&mut tape, t, 2).unwrap();
        assert_eq!(tape.value(a).data(), &table.table.value.data()[10..15]);
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap().get(t).unwrap();
        for (i, v) in g.data().iter().enumerate() {
            if !(10..15).contains(&i) {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(g.data()[10..15].iter().any(|&v| v != 0.0));

        // Distinct ids, distinct rows.
        for i in 0..4 {
            for j in i + 1..4 {
                let ri = &table.table.value.data()[i * 5..(i + 1) * 5];
                let rj = &table.table.value.data()[j * 5..(j + 1) * 5];
                assert_ne!(ri, rj);
            }
        }
        assert!(matches!(
            embed_attribute(&mut tape, t, 4),
            Err(Error::Domain(_))
        ));
    }
}
