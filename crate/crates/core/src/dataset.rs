//! In-memory image store and triplet sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ImageId, Split};
use crate::pnm::load_image;
use crate::tensor::Tensor;

/// A manifest with every image decoded at the model's input side.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    images: BTreeMap<ImageId, Tensor>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>, side: usize) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let manifest = DatasetManifest::load(&root)?;
        Self::from_manifest(root, manifest, side)
    }

    pub fn from_manifest(root: PathBuf, manifest: DatasetManifest, side: usize) -> Result<Self> {
        let mut images = BTreeMap::new();
        for r in &manifest.records {
            let path = root.join(&r.path);
            let img = load_image(&path, side)
                .map_err(|e| Error::Data(format!("image {} ({}): {e}", r.id, path.display())))?;
            images.insert(r.id, img);
        }
        Ok(Dataset {
            root,
            manifest,
            images,
        })
    }

    /// Builds a dataset from tensors already in memory.
    pub fn in_memory(manifest: DatasetManifest, images: BTreeMap<ImageId, Tensor>) -> Result<Self> {
        if let Some(r) = manifest
            .records
            .iter()
            .find(|r| !images.contains_key(&r.id))
        {
            return Err(Error::Data(format!("no pixels for image {}", r.id)));
        }
        Ok(Dataset {
            root: PathBuf::new(),
            manifest,
            images,
        })
    }

    pub fn image(&self, id: ImageId) -> Result<&Tensor> {
        self.images
            .get(&id)
            .ok_or_else(|| Error::Data(format!("unknown image id {id}")))
    }
}

/// `(I, I⁺, I⁻ | a)`: anchor and positive share the value of `attribute`, the negative does not.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: ImageId,
    pub positive: ImageId,
    pub negative: ImageId,
    pub attribute: usize,
}

/// Image ids of `split` grouped by their value of `attribute`.
fn groups(
    manifest: &DatasetManifest,
    split: Split,
    attribute: usize,
) -> BTreeMap<usize, Vec<ImageId>> {
    let mut by_value: BTreeMap<usize, Vec<ImageId>> = BTreeMap::new();
    for r in manifest.split(split) {
        if let Some(&v) = r.labels.get(&attribute) {
            by_value.entry(v).or_default().push(r.id);
        }
    }
    by_value
}

pub fn sample_triplets_with(
    manifest: &DatasetManifest,
    split: Split,
    attribute: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Triplet>> {
    let by_value = groups(manifest, split, attribute);
    let anchors: Vec<usize> = by_value
        .iter()
        .filter(|(_, ids)| ids.len() >= 2)
        .map(|(&v, _)| v)
        .collect();
    if anchors.is_empty() || by_value.len() < 2 {
        return Err(Error::Data(format!(
            "attribute {attribute} needs a value with two {} images and at least two values, found {} values",
            split.as_str(),
            by_value.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let value = *anchors.choose(rng).expect("non-empty");
        let same = &by_value[&value];
        let picked: Vec<ImageId> = same.choose_multiple(rng, 2).copied().collect();
        let others: usize = by_value
            .iter()
            .filter(|(&v, _)| v != value)
            .map(|(_, ids)| ids.len())
            .sum();
        let mut k = rng.gen_range(0..others);
        let negative = by_value
            .iter()
            .filter(|(&v, _)| v != value)
            .find_map(|(_, ids)| {
                if k < ids.len() {
                    Some(ids[k])
                } else {
                    k -= ids.len();
                    None
                }
            })
            .expect("index within total");
        out.push(Triplet {
            anchor: picked[0],
            positive: picked[1],
            negative,
            attribute,
        });
    }
    Ok(out)
}

/// `count` triplets for one attribute from the training split, reproducible from `seed`.
pub fn sample_triplets(
    manifest: &DatasetManifest,
    attribute: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_triplets_with(manifest, Split::Train, attribute, count, &mut rng)
}

/// One epoch's shuffled triplet pool, split evenly over all attributes.
pub fn epoch_pool(
    manifest: &DatasetManifest,
    count: usize,
    seed: u64,
    stage: u8,
    epoch: usize,
) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | epoch as u64);
    let n = manifest.attributes.len();
    let mut pool = Vec::with_capacity(count);
    for a in 0..n {
        let share = count / n + usize::from(a < count % n);
        pool.extend(sample_triplets_with(
            manifest,
            Split::Train,
            a,
            share,
            &mut rng,
        )?);
    }
    pool.shuffle(&mut rng);
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{AttributeSchema, ImageRecord};

    pub(crate) fn toy_manifest() -> DatasetManifest {
        let records = (0..12)
            .map(|i| ImageRecord {
                id: i,
                path: format!("{i}.ppm"),
                split: Split::Train,
                role: None,
                labels: [(0, (i % 3) as usize), (1, (i % 2) as usize)].into(),
            })
            .collect();
        DatasetManifest {
            side: 8,
            attributes: vec![
                AttributeSchema {
                    name: "a".into(),
                    value_count: 3,
                },
                AttributeSchema {
                    name: "b".into(),
                    value_count: 2,
                },
            ],
            records,
        }
    }

    #[test]
    fn triplets_respect_values() {
        let m = toy_manifest();
        for attr in 0..2 {
            let ts = sample_triplets(&m, attr, 200, 3).unwrap();
            assert_eq!(ts.len(), 200);
            for t in ts {
                let v = |id| m.record(id).unwrap().labels[&attr];
                assert_eq!(v(t.anchor), v(t.positive));
                assert_ne!(v(t.anchor), v(t.negative));
                assert_ne!(t.anchor, t.positive);
            }
        }
        assert_eq!(
            sample_triplets(&m, 0, 50, 9).unwrap(),
            sample_triplets(&m, 0, 50, 9).unwrap()
        );
    }

    #[test]
    fn single_value_is_data_error() {
        let mut m = toy_manifest();
        for r in &mut m.records {
            r.labels.insert(1, 0);
        }
        let err = sample_triplets(&m, 1, 5, 0).unwrap_err();
        assert!(matches!(&err, Error::Data(msg) if msg.contains("attribute 1")));
    }

    #[test]
    fn pool_mixes_attributes() {
        let m = toy_manifest();
        let pool = epoch_pool(&m, 101, 4, 1, 0).unwrap();
        assert_eq!(pool.len(), 101);
        assert_eq!(pool.iter().filter(|t| t.attribute == 0).count(), 51);
        assert_ne!(pool, epoch_pool(&m, 101, 4, 1, 1).unwrap());
    }
}
