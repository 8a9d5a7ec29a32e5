//! Per-attribute embedding index, fused similarity, ranking, reranking and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::localize::LocalizationConfig;
use crate::manifest::{AttributeSchema, DatasetManifest, ImageId, ImageRecord, Role, Split};
use crate::metrics::{
    average_precision, mean_average_precision, recall_at_k, QueryRelevance, RecallVariant,
};
use crate::model::Model;
use crate::tape::cosine_value;
use crate::tensor::Tensor;

const INDEX_MAGIC: &[u8; 8] = b"ATSIMIDX";
const INDEX_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    /// Weight of the global similarity; the local one gets `1 − lambda`.
    pub lambda: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { lambda: 0.6 }
    }
}

impl FusionConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(FusionConfig { lambda })
    }
}

/// Global and local embedding of one image under one attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub global: Vec<f64>,
    pub local: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexedImage {
    pub id: ImageId,
    pub role: Option<Role>,
    pub labels: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub split: Split,
    pub dim: usize,
    pub attributes: Vec<AttributeSchema>,
    pub images: Vec<IndexedImage>,
    /// One map per attribute; attributes that were not indexed stay empty.
    pub entries: Vec<BTreeMap<ImageId, EmbeddingPair>>,
}

impl EmbeddingIndex {
    pub fn new(
        split: Split,
        dim: usize,
        attributes: Vec<AttributeSchema>,
        images: Vec<IndexedImage>,
    ) -> Self {
        let entries = vec![BTreeMap::new(); attributes.len()];
        EmbeddingIndex {
            split,
            dim,
            attributes,
            images,
            entries,
        }
    }

    pub fn n_entries(&self) -> usize {
        self.entries.iter().map(BTreeMap::len).sum()
    }

    pub fn insert(&mut self, attribute: usize, id: ImageId, pair: EmbeddingPair) -> Result<()> {
        if pair.global.len() != self.dim || pair.local.len() != self.dim {
            return Err(Error::shape(format!(
                "index holds {}-d vectors, got {} and {}",
                self.dim,
                pair.global.len(),
                pair.local.len()
            )));
        }
        if !pair.global.iter().chain(&pair.local).all(|x| x.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite embedding for image {id}, attribute {attribute}"
            )));
        }
        let slot = self
            .entries
            .get_mut(attribute)
            .ok_or_else(|| Error::Domain(format!("attribute {attribute} not in index")))?;
        if slot.insert(id, pair).is_some() {
            return Err(Error::Data(format!(
                "image {id} indexed twice for attribute {attribute}"
            )));
        }
        Ok(())
    }

    pub fn entry(&self, attribute: usize, id: ImageId) -> Result<&EmbeddingPair> {
        self.entries
            .get(attribute)
            .and_then(|m| m.get(&id))
            .ok_or_else(|| Error::Data(format!("image {id} not indexed for attribute {attribute}")))
    }

    pub fn image(&self, id: ImageId) -> Option<&IndexedImage> {
        self.images.iter().find(|im| im.id == id)
    }

    /// The same index with every vector replaced by seeded uniform noise.
    pub fn randomized(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for map in &mut out.entries {
            for pair in map.values_mut() {
                for x in pair.global.iter_mut().chain(pair.local.iter_mut()) {
                    *x = rng.gen_range(-1.0..1.0);
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.u8(split_byte(self.split));
        w.len_u32(self.dim);
        w.len_u32(self.attributes.len());
        for a in &self.attributes {
            w.str(&a.name);
            w.len_u32(a.value_count);
        }
        w.len_u32(self.images.len());
        for im in &self.images {
            w.u32(im.id);
            w.u8(match im.role {
                None => 0,
                Some(Role::Query) => 1,
                Some(Role::Candidate) => 2,
            });
            w.len_u32(im.labels.len());
            for (&a, &v) in &im.labels {
                w.len_u32(a);
                w.len_u32(v);
            }
        }
        for map in &self.entries {
            w.len_u32(map.len());
            for (&id, pair) in map {
                w.u32(id);
                for &x in pair.global.iter().chain(&pair.local) {
                    w.f64(x);
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8, "magic")? != INDEX_MAGIC {
            return Err(Error::format(0, "not an embedding index"));
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != INDEX_VERSION {
            return Err(Error::format(
                at,
                format!("unsupported index version {version}"),
            ));
        }
        let at = r.pos;
        let split = match r.u8("split")? {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            other => return Err(Error::format(at, format!("bad split byte {other}"))),
        };
        let dim = r.usize("dim")?;
        let n_attr = r.usize("attribute count")?;
        let mut attributes = Vec::new();
        for _ in 0..n_attr {
            attributes.push(AttributeSchema {
                name: r.str("attribute name")?,
                value_count: r.usize("value count")?,
            });
        }
        let n_images = r.usize("image count")?;
        let mut images = Vec::new();
        for _ in 0..n_images {
            let id = r.u32("image id")?;
            let at = r.pos;
            let role = match r.u8("role")? {
                0 => None,
                1 => Some(Role::Query),
                2 => Some(Role::Candidate),
                other => return Err(Error::format(at, format!("bad role byte {other}"))),
            };
            let n_labels = r.usize("label count")?;
            let mut labels = BTreeMap::new();
            for _ in 0..n_labels {
                labels.insert(r.usize("label attribute")?, r.usize("label value")?);
            }
            images.push(IndexedImage { id, role, labels });
        }
        let mut index = EmbeddingIndex::new(split, dim, attributes, images);
        for a in 0..n_attr {
            let n = r.usize("entry count")?;
            for _ in 0..n {
                let at = r.pos;
                let id = r.u32("entry id")?;
                let mut read = || {
                    (0..dim)
                        .map(|_| r.f64("embedding"))
                        .collect::<Result<Vec<_>>>()
                };
                let global = read()?;
                let local = read()?;
                index
                    .insert(a, id, EmbeddingPair { global, local })
                    .map_err(|e| Error::format(at, e.to_string()))?;
            }
        }
        r.expect_end()?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn split_byte(split: Split) -> u8 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Embeds every image of `split` under each of `attributes`, reading pixels through `image_of`.
pub fn build_index_with(
    manifest: &DatasetManifest,
    split: Split,
    model: &Model,
    attributes: &[usize],
    loc: &LocalizationConfig,
    mut image_of: impl FnMut(&ImageRecord) -> Result<Tensor>,
) -> Result<EmbeddingIndex> {
    for &a in attributes {
        model.check_attribute(a)?;
    }
    let records: Vec<&ImageRecord> = manifest.split(split).collect();
    let images = records
        .iter()
        .map(|r| IndexedImage {
            id: r.id,
            role: r.role,
            labels: r.labels.clone(),
        })
        .collect();
    let mut index = EmbeddingIndex::new(
        split,
        model.config.dims.co,
        manifest.attributes.clone(),
        images,
    );
    for r in records {
        let img = image_of(r)?;
        for &a in attributes {
            let e = model.embed(&img, a, loc)?;
            let pair = EmbeddingPair {
                global: e.global.f.into_data(),
                local: e.local.f.into_data(),
            };
            index.insert(a, r.id, pair)?;
        }
    }
    Ok(index)
}

/// [`build_index_with`] reading images from disk below `root`.
pub fn build_index(
    root: impl AsRef<Path>,
    manifest: &DatasetManifest,
    split: Split,
    model: &Model,
    attributes: &[usize],
    loc: &LocalizationConfig,
) -> Result<EmbeddingIndex> {
    let root = root.as_ref();
    let side = model.config.global_backbone.input_side;
    build_index_with(manifest, split, model, attributes, loc, |r| {
        let path = root.join(&r.path);
        crate::pnm::load_image(&path, side)
            .map_err(|e| Error::Data(format!("unreadable image {}: {e}", path.display())))
    })
}

/// `λ·cos(g, g′) + (1−λ)·cos(l, l′)`.
pub fn fused_similarity(a: &EmbeddingPair, b: &EmbeddingPair, cfg: &FusionConfig) -> f64 {
    cfg.lambda * cosine_value(&a.global, &b.global)
        + (1.0 - cfg.lambda) * cosine_value(&a.local, &b.local)
}

/// Sum of [`fused_similarity`] over `attributes`.
pub fn multi_attribute_similarity(
    index: &EmbeddingIndex,
    a: ImageId,
    b: ImageId,
    attributes: &[usize],
    cfg: &FusionConfig,
) -> Result<f64> {
    if attributes.is_empty() {
        return Err(Error::contract(
            "multi-attribute similarity needs at least one attribute",
        ));
    }
    let mut sum = 0.0;
    for &attr in attributes {
        sum += fused_similarity(index.entry(attr, a)?, index.entry(attr, b)?, cfg);
    }
    Ok(sum)
}

/// Ranked `(image, score)` pairs, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query: ImageId,
    pub items: Vec<(ImageId, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<ImageId> {
        self.items.iter().map(|&(id, _)| id).collect()
    }

    /// `query id id …` as written to rank files.
    pub fn to_line(&self) -> String {
        let mut s = self.query.to_string();
        for (id, _) in &self.items {
            write!(s, " {id}").unwrap();
        }
        s
    }
}

/// Parses a rank file: one `query id id …` line per query.
pub fn parse_rankfile(text: &str) -> Result<Vec<RankedList>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|t| {
                t.parse::<ImageId>()
                    .map_err(|_| Error::Data(format!("rank file line {}: bad id {t:?}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(RankedList {
            query: ids[0],
            items: ids[1..].iter().map(|&id| (id, 0.0)).collect(),
        });
    }
    Ok(out)
}

fn sort_ranked(items: &mut [(ImageId, f64)]) {
    items.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
}

/// Candidates for a query under `attribute`: labeled, not the query, and not
/// another query when roles are present.
fn candidates(
    index: &EmbeddingIndex,
    query: ImageId,
    attribute: usize,
) -> impl Iterator<Item = &IndexedImage> {
    index.images.iter().filter(move |im| {
        im.id != query && im.role != Some(Role::Query) && im.labels.contains_key(&attribute)
    })
}

/// Top-`k` candidates for `query` under `attribute` by fused similarity.
pub fn retrieve(
    index: &EmbeddingIndex,
    query: ImageId,
    attribute: usize,
    k: usize,
    cfg: &FusionConfig,
) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::contract("retrieve needs k ≥ 1"));
    }
    let q = index.entry(attribute, query)?;
    let mut items = Vec::new();
    for im in candidates(index, query, attribute) {
        items.push((
            im.id,
            fused_similarity(q, index.entry(attribute, im.id)?, cfg),
        ));
    }
    sort_ranked(&mut items);
    items.truncate(k);
    Ok(RankedList { query, items })
}

/// Reorders the first `top_n` items by multi-attribute similarity to the query; the rest stay put.
pub fn rerank(
    initial: &RankedList,
    attributes: &[usize],
    index: &EmbeddingIndex,
    cfg: &FusionConfig,
    top_n: usize,
) -> Result<RankedList> {
    if top_n == 0 {
        return Err(Error::contract("rerank needs top_n ≥ 1"));
    }
    let n = top_n.min(initial.items.len());
    let mut head = Vec::with_capacity(n);
    for &(id, _) in &initial.items[..n] {
        head.push((
            id,
            multi_attribute_similarity(index, initial.query, id, attributes, cfg)?,
        ));
    }
    head.sort_by(|x, y| y.1.total_cmp(&x.1));
    head.extend_from_slice(&initial.items[n..]);
    Ok(RankedList {
        query: initial.query,
        items: head,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub fusion: FusionConfig,
    pub k: usize,
    pub recall: RecallVariant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fusion: FusionConfig::default(),
            k: 100,
            recall: RecallVariant::AtLeastOne,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeReport {
    pub attribute: usize,
    pub map: f64,
    pub recall: f64,
    pub queries: usize,
    /// Queries without any relevant candidate.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub per_attribute: Vec<AttributeReport>,
    /// Mean of the per-attribute MAPs.
    pub overall_map: f64,
    /// MAP over all queries of all attributes.
    pub pooled_map: f64,
    pub overall_recall: f64,
}

impl EvalReport {
    pub fn render(&self, attributes: &[AttributeSchema]) -> String {
        let mut s = format!(
            "lambda {} k {} recall {}\n",
            self.config.fusion.lambda,
            self.config.k,
            self.config.recall.as_str()
        );
        for r in &self.per_attribute {
            let name = attributes.get(r.attribute).map_or("?", |a| a.name.as_str());
            writeln!(
                s,
                "attribute {} {name}: MAP {:.4} Recall@{} {:.4} queries {} skipped {}",
                r.attribute, r.map, self.config.k, r.recall, r.queries, r.skipped
            )
            .unwrap();
        }
        writeln!(s, "overall MAP {:.4}", self.overall_map).unwrap();
        writeln!(s, "pooled MAP {:.4}", self.pooled_map).unwrap();
        writeln!(
            s,
            "overall Recall@{} {:.4}",
            self.config.k, self.overall_recall
        )
        .unwrap();
        s
    }
}

/// Relevance lists of every query with at least one relevant candidate, plus the skip count.
pub fn query_relevance(
    index: &EmbeddingIndex,
    attribute: usize,
    cfg: &FusionConfig,
) -> Result<(Vec<QueryRelevance>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for q in index
        .images
        .iter()
        .filter(|im| im.role == Some(Role::Query))
    {
        let Some(&value) = q.labels.get(&attribute) else {
            continue;
        };
        let total = candidates(index, q.id, attribute)
            .filter(|im| im.labels[&attribute] == value)
            .count();
        if total == 0 {
            skipped += 1;
            continue;
        }
        let ranked = retrieve(index, q.id, attribute, usize::MAX, cfg)?;
        let relevance = ranked
            .items
            .iter()
            .map(|(id, _)| {
                index
                    .image(*id)
                    .map(|im| im.labels[&attribute] == value)
                    .unwrap_or(false)
            })
            .collect();
        out.push(QueryRelevance {
            relevance,
            total_relevant: total,
        });
    }
    Ok((out, skipped))
}

/// MAP and Recall@K per indexed attribute.
pub fn evaluate(index: &EmbeddingIndex, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut per_attribute = Vec::new();
    let mut pooled = Vec::new();
    for attribute in 0..index.entries.len() {
        if index.entries[attribute].is_empty() {
            continue;
        }
        let (qs, skipped) = query_relevance(index, attribute, &cfg.fusion)?;
        if qs.is_empty() {
            per_attribute.push(AttributeReport {
                attribute,
                map: f64::NAN,
                recall: f64::NAN,
                queries: 0,
                skipped,
            });
            continue;
        }
        per_attribute.push(AttributeReport {
            attribute,
            map: mean_average_precision(&qs)?,
            recall: recall_at_k(&qs, cfg.k, cfg.recall)?,
            queries: qs.len(),
            skipped,
        });
        pooled.extend(qs);
    }
    let scored: Vec<&AttributeReport> = per_attribute.iter().filter(|r| r.queries > 0).collect();
    if scored.is_empty() {
        return Err(Error::contract("no evaluable queries in the index"));
    }
    let mean = |f: fn(&AttributeReport) -> f64| {
        scored.iter().map(|r| f(r)).sum::<f64>() / scored.len() as f64
    };
    Ok(EvalReport {
        config: *cfg,
        overall_map: mean(|r| r.map),
        overall_recall: mean(|r| r.recall),
        pooled_map: pooled
            .iter()
            .map(|q| average_precision(&q.relevance, q.total_relevant))
            .sum::<Result<f64>>()?
            / pooled.len() as f64,
        per_attribute,
    })
}
