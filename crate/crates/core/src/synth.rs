//! Procedural scenes with one motif per attribute, each confined to its own
//! horizontal band. Even attributes draw a coloured glyph, odd attributes a
//! coloured texture patch; the value picks the shape/pattern and the colour.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest::{AttributeSchema, DatasetManifest, ImageRecord, Role, Split};
use crate::pnm::save_image;
use crate::tensor::Tensor;

const BACKGROUND: f64 = 0.5;

const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.15, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.85],
    [0.1, 0.85, 0.85],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub attributes: Vec<AttributeSchema>,
    pub per_value: usize,
    pub side: usize,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Config("need at least one attribute".into()));
        }
        if let Some(a) = self.attributes.iter().find(|a| a.value_count < 2) {
            return Err(Error::Config(format!(
                "attribute {} needs at least 2 values",
                a.name
            )));
        }
        if self.per_value < 2 {
            return Err(Error::Config("need at least 2 images per value".into()));
        }
        if self.side < 8 * self.attributes.len() {
            return Err(Error::Config(format!(
                "side {} too small for {} attribute bands",
                self.side,
                self.attributes.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!(
                "noise level {} outside [0, 1]",
                self.noise
            )));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.attributes
            .iter()
            .map(|a| a.value_count * self.per_value)
            .sum()
    }
}

/// Parses `name:count,name:count` or `count,count` (names default to `attrK`).
pub fn parse_attribute_spec(spec: &str) -> Result<Vec<AttributeSchema>> {
    spec.split(',')
        .enumerate()
        .map(|(k, item)| {
            let item = item.trim();
            let (name, count) = match item.split_once(':') {
                Some((n, c)) => (n.to_string(), c),
                None => (format!("attr{k}"), item),
            };
            let value_count = count
                .parse()
                .map_err(|_| Error::Config(format!("bad attribute spec item {item:?}")))?;
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Config(format!("bad attribute name {name:?}")));
            }
            Ok(AttributeSchema { name, value_count })
        })
        .collect()
}

/// Where each attribute's motif lands: value plus `(row, col)` jitter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneLayout {
    pub values: Vec<usize>,
    pub offsets: Vec<(i32, i32)>,
}

/// Largest jitter (rows, cols) that keeps a motif inside its band.
pub fn jitter_limits(side: usize, n_attributes: usize) -> (i32, i32) {
    let band = side / n_attributes;
    ((band / 4) as i32, (side / 8) as i32)
}

pub fn random_layout(side: usize, value_counts: &[usize], rng: &mut impl Rng) -> SceneLayout {
    let (jr, jc) = jitter_limits(side, value_counts.len());
    SceneLayout {
        values: value_counts.iter().map(|&n| rng.gen_range(0..n)).collect(),
        offsets: value_counts
            .iter()
            .map(|_| (rng.gen_range(-jr..=jr), rng.gen_range(-jc..=jc)))
            .collect(),
    }
}

struct Canvas {
    side: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn paint(&mut self, r: i32, c: i32, rgb: [f64; 3]) {
        let s = self.side as i32;
        if r < 0 || c < 0 || r >= s || c >= s {
            return;
        }
        let plane = self.side * self.side;
        let at = r as usize * self.side + c as usize;
        for (ch, v) in rgb.iter().enumerate() {
            self.data[ch * plane + at] = *v;
        }
    }
}

fn glyph_pixel(shape: usize, r: i32, c: i32, g: i32) -> bool {
    let t = (g / 5).max(1);
    let mid = g / 2;
    match shape % 4 {
        0 => true,
        1 => (r - mid).abs() <= t / 2 + 1 || (c - mid).abs() <= t / 2 + 1,
        2 => r < t || c < t || r >= g - t || c >= g - t,
        _ => (r - c).abs() <= t / 2 + 1 || (r + c - (g - 1)).abs() <= t / 2 + 1,
    }
}

fn texture_pixel(pattern: usize, r: i32, c: i32, period: i32) -> bool {
    let half = period / 2;
    match pattern % 4 {
        0 => r.rem_euclid(period) < half,
        1 => c.rem_euclid(period) < half,
        2 => (r.rem_euclid(period) < half) ^ (c.rem_euclid(period) < half),
        _ => (r + c).rem_euclid(period) < half,
    }
}

/// Renders one `[3, side, side]` scene. Noise is drawn from `rng` only when `noise > 0`.
pub fn render_scene(side: usize, layout: &SceneLayout, noise: f64, rng: &mut impl Rng) -> Tensor {
    let n = layout.values.len().max(1);
    let band = side / n;
    let (jr, jc) = jitter_limits(side, n);
    let mut canvas = Canvas {
        side,
        data: vec![BACKGROUND; 3 * side * side],
    };
    for (k, (&value, &(dr, dc))) in layout.values.iter().zip(&layout.offsets).enumerate() {
        let dr = dr.clamp(-jr, jr);
        let dc = dc.clamp(-jc, jc);
        let color = PALETTE[value % PALETTE.len()];
        let band_top = (k * band) as i32;
        if k % 2 == 0 {
            let g = (band / 2).max(3) as i32;
            let top = band_top + (band as i32 - g) / 2 + dr;
            let left = (side as i32 - g) / 2 + dc;
            for r in 0..g {
                for c in 0..g {
                    if glyph_pixel(value, r, c, g) {
                        canvas.paint(top + r, left + c, color);
                    }
                }
            }
        } else {
            let ph = (band * 5 / 8).max(2) as i32;
            let pw = (side / 2) as i32;
            let top = band_top + (band as i32 - ph) / 2 + dr;
            let left = (side as i32 - pw) / 2 + dc;
            let period = ((band / 8).max(2) as i32) & !1;
            for r in 0..ph {
                for c in 0..pw {
                    if texture_pixel(value, r, c, period.max(2)) {
                        canvas.paint(top + r, left + c, color);
                    }
                }
            }
        }
    }
    if noise > 0.0 {
        for v in &mut canvas.data {
            *v = (*v + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, side, side], canvas.data).expect("canvas shape")
}

fn image_rng(seed: u64, id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64 + 1);
    rng
}

/// Renders every image of `spec` into `out_dir/images/` and writes the manifest.
///
/// Image `i` is generated for one `(attribute, value)` slot; its other motifs
/// take random values. Every motif's value is recorded as a label. Images are
/// split 8:1:1 into train/val/test, and within val/test every fifth image is a
/// query, the rest candidates.
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let counts: Vec<usize> = spec.attributes.iter().map(|a| a.value_count).collect();

    let total = spec.image_count();
    let mut order: Vec<u32> = (0..total as u32).collect();
    order.shuffle(&mut image_rng(spec.seed, u32::MAX - 1));
    let n_val = (total as f64 * 0.1).round() as usize;
    let n_test = (total as f64 * 0.1).round() as usize;
    let n_train = total - n_val - n_test;
    let mut placement = vec![(Split::Train, None); total];
    for (pos, &id) in order.iter().enumerate() {
        placement[id as usize] = if pos < n_train {
            (Split::Train, None)
        } else {
            let (split, within) = if pos < n_train + n_val {
                (Split::Val, pos - n_train)
            } else {
                (Split::Test, pos - n_train - n_val)
            };
            let role = if within % 5 == 0 {
                Role::Query
            } else {
                Role::Candidate
            };
            (split, Some(role))
        };
    }

    let mut records = Vec::with_capacity(total);
    let mut id = 0u32;
    for (attr, schema) in spec.attributes.iter().enumerate() {
        for value in 0..schema.value_count {
            for _ in 0..spec.per_value {
                let mut rng = image_rng(spec.seed, id);
                let mut layout = random_layout(spec.side, &counts, &mut rng);
                layout.values[attr] = value;
                let img = render_scene(spec.side, &layout, spec.noise, &mut rng);
                let rel = format!("images/{id:05}.ppm");
                save_image(&img, out_dir.join(&rel))?;
                let (split, role) = placement[id as usize];
                records.push(ImageRecord {
                    id,
                    path: rel,
                    split,
                    role,
                    labels: layout.values.iter().copied().enumerate().collect(),
                });
                id += 1;
            }
        }
    }
    let manifest = DatasetManifest {
        side: spec.side,
        attributes: spec.attributes.clone(),
        records,
    };
    manifest.validate()?;
    manifest.save(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            attributes: parse_attribute_spec("glyph:3,stripe:2").unwrap(),
            per_value: 4,
            side: 32,
            noise: 0.05,
            seed,
        }
    }

    #[test]
    fn attribute_spec_forms() {
        let a = parse_attribute_spec("3,4").unwrap();
        assert_eq!(
            a[1],
            AttributeSchema {
                name: "attr1".into(),
                value_count: 4
            }
        );
        assert!(parse_attribute_spec("x:y").is_err());
    }

    #[test]
    fn deterministic_and_counted() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate(&spec(11), d1.path()).unwrap();
        let m2 = generate(&spec(11), d2.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.records.len(), 3 * 4 + 2 * 4);
        for r in &m1.records {
            let a = fs::read(d1.path().join(&r.path)).unwrap();
            let b = fs::read(d2.path().join(&r.path)).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(
            fs::read(d1.path().join("manifest.txt")).unwrap(),
            fs::read(d2.path().join("manifest.txt")).unwrap()
        );
        let n_test = m1.split(Split::Test).count();
        let n_val = m1.split(Split::Val).count();
        assert_eq!((n_val, n_test), (2, 2));
    }

    #[test]
    fn noiseless_renders_depend_only_on_layout() {
        let layout = SceneLayout {
            values: vec![1, 0],
            offsets: vec![(2, -3), (0, 4)],
        };
        let a = render_scene(64, &layout, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        let b = render_scene(64, &layout, 0.0, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a, b);
        let other = SceneLayout {
            values: vec![2, 0],
            ..layout.clone()
        };
        let c = render_scene(64, &other, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        // Only the top band differs when the top motif changes.
        let plane = 64 * 64;
        for ch in 0..3 {
            for i in 32 * 64..plane {
                assert_eq!(a.data()[ch * plane + i], c.data()[ch * plane + i]);
            }
        }
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut s = spec(0);
        s.per_value = 1;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = spec(0);
        s.attributes[1].value_count = 1;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }
}
