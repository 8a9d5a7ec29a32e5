//! Browser demo over the attrsim library. The plain functions are usable (and
//! tested) natively; the `#[wasm_bindgen]` wrappers convert errors for JS.

use std::collections::BTreeMap;

use attrsim::localize::{localize_detailed, BBox, Connectivity, LocalizationConfig, RegionMode};
use attrsim::manifest::{AttributeSchema, Role, Split};
use attrsim::retrieval::{
    evaluate, EmbeddingIndex, EmbeddingPair, EvalConfig, FusionConfig, IndexedImage,
};
use attrsim::synth::{jitter_limits, render_scene, SceneLayout};
use attrsim::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Side of the synthetic attention map, matching the desk feature grid.
pub const ATTENTION_SIDE: usize = 8;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A two-attribute scene (glyph on top, stripes below) with the given values.
pub fn scene(glyph: usize, stripe: usize, side: usize, noise: f64, seed: u64) -> Result<Tensor> {
    if side < 16 || !(0.0..=1.0).contains(&noise) {
        return Err(Error::Config(format!(
            "need side >= 16 and noise in [0, 1], got {side} and {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (jr, jc) = jitter_limits(side, 2);
    let layout = SceneLayout {
        values: vec![glyph, stripe],
        offsets: (0..2)
            .map(|_| (rng.gen_range(-jr..=jr), rng.gen_range(-jc..=jc)))
            .collect(),
    };
    Ok(render_scene(side, &layout, noise, &mut rng))
}

/// `[3, h, w]` in [0, 1] to RGBA bytes for a canvas.
pub fn to_rgba(img: &Tensor) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let d = img.data();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    (0..plane)
        .flat_map(|i| [q(d[i]), q(d[plane + i]), q(d[2 * plane + i]), 255])
        .collect()
}

/// Attention map made of Gaussian blobs `(row, col, spread, peak)` in map coordinates.
pub fn blob_attention(side: usize, blobs: &[(f64, f64, f64, f64)]) -> Tensor {
    let mut data = vec![1e-3; side * side];
    for (i, v) in data.iter_mut().enumerate() {
        let (r, c) = ((i / side) as f64, (i % side) as f64);
        for &(br, bc, spread, peak) in blobs {
            let d2 = (r - br).powi(2) + (c - bc).powi(2);
            *v += peak * (-d2 / (2.0 * spread.max(0.05).powi(2))).exp();
        }
    }
    let total: f64 = data.iter().sum();
    Tensor::new(vec![side, side], data.iter().map(|v| v / total).collect()).expect("square map")
}

#[wasm_bindgen]
pub struct LocalizationView {
    overlay: Vec<u8>,
    roi: Vec<u8>,
    boxes: Vec<u32>,
    regions: usize,
    roi_side: usize,
}

#[wasm_bindgen]
impl LocalizationView {
    /// Scene RGBA with the kept pixels tinted and the box outlines drawn.
    pub fn overlay(&self) -> Vec<u8> {
        self.overlay.clone()
    }

    /// Cropped and resized region as RGBA.
    pub fn roi(&self) -> Vec<u8> {
        self.roi.clone()
    }

    /// `row0 col0 row1 col1` of the tight box, then of the square.
    pub fn boxes(&self) -> Vec<u32> {
        self.boxes.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn regions(&self) -> usize {
        self.regions
    }

    #[wasm_bindgen(getter)]
    pub fn roi_side(&self) -> usize {
        self.roi_side
    }
}

fn outline(rgba: &mut [u8], side: usize, b: BBox, color: [u8; 3]) {
    let mut put = |r: usize, c: usize| {
        let at = 4 * (r * side + c);
        rgba[at..at + 3].copy_from_slice(&color);
    };
    for c in b.col0..=b.col1 {
        put(b.row0, c);
        put(b.row1, c);
    }
    for r in b.row0..=b.row1 {
        put(r, b.col0);
        put(r, b.col1);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExplorerParams {
    pub glyph: usize,
    pub stripe: usize,
    pub blobs: [(f64, f64, f64, f64); 2],
    pub tau: f64,
    pub eight: bool,
    pub mode: RegionMode,
    pub min_side: usize,
}

/// Runs the localization pipeline on a 64 px scene and a two-blob attention map.
pub fn explore(p: &ExplorerParams) -> Result<LocalizationView> {
    let side = 64;
    let img = scene(p.glyph, p.stripe, side, 0.05, 1)?;
    let alpha = blob_attention(ATTENTION_SIDE, &p.blobs);
    let cfg = LocalizationConfig {
        tau: p.tau,
        connectivity: if p.eight {
            Connectivity::Eight
        } else {
            Connectivity::Four
        },
        region_mode: p.mode,
        min_side: p.min_side,
        local_input_side: 32,
    };
    let loc = localize_detailed(&img, &alpha, &cfg)?;
    let mut overlay = to_rgba(&img);
    for (i, px) in overlay.chunks_mut(4).enumerate() {
        if loc.binary.get(i / side, i % side) {
            px[0] = px[0] / 2 + 127;
        } else {
            for ch in &mut px[..3] {
                *ch /= 3;
            }
        }
    }
    outline(&mut overlay, side, loc.square, [255, 220, 0]);
    outline(&mut overlay, side, loc.bbox, [0, 200, 255]);
    let (b, s) = (loc.bbox, loc.square);
    Ok(LocalizationView {
        overlay,
        roi: to_rgba(&loc.roi),
        boxes: [
            b.row0, b.col0, b.row1, b.col1, s.row0, s.col0, s.row1, s.col1,
        ]
        .iter()
        .map(|&v| v as u32)
        .collect(),
        regions: loc.regions.len(),
        roi_side: cfg.local_input_side,
    })
}

/// MAP of a toy gallery at `steps + 1` evenly spaced fusion weights from 0 to 1.
///
/// Every image has one attribute with four values; its global and local
/// vectors are independent noisy copies of per-value prototypes, so each view
/// alone ranks imperfectly.
pub fn fusion_sweep(
    seed: u64,
    global_noise: f64,
    local_noise: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 || steps > 100 {
        return Err(Error::Config(format!(
            "steps must lie in 1..=100, got {steps}"
        )));
    }
    let (values, per_value, dim) = (4, 12, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prototypes = || -> Vec<Vec<f64>> {
        (0..values)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    };
    let (proto_g, proto_l) = (prototypes(), prototypes());
    let images: Vec<IndexedImage> = (0..values * per_value)
        .map(|i| IndexedImage {
            id: i as u32,
            role: Some(if i % per_value < 3 {
                Role::Query
            } else {
                Role::Candidate
            }),
            labels: BTreeMap::from([(0, i / per_value)]),
        })
        .collect();
    let schema = vec![AttributeSchema {
        name: "toy".into(),
        value_count: values,
    }];
    let mut index = EmbeddingIndex::new(Split::Val, dim, schema, images);
    for i in 0..values * per_value {
        let v = i / per_value;
        let mut noisy = |proto: &[f64], sigma: f64| -> Vec<f64> {
            proto
                .iter()
                .map(|x| x + sigma * rng.gen_range(-1.0..1.0))
                .collect()
        };
        let global = noisy(&proto_g[v], global_noise);
        let local = noisy(&proto_l[v], local_noise);
        index.insert(0, i as u32, EmbeddingPair { global, local })?;
    }
    (0..=steps)
        .map(|k| {
            let cfg = EvalConfig {
                fusion: FusionConfig::new(k as f64 / steps as f64)?,
                ..EvalConfig::default()
            };
            Ok(evaluate(&index, &cfg)?.overall_map)
        })
        .collect()
}

#[wasm_bindgen(js_name = renderScene)]
pub fn render_scene_js(
    glyph: usize,
    stripe: usize,
    side: usize,
    noise: f64,
    seed: u32,
) -> std::result::Result<Vec<u8>, JsError> {
    scene(glyph, stripe, side, noise, seed.into())
        .map(|t| to_rgba(&t))
        .map_err(js)
}

#[wasm_bindgen(js_name = exploreLocalization)]
#[allow(clippy::too_many_arguments)]
pub fn explore_js(
    glyph: usize,
    stripe: usize,
    row_a: f64,
    col_a: f64,
    spread_a: f64,
    row_b: f64,
    col_b: f64,
    peak_b: f64,
    tau: f64,
    eight: bool,
    mode: &str,
    min_side: usize,
) -> std::result::Result<LocalizationView, JsError> {
    let params = ExplorerParams {
        glyph,
        stripe,
        blobs: [(row_a, col_a, spread_a, 1.0), (row_b, col_b, 0.8, peak_b)],
        tau,
        eight,
        mode: RegionMode::parse(mode).map_err(js)?,
        min_side,
    };
    explore(&params).map_err(js)
}

#[wasm_bindgen(js_name = fusionSweep)]
pub fn fusion_sweep_js(
    seed: u32,
    global_noise: f64,
    local_noise: f64,
    steps: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    fusion_sweep(seed.into(), global_noise, local_noise, steps).map_err(js)
}
