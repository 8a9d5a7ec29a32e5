//! Weakly-supervised RoI extraction from a spatial attention map:
//! upsample → threshold → connected regions → bounding box → square → crop.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::resize::bilinear_resize;
use crate::tensor::Tensor;

/// Inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        BBox {
            row0,
            col0,
            row1,
            col1,
        }
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0 + 1
    }

    pub fn is_square(&self) -> bool {
        self.height() == self.width()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.row0 <= other.row0
            && self.col0 <= other.col0
            && self.row1 >= other.row1
            && self.col1 >= other.col1
    }

    pub fn within(&self, side: usize) -> bool {
        self.row0 <= self.row1 && self.col0 <= self.col1 && self.row1 < side && self.col1 < side
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::Config(format!(
                "connectivity must be 4 or 8, got {other}"
            ))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Which thresholded regions feed the bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionMode {
    All,
    Top1,
    Top2,
}

impl RegionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(RegionMode::All),
            "top1" => Ok(RegionMode::Top1),
            "top2" => Ok(RegionMode::Top2),
            other => Err(Error::Config(format!("unknown region mode {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegionMode::All => "all",
            RegionMode::Top1 => "top1",
            RegionMode::Top2 => "top2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizationConfig {
    /// Pixels at or above `tau · max` are kept.
    pub tau: f64,
    pub connectivity: Connectivity,
    pub region_mode: RegionMode,
    pub min_side: usize,
    pub local_input_side: usize,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            tau: 0.5,
            connectivity: Connectivity::Eight,
            region_mode: RegionMode::All,
            min_side: 8,
            local_input_side: 32,
        }
    }
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.min_side == 0 || self.local_input_side < self.min_side {
            return Err(Error::Config(format!(
                "need 1 <= min_side ({}) <= local_input_side ({})",
                self.min_side, self.local_input_side
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "{} bits for a {height}x{width} map",
                bits.len()
            )));
        }
        Ok(BinaryMap {
            height,
            width,
            bits,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.height, self.width], data).expect("consistent map")
    }
}

/// Keeps pixels with value ≥ `tau · max`; the maximum itself always survives.
pub fn binarize(map: &Tensor, tau: f64) -> Result<BinaryMap> {
    let [h, w] = *map.shape() else {
        return Err(Error::shape(format!(
            "binarize expects [h,w], got {:?}",
            map.shape()
        )));
    };
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = tau * max;
    let bits = map
        .data()
        .iter()
        .map(|&v| v >= threshold || v == max)
        .collect();
    BinaryMap::new(h, w, bits)
}

/// One connected set of foreground pixels as `(row, col)` pairs in discovery order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub pixels: Vec<(usize, usize)>,
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Maximal connected regions, largest first; equal areas keep raster order of
/// their top-left-most pixel.
pub fn connected_components(map: &BinaryMap, connectivity: Connectivity) -> Vec<Region> {
    let (h, w) = (map.height, map.width);
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !map.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            pixels.push((r, c));
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let n = nr as usize * w + nc as usize;
                if map.bits[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        regions.push(Region { pixels });
    }
    // Stable: regions were found in raster order of their first pixel.
    regions.sort_by(|a, b| b.area().cmp(&a.area()));
    regions
}

/// Tightest box around `pixels`.
pub fn region_bbox(pixels: &[(usize, usize)]) -> Result<BBox> {
    let (&(r, c), rest) = pixels
        .split_first()
        .ok_or_else(|| Error::contract("bounding box of an empty pixel set"))?;
    Ok(rest.iter().fold(BBox::new(r, c, r, c), |b, &(r, c)| BBox {
        row0: b.row0.min(r),
        col0: b.col0.min(c),
        row1: b.row1.max(r),
        col1: b.col1.max(c),
    }))
}

/// Extends the shorter side symmetrically (odd pixel to the high side) to a
/// square of side `max(h, w, min_side)` capped at `image_side`, then shifts it
/// back inside the image.
pub fn squarify(bbox: BBox, image_side: usize, min_side: usize) -> BBox {
    let side = bbox
        .height()
        .max(bbox.width())
        .max(min_side)
        .min(image_side);
    let place = |lo: usize, len: usize| -> (usize, usize) {
        let extra = side.saturating_sub(len);
        let start = lo as isize - (extra / 2) as isize;
        let start = start.clamp(0, (image_side - side) as isize) as usize;
        (start, start + side - 1)
    };
    let (row0, row1) = place(bbox.row0, bbox.height());
    let (col0, col1) = place(bbox.col0, bbox.width());
    BBox {
        row0,
        col0,
        row1,
        col1,
    }
}

/// Crops a square box out of a `[c, s, s]` image and resamples it to `out_side`.
pub fn crop_resize(image: &Tensor, bbox: BBox, out_side: usize) -> Result<Tensor> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::shape(format!(
            "crop expects [c,h,w], got {:?}",
            image.shape()
        )));
    };
    if !bbox.is_square() {
        return Err(Error::contract(format!("crop box {bbox:?} is not square")));
    }
    if bbox.row1 >= h || bbox.col1 >= w {
        return Err(Error::contract(format!(
            "crop box {bbox:?} outside {h}x{w} image"
        )));
    }
    let side = bbox.height();
    let mut data = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        let plane = image.channel(ch);
        for r in bbox.row0..=bbox.row1 {
            data.extend_from_slice(&plane[r * w + bbox.col0..=r * w + bbox.col1]);
        }
    }
    let crop = Tensor::new(vec![c, side, side], data)?;
    bilinear_resize(&crop, out_side, out_side)
}

/// Every intermediate of one localization run.
#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    /// Attention map resampled to image size.
    pub heatmap: Tensor,
    pub binary: BinaryMap,
    pub regions: Vec<Region>,
    pub bbox: BBox,
    pub square: BBox,
    pub roi: Tensor,
}

pub fn localize_detailed(
    image: &Tensor,
    alpha_s: &Tensor,
    config: &LocalizationConfig,
) -> Result<Localization> {
    config.validate()?;
    let [_, h, w] = *image.shape() else {
        return Err(Error::shape(format!(
            "localize expects [c,s,s], got {:?}",
            image.shape()
        )));
    };
    if h != w {
        return Err(Error::shape(format!(
            "localize needs a square image, got {h}x{w}"
        )));
    }
    let heatmap = bilinear_resize(alpha_s, h, w)?;
    let binary = binarize(&heatmap, config.tau)?;
    let regions = connected_components(&binary, config.connectivity);
    let take = match config.region_mode {
        RegionMode::All => regions.len(),
        RegionMode::Top1 => 1,
        RegionMode::Top2 => 2,
    };
    let selected: Vec<(usize, usize)> = regions
        .iter()
        .take(take)
        .flat_map(|r| r.pixels.iter().copied())
        .collect();
    let bbox = region_bbox(&selected)?;
    let square = squarify(bbox, h, config.min_side);
    let roi = crop_resize(image, square, config.local_input_side)?;
    Ok(Localization {
        heatmap,
        binary,
        regions,
        bbox,
        square,
        roi,
    })
}

/// RoI image `[3, L, L]` for the local branch.
pub fn localize(image: &Tensor, alpha_s: &Tensor, config: &LocalizationConfig) -> Result<Tensor> {
    localize_detailed(image, alpha_s, config).map(|l| l.roi)
}
