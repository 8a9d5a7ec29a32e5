//! Align-corners bilinear resampling. Not differentiated.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resizes a `[h,w]` or `[c,h,w]` map to `out_h × out_w`, channel by channel.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract(format!(
            "resize target {out_h}x{out_w} must be positive"
        )));
    }
    let (channels, h, w) = match *map.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(format!(
                "bilinear_resize expects [h,w] or [c,h,w], got {:?}",
                map.shape()
            )))
        }
    };
    let rows: Vec<(usize, usize, f64)> = (0..out_h).map(|i| sample_axis(i, out_h, h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|j| sample_axis(j, out_w, w)).collect();
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &map.data()[c * h * w..(c + 1) * h * w];
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
                let bottom = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
                out.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    let shape = if map.ndim() == 2 {
        vec![out_h, out_w]
    } else {
        vec![channels, out_h, out_w]
    };
    Tensor::new(shape, out)
}

/// Source neighbours and blend weight for output index `i` under align-corners mapping.
fn sample_axis(i: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let lo = (pos.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
    // Exact hits avoid blending in a neighbour at all.
    if frac == 0.0 {
        (lo, lo, 0.0)
    } else {
        (lo, hi, frac)
    }
}
