//! Scalar-to-color lookup for heatmaps. The table (`data/viridis.txt`, one
//! `r g b` triple of 8-bit values per line, 256 lines) is the viridis map
//! sampled at `i / 255`. A value `v` in `[0, 1]` maps to entry
//! `round(v * 255)`; values outside are clamped and NaN maps to entry 0.

use std::sync::OnceLock;

use crate::tensor::{Real, Tensor};

const TABLE: &str = include_str!("../data/viridis.txt");

pub fn lut() -> &'static [[u8; 3]; 256] {
    static LUT: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut out = [[0u8; 3]; 256];
        for (i, line) in TABLE.lines().enumerate() {
            let v: Vec<u8> = line.split_whitespace().map(|t| t.parse().expect("table entry")).collect();
            out[i] = [v[0], v[1], v[2]];
        }
        out
    })
}

pub fn color(v: f64) -> [u8; 3] {
    let i = if v.is_nan() { 0 } else { (v.clamp(0.0, 1.0) * 255.0).round() as usize };
    lut()[i]
}

/// Color a single-channel map after min-max scaling to `[0, 1]` (a constant
/// map becomes entry 0). Returns a `(1, 3, H, W)` image with values `c / 255`.
pub fn colorize<T: Real>(map: &Tensor<T>) -> Tensor<f32> {
    let [_, _, h, w] = map.shape();
    let vals: Vec<f64> = (0..h * w).map(|k| map.at(0, 0, k / w, k % w).to_f64()).collect();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut out = Tensor::zeros([1, 3, h, w]);
    for (k, v) in vals.iter().enumerate() {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        for (ch, c) in color(t).into_iter().enumerate() {
            out.data_mut()[ch * h * w + k] = c as f32 / 255.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_match_table() {
        assert_eq!(color(0.0), [68, 1, 84]);
        assert_eq!(color(-3.0), color(0.0));
        assert_eq!(color(1.0), lut()[255]);
        assert_eq!(lut().len(), 256);
    }

    #[test]
    fn luminance_increases() {
        let y = |c: [u8; 3]| 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64;
        assert!(y(color(1.0)) > y(color(0.5)));
        assert!(y(color(0.5)) > y(color(0.0)));
    }
}
