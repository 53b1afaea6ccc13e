//! Diagnostics built on the structure loss: per-query error maps between
//! two images, single-query self-similarity heatmaps, and the separation
//! statistics used to compare aligned and shuffled pairs.

use rayon::prelude::*;

use crate::config::{Metric, SesimConfig};
use crate::corr::corr_maps;
use crate::error::{Error, Result};
use crate::extractor::TapSource;
use crate::loss::row_losses;
use crate::ops::bilinear_resize;
use crate::sampling::{grid_dims, Coord, SampleSet, SamplingMode};
use crate::selection::StructureNet;
use crate::tensor::{Real, Tensor};

/// Per-query structure error on a `rows x cols` query lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major lattice values.
    pub values: Vec<f64>,
    pub tap_coords: Vec<Coord>,
    /// Pixel centers of each query's receptive cell: `r * stride + (stride - 1) / 2`.
    pub image_coords: Vec<(f64, f64)>,
    pub metric: Metric,
    pub tap: String,
}

impl ErrorGrid {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct ErrorMap {
    pub grid: ErrorGrid,
    /// Lattice values bilinearly resized to the image, `(1, 1, H, W)`.
    pub heatmap: Tensor<f32>,
}

/// Query lattice for an error map: `grid_dims(cfg.n_samples)` filled
/// completely, on the first configured tap.
pub fn error_samples(cfg: &SesimConfig, map_h: usize, map_w: usize) -> Result<(SampleSet, usize, usize)> {
    let (rows, cols) = grid_dims(cfg.n_samples);
    let s = SampleSet::draw(map_h, map_w, SamplingMode::PatchGrid, rows * cols, cfg.patch, cfg.seed)?;
    Ok((s, rows, cols))
}

fn first_tap(cfg: &SesimConfig) -> Result<&str> {
    cfg.taps.first().map(String::as_str).ok_or_else(|| Error::Config("no taps configured".into()))
}

/// Error lattice between `x` and `y` without the heatmap.
pub fn error_grid<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SesimConfig, net: &StructureNet<'_, T>) -> Result<ErrorGrid> {
    if x.shape() != y.shape() {
        return Err(Error::SizeMismatch(format!("error map inputs differ: {:?} vs {:?}", x.shape(), y.shape())));
    }
    let tap = first_tap(cfg)?;
    let fx = net.features(x)?;
    let fy = net.features(y)?;
    let (tx, ty) = (fx.tap(tap)?, fy.tap(tap)?);
    let (h, w) = (tx.features.height(), tx.features.width());
    let (samples, rows, cols) = error_samples(cfg, h, w)?;
    let sx = corr_maps(&tx.features, &samples, cfg.normalize_features, tap)?;
    let sy = corr_maps(&ty.features, &samples, cfg.normalize_features, tap)?;
    let values = row_losses(&sx, &sy, cfg.metric)?;
    let s = tx.stride as f64;
    let image_coords = samples
        .queries()
        .iter()
        .map(|&(r, c)| (r as f64 * s + (s - 1.0) / 2.0, c as f64 * s + (s - 1.0) / 2.0))
        .collect();
    Ok(ErrorGrid {
        rows,
        cols,
        values,
        tap_coords: samples.queries().to_vec(),
        image_coords,
        metric: cfg.metric,
        tap: tap.to_string(),
    })
}

pub fn error_map<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SesimConfig, net: &StructureNet<'_, T>) -> Result<ErrorMap> {
    let grid = error_grid(x, y, cfg, net)?;
    let heatmap = upsample(&grid.values, grid.rows, grid.cols, x.height(), x.width())?;
    Ok(ErrorMap { grid, heatmap })
}

/// Bilinear resize of a row-major `rows x cols` field.
pub fn upsample(values: &[f64], rows: usize, cols: usize, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let t = Tensor::from_vec([1, 1, rows, cols], values.iter().map(|&v| v as f32).collect())?;
    bilinear_resize(&t, out_h, out_w)
}

#[derive(Debug, Clone)]
pub struct SelfSimMap {
    pub query: Coord,
    pub tap: String,
    /// Map row before normalization, row-major over the `p x p` patch.
    pub raw: Vec<f64>,
    /// Min-max normalized row; all zeros when the row is constant.
    pub normalized: Vec<f64>,
    /// Normalized row resized to the patch's pixel footprint,
    /// `(1, 1, p * stride, p * stride)`.
    pub heatmap: Tensor<f32>,
}

/// Self-similarity of one query (tap coordinates, first configured tap)
/// against its patch.
pub fn selfsim_heatmap<T: Real>(
    x: &Tensor<T>,
    query: Coord,
    cfg: &SesimConfig,
    net: &StructureNet<'_, T>,
) -> Result<SelfSimMap> {
    let tap_name = first_tap(cfg)?;
    let feats = net.features(x)?;
    let tap = feats.tap(tap_name)?;
    let (h, w) = (tap.features.height(), tap.features.width());
    let samples = SampleSet::at_queries(h, w, cfg.patch, vec![query])?;
    let maps = corr_maps(&tap.features, &samples, cfg.normalize_features, tap_name)?;
    let raw: Vec<f64> = maps.row(0).iter().map(|v| v.to_f64()).collect();
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let normalized: Vec<f64> = if hi > lo { raw.iter().map(|v| (v - lo) / (hi - lo)).collect() } else { vec![0.0; raw.len()] };
    let p = cfg.patch;
    let side = p * tap.stride;
    let heatmap = upsample(&normalized, p, p, side, side)?;
    Ok(SelfSimMap { query, tap: tap_name.to_string(), raw, normalized, heatmap })
}

/// Probability that a shuffled score exceeds an aligned one, ties counting
/// half (Mann-Whitney U / (n_a n_s)).
pub fn separation_auc(aligned: &[f64], shuffled: &[f64]) -> f64 {
    if aligned.is_empty() || shuffled.is_empty() {
        return 0.5;
    }
    let mut u = 0.0;
    for &s in shuffled {
        for &a in aligned {
            u += if s > a {
                1.0
            } else if s == a {
                0.5
            } else {
                0.0
            };
        }
    }
    u / (aligned.len() * shuffled.len()) as f64
}

/// Mean absolute pixel difference.
pub fn pixel_l1<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    x.ensure_same_shape(y, "pixel l1")?;
    Ok(x.data().iter().zip(y.data()).map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs()).sum::<f64>() / x.len() as f64)
}

/// Mean error-map value for each `(a, b)` index pair over two image lists.
pub fn pair_scores<T: Real>(
    a: &[Tensor<T>],
    b: &[Tensor<T>],
    pairs: &[(usize, usize)],
    cfg: &SesimConfig,
    net: &StructureNet<'_, T>,
) -> Result<Vec<f64>> {
    pairs
        .par_iter()
        .map(|&(i, j)| Ok(error_grid(&a[i], &b[j], cfg, net)?.mean()))
        .collect()
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_extremes() {
        assert_eq!(separation_auc(&[0.1, 0.2], &[0.3, 0.4]), 1.0);
        assert_eq!(separation_auc(&[0.3, 0.4], &[0.1, 0.2]), 0.0);
        assert_eq!(separation_auc(&[0.5], &[0.5]), 0.5);
        // one of four comparisons lost
        assert_eq!(separation_auc(&[0.1, 0.35], &[0.3, 0.4]), 0.75);
    }

    #[test]
    fn pearson_of_affine_copy_is_one() {
        let a = [1.0, 3.0, 2.0, 5.0];
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v - 1.0).collect();
        assert!((pearson(&a, &b) - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[1.0; 4]), 0.0);
    }
}
