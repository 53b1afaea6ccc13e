//! Structure distance between the correlation maps of two images.

use crate::config::{Metric, SesimConfig};
use crate::corr::{corr_maps, corr_maps_backward, CorrMaps};
use crate::error::{Error, Result};
use crate::extractor::TapSource;
use crate::fault::{self, Kernel};
use crate::sampling::SampleSet;
use crate::seed;
use crate::tensor::{Real, Tensor};

/// Cosine of two vectors as `dot / sqrt(|a|^2 |b|^2)`, clamped to `[-1, 1]`.
/// Two zero vectors count as identical (1); one zero vector gives 0.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    let (dot, aa, bb) = moments(a, b);
    cosine_from(dot, aa, bb)
}

fn moments<T: Real>(a: &[T], b: &[T]) -> (f64, f64, f64) {
    a.iter().zip(b).fold((0.0, 0.0, 0.0), |(d, aa, bb), (&x, &y)| {
        let (x, y) = (x.to_f64(), y.to_f64());
        (d + x * y, aa + x * x, bb + y * y)
    })
}

fn cosine_from(dot: f64, aa: f64, bb: f64) -> f64 {
    match (aa > 0.0, bb > 0.0) {
        (true, true) => (dot / (aa * bb).sqrt()).clamp(-1.0, 1.0),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

/// `d cos(a, b) / d a`, zero when either vector is zero. At `a == b` the
/// gradient is exactly zero and is returned as such rather than as rounding noise.
pub fn cosine_grad<T: Real>(a: &[T], b: &[T]) -> Vec<f64> {
    let (dot, aa, bb) = moments(a, b);
    if aa == 0.0 || bb == 0.0 || a == b {
        return vec![0.0; a.len()];
    }
    let inv = 1.0 / (aa * bb).sqrt();
    let cos = dot * inv;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| y.to_f64() * inv - cos * x.to_f64() / aa)
        .collect()
}

fn check_geometry<T: Real>(sx: &CorrMaps<T>, sy: &CorrMaps<T>) -> Result<()> {
    if sx.samples != sy.samples || sx.values.len() != sy.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "map geometry differs: {}x{} vs {}x{}",
            sx.n_samples(),
            sx.n_points(),
            sy.n_samples(),
            sy.n_points()
        )));
    }
    Ok(())
}

/// Per-query distance: mean `|x - y|` over the row (l1) or `1 - cos` (cos).
/// The loss is the mean of these values.
pub fn row_losses<T: Real>(sx: &CorrMaps<T>, sy: &CorrMaps<T>, metric: Metric) -> Result<Vec<f64>> {
    check_geometry(sx, sy)?;
    Ok(sx
        .rows()
        .zip(sy.rows())
        .map(|(a, b)| match metric {
            Metric::L1 => {
                a.iter().zip(b).map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs()).sum::<f64>() / a.len() as f64
            }
            Metric::Cos => 1.0 - cosine(a, b),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapLoss<T> {
    pub loss: f64,
    pub grad_x: Vec<T>,
    pub grad_y: Vec<T>,
}

/// Structure loss `d(S_x, S_y)` with gradients for both map sets.
pub fn fsesim_loss<T: Real>(sx: &CorrMaps<T>, sy: &CorrMaps<T>, metric: Metric) -> Result<MapLoss<T>> {
    let rows = row_losses(sx, sy, metric)?;
    let loss = rows.iter().sum::<f64>() / rows.len() as f64;
    let (ns, np) = (sx.n_samples(), sx.n_points());
    let mut grad_x = vec![T::zero(); ns * np];
    let mut grad_y = vec![T::zero(); ns * np];
    match metric {
        Metric::L1 => {
            let scale = 1.0 / (ns * np) as f64;
            for ((gx, gy), (&x, &y)) in grad_x.iter_mut().zip(grad_y.iter_mut()).zip(sx.values.iter().zip(&sy.values)) {
                let d = x.to_f64() - y.to_f64();
                let s = if d > 0.0 { scale } else if d < 0.0 { -scale } else { 0.0 };
                *gx = T::from_f64(s);
                *gy = T::from_f64(-s);
            }
        }
        Metric::Cos => {
            let scale = -1.0 / ns as f64;
            for i in 0..ns {
                let (a, b) = (sx.row(i), sy.row(i));
                let ga = cosine_grad(a, b);
                let gb = cosine_grad(b, a);
                for j in 0..np {
                    grad_x[i * np + j] = T::from_f64(scale * ga[j]);
                    grad_y[i * np + j] = T::from_f64(scale * gb[j]);
                }
            }
        }
    }
    let k = match metric {
        Metric::L1 => Kernel::FsesimL1,
        Metric::Cos => Kernel::FsesimCos,
    };
    fault::flip(k, &mut grad_x);
    fault::flip(k, &mut grad_y);
    Ok(MapLoss { loss, grad_x, grad_y })
}

/// Queries for the `k`-th configured tap: drawn with seed
/// `seed::derive(cfg.seed, "tap", k)` so taps sample independently but
/// reproducibly from one configured seed.
pub fn tap_samples(cfg: &SesimConfig, k: usize, h: usize, w: usize) -> Result<SampleSet> {
    SampleSet::draw(h, w, cfg.sampling, cfg.n_samples, cfg.patch, seed::derive(cfg.seed, "tap", k as u64))
}

#[derive(Debug, Clone)]
pub struct TapLoss<T> {
    pub name: String,
    pub loss: f64,
    pub grad_x: Tensor<T>,
    pub grad_y: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct MultiLayerLoss<T> {
    /// Equal-weight mean of the per-tap losses.
    pub loss: f64,
    /// Per-tap values; gradients already carry the `1 / n_taps` weight.
    pub taps: Vec<TapLoss<T>>,
}

impl<T: Real> MultiLayerLoss<T> {
    pub fn grads_x(&self) -> Vec<(String, Tensor<T>)> {
        self.taps.iter().map(|t| (t.name.clone(), t.grad_x.clone())).collect()
    }

    pub fn grads_y(&self) -> Vec<(String, Tensor<T>)> {
        self.taps.iter().map(|t| (t.name.clone(), t.grad_y.clone())).collect()
    }
}

/// Mean of per-tap structure losses over `cfg.taps`, each tap with its own
/// sample set (see [`tap_samples`]) shared by both images.
pub fn multi_layer_loss<T: Real>(
    x: &impl TapSource<T>,
    y: &impl TapSource<T>,
    cfg: &SesimConfig,
) -> Result<MultiLayerLoss<T>> {
    if cfg.taps.is_empty() {
        return Err(Error::Config("no taps configured".into()));
    }
    let weight = 1.0 / cfg.taps.len() as f64;
    let mut taps = Vec::with_capacity(cfg.taps.len());
    let mut total = 0.0;
    for (k, name) in cfg.taps.iter().enumerate() {
        let fx = &x.tap(name)?.features;
        let fy = &y.tap(name)?.features;
        if fx.shape() != fy.shape() {
            return Err(Error::SizeMismatch(format!(
                "tap `{name}`: {:?} vs {:?}",
                fx.shape(),
                fy.shape()
            )));
        }
        let samples = tap_samples(cfg, k, fx.height(), fx.width())?;
        let sx = corr_maps(fx, &samples, cfg.normalize_features, name)?;
        let sy = corr_maps(fy, &samples, cfg.normalize_features, name)?;
        let ml = fsesim_loss(&sx, &sy, cfg.metric)?;
        let w = T::from_f64(weight);
        let gx: Vec<T> = ml.grad_x.iter().map(|&g| g * w).collect();
        let gy: Vec<T> = ml.grad_y.iter().map(|&g| g * w).collect();
        taps.push(TapLoss {
            name: name.clone(),
            loss: ml.loss,
            grad_x: corr_maps_backward(fx, &samples, cfg.normalize_features, &gx)?,
            grad_y: corr_maps_backward(fy, &samples, cfg.normalize_features, &gy)?,
        });
        total += weight * ml.loss;
    }
    Ok(MultiLayerLoss { loss: total, taps })
}
