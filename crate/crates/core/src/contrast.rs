//! Patchwise contrastive objective over correlation maps.
//!
//! Each query row of `x` is paired positively with the row at the same pool
//! index in the augmented image and negatively with `K` rows: some from
//! other pool positions of the augmented image (internal) and the rest
//! from pool positions of another image (external).

use rand::seq::index;
use rayon::prelude::*;

use crate::config::SesimConfig;
use crate::corr::{corr_maps, CorrMaps};
use crate::error::{Error, Result};
use crate::extractor::TapSource;
use crate::fault::{self, Kernel};
use crate::sampling::SampleSet;
use crate::seed;
use crate::selection::StructureNet;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSource {
    /// Another position of the augmented image.
    Internal,
    /// A position of the other image.
    External,
}

/// Where a negative row came from: its source map set and pool index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NegativeRef {
    pub source: NegativeSource,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastBatch<T = f32> {
    pub n_points: usize,
    pub k: usize,
    /// `n_queries x n_points`.
    pub queries: Vec<T>,
    /// `n_queries x n_points`, row `i` taken at the same pool index as query `i`.
    pub positives: Vec<T>,
    /// `n_queries x k x n_points`.
    pub negatives: Vec<T>,
    /// `n_queries x k`.
    pub provenance: Vec<NegativeRef>,
}

impl<T: Real> ContrastBatch<T> {
    pub fn n_queries(&self) -> usize {
        self.queries.len() / self.n_points
    }

    pub fn query(&self, i: usize) -> &[T] {
        &self.queries[i * self.n_points..(i + 1) * self.n_points]
    }

    pub fn positive(&self, i: usize) -> &[T] {
        &self.positives[i * self.n_points..(i + 1) * self.n_points]
    }

    pub fn negative(&self, i: usize, k: usize) -> &[T] {
        let o = (i * self.k + k) * self.n_points;
        &self.negatives[o..o + self.n_points]
    }

    /// Map gradients of the batch back onto the three source map sets
    /// `(x, x_aug, y)`, each laid out like [`CorrMaps::values`].
    pub fn scatter(&self, grads: &InfoNceGrads<T>, pool: usize) -> [Vec<T>; 3] {
        let np = self.n_points;
        let mut gx = vec![T::zero(); pool * np];
        let mut ga = vec![T::zero(); pool * np];
        let mut gy = vec![T::zero(); pool * np];
        let add = |dst: &mut [T], src: &[T]| dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        for i in 0..self.n_queries() {
            add(&mut gx[i * np..(i + 1) * np], &grads.queries[i * np..(i + 1) * np]);
            add(&mut ga[i * np..(i + 1) * np], &grads.positives[i * np..(i + 1) * np]);
            for k in 0..self.k {
                let r = self.provenance[i * self.k + k];
                let o = (i * self.k + k) * np;
                let dst = match r.source {
                    NegativeSource::Internal => &mut ga,
                    NegativeSource::External => &mut gy,
                };
                add(&mut dst[r.index * np..(r.index + 1) * np], &grads.negatives[o..o + np]);
            }
        }
        [gx, ga, gy]
    }
}

/// Pool indices holding the first occurrence of each distinct query coordinate.
fn distinct_positions(samples: &SampleSet) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    (0..samples.n_samples()).filter(|&i| seen.insert(samples.query(i))).collect()
}

/// Assemble a batch from three map sets computed on one shared sample pool.
/// Every pool row of `sx` is a query. Internal negatives are drawn without
/// replacement from distinct pool positions other than the query's own;
/// external negatives from distinct pool positions of `sy`.
pub fn batch_from_maps<T: Real>(
    sx: &CorrMaps<T>,
    sx_aug: &CorrMaps<T>,
    sy: &CorrMaps<T>,
    internal: usize,
    external: usize,
    seed: u64,
) -> Result<ContrastBatch<T>> {
    if sx.samples.queries() != sx_aug.samples.queries() || sx.samples.queries() != sy.samples.queries() {
        return Err(Error::ShapeMismatch("contrastive maps must share one sample pool".into()));
    }
    if sx.n_points() != sx_aug.n_points() || sx.n_points() != sy.n_points() {
        return Err(Error::ShapeMismatch("contrastive maps must share one patch geometry".into()));
    }
    let k = internal + external;
    if k == 0 {
        return Err(Error::Config("at least one negative is required".into()));
    }
    let samples = &sx.samples;
    let distinct = distinct_positions(samples);
    let avail_internal = distinct.len().saturating_sub(1);
    if internal > avail_internal {
        return Err(Error::NotEnoughNegatives { needed: internal, available: avail_internal });
    }
    if external > distinct.len() {
        return Err(Error::NotEnoughNegatives { needed: external, available: distinct.len() });
    }
    let (n, np) = (samples.n_samples(), sx.n_points());
    let mut rng = seed::rng(seed, "negatives", 0);
    let mut batch = ContrastBatch {
        n_points: np,
        k,
        queries: sx.values.clone(),
        positives: sx_aug.values.clone(),
        negatives: Vec::with_capacity(n * k * np),
        provenance: Vec::with_capacity(n * k),
    };
    for i in 0..n {
        let own = samples.query(i);
        let others: Vec<usize> = distinct.iter().copied().filter(|&j| samples.query(j) != own).collect();
        for pick in index::sample(&mut rng, others.len(), internal) {
            let j = others[pick];
            batch.provenance.push(NegativeRef { source: NegativeSource::Internal, index: j });
            batch.negatives.extend_from_slice(sx_aug.row(j));
        }
        for pick in index::sample(&mut rng, distinct.len(), external) {
            let j = distinct[pick];
            batch.provenance.push(NegativeRef { source: NegativeSource::External, index: j });
            batch.negatives.extend_from_slice(sy.row(j));
        }
    }
    Ok(batch)
}

/// Maps of one tap for `x`, `x_aug` and `y` under a shared pool.
pub fn tap_maps<T: Real>(
    fx: &impl TapSource<T>,
    fa: &impl TapSource<T>,
    fy: &impl TapSource<T>,
    tap: &str,
    samples: &SampleSet,
    normalize: bool,
) -> Result<[CorrMaps<T>; 3]> {
    let x = &fx.tap(tap)?.features;
    let a = &fa.tap(tap)?.features;
    let y = &fy.tap(tap)?.features;
    if x.shape() != a.shape() || x.shape() != y.shape() {
        return Err(Error::SizeMismatch(format!(
            "tap `{tap}` shapes differ: {:?}, {:?}, {:?}",
            x.shape(),
            a.shape(),
            y.shape()
        )));
    }
    Ok([
        corr_maps(x, samples, normalize, tap)?,
        corr_maps(a, samples, normalize, tap)?,
        corr_maps(y, samples, normalize, tap)?,
    ])
}

/// Image-level batch construction: features of all three images through
/// `net`, maps on `tap` with the shared `samples`, negatives split per
/// `cfg.negative_split()`.
pub fn build_batch<T: Real>(
    x: &Tensor<T>,
    x_aug: &Tensor<T>,
    y: &Tensor<T>,
    samples: &SampleSet,
    net: &StructureNet<'_, T>,
    tap: &str,
    cfg: &SesimConfig,
) -> Result<ContrastBatch<T>> {
    if x.shape() != x_aug.shape() {
        return Err(Error::SizeMismatch(format!("x {:?} vs x_aug {:?}", x.shape(), x_aug.shape())));
    }
    let fx = net.features(x)?;
    let fa = net.features(x_aug)?;
    let fy = net.features(y)?;
    let [sx, sa, sy] = tap_maps(&fx, &fa, &fy, tap, samples, cfg.normalize_features)?;
    let (internal, external) = cfg.negative_split();
    batch_from_maps(&sx, &sa, &sy, internal, external, seed::derive(cfg.seed, "batch", 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrads<T> {
    pub queries: Vec<T>,
    pub positives: Vec<T>,
    pub negatives: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce<T> {
    pub loss: f64,
    /// Fraction of queries whose positive strictly beats every negative.
    pub retrieval: f64,
    pub grads: InfoNceGrads<T>,
}

/// Mean over queries of `-log softmax(sims / tau)[positive]` with cosine
/// similarities; the softmax subtracts the row maximum before exponentiating.
pub fn infonce<T: Real>(batch: &ContrastBatch<T>, tau: f64) -> Result<InfoNce<T>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (n, k, np) = (batch.n_queries(), batch.k, batch.n_points);
    if n == 0 {
        return Err(Error::Config("empty contrastive batch".into()));
    }
    struct Row<T> {
        loss: f64,
        hit: bool,
        gq: Vec<T>,
        gp: Vec<T>,
        gn: Vec<T>,
    }
    let scale = 1.0 / n as f64;
    let norm = |r: &[T]| r.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
    let rows: Vec<Row<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let v: Vec<f64> = batch.query(i).iter().map(|x| x.to_f64()).collect();
            let nv = norm(batch.query(i));
            let cands: Vec<&[T]> =
                std::iter::once(batch.positive(i)).chain((0..k).map(|j| batch.negative(i, j))).collect();
            // (dot, |c|) per candidate; similarity is zero when either row is zero.
            let stats: Vec<(f64, f64)> = cands
                .iter()
                .map(|c| (c.iter().zip(&v).map(|(&x, &y)| x.to_f64() * y).sum(), norm(c)))
                .collect();
            let sim = |(d, nc): (f64, f64)| if nv > 0.0 && nc > 0.0 { (d / (nv * nc)).clamp(-1.0, 1.0) } else { 0.0 };
            let logits: Vec<f64> = stats.iter().map(|&s| sim(s) / tau).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let loss = m + z.ln() - logits[0];
            let hit = logits[1..].iter().all(|&l| logits[0] > l);
            let mut gq = vec![0.0f64; np];
            let mut gc: Vec<T> = Vec::with_capacity((k + 1) * np);
            for (j, (c, &(d, nc))) in cands.iter().zip(&stats).enumerate() {
                if nv == 0.0 || nc == 0.0 {
                    gc.extend(std::iter::repeat_n(T::zero(), np));
                    continue;
                }
                let p = (logits[j] - m).exp() / z;
                let dl = scale * (p - if j == 0 { 1.0 } else { 0.0 }) / tau;
                let inv = 1.0 / (nv * nc);
                let cos = d * inv;
                for ((g, &x), &y) in gq.iter_mut().zip(&v).zip(c.iter()) {
                    let y = y.to_f64();
                    *g += dl * (y * inv - cos * x / (nv * nv));
                    gc.push(T::from_f64(dl * (x * inv - cos * y / (nc * nc))));
                }
            }
            let gn = gc.split_off(np);
            Row {
                loss,
                hit,
                gq: gq.into_iter().map(T::from_f64).collect(),
                gp: gc,
                gn,
            }
        })
        .collect();
    let loss = rows.iter().map(|r| r.loss).sum::<f64>() * scale;
    let retrieval = rows.iter().filter(|r| r.hit).count() as f64 * scale;
    let mut grads = InfoNceGrads {
        queries: Vec::with_capacity(n * np),
        positives: Vec::with_capacity(n * np),
        negatives: Vec::with_capacity(n * k * np),
    };
    for r in rows {
        grads.queries.extend(r.gq);
        grads.positives.extend(r.gp);
        grads.negatives.extend(r.gn);
    }
    fault::flip(Kernel::InfoNce, &mut grads.queries);
    fault::flip(Kernel::InfoNce, &mut grads.positives);
    fault::flip(Kernel::InfoNce, &mut grads.negatives);
    Ok(InfoNce { loss, retrieval, grads })
}
