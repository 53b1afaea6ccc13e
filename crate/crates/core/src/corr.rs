//! Spatially-correlative maps: `S[i, j] = <f(q_i), f(p_ij)>` for query `q_i`
//! and its patch points `p_ij`, optionally on L2-normalized feature vectors.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fault::{self, Kernel};
use crate::sampling::SampleSet;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CorrMaps<T = f32> {
    /// Row-major `n_samples x n_points`.
    pub values: Vec<T>,
    pub samples: SampleSet,
    pub tap: String,
    pub normalized: bool,
}

impl<T: Real> CorrMaps<T> {
    pub fn n_samples(&self) -> usize {
        self.samples.n_samples()
    }

    pub fn n_points(&self) -> usize {
        self.samples.n_points()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let np = self.n_points();
        &self.values[i * np..(i + 1) * np]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks(self.n_points())
    }
}

/// Features re-laid out position-major: `out[(r * w + c) * C + ch]`.
fn position_major<T: Real>(features: &Tensor<T>) -> Vec<T> {
    let [_, c, h, w] = features.shape();
    let src = features.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for pos in 0..h * w {
            out[pos * c + ch] = src[ch * h * w + pos];
        }
    }
    out
}

/// Normalize each length-`c` vector in place, returning the original norms.
/// Zero vectors stay zero.
fn normalize_rows<T: Real>(vecs: &mut [T], c: usize) -> Vec<T> {
    vecs.chunks_mut(c)
        .map(|v| {
            let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n > T::zero() {
                v.iter_mut().for_each(|x| *x = *x / n);
            }
            n
        })
        .collect()
}

fn check_features<T: Real>(features: &Tensor<T>, samples: &SampleSet) -> Result<()> {
    let [n, _, h, w] = features.shape();
    if n != 1 {
        return Err(Error::ShapeMismatch(format!("correlation maps need batch 1, got {n}")));
    }
    samples.validate(h, w)
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Build the maps for one `(1, C, H, W)` feature tensor.
pub fn corr_maps<T: Real>(features: &Tensor<T>, samples: &SampleSet, normalize: bool, tap: &str) -> Result<CorrMaps<T>> {
    check_features(features, samples)?;
    let [_, c, _, w] = features.shape();
    let mut vecs = position_major(features);
    if normalize {
        normalize_rows(&mut vecs, c);
    }
    let np = samples.n_points();
    let mut values = vec![T::zero(); samples.n_samples() * np];
    let at = |(r, col): (usize, usize)| &vecs[(r * w + col) * c..(r * w + col + 1) * c];
    values.par_chunks_mut(np).enumerate().for_each(|(i, row)| {
        let q = at(samples.query(i));
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot(q, at(samples.point(i, j)));
        }
    });
    Ok(CorrMaps { values, samples: samples.clone(), tap: tap.to_string(), normalized: normalize })
}

/// Gradient of a scalar with respect to `features`, given its gradient on the maps.
/// Positions shared by several patches accumulate every contribution.
pub fn corr_maps_backward<T: Real>(
    features: &Tensor<T>,
    samples: &SampleSet,
    normalize: bool,
    grad_maps: &[T],
) -> Result<Tensor<T>> {
    check_features(features, samples)?;
    let np = samples.n_points();
    if grad_maps.len() != samples.n_samples() * np {
        return Err(Error::ShapeMismatch(format!(
            "map gradient has {} values, maps have {}x{np}",
            grad_maps.len(),
            samples.n_samples()
        )));
    }
    let [_, c, h, w] = features.shape();
    let mut vecs = position_major(features);
    let norms = normalize.then(|| normalize_rows(&mut vecs, c));
    let mut gv = vec![T::zero(); vecs.len()];
    let idx = |(r, col): (usize, usize)| (r * w + col) * c;
    for i in 0..samples.n_samples() {
        let qi = idx(samples.query(i));
        for j in 0..np {
            let g = grad_maps[i * np + j];
            if g == T::zero() {
                continue;
            }
            let pj = idx(samples.point(i, j));
            for ch in 0..c {
                let (vq, vp) = (vecs[qi + ch], vecs[pj + ch]);
                gv[qi + ch] += g * vp;
                gv[pj + ch] += g * vq;
            }
        }
    }
    if let Some(norms) = norms {
        // d(v/|v|) = (I - u u^T) / |v|
        for (pos, &n) in norms.iter().enumerate() {
            let (u, g) = (&vecs[pos * c..(pos + 1) * c], &mut gv[pos * c..(pos + 1) * c]);
            if n > T::zero() {
                let proj = dot(u, g);
                for (gk, &uk) in g.iter_mut().zip(u) {
                    *gk = (*gk - uk * proj) / n;
                }
            } else {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }
    let mut out = Tensor::zeros([1, c, h, w]);
    let dst = out.data_mut();
    for pos in 0..h * w {
        for ch in 0..c {
            dst[ch * h * w + pos] = gv[pos * c + ch];
        }
    }
    fault::flip(Kernel::CorrMaps, dst);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::SamplingMode;

    #[test]
    fn one_hot_everywhere_gives_ones() {
        let mut f = Tensor::<f64>::zeros([1, 3, 6, 6]);
        for r in 0..6 {
            for c in 0..6 {
                *f.at_mut(0, 1, r, c) = 1.0;
            }
        }
        let s = SampleSet::draw(6, 6, SamplingMode::PatchRandom, 5, 3, 1).unwrap();
        let m = corr_maps(&f, &s, false, "t").unwrap();
        assert!(m.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn orthogonal_query_gives_zero_row() {
        let mut f = Tensor::<f64>::zeros([1, 2, 3, 3]);
        for r in 0..3 {
            for c in 0..3 {
                *f.at_mut(0, 0, r, c) = 2.0;
            }
        }
        *f.at_mut(0, 0, 1, 1) = 0.0;
        *f.at_mut(0, 1, 1, 1) = 5.0;
        let s = SampleSet::at_queries(3, 3, 3, vec![(1, 1)]).unwrap();
        let m = corr_maps(&f, &s, false, "t").unwrap();
        let expect: Vec<f64> = (0..9).map(|j| if j == 4 { 25.0 } else { 0.0 }).collect();
        assert_eq!(m.row(0), &expect[..]);
    }

    #[test]
    fn hand_computed_2x2() {
        // channel 0: [[1, 2], [3, 4]], channel 1: [[0, 1], [-1, 2]]
        let f = Tensor::<f64>::from_vec([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, -1.0, 2.0]).unwrap();
        // p = 2, offset 0: query (0, 0) covers the whole map
        let s = SampleSet::at_queries(2, 2, 2, vec![(0, 0)]).unwrap();
        let m = corr_maps(&f, &s, false, "t").unwrap();
        // q = (1, 0); points (1,0), (2,1), (3,-1), (4,2)
        assert_eq!(m.row(0), &[1.0, 2.0, 3.0, 4.0]);
        let s = SampleSet::draw(2, 2, SamplingMode::Global, 1, 1, 0).unwrap();
        let m = corr_maps(&f, &s, false, "t").unwrap();
        // q = (4, 2) at (1, 1)
        assert_eq!(m.row(3), &[4.0, 10.0, 10.0, 20.0]);
    }

    #[test]
    fn backward_single_entry_product_rule() {
        let f = Tensor::<f64>::from_vec([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, -1.0, 2.0]).unwrap();
        let s = SampleSet::at_queries(2, 2, 2, vec![(0, 0)]).unwrap();
        let mut g = vec![0.0; 4];
        g[3] = 1.0; // point (1, 1)
        let gf = corr_maps_backward(&f, &s, false, &g).unwrap();
        // query (0,0) += f(1,1) = (4, 2); point (1,1) += f(0,0) = (1, 0)
        assert_eq!(gf.pixel(0, 0, 0), vec![4.0, 2.0]);
        assert_eq!(gf.pixel(0, 1, 1), vec![1.0, 0.0]);
        assert_eq!(gf.pixel(0, 0, 1), vec![0.0, 0.0]);
        let zero = corr_maps_backward(&f, &s, false, &[0.0; 4]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(corr_maps_backward(&f, &s, false, &[0.0; 3]).is_err());
    }

    #[test]
    fn out_of_range_samples_rejected() {
        let f = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let s = SampleSet::at_queries(8, 8, 2, vec![(1, 1), (6, 2)]).unwrap();
        assert!(matches!(corr_maps(&f, &s, false, "t"), Err(Error::OutOfRange { row: 6, .. })));
    }
}
