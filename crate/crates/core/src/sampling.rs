//! Query sampling on a tap's feature map.
//!
//! In the patch modes, query `(r, c)` owns the `p x p` window whose top-left
//! corner is `(r - a, c - a)` with `a = (p - 1) / 2`; patch points are listed
//! row-major. A query is interior when its whole window fits, i.e.
//! `a <= r <= h - p + a` (likewise for columns), giving `h - p + 1` valid rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::SesimConfig;
use crate::error::{Error, Result};
use crate::seed;

/// `(row, col)` in tap coordinates.
pub type Coord = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Uniform interior queries, drawn with replacement.
    PatchRandom,
    /// Evenly spaced interior lattice, see [`grid_dims`] and [`lattice_positions`].
    PatchGrid,
    /// Every position is a query and correlates against every position.
    Global,
    /// Random queries, each paired with `p * p` random positions anywhere.
    ScatteredRandom,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Layout {
    Patch { offset: usize, side: usize },
    Global,
    Explicit(Vec<Coord>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub mode: SamplingMode,
    pub patch: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub seed: u64,
    queries: Vec<Coord>,
    layout: Layout,
}

/// Lattice dimensions for `n` grid queries: `rows = ceil(sqrt(n))`,
/// `cols = ceil(n / rows)`. Grid mode keeps the first `n` lattice points in
/// row-major order.
pub fn grid_dims(n: usize) -> (usize, usize) {
    let rows = (n as f64).sqrt().ceil() as usize;
    let rows = rows.max(1);
    (rows, n.div_ceil(rows))
}

/// Centers of `count` equal cells partitioning the valid range `[lo, lo + len)`:
/// `lo + floor((2k + 1) * len / (2 * count))`.
pub fn lattice_positions(lo: usize, len: usize, count: usize) -> Vec<usize> {
    (0..count).map(|k| lo + (2 * k + 1) * len / (2 * count)).collect()
}

impl SampleSet {
    pub fn draw(
        map_h: usize,
        map_w: usize,
        mode: SamplingMode,
        n_samples: usize,
        patch: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_samples == 0 || patch == 0 {
            return Err(Error::Config("sample count and patch side must be >= 1".into()));
        }
        if map_h == 0 || map_w == 0 {
            return Err(Error::MapTooSmall { h: map_h, w: map_w, patch });
        }
        let offset = (patch - 1) / 2;
        let patch_layout = || -> Result<(usize, usize)> {
            if map_h < patch || map_w < patch {
                return Err(Error::MapTooSmall { h: map_h, w: map_w, patch });
            }
            Ok((map_h - patch + 1, map_w - patch + 1))
        };
        let mut rng = seed::rng(seed, "queries", 0);
        let (queries, layout) = match mode {
            SamplingMode::PatchRandom => {
                let (vh, vw) = patch_layout()?;
                let q = (0..n_samples)
                    .map(|_| (offset + rng.random_range(0..vh), offset + rng.random_range(0..vw)))
                    .collect();
                (q, Layout::Patch { offset, side: patch })
            }
            SamplingMode::PatchGrid => {
                let (vh, vw) = patch_layout()?;
                let (gr, gc) = grid_dims(n_samples);
                let rows = lattice_positions(offset, vh, gr);
                let cols = lattice_positions(offset, vw, gc);
                let q = rows
                    .iter()
                    .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
                    .take(n_samples)
                    .collect();
                (q, Layout::Patch { offset, side: patch })
            }
            SamplingMode::Global => {
                let q = (0..map_h).flat_map(|r| (0..map_w).map(move |c| (r, c))).collect();
                (q, Layout::Global)
            }
            SamplingMode::ScatteredRandom => {
                let q: Vec<Coord> = (0..n_samples)
                    .map(|_| (rng.random_range(0..map_h), rng.random_range(0..map_w)))
                    .collect();
                let pts = (0..n_samples * patch * patch)
                    .map(|_| (rng.random_range(0..map_h), rng.random_range(0..map_w)))
                    .collect();
                (q, Layout::Explicit(pts))
            }
        };
        Ok(Self { mode, patch, map_h, map_w, seed, queries, layout })
    }

    /// Queries for a `(h, w)` tap under `cfg`'s mode, count, patch and seed.
    pub fn for_config(map_h: usize, map_w: usize, cfg: &SesimConfig) -> Result<Self> {
        Self::draw(map_h, map_w, cfg.sampling, cfg.n_samples, cfg.patch, cfg.seed)
    }

    /// Sample set restricted to explicit query coordinates (patch layout).
    pub fn at_queries(map_h: usize, map_w: usize, patch: usize, queries: Vec<Coord>) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch side must be >= 1".into()));
        }
        let set = Self {
            mode: SamplingMode::PatchGrid,
            patch,
            map_h,
            map_w,
            seed: 0,
            queries,
            layout: Layout::Patch { offset: (patch - 1) / 2, side: patch },
        };
        set.validate(map_h, map_w)?;
        Ok(set)
    }

    pub fn n_samples(&self) -> usize {
        self.queries.len()
    }

    pub fn n_points(&self) -> usize {
        match &self.layout {
            Layout::Patch { side, .. } => side * side,
            Layout::Global => self.map_h * self.map_w,
            Layout::Explicit(_) => self.patch * self.patch,
        }
    }

    pub fn queries(&self) -> &[Coord] {
        &self.queries
    }

    pub fn query(&self, i: usize) -> Coord {
        self.queries[i]
    }

    /// Patch point `j` of query `i`.
    #[inline]
    pub fn point(&self, i: usize, j: usize) -> Coord {
        match &self.layout {
            Layout::Patch { offset, side } => {
                let (r, c) = self.queries[i];
                (r - offset + j / side, c - offset + j % side)
            }
            Layout::Global => (j / self.map_w, j % self.map_w),
            Layout::Explicit(pts) => pts[i * self.patch * self.patch + j],
        }
    }

    /// Every query and patch point lies inside an `h x w` map.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let check = |(row, col): Coord| {
            if row < h && col < w {
                Ok(())
            } else {
                Err(Error::OutOfRange { row, col, h, w })
            }
        };
        for (i, &q) in self.queries.iter().enumerate() {
            check(q)?;
            if let Layout::Patch { offset, side } = self.layout {
                if q.0 < offset || q.1 < offset {
                    return Err(Error::OutOfRange { row: q.0, col: q.1, h, w });
                }
                check(self.point(i, side * side - 1))?;
            }
        }
        if let Layout::Explicit(pts) = &self.layout {
            pts.iter().try_for_each(|&p| check(p))?;
        }
        Ok(())
    }

    /// Same coordinates and points, only the queries at `indices` kept.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let queries = indices.iter().map(|&i| self.queries[i]).collect();
        let layout = match &self.layout {
            Layout::Explicit(pts) => {
                let np = self.patch * self.patch;
                Layout::Explicit(indices.iter().flat_map(|&i| pts[i * np..(i + 1) * np].iter().copied()).collect())
            }
            other => other.clone(),
        };
        Self { queries, layout, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        for mode in [SamplingMode::PatchRandom, SamplingMode::ScatteredRandom] {
            let a = SampleSet::draw(12, 10, mode, 16, 4, 5).unwrap();
            let b = SampleSet::draw(12, 10, mode, 16, 4, 5).unwrap();
            let c = SampleSet::draw(12, 10, mode, 16, 4, 6).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn grid_lattice_on_8x8() {
        // valid rows 1..=5 (len 5), two cells: 1 + floor(5/4) = 2, 1 + floor(15/4) = 4
        let s = SampleSet::draw(8, 8, SamplingMode::PatchGrid, 4, 4, 0).unwrap();
        assert_eq!(s.queries(), &[(2, 2), (2, 4), (4, 2), (4, 4)]);
        assert_eq!(grid_dims(4), (2, 2));
        assert_eq!(grid_dims(5), (3, 2));
        assert_eq!(grid_dims(64), (8, 8));
    }

    #[test]
    fn patch_points_row_major() {
        let s = SampleSet::at_queries(8, 8, 4, vec![(3, 2)]).unwrap();
        assert_eq!(s.n_points(), 16);
        assert_eq!(s.point(0, 0), (2, 1));
        assert_eq!(s.point(0, 1), (2, 2));
        assert_eq!(s.point(0, 4), (3, 1));
        assert_eq!(s.point(0, 15), (5, 4));
        assert!(SampleSet::at_queries(8, 8, 4, vec![(0, 2)]).is_err());
        assert!(SampleSet::at_queries(8, 8, 4, vec![(6, 2)]).is_err());
    }

    #[test]
    fn global_covers_everything() {
        let s = SampleSet::draw(3, 4, SamplingMode::Global, 1, 1, 0).unwrap();
        assert_eq!(s.n_samples(), 12);
        assert_eq!(s.n_points(), 12);
        assert_eq!(s.point(5, 7), (1, 3));
    }

    #[test]
    fn too_small_map_rejected() {
        assert!(matches!(
            SampleSet::draw(3, 8, SamplingMode::PatchRandom, 4, 4, 0),
            Err(Error::MapTooSmall { .. })
        ));
        assert!(SampleSet::draw(3, 8, SamplingMode::ScatteredRandom, 4, 4, 0).is_ok());
    }
}
