//! Procedural paired-structure corpus.
//!
//! Each item is a binary shape mask (union of seeded ellipses and polygons)
//! rendered twice: once in the stripe domain and once in the smooth-noise
//! domain. Inside and outside of the mask use different textures and
//! brightness within each domain, and the brightness order is inverted
//! between domains, so aligned pairs share structure while their raw pixels
//! disagree almost everywhere.

use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub count: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(cfg: &SynthConfig, seed: u64) -> Self {
        Self { size: cfg.size, count: cfg.count, min_shapes: cfg.min_shapes, max_shapes: cfg.max_shapes, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("synthetic images need size >= 8, got {}", self.size)));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config("shape counts must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Stripes,
    Noise,
}

/// Row-major `size x size` inside/outside labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub size: usize,
    pub inside: Vec<bool>,
}

impl Mask {
    pub fn at(&self, r: usize, c: usize) -> bool {
        self.inside[r * self.size + c]
    }

    pub fn coverage(&self) -> f64 {
        self.inside.iter().filter(|&&b| b).count() as f64 / self.inside.len() as f64
    }

    /// White shapes on black, `(1, 3, size, size)`.
    pub fn to_image(&self) -> Tensor<f32> {
        let n = self.size;
        let mut t = Tensor::zeros([1, 3, n, n]);
        for ch in 0..3 {
            for (k, &b) in self.inside.iter().enumerate() {
                t.data_mut()[ch * n * n + k] = if b { 1.0 } else { 0.0 };
            }
        }
        t
    }
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Polygon { verts: Vec<(f64, f64)> },
}

impl Shape {
    fn random<R: Rng>(size: f64, rng: &mut R) -> Self {
        let cy = rng.random_range(0.2..0.8) * size;
        let cx = rng.random_range(0.2..0.8) * size;
        if rng.random_bool(0.5) {
            Shape::Ellipse {
                cy,
                cx,
                ry: rng.random_range(0.12..0.3) * size,
                rx: rng.random_range(0.12..0.3) * size,
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        } else {
            let n = rng.random_range(3..=7);
            let base = rng.random_range(0.0..std::f64::consts::TAU);
            let verts = (0..n)
                .map(|k| {
                    let a = base + std::f64::consts::TAU * k as f64 / n as f64;
                    let r = rng.random_range(0.12..0.32) * size;
                    (cy + r * a.sin(), cx + r * a.cos())
                })
                .collect();
            Shape::Polygon { verts }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (dy, dx) = (y - cy, x - cx);
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { verts } => {
                // even-odd ray casting along +x
                let mut inside = false;
                let n = verts.len();
                for i in 0..n {
                    let (y1, x1) = verts[i];
                    let (y2, x2) = verts[(i + 1) % n];
                    if (y1 > y) != (y2 > y) {
                        let xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1);
                        if x < xi {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }
}

/// Union of `min_shapes..=max_shapes` seeded shapes, sampled at pixel centers.
pub fn random_mask(spec: &SynthSpec, index: usize) -> Mask {
    let mut rng = seed::rng(spec.seed, "synth-mask", index as u64);
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(spec.size as f64, &mut rng)).collect();
    let n = spec.size;
    let inside = (0..n * n)
        .map(|k| {
            let (y, x) = ((k / n) as f64 + 0.5, (k % n) as f64 + 0.5);
            shapes.iter().any(|s| s.contains(y, x))
        })
        .collect();
    Mask { size: n, inside }
}

/// Two-color palette; `t` in [0, 1] interpolates. Stripes are bright inside
/// and dark outside; noise is the reverse.
type Palette = ([f64; 3], [f64; 3]);

const STRIPE_IN: Palette = ([0.35, 0.02, 0.02], [1.0, 0.12, 0.12]);
const STRIPE_OUT: Palette = ([0.0, 0.0, 0.05], [0.12, 0.12, 0.5]);
const NOISE_IN: Palette = ([0.0, 0.05, 0.0], [0.12, 0.5, 0.12]);
const NOISE_OUT: Palette = ([0.35, 0.02, 0.35], [1.0, 0.12, 1.0]);

fn lerp(p: &Palette, t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [0, 1, 2].map(|c| p.0[c] + (p.1[c] - p.0[c]) * t)
}

/// Lattice value noise with bilinear interpolation, summed over octaves and
/// rescaled to [0, 1].
fn value_noise<R: Rng>(n: usize, cells: &[usize], rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let mut amp = 1.0;
    for &cell in cells {
        let g = n / cell + 2;
        let lattice: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in 0..n {
            for c in 0..n {
                let (fy, fx) = (r as f64 / cell as f64, c as f64 / cell as f64);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let l = |y: usize, x: usize| lattice[y * g + x];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                out[r * n + c] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        amp *= 0.5;
    }
    let (lo, hi) = out.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - lo) / span);
    out
}

/// Texture `mask` in `domain`, using stream `(seed, tag, index)` for its
/// per-image randomness.
pub fn render(mask: &Mask, domain: Domain, seed: u64, index: usize) -> Tensor<f32> {
    let n = mask.size;
    let tag = match domain {
        Domain::Stripes => "synth-stripes",
        Domain::Noise => "synth-noise",
    };
    let mut rng = seed::rng(seed, tag, index as u64);
    let mut img = Tensor::zeros([1, 3, n, n]);
    let put = |img: &mut Tensor<f32>, r: usize, c: usize, rgb: [f64; 3]| {
        for (ch, v) in rgb.into_iter().enumerate() {
            *img.at_mut(0, ch, r, c) = v as f32;
        }
    };
    match domain {
        Domain::Stripes => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let freq_in: f64 = rng.random_range(0.14..0.2);
            let freq_out: f64 = rng.random_range(0.14..0.2);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let warp = value_noise(n, &[16.max(n / 4), 8], &mut rng);
            let contrast = value_noise(n, &[16.min(n / 2).max(2), 8.min(n / 4).max(2)], &mut rng);
            for r in 0..n {
                for c in 0..n {
                    let inside = mask.at(r, c);
                    let (th, f, pal) = if inside {
                        (theta, freq_in, &STRIPE_IN)
                    } else {
                        (theta + std::f64::consts::FRAC_PI_2, freq_out, &STRIPE_OUT)
                    };
                    let (y, x) = (r as f64, c as f64);
                    let k = r * n + c;
                    let arg = std::f64::consts::TAU * f * (x * th.cos() + y * th.sin()) + phase + 4.0 * warp[k];
                    let amp = 0.2 + 0.8 * contrast[k];
                    put(&mut img, r, c, lerp(pal, 0.5 + 0.5 * amp * arg.sin()));
                }
            }
        }
        Domain::Noise => {
            let cells = [16.min(n / 2).max(2), 8.min(n / 4).max(2), 4.min(n / 8).max(2)];
            let field_in = value_noise(n, &cells, &mut rng);
            let field_out = value_noise(n, &cells, &mut rng);
            for r in 0..n {
                for c in 0..n {
                    let k = r * n + c;
                    let rgb = if mask.at(r, c) { lerp(&NOISE_IN, field_in[k]) } else { lerp(&NOISE_OUT, field_out[k]) };
                    put(&mut img, r, c, rgb);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub masks: Vec<Mask>,
    pub stripes: Vec<Tensor<f32>>,
    pub noise: Vec<Tensor<f32>>,
    /// `shuffled[i]` is the noise image paired with stripe image `i` in the
    /// shuffled set; never equal to `i`.
    pub shuffled: Vec<usize>,
}

impl SynthCorpus {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// `(stripe index, noise index)` pairs sharing a mask.
    pub fn aligned_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.len()).map(|i| (i, i)).collect()
    }

    /// `(stripe index, noise index)` pairs with different masks.
    pub fn shuffled_pairs(&self) -> Vec<(usize, usize)> {
        self.shuffled.iter().enumerate().map(|(i, &j)| (i, j)).collect()
    }

    /// Both domains interleaved: stripe 0, noise 0, stripe 1, ...
    pub fn images(&self) -> Vec<&Tensor<f32>> {
        self.stripes.iter().zip(&self.noise).flat_map(|(a, b)| [a, b]).collect()
    }
}

/// A seeded derangement of `0..n` (identity for `n < 2`).
fn derangement(n: usize, seed: u64) -> Vec<usize> {
    if n < 2 {
        return (0..n).collect();
    }
    // Sattolo's algorithm yields a single n-cycle, hence no fixed points.
    let mut rng = seed::rng(seed, "synth-shuffle", 0);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let items: Vec<(Mask, Tensor<f32>, Tensor<f32>)> = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mask = random_mask(spec, i);
            let a = render(&mask, Domain::Stripes, spec.seed, i);
            let b = render(&mask, Domain::Noise, spec.seed, i);
            (mask, a, b)
        })
        .collect();
    let mut corpus = SynthCorpus {
        spec: spec.clone(),
        masks: Vec::with_capacity(spec.count),
        stripes: Vec::with_capacity(spec.count),
        noise: Vec::with_capacity(spec.count),
        shuffled: derangement(spec.count, spec.seed),
    };
    for (m, a, b) in items {
        corpus.masks.push(m);
        corpus.stripes.push(a);
        corpus.noise.push(b);
    }
    Ok(corpus)
}

/// Fraction of the (mean-removed) luma spectrum's energy above `cutoff`
/// cycles per pixel in radial frequency.
pub fn high_freq_ratio<T: Real>(image: &Tensor<T>, cutoff: f64) -> f64 {
    let [_, c, h, w] = image.shape();
    let luma: Vec<f64> = (0..h * w)
        .map(|k| {
            let (r, col) = (k / w, k % w);
            if c == 3 {
                (0..3).map(|ch| crate::augment::LUMA[ch] * image.at(0, ch, r, col).to_f64()).sum()
            } else {
                image.at(0, 0, r, col).to_f64()
            }
        })
        .collect();
    let mean = luma.iter().sum::<f64>() / luma.len() as f64;
    let mut buf: Vec<Complex<f64>> = luma.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for chunk in buf.chunks_mut(w) {
        row.process(chunk);
    }
    let col = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    let freq = |k: usize, n: usize| {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        k / n as f64
    };
    let (mut high, mut total) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let e = buf[y * w + x].norm_sqr();
            total += e;
            if freq(y, h).hypot(freq(x, w)) > cutoff {
                high += e;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        high / total
    }
}

/// Radial cutoff used for the domain statistic.
pub const ENERGY_CUTOFF: f64 = 0.1;

/// Mean high-frequency energy ratio of the stripe and noise domains.
pub fn domain_energy_ratios(corpus: &SynthCorpus) -> (f64, f64) {
    let mean = |imgs: &[Tensor<f32>]| {
        imgs.par_iter().map(|t| high_freq_ratio(t, ENERGY_CUTOFF)).sum::<f64>() / imgs.len().max(1) as f64
    };
    (mean(&corpus.stripes), mean(&corpus.noise))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec { size: 32, count: 6, min_shapes: 1, max_shapes: 3, seed }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(&spec(3)).unwrap();
        let b = synth_dataset(&spec(3)).unwrap();
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.stripes, b.stripes);
        assert_eq!(a.noise, b.noise);
        assert_eq!(a.shuffled, b.shuffled);
        let c = synth_dataset(&spec(4)).unwrap();
        assert_ne!(a.stripes, c.stripes);
    }

    #[test]
    fn shuffle_has_no_fixed_points() {
        for n in 2..20 {
            let p = derangement(n, n as u64);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = p.clone();
            s.sort();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn pixels_in_unit_range() {
        let c = synth_dataset(&spec(1)).unwrap();
        for img in c.images() {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn polygon_contains_center() {
        let sq = Shape::Polygon { verts: vec![(0.0, 0.0), (0.0, 2.0), (2.0, 2.0), (2.0, 0.0)] };
        assert!(sq.contains(1.0, 1.0));
        assert!(!sq.contains(3.0, 1.0));
    }

    #[test]
    fn bad_spec_rejected() {
        assert!(synth_dataset(&SynthSpec { min_shapes: 0, ..spec(0) }).is_err());
        assert!(synth_dataset(&SynthSpec { size: 4, ..spec(0) }).is_err());
    }
}
