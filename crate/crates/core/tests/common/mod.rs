#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sesim::extractor::Tap;
use sesim::synth::Mask;
use sesim::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn uniform(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 0.0, 1.0, &mut rng(seed))
}

/// A single named tap with stride 1.
pub fn tap(name: &str, features: Tensor<f64>) -> Vec<Tap<f64>> {
    vec![Tap { name: name.into(), features, stride: 1 }]
}

/// Norm-wise relative difference `|a - b| / max(|a|, |b|)`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = n(a).max(n(b));
    if s == 0.0 { 0.0 } else { d / s }
}

/// `inside` where the mask is set, `outside` elsewhere.
pub fn composite(mask: &Mask, inside: &Tensor<f32>, outside: &Tensor<f32>) -> Tensor<f32> {
    let mut t = inside.clone();
    for ch in 0..3 {
        for y in 0..mask.size {
            for x in 0..mask.size {
                if !mask.at(y, x) {
                    *t.at_mut(0, ch, y, x) = outside.at(0, ch, y, x);
                }
            }
        }
    }
    t
}
