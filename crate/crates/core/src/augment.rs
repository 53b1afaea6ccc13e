//! Structure-preserving augmentation. Every transform is pixel-wise: output
//! pixel `(r, c)` depends only on input pixel `(r, c)` and on parameters
//! drawn once per image, so spatial structure is untouched.
//!
//! Pipeline per pixel and channel: `v = clamp(gain_c * x + bias_c)`, optional
//! grayscale (Rec. 601 luma copied to all channels), `v = v^gamma`,
//! `v = clamp(v + noise)`. Grayscale draws share one noise plane across channels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    /// Per-channel gain range, within `[0.6, 1.4]`.
    pub gain: [f64; 2],
    /// Per-channel bias range, within `[-0.2, 0.2]`.
    pub bias: [f64; 2],
    /// Probability of converting to grayscale.
    pub grayscale_prob: f64,
    /// Gamma range, within `[0.7, 1.4]`.
    pub gamma: [f64; 2],
    /// Upper bound of the noise standard deviation, at most 0.05.
    pub noise_sigma_max: f64,
    pub seed: u64,
}

pub const GAIN_LIMITS: [f64; 2] = [0.6, 1.4];
pub const BIAS_LIMITS: [f64; 2] = [-0.2, 0.2];
pub const GAMMA_LIMITS: [f64; 2] = [0.7, 1.4];
pub const NOISE_LIMIT: f64 = 0.05;

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            gain: GAIN_LIMITS,
            bias: BIAS_LIMITS,
            grayscale_prob: 0.2,
            gamma: GAMMA_LIMITS,
            noise_sigma_max: NOISE_LIMIT,
            seed: 0,
        }
    }
}

fn within(r: [f64; 2], lim: [f64; 2]) -> bool {
    lim[0] <= r[0] && r[0] <= r[1] && r[1] <= lim[1]
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            gain: [1.0, 1.0],
            bias: [0.0, 0.0],
            grayscale_prob: 0.0,
            gamma: [1.0, 1.0],
            noise_sigma_max: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !within(self.gain, GAIN_LIMITS) {
            return Err(Error::Config(format!("gain range {:?} outside {GAIN_LIMITS:?}", self.gain)));
        }
        if !within(self.bias, BIAS_LIMITS) {
            return Err(Error::Config(format!("bias range {:?} outside {BIAS_LIMITS:?}", self.bias)));
        }
        if !within(self.gamma, GAMMA_LIMITS) {
            return Err(Error::Config(format!("gamma range {:?} outside {GAMMA_LIMITS:?}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.grayscale_prob) {
            return Err(Error::Config("grayscale_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=NOISE_LIMIT).contains(&self.noise_sigma_max) {
            return Err(Error::Config(format!("noise_sigma_max must lie in [0, {NOISE_LIMIT}]")));
        }
        Ok(())
    }
}

/// Parameters of one augmentation draw, including its per-pixel noise field.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub grayscale: bool,
    pub gamma: f64,
    pub noise_sigma: f64,
    /// `(1, 3, h, w)`, present when `noise_sigma > 0`.
    pub noise: Option<Tensor<f64>>,
}

impl AugmentParams {
    /// Draw `draw` of the stream seeded by `spec.seed`, for an `h x w` image.
    pub fn sample(spec: &AugmentSpec, h: usize, w: usize, draw: u64) -> Self {
        let mut rng = seed::rng(spec.seed, "augment", draw);
        let mut pick = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
        let gain = [pick(spec.gain), pick(spec.gain), pick(spec.gain)];
        let bias = [pick(spec.bias), pick(spec.bias), pick(spec.bias)];
        let gamma = pick(spec.gamma);
        let noise_sigma = pick([0.0, spec.noise_sigma_max]);
        let grayscale = spec.grayscale_prob > 0.0 && rng.random_bool(spec.grayscale_prob);
        let noise = (noise_sigma > 0.0).then(|| {
            let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
            let data = (0..3 * h * w).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_vec([1, 3, h, w], data).expect("sized")
        });
        Self { gain, bias, grayscale, gamma, noise_sigma, noise }
    }

    /// Parameters for a cropped window: scalars unchanged, noise cropped.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            noise: self.noise.as_ref().map(|n| n.crop(r0, c0, h, w)).transpose()?,
            ..self.clone()
        })
    }

    pub fn apply<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = image.shape();
        if c != 3 {
            return Err(Error::ChannelMismatch { expected: 3, got: c });
        }
        if let Some(noise) = &self.noise {
            if noise.height() != h || noise.width() != w {
                return Err(Error::SizeMismatch(format!(
                    "noise field {}x{} for a {h}x{w} image",
                    noise.height(),
                    noise.width()
                )));
            }
        }
        let mut out = Tensor::zeros(image.shape());
        for b in 0..n {
            for r in 0..h {
                for col in 0..w {
                    let mut v = [0.0; 3];
                    for (ch, vc) in v.iter_mut().enumerate() {
                        *vc = (self.gain[ch] * image.at(b, ch, r, col).to_f64() + self.bias[ch]).clamp(0.0, 1.0);
                    }
                    if self.grayscale {
                        let y = LUMA[0] * v[0] + LUMA[1] * v[1] + LUMA[2] * v[2];
                        v = [y; 3];
                    }
                    for (ch, vc) in v.iter_mut().enumerate() {
                        let mut x = vc.powf(self.gamma);
                        if let Some(noise) = &self.noise {
                            x += noise.at(0, if self.grayscale { 0 } else { ch }, r, col);
                        }
                        *out.at_mut(b, ch, r, col) = T::from_f64(x.clamp(0.0, 1.0));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Augment with draw 0 of `spec`'s seed stream.
pub fn augment<T: Real>(image: &Tensor<T>, spec: &AugmentSpec) -> Result<Tensor<T>> {
    augment_draw(image, spec, 0)
}

pub fn augment_draw<T: Real>(image: &Tensor<T>, spec: &AugmentSpec, draw: u64) -> Result<Tensor<T>> {
    AugmentParams::sample(spec, image.height(), image.width(), draw).apply(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform([1, 3, h, w], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn identity_spec_is_identity() {
        let x = image(0, 7, 5);
        assert_eq!(augment(&x, &AugmentSpec::identity()).unwrap(), x);
    }

    #[test]
    fn grayscale_channels_equal() {
        let spec = AugmentSpec { grayscale_prob: 1.0, ..AugmentSpec::default() };
        let y = augment(&image(1, 6, 6), &spec).unwrap();
        assert!(AugmentParams::sample(&spec, 6, 6, 0).grayscale);
        for r in 0..6 {
            for c in 0..6 {
                let px = y.pixel(0, r, c);
                assert_eq!(px[0], px[1]);
                assert_eq!(px[1], px[2]);
            }
        }
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn default_spec_validates_and_bad_ranges_fail() {
        AugmentSpec::default().validate().unwrap();
        AugmentSpec::identity().validate().unwrap();
        let bad = AugmentSpec { gain: [0.5, 1.0], ..AugmentSpec::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentSpec { noise_sigma_max: 0.1, ..AugmentSpec::default() };
        assert!(bad.validate().is_err());
    }
}
