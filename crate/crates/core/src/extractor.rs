//! VGG-style convolutional trunk with named tap points.
//!
//! The trunk is frozen: it is either seeded-random (He initialization) or
//! loaded from a weight container. `extract` caches every intermediate
//! activation so `backward` can carry tap-space gradients back to pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    conv2d_backward_input, conv2d_forward, maxpool2_backward, maxpool2_forward, relu_backward,
    relu_forward, ConvSpec, Padding, PoolIndices,
};
use crate::seed;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        padding: Padding,
    },
    Relu,
    Pool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub name: String,
    /// Index of the relu layer whose output is exposed.
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_channels: usize,
    pub layers: Vec<Layer>,
    pub taps: Vec<TapSpec>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::desk(Padding::Zero)
    }
}

impl ArchSpec {
    /// Desk-scale trunk: three conv/relu/pool stages with `tapA` (64 channels,
    /// stride 4) and `tapB` (128 channels, stride 8). Each tap is a relu placed
    /// after the pool of its stage; on pooled non-negative input it is the
    /// identity, so the taps expose the pooled activations.
    pub fn desk(padding: Padding) -> Self {
        let conv = |in_ch, out_ch| Layer::Conv { in_ch, out_ch, kernel: 3, stride: 1, padding };
        Self {
            input_channels: 3,
            layers: vec![
                conv(3, 32),
                Layer::Relu,
                Layer::Pool,
                conv(32, 64),
                Layer::Relu,
                Layer::Pool,
                Layer::Relu, // 6: tapA
                conv(64, 128),
                Layer::Relu,
                Layer::Pool,
                Layer::Relu, // 10: tapB
            ],
            taps: vec![
                TapSpec { name: "tapA".into(), layer: 6 },
                TapSpec { name: "tapB".into(), layer: 10 },
            ],
        }
    }

    /// Single-conv trunk: `conv(3 -> channels), relu, pool`, tap `tap` at stride 2.
    pub fn tiny(channels: usize, padding: Padding) -> Self {
        Self {
            input_channels: 3,
            layers: vec![
                Layer::Conv { in_ch: 3, out_ch: channels, kernel: 3, stride: 1, padding },
                Layer::Relu,
                Layer::Pool,
                Layer::Relu,
            ],
            taps: vec![TapSpec { name: "tap".into(), layer: 3 }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ch = self.input_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Conv { in_ch, out_ch, kernel, stride, .. } = *layer {
                if in_ch != ch {
                    return Err(Error::Config(format!(
                        "layer {i}: conv expects {in_ch} channels but receives {ch}"
                    )));
                }
                if kernel % 2 == 0 || stride == 0 {
                    return Err(Error::Config(format!("layer {i}: kernel must be odd, stride >= 1")));
                }
                ch = out_ch;
            }
        }
        for (i, tap) in self.taps.iter().enumerate() {
            if self.taps[..i].iter().any(|t| t.name == tap.name) {
                return Err(Error::Config(format!("duplicate tap name `{}`", tap.name)));
            }
            if !matches!(self.layers.get(tap.layer), Some(Layer::Relu)) {
                return Err(Error::Config(format!(
                    "tap `{}` must point at a relu layer (index {})",
                    tap.name, tap.layer
                )));
            }
        }
        Ok(())
    }

    pub fn tap(&self, name: &str) -> Result<&TapSpec> {
        self.taps
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.taps.iter().map(|t| t.name.clone()).collect()
    }

    /// Product of pooling and convolution strides up to and including `layer`.
    pub fn stride_at(&self, layer: usize) -> usize {
        self.layers[..=layer]
            .iter()
            .map(|l| match l {
                Layer::Pool => 2,
                Layer::Conv { stride, .. } => *stride,
                Layer::Relu => 1,
            })
            .product()
    }

    pub fn channels_at(&self, layer: usize) -> usize {
        self.layers[..=layer]
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv { out_ch, .. } => Some(*out_ch),
                _ => None,
            })
            .unwrap_or(self.input_channels)
    }

    pub fn tap_stride(&self, name: &str) -> Result<usize> {
        Ok(self.stride_at(self.tap(name)?.layer))
    }

    pub fn tap_channels(&self, name: &str) -> Result<usize> {
        Ok(self.channels_at(self.tap(name)?.layer))
    }

    /// Layers up to and including the given tap; other taps past it are dropped.
    pub fn truncated_at(&self, name: &str) -> Result<Self> {
        let last = self.tap(name)?.layer;
        Ok(Self {
            input_channels: self.input_channels,
            layers: self.layers[..=last].to_vec(),
            taps: self.taps.iter().filter(|t| t.layer <= last).cloned().collect(),
        })
    }

    /// Tap-space extents for an `h x w` input, or `None` if the input is too small.
    pub fn tap_extent(&self, name: &str, h: usize, w: usize) -> Result<Option<(usize, usize)>> {
        let last = self.tap(name)?.layer;
        let (mut h, mut w) = (h, w);
        for layer in &self.layers[..=last] {
            match *layer {
                Layer::Conv { kernel, stride, padding, .. } => {
                    let oh = crate::ops::conv_out_len(h, kernel, stride, padding);
                    let ow = crate::ops::conv_out_len(w, kernel, stride, padding);
                    match (oh, ow) {
                        (Some(a), Some(b)) if a > 0 && b > 0 => (h, w) = (a, b),
                        _ => return Ok(None),
                    }
                }
                Layer::Pool => {
                    if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
                        return Ok(None);
                    }
                    (h, w) = (h / 2, w / 2);
                }
                Layer::Relu => {}
            }
        }
        Ok(Some((h, w)))
    }

    fn conv_layers(&self) -> impl Iterator<Item = (usize, &Layer)> {
        self.layers.iter().enumerate().filter(|(_, l)| matches!(l, Layer::Conv { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Loaded,
    SeededRandom,
}

/// Per-channel input standardization `(x - mean) / std`, declared by
/// manifests of externally trained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorWeights<T = f32> {
    /// One entry per conv layer, in layer order.
    pub convs: Vec<ConvParams<T>>,
    pub provenance: Provenance,
    pub normalization: Option<Normalization>,
}

impl<T: Real> ExtractorWeights<T> {
    /// He-normal weights (`std = sqrt(2 / fan_in)`, `fan_in = in_ch * k * k`)
    /// and zero biases; conv layer `i` draws from the stream `(seed, "extractor", i)`.
    pub fn init_random(arch: &ArchSpec, seed: u64) -> Self {
        let convs = arch
            .conv_layers()
            .enumerate()
            .map(|(i, (_, layer))| {
                let Layer::Conv { in_ch, out_ch, kernel, .. } = *layer else { unreachable!() };
                let mut rng = seed::rng(seed, "extractor", i as u64);
                let std = he_std(in_ch, kernel);
                ConvParams {
                    weight: Tensor::randn([out_ch, in_ch, kernel, kernel], std, &mut rng),
                    bias: vec![T::zero(); out_ch],
                }
            })
            .collect();
        Self { convs, provenance: Provenance::SeededRandom, normalization: None }
    }

    pub fn check_against(&self, arch: &ArchSpec) -> Result<()> {
        let layers: Vec<_> = arch.conv_layers().collect();
        if layers.len() != self.convs.len() {
            return Err(Error::Manifest(format!(
                "architecture has {} conv layers, weights provide {}",
                layers.len(),
                self.convs.len()
            )));
        }
        for ((idx, layer), params) in layers.into_iter().zip(&self.convs) {
            let Layer::Conv { in_ch, out_ch, kernel, .. } = *layer else { unreachable!() };
            let expected = vec![out_ch, in_ch, kernel, kernel];
            let found = params.weight.shape().to_vec();
            if expected != found || params.bias.len() != out_ch {
                return Err(Error::LayerShape { layer: conv_name(idx), expected, found });
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ExtractorWeights<U> {
        ExtractorWeights {
            convs: self
                .convs
                .iter()
                .map(|p| ConvParams {
                    weight: p.weight.cast(),
                    bias: p.bias.iter().map(|b| U::from_f64(b.to_f64())).collect(),
                })
                .collect(),
            provenance: self.provenance,
            normalization: self.normalization.clone(),
        }
    }
}

pub fn he_std(in_ch: usize, kernel: usize) -> f64 {
    (2.0 / (in_ch * kernel * kernel) as f64).sqrt()
}

/// Name used for conv layer `idx` in weight manifests.
pub fn conv_name(idx: usize) -> String {
    format!("conv{idx}")
}

/// Features at one tap point, with the tap's cumulative stride in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tap<T = f32> {
    pub name: String,
    pub features: Tensor<T>,
    pub stride: usize,
}

/// Anything that exposes named tap features.
pub trait TapSource<T> {
    fn taps(&self) -> &[Tap<T>];

    fn tap(&self, name: &str) -> Result<&Tap<T>> {
        self.taps()
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }
}

impl<T> TapSource<T> for Vec<Tap<T>> {
    fn taps(&self) -> &[Tap<T>] {
        self
    }
}

/// Output of one extraction: tap features plus the forward cache.
#[derive(Debug, Clone)]
pub struct FeatureStack<T = f32> {
    taps: Vec<Tap<T>>,
    /// `acts[i]` is the input of layer `i`.
    acts: Vec<Tensor<T>>,
    pools: Vec<Option<PoolIndices>>,
    input_shape: [usize; 4],
}

impl<T> TapSource<T> for FeatureStack<T> {
    fn taps(&self) -> &[Tap<T>] {
        &self.taps
    }
}

impl<T: Real> FeatureStack<T> {
    pub fn into_taps(self) -> Vec<Tap<T>> {
        self.taps
    }

    /// Pre-activation input of layer `i`.
    pub fn activation(&self, layer: usize) -> Option<&Tensor<T>> {
        self.acts.get(layer)
    }
}

/// Frozen trunk: architecture plus weights.
#[derive(Debug, Clone)]
pub struct Extractor<T = f32> {
    arch: ArchSpec,
    weights: ExtractorWeights<T>,
    specs: Vec<Option<ConvSpec<T>>>,
}

impl<T: Real> Extractor<T> {
    pub fn new(arch: ArchSpec, weights: ExtractorWeights<T>) -> Result<Self> {
        arch.validate()?;
        weights.check_against(&arch)?;
        if let Some(norm) = &weights.normalization {
            if norm.mean.len() != arch.input_channels || norm.std.len() != arch.input_channels {
                return Err(Error::Manifest("normalization stats must have one entry per input channel".into()));
            }
            if norm.std.iter().any(|&s| s <= 0.0) {
                return Err(Error::Manifest("normalization std must be positive".into()));
            }
        }
        let mut params = weights.convs.iter();
        let specs = arch
            .layers
            .iter()
            .map(|layer| match *layer {
                Layer::Conv { stride, padding, .. } => {
                    let p = params.next().expect("checked against arch");
                    Some(ConvSpec::new(p.weight.clone(), p.bias.clone(), stride, padding))
                        .transpose()
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self { arch, weights, specs })
    }

    pub fn seeded(arch: ArchSpec, seed: u64) -> Result<Self> {
        let weights = ExtractorWeights::init_random(&arch, seed);
        Self::new(arch, weights)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn weights(&self) -> &ExtractorWeights<T> {
        &self.weights
    }

    pub fn cast<U: Real>(&self) -> Extractor<U> {
        Extractor::new(self.arch.clone(), self.weights.cast()).expect("same arch")
    }

    /// Forward pass up to the deepest tap, caching every activation.
    pub fn extract(&self, image: &Tensor<T>) -> Result<FeatureStack<T>> {
        if image.channels() != self.arch.input_channels {
            return Err(Error::ChannelMismatch {
                expected: self.arch.input_channels,
                got: image.channels(),
            });
        }
        let last = self.arch.taps.iter().map(|t| t.layer).max().unwrap_or(0);
        let mut x = match &self.weights.normalization {
            Some(norm) => standardize(image, norm),
            None => image.clone(),
        };
        let mut acts = Vec::with_capacity(last + 2);
        let mut pools = Vec::with_capacity(last + 1);
        for (i, layer) in self.arch.layers[..=last].iter().enumerate() {
            let (next, pool) = match layer {
                Layer::Conv { .. } => {
                    let spec = self.specs[i].as_ref().expect("conv spec");
                    (conv2d_forward(&x, spec)?, None)
                }
                Layer::Relu => (relu_forward(&x), None),
                Layer::Pool => {
                    let (y, idx) = maxpool2_forward(&x)?;
                    (y, Some(idx))
                }
            };
            acts.push(x);
            pools.push(pool);
            x = next;
        }
        acts.push(x);
        let taps = self
            .arch
            .taps
            .iter()
            .map(|t| Tap {
                name: t.name.clone(),
                features: acts[t.layer + 1].clone(),
                stride: self.arch.stride_at(t.layer),
            })
            .collect();
        Ok(FeatureStack { taps, acts, pools, input_shape: image.shape() })
    }

    /// Image-space gradient of a scalar whose tap-space gradients are `grads`.
    /// Taps not listed contribute nothing.
    pub fn backward(&self, stack: &FeatureStack<T>, grads: &[(String, Tensor<T>)]) -> Result<Tensor<T>> {
        let mut by_layer: Vec<Vec<&Tensor<T>>> = vec![Vec::new(); self.arch.layers.len()];
        let mut deepest = None;
        for (name, g) in grads {
            let tap = self.arch.tap(name)?;
            let target = &stack.acts[tap.layer + 1];
            if g.shape() != target.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for tap `{name}` is {:?}, features are {:?}",
                    g.shape(),
                    target.shape()
                )));
            }
            by_layer[tap.layer].push(g);
            deepest = deepest.max(Some(tap.layer));
        }
        let Some(deepest) = deepest else {
            return Ok(Tensor::zeros(stack.input_shape));
        };
        let mut grad = Tensor::zeros(stack.acts[deepest + 1].shape());
        for i in (0..=deepest).rev() {
            for g in &by_layer[i] {
                grad.add_assign(g)?;
            }
            grad = match &self.arch.layers[i] {
                Layer::Conv { .. } => {
                    let spec = self.specs[i].as_ref().expect("conv spec");
                    conv2d_backward_input(stack.acts[i].shape(), spec, &grad)?
                }
                Layer::Relu => relu_backward(&stack.acts[i], &grad)?,
                Layer::Pool => maxpool2_backward(stack.pools[i].as_ref().expect("pool indices"), &grad)?,
            };
        }
        if let Some(norm) = &self.weights.normalization {
            let [n, c, h, w] = grad.shape();
            for b in 0..n {
                for ch in 0..c {
                    let inv = T::from_f64(1.0 / norm.std[ch]);
                    let o = grad.offset(b, ch, 0, 0);
                    grad.data_mut()[o..o + h * w].iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        Ok(grad)
    }
}

fn standardize<T: Real>(image: &Tensor<T>, norm: &Normalization) -> Tensor<T> {
    let mut out = image.clone();
    let [n, c, h, w] = image.shape();
    for b in 0..n {
        for ch in 0..c {
            let (m, s) = (norm.mean[ch], norm.std[ch]);
            let o = out.offset(b, ch, 0, 0);
            for v in &mut out.data_mut()[o..o + h * w] {
                *v = T::from_f64((v.to_f64() - m) / s);
            }
        }
    }
    out
}
