//! Learnable 1x1 selection layers appended to each tap of the frozen trunk:
//! `1x1 conv -> relu -> 1x1 conv`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::extractor::{Extractor, FeatureStack, Tap, TapSource};
use crate::ops::{conv2d_backward, conv2d_forward, relu_backward, relu_forward, ConvSpec, Padding};
use crate::seed;
use crate::tensor::{Real, Tensor};
use crate::weights::{read_container, write_container, Manifest, TensorEntry};

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPair<T = f32> {
    pub tap: String,
    pub first: ConvSpec<T>,
    pub second: ConvSpec<T>,
}

impl<T: Real> SelectionPair<T> {
    pub fn in_channels(&self) -> usize {
        self.first.in_channels()
    }

    pub fn hidden(&self) -> usize {
        self.first.out_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.second.out_channels()
    }
}

fn pointwise<T: Real>(weight: Tensor<T>, bias: Vec<T>) -> ConvSpec<T> {
    ConvSpec::new(weight, bias, 1, Padding::None).expect("1x1 kernel")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionLayers<T = f32> {
    pub pairs: Vec<SelectionPair<T>>,
}

impl<T: Real> SelectionLayers<T> {
    /// Square identity weights and zero biases: the stack maps `f` to `relu(f)`.
    pub fn identity(taps: &[(String, usize)]) -> Self {
        let eye = |c: usize| {
            let mut t = Tensor::zeros([c, c, 1, 1]);
            for i in 0..c {
                *t.at_mut(i, i, 0, 0) = T::one();
            }
            t
        };
        Self {
            pairs: taps
                .iter()
                .map(|(name, c)| SelectionPair {
                    tap: name.clone(),
                    first: pointwise(eye(*c), vec![T::zero(); *c]),
                    second: pointwise(eye(*c), vec![T::zero(); *c]),
                })
                .collect(),
        }
    }

    pub fn zeros(taps: &[(String, usize)]) -> Self {
        Self {
            pairs: taps
                .iter()
                .map(|(name, c)| SelectionPair {
                    tap: name.clone(),
                    first: pointwise(Tensor::zeros([*c, *c, 1, 1]), vec![T::zero(); *c]),
                    second: pointwise(Tensor::zeros([*c, *c, 1, 1]), vec![T::zero(); *c]),
                })
                .collect(),
        }
    }

    /// Normal(0, `std`) weights with hidden width equal to the tap width,
    /// zero biases. Tap `k` draws from the stream `(seed, "selection", k)`.
    pub fn random(taps: &[(String, usize)], std: f64, seed: u64) -> Self {
        Self {
            pairs: taps
                .iter()
                .enumerate()
                .map(|(k, (name, c))| {
                    let mut rng = seed::rng(seed, "selection", k as u64);
                    SelectionPair {
                        tap: name.clone(),
                        first: pointwise(Tensor::randn([*c, *c, 1, 1], std, &mut rng), vec![T::zero(); *c]),
                        second: pointwise(Tensor::randn([*c, *c, 1, 1], std, &mut rng), vec![T::zero(); *c]),
                    }
                })
                .collect(),
        }
    }

    pub fn pair(&self, tap: &str) -> Result<&SelectionPair<T>> {
        self.pairs.iter().find(|p| p.tap == tap).ok_or_else(|| Error::UnknownTap(tap.into()))
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.tap.clone()).collect()
    }

    /// Parameter buffers in a fixed order: per pair `w1, b1, w2, b2`.
    pub fn params(&self) -> Vec<&[T]> {
        self.pairs
            .iter()
            .flat_map(|p| {
                [p.first.weight.data(), &p.first.bias[..], p.second.weight.data(), &p.second.bias[..]]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.pairs
            .iter_mut()
            .flat_map(|p| {
                let SelectionPair { first, second, .. } = p;
                [
                    first.weight.data_mut(),
                    &mut first.bias[..],
                    second.weight.data_mut(),
                    &mut second.bias[..],
                ]
            })
            .collect()
    }

    /// Selected features for every tap that has a pair; other taps are dropped.
    pub fn apply(&self, source: &impl TapSource<T>) -> Result<SelectedStack<T>> {
        let mut taps = Vec::with_capacity(self.pairs.len());
        let mut cache = Vec::with_capacity(self.pairs.len());
        for pair in &self.pairs {
            let tap = source.tap(&pair.tap)?;
            if tap.features.channels() != pair.in_channels() {
                return Err(Error::ChannelMismatch {
                    expected: pair.in_channels(),
                    got: tap.features.channels(),
                });
            }
            let pre = conv2d_forward(&tap.features, &pair.first)?;
            let hidden = relu_forward(&pre);
            let out = conv2d_forward(&hidden, &pair.second)?;
            taps.push(Tap { name: pair.tap.clone(), features: out, stride: tap.stride });
            cache.push(PairCache { input: tap.features.clone(), pre, hidden });
        }
        Ok(SelectedStack { taps, cache })
    }

    /// Gradients of a scalar with respect to the selection parameters and
    /// the tap features fed into them, given gradients on the selected taps.
    pub fn backward(&self, stack: &SelectedStack<T>, grads: &[(String, Tensor<T>)]) -> Result<SelectionGrads<T>> {
        let mut out = SelectionGrads {
            params: self.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
            inputs: Vec::new(),
        };
        for (name, g) in grads {
            let k = self
                .pairs
                .iter()
                .position(|p| &p.tap == name)
                .ok_or_else(|| Error::UnknownTap(name.clone()))?;
            let pair = &self.pairs[k];
            let cache = &stack.cache[k];
            let g2 = conv2d_backward(&cache.hidden, &pair.second, g)?;
            let gpre = relu_backward(&cache.pre, &g2.input)?;
            let g1 = conv2d_backward(&cache.input, &pair.first, &gpre)?;
            for (dst, src) in out.params[4 * k..4 * k + 4]
                .iter_mut()
                .zip([g1.weight.data(), &g1.bias[..], g2.weight.data(), &g2.bias[..]])
            {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            match out.inputs.iter_mut().find(|(n, _)| n == name) {
                Some((_, acc)) => acc.add_assign(&g1.input)?,
                None => out.inputs.push((name.clone(), g1.input)),
            }
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> SelectionLayers<U> {
        let conv = |c: &ConvSpec<T>| {
            pointwise(c.weight.cast(), c.bias.iter().map(|b| U::from_f64(b.to_f64())).collect())
        };
        SelectionLayers {
            pairs: self
                .pairs
                .iter()
                .map(|p| SelectionPair { tap: p.tap.clone(), first: conv(&p.first), second: conv(&p.second) })
                .collect(),
        }
    }

    /// Stored with `kind = "selection"`, tensors `<tap>.first.weight`, `.first.bias`,
    /// `.second.weight`, `.second.bias` per tap.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let mut manifest = Manifest::new("selection", "");
        let mut buffers: Vec<Vec<f32>> = Vec::new();
        for p in &self.pairs {
            for (stage, conv) in [("first", &p.first), ("second", &p.second)] {
                manifest.tensors.push(TensorEntry {
                    name: format!("{}.{stage}.weight", p.tap),
                    shape: conv.weight.shape().to_vec(),
                });
                manifest.tensors.push(TensorEntry {
                    name: format!("{}.{stage}.bias", p.tap),
                    shape: vec![conv.bias.len()],
                });
                buffers.push(conv.weight.data().iter().map(|v| v.to_f64() as f32).collect());
                buffers.push(conv.bias.iter().map(|v| v.to_f64() as f32).collect());
            }
        }
        let refs: Vec<&[f32]> = buffers.iter().map(|b| b.as_slice()).collect();
        write_container(manifest_path, manifest, &refs)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (manifest, values) = read_container(manifest_path)?;
        if manifest.kind != "selection" {
            return Err(Error::Manifest(format!("expected kind `selection`, found `{}`", manifest.kind)));
        }
        if manifest.tensors.len() % 4 != 0 {
            return Err(Error::Manifest("selection manifests hold four tensors per tap".into()));
        }
        let mut pairs = Vec::new();
        for (entries, vals) in manifest.tensors.chunks(4).zip(values.chunks(4)) {
            let tap = entries[0]
                .name
                .strip_suffix(".first.weight")
                .ok_or_else(|| Error::Manifest(format!("unexpected tensor `{}`", entries[0].name)))?
                .to_string();
            let mk = |we: &TensorEntry, wv: &Vec<f32>, be: &TensorEntry, bv: &Vec<f32>| -> Result<ConvSpec<T>> {
                let shape: [usize; 4] = we.shape.as_slice().try_into().map_err(|_| Error::LayerShape {
                    layer: we.name.clone(),
                    expected: vec![0, 0, 1, 1],
                    found: we.shape.clone(),
                })?;
                if shape[2] != 1 || shape[3] != 1 || be.shape != vec![shape[0]] {
                    return Err(Error::LayerShape {
                        layer: we.name.clone(),
                        expected: vec![shape[0], shape[1], 1, 1],
                        found: we.shape.clone(),
                    });
                }
                let w = Tensor::from_vec(shape, wv.iter().map(|&v| T::from_f64(v as f64)).collect())?;
                Ok(pointwise(w, bv.iter().map(|&v| T::from_f64(v as f64)).collect()))
            };
            let first = mk(&entries[0], &vals[0], &entries[1], &vals[1])?;
            let second = mk(&entries[2], &vals[2], &entries[3], &vals[3])?;
            if second.in_channels() != first.out_channels() {
                return Err(Error::LayerShape {
                    layer: entries[2].name.clone(),
                    expected: vec![second.out_channels(), first.out_channels(), 1, 1],
                    found: entries[2].shape.clone(),
                });
            }
            pairs.push(SelectionPair { tap, first, second });
        }
        Ok(Self { pairs })
    }
}

#[derive(Debug, Clone)]
struct PairCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    hidden: Tensor<T>,
}

/// Selected tap features plus the cache needed for [`SelectionLayers::backward`].
#[derive(Debug, Clone)]
pub struct SelectedStack<T = f32> {
    taps: Vec<Tap<T>>,
    cache: Vec<PairCache<T>>,
}

impl<T> TapSource<T> for SelectedStack<T> {
    fn taps(&self) -> &[Tap<T>] {
        &self.taps
    }
}

#[derive(Debug, Clone)]
pub struct SelectionGrads<T> {
    /// Same order as [`SelectionLayers::params`].
    pub params: Vec<Vec<T>>,
    /// Gradient with respect to each tap's trunk features.
    pub inputs: Vec<(String, Tensor<T>)>,
}

/// Structure representation: the frozen trunk, optionally followed by
/// selection layers (the learned variant).
#[derive(Debug, Clone, Copy)]
pub struct StructureNet<'a, T = f32> {
    pub extractor: &'a Extractor<T>,
    pub selection: Option<&'a SelectionLayers<T>>,
}

impl<'a, T: Real> StructureNet<'a, T> {
    pub fn fixed(extractor: &'a Extractor<T>) -> Self {
        Self { extractor, selection: None }
    }

    pub fn learned(extractor: &'a Extractor<T>, selection: &'a SelectionLayers<T>) -> Self {
        Self { extractor, selection: Some(selection) }
    }

    /// Tap features of `image`; with selection layers, only the selected taps.
    pub fn features(&self, image: &Tensor<T>) -> Result<Vec<Tap<T>>> {
        let stack = self.extractor.extract(image)?;
        match self.selection {
            None => Ok(stack.into_taps()),
            Some(sel) => Ok(sel.apply(&stack)?.taps().to_vec()),
        }
    }

    /// Forward pass keeping every cache needed by [`StructureNet::backward`].
    pub fn forward(&self, image: &Tensor<T>) -> Result<NetForward<T>> {
        let trunk = self.extractor.extract(image)?;
        let selected = self.selection.map(|s| s.apply(&trunk)).transpose()?;
        Ok(NetForward { trunk, selected })
    }

    /// Image gradient given gradients on the output taps.
    pub fn backward(&self, fwd: &NetForward<T>, grads: &[(String, Tensor<T>)]) -> Result<Tensor<T>> {
        match (self.selection, &fwd.selected) {
            (Some(sel), Some(stack)) => {
                let g = sel.backward(stack, grads)?;
                self.extractor.backward(&fwd.trunk, &g.inputs)
            }
            _ => self.extractor.backward(&fwd.trunk, grads),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetForward<T> {
    pub trunk: FeatureStack<T>,
    pub selected: Option<SelectedStack<T>>,
}

impl<T> TapSource<T> for NetForward<T> {
    fn taps(&self) -> &[Tap<T>] {
        match &self.selected {
            Some(s) => s.taps(),
            None => self.trunk.taps(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn taps(c: usize, seed: u64) -> Vec<Tap<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![Tap {
            name: "t".into(),
            features: relu_forward(&Tensor::randn([1, c, 4, 5], 1.0, &mut rng)),
            stride: 4,
        }]
    }

    #[test]
    fn identity_passes_nonnegative_features() {
        let src = taps(6, 0);
        let sel = SelectionLayers::<f64>::identity(&[("t".into(), 6)]);
        let out = sel.apply(&src).unwrap();
        assert_eq!(out.tap("t").unwrap().features, src[0].features);
        assert_eq!(out.tap("t").unwrap().stride, 4);
    }

    #[test]
    fn zero_weights_zero_output() {
        let src = taps(3, 1);
        let sel = SelectionLayers::<f64>::zeros(&[("t".into(), 3)]);
        let out = sel.apply(&src).unwrap();
        assert!(out.tap("t").unwrap().features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let src = taps(3, 2);
        let sel = SelectionLayers::<f64>::identity(&[("t".into(), 4)]);
        assert!(matches!(sel.apply(&src), Err(Error::ChannelMismatch { .. })));
        let sel = SelectionLayers::<f64>::identity(&[("u".into(), 3)]);
        assert!(matches!(sel.apply(&src), Err(Error::UnknownTap(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.json");
        let sel = SelectionLayers::<f32>::random(&[("tapA".into(), 5), ("tapB".into(), 3)], 0.1, 9);
        sel.save(&path).unwrap();
        assert_eq!(SelectionLayers::<f32>::load(&path).unwrap(), sel);
    }
}
