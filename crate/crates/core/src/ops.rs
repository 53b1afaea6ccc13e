//! Differentiable kernels: convolution, ReLU, 2x2 max pooling and bilinear
//! resizing. Every kernel is a pure function of its arguments; the parallel
//! loops partition outputs so each element is summed in a fixed order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault::{self, Kernel};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// `(k - 1) / 2` zeros on each side, so stride 1 preserves extents.
    Zero,
    /// Valid correlation only.
    None,
}

impl Padding {
    pub fn amount(self, k: usize) -> usize {
        match self {
            Padding::Zero => (k - 1) / 2,
            Padding::None => 0,
        }
    }
}

/// Output extent of a convolution along one axis:
/// `(len + 2 * pad - k) / stride + 1`, or `None` when the kernel does not fit.
pub fn conv_out_len(len: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    let padded = len + 2 * padding.amount(k);
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Weights `(out_ch, in_ch, kh, kw)`, one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Real> ConvSpec<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>, stride: usize, padding: Padding) -> Result<Self> {
        let [oc, _, kh, kw] = weight.shape();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("kernel {kh}x{kw} must have odd extents")));
        }
        if stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        if bias.len() != oc {
            return Err(Error::ShapeMismatch(format!(
                "bias has {} entries for {oc} output channels",
                bias.len()
            )));
        }
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input;
        let [oc, ic, kh, kw] = self.weight.shape();
        if c != ic {
            return Err(Error::ChannelMismatch { expected: ic, got: c });
        }
        let oh = conv_out_len(h, kh, self.stride, self.padding);
        let ow = conv_out_len(w, kw, self.stride, self.padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([n, oc, oh, ow]),
            _ => Err(Error::EmptyOutput(format!(
                "{kh}x{kw} kernel over {h}x{w} input with {:?} padding",
                self.padding
            ))),
        }
    }
}

/// Output positions `o < out_len` whose input index `o * stride + k - pad`
/// falls inside `0..len`.
#[inline]
fn valid_range(out_len: usize, k: usize, stride: usize, pad: usize, len: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = (len + pad).saturating_sub(k).div_ceil(stride).min(out_len);
    lo..hi.max(lo)
}

/// `dst[j] += w * src[j * stride]`.
#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], w: T, stride: usize) {
    if stride == 1 {
        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += w * v);
    } else {
        dst.iter_mut().zip(src.iter().step_by(stride)).for_each(|(d, &v)| *d += w * v);
    }
}

/// Cross-correlation `out[n,o,y,x] = b[o] + sum_{i,ky,kx} w[o,i,ky,kx] * in[n,i,y*s+ky-p,x*s+kx-p]`.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(input.shape())?;
    let [_, ic, ih, iw] = input.shape();
    let [_, oc, oh, ow] = out_shape;
    let [_, _, kh, kw] = spec.weight.shape();
    let (ph, pw) = (spec.padding.amount(kh), spec.padding.amount(kw));
    let s = spec.stride;
    let inp = input.data();
    let wt = spec.weight.data();

    let mut out = Tensor::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, o) = (idx / oc, idx % oc);
            plane.fill(spec.bias[o]);
            for i in 0..ic {
                let in_plane = &inp[(b * ic + i) * ih * iw..(b * ic + i + 1) * ih * iw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = wt[((o * ic + i) * kh + ky) * kw + kx];
                        let rx = valid_range(ow, kx, s, pw, iw);
                        let ix0 = (rx.start * s + kx).wrapping_sub(pw);
                        for oy in valid_range(oh, ky, s, ph, ih) {
                            let iy = oy * s + ky - ph;
                            let row = &in_plane[iy * iw..(iy + 1) * iw];
                            axpy(&mut plane[oy * ow + rx.start..oy * ow + rx.end], &row[ix0.min(iw)..], w, s);
                        }
                    }
                }
            }
        });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let out_shape = spec.output_shape(input.shape())?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch(format!(
            "grad_out {:?} vs conv output {out_shape:?}",
            grad_out.shape()
        )));
    }
    let [n, ic, ih, iw] = input.shape();
    let [_, oc, oh, ow] = out_shape;
    let [_, _, kh, kw] = spec.weight.shape();
    let (ph, pw) = (spec.padding.amount(kh), spec.padding.amount(kw));
    let s = spec.stride;
    let inp = input.data();
    let g = grad_out.data();

    let bias: Vec<T> = (0..oc)
        .map(|o| {
            let mut acc = T::zero();
            for b in 0..n {
                for &v in &g[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow] {
                    acc += v;
                }
            }
            acc
        })
        .collect();

    let mut gw = Tensor::zeros(spec.weight.shape());
    gw.data_mut()
        .par_chunks_mut(ic * kh * kw)
        .enumerate()
        .for_each(|(o, wchunk)| {
            for i in 0..ic {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::zero();
                        let rx = valid_range(ow, kx, s, pw, iw);
                        let ix0 = (rx.start * s + kx).wrapping_sub(pw);
                        for b in 0..n {
                            let gp = &g[(b * oc + o) * oh * ow..];
                            let ip = &inp[(b * ic + i) * ih * iw..];
                            for oy in valid_range(oh, ky, s, ph, ih) {
                                let iy = oy * s + ky - ph;
                                let grow = &gp[oy * ow + rx.start..oy * ow + rx.end];
                                let irow = &ip[iy * iw..(iy + 1) * iw];
                                acc += grow
                                    .iter()
                                    .zip(irow[ix0.min(iw)..].iter().step_by(s))
                                    .fold(T::zero(), |a, (&x, &y)| a + x * y);
                            }
                        }
                        wchunk[(i * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });

    let gi = conv2d_backward_input(input.shape(), spec, grad_out)?;
    let mut bias = bias;
    fault::flip(Kernel::ConvWeight, gw.data_mut());
    fault::flip(Kernel::ConvBias, &mut bias);

    Ok(ConvGrads { input: gi, weight: gw, bias })
}

/// Gradient with respect to the convolution input only.
pub fn conv2d_backward_input<T: Real>(
    input_shape: [usize; 4],
    spec: &ConvSpec<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(input_shape)?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch(format!(
            "grad_out {:?} vs conv output {out_shape:?}",
            grad_out.shape()
        )));
    }
    let [_, ic, ih, iw] = input_shape;
    let [_, oc, oh, ow] = out_shape;
    let [_, _, kh, kw] = spec.weight.shape();
    let (ph, pw) = (spec.padding.amount(kh), spec.padding.amount(kw));
    let s = spec.stride;
    let g = grad_out.data();
    let wt = spec.weight.data();

    let mut gi = Tensor::zeros(input_shape);
    gi.data_mut()
        .par_chunks_mut(ih * iw)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, i) = (idx / ic, idx % ic);
            for o in 0..oc {
                let gp = &g[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = wt[((o * ic + i) * kh + ky) * kw + kx];
                        let rx = valid_range(ow, kx, s, pw, iw);
                        let ix0 = (rx.start * s + kx).wrapping_sub(pw);
                        for oy in valid_range(oh, ky, s, ph, ih) {
                            let iy = oy * s + ky - ph;
                            let grow = &gp[oy * ow + rx.start..oy * ow + rx.end];
                            let prow = &mut plane[iy * iw..(iy + 1) * iw];
                            if s == 1 {
                                prow[ix0.min(iw)..].iter_mut().zip(grow).for_each(|(d, &v)| *d += w * v);
                            } else {
                                prow[ix0.min(iw)..].iter_mut().step_by(s).zip(grow).for_each(|(d, &v)| *d += w * v);
                            }
                        }
                    }
                }
            }
        });
    fault::flip(Kernel::ConvInput, gi.data_mut());
    Ok(gi)
}

pub fn relu_forward<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward<T: Real>(t: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    t.ensure_same_shape(grad_out, "relu_backward")?;
    let data = t
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect::<Vec<T>>();
    let mut data = data;
    fault::flip(Kernel::Relu, &mut data);
    Tensor::from_vec(t.shape(), data)
}

/// Flat input offsets of each pooled maximum, plus the input shape they index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: [usize; 4],
    pub argmax: Vec<usize>,
}

/// 2x2 stride-2 max pooling. Ties resolve to the first element of the
/// window in row-major order.
pub fn maxpool2_forward<T: Real>(t: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let [n, c, h, w] = t.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddExtent { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let src = t.data();
    for (plane, (oplane, aplane)) in out
        .data_mut()
        .chunks_mut(oh * ow)
        .zip(argmax.chunks_mut(oh * ow))
        .enumerate()
    {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                oplane[oy * ow + ox] = src[best];
                aplane[oy * ow + ox] = best;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: t.shape(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Real>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::ShapeMismatch(format!(
            "grad_out has {} values for {} pooled outputs",
            grad_out.len(),
            indices.argmax.len()
        )));
    }
    let mut gi = Tensor::zeros(indices.input_shape);
    let dst = gi.data_mut();
    for (&i, &g) in indices.argmax.iter().zip(grad_out.data()) {
        dst[i] += g;
    }
    fault::flip(Kernel::Pool, dst);
    Ok(gi)
}

/// Source coordinate and blend weight for one output index under
/// align-corners-false sampling: `src = (dst + 0.5) * in / out - 0.5`,
/// clamped to `[0, in - 1]`; returns `(i0, i1, frac)`.
fn bilinear_source(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize with half-pixel (align-corners-false) sample positions.
pub fn bilinear_resize<T: Real>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::EmptyOutput(format!("resize target {out_h}x{out_w}")));
    }
    let [n, c, h, w] = t.shape();
    if h == 0 || w == 0 {
        return Err(Error::EmptyOutput("resize of an empty tensor".into()));
    }
    let rows: Vec<_> = (0..out_h).map(|y| bilinear_source(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| bilinear_source(x, w, out_w)).collect();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for b in 0..n {
        for ch in 0..c {
            for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let v00 = t.at(b, ch, y0, x0).to_f64();
                    let v01 = t.at(b, ch, y0, x1).to_f64();
                    let v10 = t.at(b, ch, y1, x0).to_f64();
                    let v11 = t.at(b, ch, y1, x1).to_f64();
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    *out.at_mut(b, ch, y, x) = T::from_f64(top + (bot - top) * fy);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(weight: Tensor<f64>, padding: Padding) -> ConvSpec<f64> {
        let oc = weight.shape()[0];
        ConvSpec::new(weight, vec![0.0; oc], 1, padding).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([2, 1, 5, 4], 1.0, &mut rng);
        let s = spec(Tensor::full([1, 1, 1, 1], 1.0), Padding::None);
        assert_eq!(conv2d_forward(&x, &s).unwrap(), x);
        let g = Tensor::<f64>::randn([2, 1, 5, 4], 1.0, &mut rng);
        assert_eq!(conv2d_backward(&x, &s, &g).unwrap().input, g);
    }

    #[test]
    fn constant_input_all_ones_kernel() {
        let x = Tensor::<f64>::full([1, 1, 6, 5], 0.75);
        let s = spec(Tensor::full([1, 1, 3, 3], 1.0), Padding::None);
        let y = conv2d_forward(&x, &s).unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0 * 0.75));
    }

    #[test]
    fn output_extents_follow_stride_and_padding() {
        assert_eq!(conv_out_len(7, 3, 2, Padding::Zero), Some(4));
        assert_eq!(conv_out_len(7, 3, 2, Padding::None), Some(3));
        assert_eq!(conv_out_len(2, 3, 1, Padding::None), None);
        let x = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let s = spec(Tensor::zeros([1, 1, 3, 3]), Padding::None);
        assert!(matches!(conv2d_forward(&x, &s), Err(Error::EmptyOutput(_))));
    }

    #[test]
    fn rejects_channel_and_grad_mismatch() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let s = spec(Tensor::zeros([1, 3, 3, 3]), Padding::Zero);
        assert!(matches!(
            conv2d_forward(&x, &s),
            Err(Error::ChannelMismatch { expected: 3, got: 2 })
        ));
        let s = spec(Tensor::zeros([1, 2, 3, 3]), Padding::Zero);
        let g = Tensor::zeros([1, 1, 3, 4]);
        assert!(matches!(conv2d_backward(&x, &s, &g), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn even_kernel_rejected() {
        let r = ConvSpec::<f64>::new(Tensor::zeros([1, 1, 2, 3]), vec![0.0], 1, Padding::None);
        assert!(r.is_err());
    }

    #[test]
    fn zero_grad_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn([1, 2, 5, 5], 1.0, &mut rng);
        let s = ConvSpec::new(Tensor::randn([3, 2, 3, 3], 1.0, &mut rng), vec![0.1, 0.2, 0.3], 2, Padding::Zero)
            .unwrap();
        let g = Tensor::zeros(s.output_shape(x.shape()).unwrap());
        let grads = conv2d_backward(&x, &s, &g).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_definition() {
        let t = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&t).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::full([1, 1, 1, 3], 5.0);
        assert_eq!(relu_backward(&t, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
        let neg = Tensor::<f64>::full([1, 2, 3, 3], -0.5);
        assert!(relu_forward(&neg).data().iter().all(|&v| v == 0.0));
        let gn = Tensor::full([1, 2, 3, 3], 1.0);
        assert!(relu_backward(&neg, &gn).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let t = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (o, idx) = maxpool2_forward(&t).unwrap();
        assert_eq!(o.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);

        let c = Tensor::<f64>::full([1, 1, 4, 4], 3.0);
        let (o, idx) = maxpool2_forward(&c).unwrap();
        assert!(o.data().iter().all(|&v| v == 3.0));
        assert_eq!(idx.argmax, vec![0, 2, 8, 10]);

        let g = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gi = maxpool2_backward(&idx, &g).unwrap();
        assert_eq!(gi.at(0, 0, 0, 0), 1.0);
        assert_eq!(gi.at(0, 0, 2, 2), 4.0);
        assert_eq!(gi.sum(), 10.0);
    }

    #[test]
    fn maxpool_odd_rejected() {
        let t = Tensor::<f64>::zeros([1, 1, 3, 4]);
        assert!(matches!(maxpool2_forward(&t), Err(Error::OddExtent { h: 3, w: 4 })));
    }

    #[test]
    fn bilinear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::<f64>::randn([1, 2, 3, 5], 1.0, &mut rng);
        assert_eq!(bilinear_resize(&t, 3, 5).unwrap(), t);

        let c = Tensor::<f64>::full([1, 1, 3, 3], 0.4);
        let r = bilinear_resize(&c, 7, 2).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));

        // src = (dst + 0.5) * 2 / 4 - 0.5 = -0.25, 0.25, 0.75, 1.25 -> clamp to [0, 1]
        let row = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let r = bilinear_resize(&row, 1, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);

        assert!(bilinear_resize(&row, 0, 4).is_err());
    }
}
