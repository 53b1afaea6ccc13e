//! Structure-preserving stylization by direct pixel optimization.
//!
//! The output starts at the content image and minimizes
//! `lambda * structure(content, out) + gram(out, style)`, where the
//! structure term is the multi-layer self-similarity loss and the appearance
//! term compares channel Gram matrices `F F^T / (H W)` at each tap by mean
//! squared difference, averaged over taps. Pixels are updated with Adam and
//! clamped to `[0, 1]` after every step.

use crate::adam::{adam_step, OptState};
use crate::config::{AdamConfig, SesimConfig, StylizeConfig};
use crate::error::{Error, Result};
use crate::extractor::TapSource;
use crate::loss::multi_layer_loss;
use crate::selection::StructureNet;
use crate::tensor::{Real, Tensor};

/// `F F^T / (H W)` for a `(1, C, H, W)` feature map, row-major `C x C`.
pub fn gram<T: Real>(features: &Tensor<T>) -> Vec<f64> {
    let [_, c, h, w] = features.shape();
    let hw = h * w;
    let f = features.data();
    let mut g = vec![0.0; c * c];
    for a in 0..c {
        for b in a..c {
            let s: f64 = (0..hw).map(|k| f[a * hw + k].to_f64() * f[b * hw + k].to_f64()).sum::<f64>() / hw as f64;
            g[a * c + b] = s;
            g[b * c + a] = s;
        }
    }
    g
}

/// Mean over taps of the mean squared Gram difference, with the gradient
/// with respect to `x`'s tap features.
pub fn gram_style<T: Real>(
    x: &impl TapSource<T>,
    style: &impl TapSource<T>,
    taps: &[String],
) -> Result<(f64, Vec<(String, Tensor<T>)>)> {
    let wt = 1.0 / taps.len().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(taps.len());
    for name in taps {
        let fx = &x.tap(name)?.features;
        let fs = &style.tap(name)?.features;
        if fx.channels() != fs.channels() {
            return Err(Error::ChannelMismatch { expected: fs.channels(), got: fx.channels() });
        }
        let [_, c, h, w] = fx.shape();
        let hw = h * w;
        let diff: Vec<f64> = gram(fx).iter().zip(gram(fs)).map(|(a, b)| a - b).collect();
        total += wt * diff.iter().map(|d| d * d).sum::<f64>() / (c * c) as f64;
        // dL/dF = 2 * (2 / C^2) * D F / (H W) with D symmetric
        let scale = wt * 4.0 / ((c * c) as f64 * hw as f64);
        let f = fx.data();
        let mut g = Tensor::zeros(fx.shape());
        let gd = g.data_mut();
        for a in 0..c {
            for b in 0..c {
                let d = diff[a * c + b];
                if d == 0.0 {
                    continue;
                }
                for k in 0..hw {
                    gd[a * hw + k] += T::from_f64(scale * d * f[b * hw + k].to_f64());
                }
            }
        }
        grads.push((name.clone(), g));
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StylizeRecord {
    pub step: usize,
    pub total: f64,
    pub content: f64,
    pub style: f64,
}

#[derive(Debug, Clone)]
pub struct StylizeOutcome<T> {
    /// Image after the last step.
    pub image: Tensor<T>,
    /// Image with the lowest total loss seen (including the start).
    pub best_image: Tensor<T>,
    /// Losses at the start and after each step: `steps + 1` records.
    pub trace: Vec<StylizeRecord>,
}

impl<T> StylizeOutcome<T> {
    pub fn best_total(&self) -> f64 {
        self.trace.iter().map(|r| r.total).fold(f64::INFINITY, f64::min)
    }

    pub fn initial_total(&self) -> f64 {
        self.trace[0].total
    }
}

struct Eval<T> {
    rec: (f64, f64, f64),
    grad: Tensor<T>,
}

fn evaluate<T: Real>(
    out: &Tensor<T>,
    content: &impl TapSource<T>,
    style: &impl TapSource<T>,
    net: &StructureNet<'_, T>,
    cfg: &SesimConfig,
) -> Result<Eval<T>> {
    let fwd = net.forward(out)?;
    let ml = multi_layer_loss(content, &fwd, cfg)?;
    let (style_loss, mut grads) = gram_style(&fwd, style, &cfg.taps)?;
    let lambda = T::from_f64(cfg.lambda);
    for (name, g) in ml.grads_y() {
        match grads.iter_mut().find(|(n, _)| *n == name) {
            Some((_, acc)) => acc.add_assign(&g.scale(lambda))?,
            None => grads.push((name, g.scale(lambda))),
        }
    }
    let grad = net.backward(&fwd, &grads)?;
    let content_loss = ml.loss;
    Ok(Eval { rec: (cfg.lambda * content_loss + style_loss, content_loss, style_loss), grad })
}

/// Optimize pixels for `stylize.steps` Adam steps at `stylize.lr`.
pub fn stylize<T: Real>(
    content: &Tensor<T>,
    style: &Tensor<T>,
    net: &StructureNet<'_, T>,
    cfg: &SesimConfig,
    stylize: &StylizeConfig,
) -> Result<StylizeOutcome<T>> {
    if stylize.steps == 0 {
        return Err(Error::Config("stylize needs at least one step".into()));
    }
    let fc = net.features(content)?;
    let fs = net.features(style)?;
    let mut out = content.clone();
    let mut opt = OptState::new(AdamConfig { lr: stylize.lr, ..AdamConfig::default() }, &[out.len()]);
    let mut trace = Vec::with_capacity(stylize.steps + 1);
    let mut best = (f64::INFINITY, out.clone());
    for step in 0..=stylize.steps {
        let e = evaluate(&out, &fc, &fs, net, cfg)?;
        let (total, c, s) = e.rec;
        trace.push(StylizeRecord { step, total, content: c, style: s });
        if total < best.0 {
            best = (total, out.clone());
        }
        if step == stylize.steps {
            break;
        }
        adam_step(&mut [out.data_mut()], &[e.grad.data()], &mut opt)?;
        out.data_mut().iter_mut().for_each(|v| *v = T::from_f64(v.to_f64().clamp(0.0, 1.0)));
    }
    Ok(StylizeOutcome { image: out, best_image: best.1, trace })
}
