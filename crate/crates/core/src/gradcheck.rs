//! Finite-difference verification of every hand-written backward pass.
//!
//! Each check builds a seeded double-precision problem, reduces the kernel's
//! output to a scalar (a dot product with a fixed random tensor where the
//! kernel is not already scalar), and compares the analytic gradient with
//! central differences `(f(x + e) - f(x - e)) / 2e`, `e = 1e-5`. The error is
//! norm-wise: `|g - g_fd| / max(|g|, |g_fd|)` over the checked coordinates.
//! Large gradients are checked on a seeded coordinate subset.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::config::{Metric, SesimConfig};
use crate::contrast::{infonce, ContrastBatch, NegativeRef, NegativeSource};
use crate::corr::{corr_maps, corr_maps_backward, CorrMaps};
use crate::error::Result;
use crate::extractor::{ArchSpec, Extractor, Layer, TapSource, TapSpec};
use crate::loss::{fsesim_loss, multi_layer_loss};
use crate::ops::{
    conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, ConvSpec,
    Padding,
};
use crate::sampling::{SampleSet, SamplingMode};
use crate::seed;
use crate::selection::{SelectionLayers, StructureNet};
use crate::tensor::Tensor;
use crate::train::contrastive_objective;

pub const STEP: f64 = 1e-5;
/// Threshold for single kernels.
pub const KERNEL_TOL: f64 = 1e-6;
/// Threshold for composed paths (loss to features, pixels or selection weights).
pub const COMPOSED_TOL: f64 = 1e-5;
/// Coordinates checked per gradient at most.
pub const MAX_COORDS: usize = 384;

const C: usize = 8;
const HW: usize = 16;
const PATCH: usize = 4;
const N_S: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("gradcheck seed={} step={STEP:e}\n", self.seed);
        s += &format!("{:<26} {:>12} {:>10} {:>8}  status\n", "kernel", "max_rel_err", "threshold", "coords");
        for c in &self.checks {
            s += &format!(
                "{:<26} {:>12.3e} {:>10.0e} {:>8}  {}\n",
                c.name,
                c.max_rel_error,
                c.threshold,
                c.checked,
                if c.passed() { "pass" } else { "FAIL" }
            );
        }
        s += &format!("overall: {}\n", if self.passed() { "pass" } else { "FAIL" });
        s
    }
}

/// Norm-wise relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let (mut d, mut a, mut n) = (0.0, 0.0, 0.0);
    for (&x, &y) in analytic.iter().zip(numeric) {
        d += (x - y) * (x - y);
        a += x * x;
        n += y * y;
    }
    let scale = a.sqrt().max(n.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        d.sqrt() / scale
    }
}

/// Coordinates to check: all of them, or a seeded subset of `MAX_COORDS`.
fn coords(len: usize, seed: u64) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        let mut v = index::sample(&mut seed::rng(seed, "gradcheck-coords", len as u64), len, MAX_COORDS).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compare `analytic` with central differences of `f` around `x`.
pub fn check_gradient(
    x: &[f64],
    analytic: &[f64],
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    seed: u64,
) -> (f64, usize) {
    let idx = coords(x.len(), seed);
    let numeric: Vec<f64> = idx
        .par_iter()
        .map(|&i| {
            let mut p = x.to_vec();
            p[i] = x[i] + STEP;
            let hi = f(&p);
            p[i] = x[i] - STEP;
            let lo = f(&p);
            (hi - lo) / (2.0 * STEP)
        })
        .collect();
    let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    (relative_error(&picked, &numeric), idx.len())
}

struct Suite {
    seed: u64,
    checks: Vec<CheckResult>,
}

impl Suite {
    fn rng(&self, tag: &str) -> rand_chacha::ChaCha8Rng {
        seed::rng(self.seed, tag, 0)
    }

    /// Record the worst of several gradient comparisons under one name.
    fn record(&mut self, name: &str, threshold: f64, parts: Vec<(f64, usize)>) {
        let max = parts.iter().map(|p| p.0).fold(0.0, f64::max);
        let checked = parts.iter().map(|p| p.1).sum();
        self.checks.push(CheckResult { name: name.to_string(), max_rel_error: max, threshold, checked });
    }

    fn sub_seed(&self, tag: &str) -> u64 {
        seed::derive(self.seed, tag, 0)
    }
}

fn randn(shape: [usize; 4], std: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

fn with(shape: [usize; 4], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).expect("sized")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.dot(b).expect("same shape")
}

fn conv_check(s: &mut Suite) -> Result<()> {
    let mut rng = s.rng("conv");
    let mut parts = Vec::new();
    for (in_hw, stride, padding) in [(HW, 1, Padding::Zero), (HW + 1, 2, Padding::None)] {
        let x = randn([1, C, in_hw, in_hw], 1.0, &mut rng);
        let spec = ConvSpec::new(
            randn([C, C, 3, 3], 0.3, &mut rng),
            (0..C).map(|_| rng.random_range(-0.5..0.5)).collect(),
            stride,
            padding,
        )?;
        let r = randn(spec.output_shape(x.shape())?, 1.0, &mut rng);
        let g = conv2d_backward(&x, &spec, &r)?;
        let seed = s.sub_seed("conv-coords") ^ stride as u64;
        let fx = |p: &[f64]| dot(&conv2d_forward(&with(x.shape(), p), &spec).expect("conv"), &r);
        parts.push(check_gradient(x.data(), g.input.data(), &fx, seed));
        let fw = |p: &[f64]| {
            let sp = ConvSpec { weight: with(spec.weight.shape(), p), ..spec.clone() };
            dot(&conv2d_forward(&x, &sp).expect("conv"), &r)
        };
        parts.push(check_gradient(spec.weight.data(), g.weight.data(), &fw, seed));
        let fb = |p: &[f64]| {
            let sp = ConvSpec { bias: p.to_vec(), ..spec.clone() };
            dot(&conv2d_forward(&x, &sp).expect("conv"), &r)
        };
        parts.push(check_gradient(&spec.bias, &g.bias, &fb, seed));
    }
    s.record("conv2d", KERNEL_TOL, parts);
    Ok(())
}

fn relu_check(s: &mut Suite) -> Result<()> {
    let mut rng = s.rng("relu");
    // keep every input well away from the kink
    let x = randn([1, C, HW, HW], 1.0, &mut rng).map(|v| if v.abs() < 0.05 { v.signum() * 0.1 + v } else { v });
    let r = randn(x.shape(), 1.0, &mut rng);
    let g = relu_backward(&x, &r)?;
    let f = |p: &[f64]| dot(&relu_forward(&with(x.shape(), p)), &r);
    let part = check_gradient(x.data(), g.data(), &f, s.sub_seed("relu-coords"));
    s.record("relu", KERNEL_TOL, vec![part]);
    Ok(())
}

fn pool_check(s: &mut Suite) -> Result<()> {
    let mut rng = s.rng("pool");
    // a shuffled ramp: every window has a strict maximum with margin 1e-2
    let n = C * HW * HW;
    let perm = index::sample(&mut rng, n, n).into_vec();
    let x = with([1, C, HW, HW], &perm.iter().map(|&k| k as f64 * 1e-2).collect::<Vec<_>>());
    let (y, idx) = maxpool2_forward(&x)?;
    let r = randn(y.shape(), 1.0, &mut rng);
    let g = maxpool2_backward(&idx, &r)?;
    let f = |p: &[f64]| dot(&maxpool2_forward(&with(x.shape(), p)).expect("pool").0, &r);
    let part = check_gradient(x.data(), g.data(), &f, s.sub_seed("pool-coords"));
    s.record("maxpool2", KERNEL_TOL, vec![part]);
    Ok(())
}

fn tap_of(features: Tensor<f64>) -> Vec<crate::extractor::Tap<f64>> {
    vec![crate::extractor::Tap { name: "t".into(), features, stride: 1 }]
}

fn selection_check(s: &mut Suite) -> Result<()> {
    let mut rng = s.rng("selection");
    let feats = randn([1, C, HW, HW], 1.0, &mut rng);
    let sel = SelectionLayers::<f64>::random(&[("t".to_string(), C)], 0.5, s.sub_seed("selection-init"));
    let out = sel.apply(&tap_of(feats.clone()))?;
    let r = randn(out.taps()[0].features.shape(), 1.0, &mut rng);
    let g = sel.backward(&out, &[("t".to_string(), r.clone())])?;
    let eval = |sel: &SelectionLayers<f64>, f: &Tensor<f64>| {
        dot(&sel.apply(&tap_of(f.clone())).expect("apply").taps()[0].features, &r)
    };
    let seed = s.sub_seed("selection-coords");
    let mut parts = Vec::new();
    let fi = |p: &[f64]| eval(&sel, &with(feats.shape(), p));
    parts.push(check_gradient(feats.data(), g.inputs[0].1.data(), &fi, seed));
    let params: Vec<Vec<f64>> = sel.params().iter().map(|p| p.to_vec()).collect();
    for (k, p0) in params.iter().enumerate() {
        let fp = |p: &[f64]| {
            let mut s2 = sel.clone();
            s2.params_mut()[k].copy_from_slice(p);
            eval(&s2, &feats)
        };
        parts.push(check_gradient(p0, &g.params[k], &fp, seed));
    }
    s.record("selection_1x1", KERNEL_TOL, parts);
    Ok(())
}

fn pool_samples(seed: u64) -> Result<SampleSet> {
    SampleSet::draw(HW, HW, SamplingMode::PatchRandom, N_S, PATCH, seed)
}

fn corr_check(s: &mut Suite, normalize: bool) -> Result<()> {
    let tag = if normalize { "corr-norm" } else { "corr" };
    let mut rng = s.rng(tag);
    let feats = randn([1, C, HW, HW], 1.0, &mut rng);
    let samples = pool_samples(s.sub_seed(tag))?;
    let r: Vec<f64> = (0..N_S * PATCH * PATCH).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = corr_maps_backward(&feats, &samples, normalize, &r)?;
    let f = |p: &[f64]| {
        let m = corr_maps(&with(feats.shape(), p), &samples, normalize, "t").expect("maps");
        m.values.iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let part = check_gradient(feats.data(), g.data(), &f, s.sub_seed("corr-coords"));
    let name = if normalize { "corr_maps_normalized" } else { "corr_maps" };
    s.record(name, KERNEL_TOL, vec![part]);
    Ok(())
}

fn maps_with(values: &[f64], samples: &SampleSet) -> CorrMaps<f64> {
    CorrMaps { values: values.to_vec(), samples: samples.clone(), tap: "t".into(), normalized: false }
}

fn fsesim_check(s: &mut Suite, metric: Metric) -> Result<()> {
    let tag = match metric {
        Metric::L1 => "fsesim-l1",
        Metric::Cos => "fsesim-cos",
    };
    let mut rng = s.rng(tag);
    let samples = pool_samples(s.sub_seed(tag))?;
    let n = N_S * PATCH * PATCH;
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (sa, sb) = (maps_with(&a, &samples), maps_with(&b, &samples));
    let ml = fsesim_loss(&sa, &sb, metric)?;
    let seed = s.sub_seed("fsesim-coords");
    let fa = |p: &[f64]| fsesim_loss(&maps_with(p, &samples), &sb, metric).expect("loss").loss;
    let fb = |p: &[f64]| fsesim_loss(&sa, &maps_with(p, &samples), metric).expect("loss").loss;
    let parts = vec![check_gradient(&a, &ml.grad_x, &fa, seed), check_gradient(&b, &ml.grad_y, &fb, seed)];
    let name = match metric {
        Metric::L1 => "fsesim_l1",
        Metric::Cos => "fsesim_cos",
    };
    s.record(name, KERNEL_TOL, parts);
    Ok(())
}

fn random_batch(k: usize, np: usize, rng: &mut impl Rng) -> ContrastBatch<f64> {
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    ContrastBatch {
        n_points: np,
        k,
        queries: v(N_S * np),
        positives: v(N_S * np),
        negatives: v(N_S * k * np),
        provenance: vec![NegativeRef { source: NegativeSource::External, index: 0 }; N_S * k],
    }
}

fn infonce_check(s: &mut Suite) -> Result<()> {
    let mut parts = Vec::new();
    let tau = SesimConfig::default().tau;
    for k in [1usize, 7, 255] {
        let mut rng = seed::rng(s.seed, "infonce", k as u64);
        let b = random_batch(k, PATCH * PATCH, &mut rng);
        let r = infonce(&b, tau)?;
        let seed = s.sub_seed("infonce-coords") ^ k as u64;
        let fq = |p: &[f64]| infonce(&ContrastBatch { queries: p.to_vec(), ..b.clone() }, tau).expect("nce").loss;
        let fp = |p: &[f64]| infonce(&ContrastBatch { positives: p.to_vec(), ..b.clone() }, tau).expect("nce").loss;
        let fnn = |p: &[f64]| infonce(&ContrastBatch { negatives: p.to_vec(), ..b.clone() }, tau).expect("nce").loss;
        parts.push(check_gradient(&b.queries, &r.grads.queries, &fq, seed));
        parts.push(check_gradient(&b.positives, &r.grads.positives, &fp, seed));
        parts.push(check_gradient(&b.negatives, &r.grads.negatives, &fnn, seed));
    }
    s.record("infonce", KERNEL_TOL, parts);
    Ok(())
}

fn sesim_cfg(metric: Metric, seed: u64) -> SesimConfig {
    SesimConfig {
        taps: vec!["t".into()],
        n_samples: N_S,
        patch: PATCH,
        sampling: SamplingMode::PatchRandom,
        metric,
        k_negatives: 7,
        seed,
        ..SesimConfig::default()
    }
}

fn loss_to_features_check(s: &mut Suite) -> Result<()> {
    let mut rng = s.rng("loss-features");
    let fx = randn([1, C, HW, HW], 1.0, &mut rng);
    let fy = randn([1, C, HW, HW], 1.0, &mut rng);
    let mut parts = Vec::new();
    for metric in [Metric::L1, Metric::Cos] {
        for normalize in [false, true] {
            let cfg = SesimConfig { normalize_features: normalize, ..sesim_cfg(metric, s.sub_seed("loss-features")) };
            let ml = multi_layer_loss(&tap_of(fx.clone()), &tap_of(fy.clone()), &cfg)?;
            let f = |p: &[f64]| {
                multi_layer_loss(&tap_of(with(fx.shape(), p)), &tap_of(fy.clone()), &cfg).expect("loss").loss
            };
            parts.push(check_gradient(fx.data(), ml.taps[0].grad_x.data(), &f, s.sub_seed("loss-features-coords")));
        }
    }
    s.record("fsesim_to_features", COMPOSED_TOL, parts);
    Ok(())
}

/// Two convolutions with a pool between them, tap `t` at stride 2 with `C`
/// channels; a 32x32 input gives the 16x16 tap.
pub fn check_arch() -> ArchSpec {
    let conv = |in_ch, out_ch| Layer::Conv { in_ch, out_ch, kernel: 3, stride: 1, padding: Padding::Zero };
    ArchSpec {
        input_channels: 3,
        layers: vec![conv(3, C), Layer::Relu, Layer::Pool, conv(C, C), Layer::Relu],
        taps: vec![TapSpec { name: "t".into(), layer: 4 }],
    }
}

fn end_to_end_check(s: &mut Suite) -> Result<()> {
    let ext = Extractor::<f64>::seeded(check_arch(), s.sub_seed("e2e-trunk"))?;
    let sel = SelectionLayers::<f64>::random(&[("t".to_string(), C)], 0.3, s.sub_seed("e2e-selection"));
    let mut rng = s.rng("e2e");
    let x = Tensor::<f64>::uniform([1, 3, 2 * HW, 2 * HW], 0.0, 1.0, &mut rng);
    let y = Tensor::<f64>::uniform([1, 3, 2 * HW, 2 * HW], 0.0, 1.0, &mut rng);
    let mut parts = Vec::new();
    for net in [StructureNet::fixed(&ext), StructureNet::learned(&ext, &sel)] {
        for metric in [Metric::L1, Metric::Cos] {
            let cfg = sesim_cfg(metric, s.sub_seed("e2e-samples"));
            let fy = net.features(&y)?;
            let fwd = net.forward(&x)?;
            let ml = multi_layer_loss(&fwd, &fy, &cfg)?;
            let g = net.backward(&fwd, &ml.grads_x())?;
            let f = |p: &[f64]| {
                let fx = net.features(&with(x.shape(), p)).expect("features");
                multi_layer_loss(&fx, &fy, &cfg).expect("loss").loss
            };
            parts.push(check_gradient(x.data(), g.data(), &f, s.sub_seed("e2e-coords")));
        }
    }
    s.record("loss_to_pixels", COMPOSED_TOL, parts);
    Ok(())
}

fn contrastive_check(s: &mut Suite) -> Result<()> {
    let mut rng = s.rng("contrastive");
    let x = tap_of(randn([1, C, HW, HW], 1.0, &mut rng));
    let xa = tap_of(randn([1, C, HW, HW], 1.0, &mut rng));
    let y = tap_of(randn([1, C, HW, HW], 1.0, &mut rng));
    let sel = SelectionLayers::<f64>::random(&[("t".to_string(), C)], 0.3, s.sub_seed("contrastive-init"));
    let cfg = sesim_cfg(Metric::Cos, 0);
    let pools = vec![pool_samples(s.sub_seed("contrastive-pool"))?];
    let neg_seed = s.sub_seed("contrastive-negatives");
    let r = contrastive_objective(&sel, &x, &xa, &y, &pools, &cfg, neg_seed)?;
    let seed = s.sub_seed("contrastive-coords");
    let params: Vec<Vec<f64>> = sel.params().iter().map(|p| p.to_vec()).collect();
    let mut parts = Vec::new();
    for (k, p0) in params.iter().enumerate() {
        let f = |p: &[f64]| {
            let mut s2 = sel.clone();
            s2.params_mut()[k].copy_from_slice(p);
            contrastive_objective(&s2, &x, &xa, &y, &pools, &cfg, neg_seed).expect("objective").loss
        };
        parts.push(check_gradient(p0, &r.grads[k], &f, seed));
    }
    s.record("infonce_to_selection", COMPOSED_TOL, parts);
    Ok(())
}

/// Run every check for `seed`. The report is a deterministic function of the seed.
pub fn gradcheck_suite(seed: u64) -> Result<GradReport> {
    let mut s = Suite { seed, checks: Vec::new() };
    conv_check(&mut s)?;
    relu_check(&mut s)?;
    pool_check(&mut s)?;
    selection_check(&mut s)?;
    corr_check(&mut s, false)?;
    corr_check(&mut s, true)?;
    fsesim_check(&mut s, Metric::L1)?;
    fsesim_check(&mut s, Metric::Cos)?;
    infonce_check(&mut s)?;
    loss_to_features_check(&mut s)?;
    end_to_end_check(&mut s)?;
    contrastive_check(&mut s)?;
    Ok(GradReport { seed, checks: s.checks })
}
