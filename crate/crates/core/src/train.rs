//! Contrastive training of the selection layers on a frozen trunk.

use rand::Rng;
use rayon::prelude::*;

use crate::adam::{adam_step, OptState};
use crate::augment::{augment_draw, AugmentSpec};
use crate::config::{RunConfig, SesimConfig};
use crate::contrast::{batch_from_maps, infonce, tap_maps};
use crate::corr::corr_maps_backward;
use crate::error::{Error, Result};
use crate::extractor::{Extractor, Tap, TapSource};
use crate::sampling::SampleSet;
use crate::seed;
use crate::selection::SelectionLayers;
use crate::synth::{synth_dataset, SynthSpec};
use crate::tensor::{Real, Tensor};

/// Contrastive loss of one `(x, x_aug, y)` triplet and its gradient with
/// respect to every selection parameter (ordered as [`SelectionLayers::params`]).
#[derive(Debug, Clone)]
pub struct ContrastStep<T> {
    /// Mean over the selection's taps of the per-tap infoNCE loss.
    pub loss: f64,
    /// Mean over taps of the top-1 positive retrieval rate.
    pub retrieval: f64,
    pub grads: Vec<Vec<T>>,
}

/// `pools[k]` is the shared query pool for the `k`-th selection tap; negative
/// draws for tap `k` use `seed::derive(seed, "negatives", k)`.
pub fn contrastive_objective<T: Real>(
    sel: &SelectionLayers<T>,
    x: &impl TapSource<T>,
    x_aug: &impl TapSource<T>,
    y: &impl TapSource<T>,
    pools: &[SampleSet],
    cfg: &SesimConfig,
    seed: u64,
) -> Result<ContrastStep<T>> {
    let names = sel.tap_names();
    if pools.len() != names.len() {
        return Err(Error::Config(format!("{} sample pools for {} taps", pools.len(), names.len())));
    }
    let (sx, sa, sy) = (sel.apply(x)?, sel.apply(x_aug)?, sel.apply(y)?);
    let (internal, external) = cfg.negative_split();
    let w = 1.0 / names.len() as f64;
    let (mut loss, mut retrieval) = (0.0, 0.0);
    let mut feat_grads: [Vec<(String, Tensor<T>)>; 3] = Default::default();
    for (k, (name, pool)) in names.iter().zip(pools).enumerate() {
        let [mx, ma, my] = tap_maps(&sx, &sa, &sy, name, pool, cfg.normalize_features)?;
        let batch = batch_from_maps(&mx, &ma, &my, internal, external, seed::derive(seed, "negatives", k as u64))?;
        let r = infonce(&batch, cfg.tau)?;
        loss += w * r.loss;
        retrieval += w * r.retrieval;
        let scattered = batch.scatter(&r.grads, pool.n_samples());
        for ((stack, g), out) in [&sx, &sa, &sy].into_iter().zip(scattered).zip(feat_grads.iter_mut()) {
            let g: Vec<T> = g.into_iter().map(|v| v * T::from_f64(w)).collect();
            let f = &stack.tap(name)?.features;
            out.push((name.clone(), corr_maps_backward(f, pool, cfg.normalize_features, &g)?));
        }
    }
    let mut grads: Vec<Vec<T>> = sel.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
    for (stack, g) in [&sx, &sa, &sy].into_iter().zip(&feat_grads) {
        let sg = sel.backward(stack, g)?;
        for (acc, part) in grads.iter_mut().zip(sg.params) {
            acc.iter_mut().zip(part).for_each(|(a, p)| *a += p);
        }
    }
    Ok(ContrastStep { loss, retrieval, grads })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub retrieval_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub selection: SelectionLayers<f32>,
    pub log: Vec<TrainRecord>,
    pub heldout_loss: f64,
    pub heldout_retrieval: f64,
}

/// Synthetic training and held-out corpora (both texture domains) drawn
/// from disjoint seed streams of `cfg.seed`.
pub fn training_corpora(cfg: &RunConfig) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let train = SynthSpec::new(&cfg.train.corpus, seed::derive(cfg.seed, "train-corpus", 0));
    let heldout = SynthSpec {
        count: cfg.train.heldout_count,
        ..SynthSpec::new(&cfg.train.corpus, seed::derive(cfg.seed, "heldout-corpus", 0))
    };
    let own = |s: &SynthSpec| -> Result<Vec<Tensor<f32>>> {
        Ok(synth_dataset(s)?.images().into_iter().cloned().collect())
    };
    Ok((own(&train)?, own(&heldout)?))
}

fn trunk_taps(extractor: &Extractor<f32>, image: &Tensor<f32>) -> Result<Vec<Tap<f32>>> {
    Ok(extractor.extract(image)?.into_taps())
}

fn pools_for(
    sel: &SelectionLayers<f32>,
    taps: &impl TapSource<f32>,
    cfg: &RunConfig,
    tag: &str,
    index: u64,
) -> Result<Vec<SampleSet>> {
    sel.tap_names()
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let f = &taps.tap(name)?.features;
            let s = seed::derive(cfg.seed, tag, index * 64 + k as u64);
            SampleSet::draw(f.height(), f.width(), cfg.sesim.sampling, cfg.train.n_samples, cfg.train.patch, s)
        })
        .collect()
}

/// Indices `(x, y)` with `x != y`, uniformly from `0..n`.
fn pick_pair<R: Rng>(n: usize, rng: &mut R) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let j = (i + rng.random_range(1..n)) % n;
    (i, j)
}

/// Mean loss and retrieval over `cfg.train.eval_triplets` seeded triplets
/// from `images`. Read-only in `sel`.
pub fn evaluate(
    sel: &SelectionLayers<f32>,
    images: &[Tensor<f32>],
    extractor: &Extractor<f32>,
    cfg: &RunConfig,
) -> Result<(f64, f64)> {
    if images.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    let stacks: Vec<Vec<Tap<f32>>> = images.par_iter().map(|im| trunk_taps(extractor, im)).collect::<Result<_>>()?;
    let aug = AugmentSpec { seed: seed::derive(cfg.augment.seed, "eval-augment", 0), ..cfg.augment.clone() };
    let n = cfg.train.eval_triplets.max(1);
    let results: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(cfg.seed, "eval-pick", t as u64);
            let (i, j) = pick_pair(images.len(), &mut rng);
            let xa = trunk_taps(extractor, &augment_draw(&images[i], &aug, t as u64)?)?;
            let pools = pools_for(sel, &stacks[i], cfg, "eval-pool", t as u64)?;
            let r = contrastive_objective(
                sel,
                &stacks[i],
                &xa,
                &stacks[j],
                &pools,
                &cfg.sesim,
                seed::derive(cfg.seed, "eval-negatives", t as u64),
            )?;
            Ok((r.loss, r.retrieval))
        })
        .collect::<Result<_>>()?;
    let m = |f: fn(&(f64, f64)) -> f64| results.iter().map(f).sum::<f64>() / n as f64;
    Ok((m(|r| r.0), m(|r| r.1)))
}

/// Adam on the selection layers only; the trunk is borrowed immutably.
/// Each step draws a training pair `(x, y)`, a fresh augmentation of `x`
/// and fresh query pools, all from streams of `cfg.seed`. The log holds
/// the loss and retrieval measured before each update.
pub fn train_structure_net(
    corpus: &[Tensor<f32>],
    heldout: &[Tensor<f32>],
    extractor: &Extractor<f32>,
    cfg: &RunConfig,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    if corpus.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    cfg.validate()?;
    let stacks: Vec<Vec<Tap<f32>>> = corpus.par_iter().map(|im| trunk_taps(extractor, im)).collect::<Result<_>>()?;
    let taps: Vec<(String, usize)> = cfg
        .train
        .taps
        .iter()
        .map(|t| Ok((t.clone(), stacks[0].tap(t)?.features.channels())))
        .collect::<Result<_>>()?;
    let mut sel = SelectionLayers::random(&taps, cfg.train.init_std, seed::derive(cfg.seed, "selection", 0));
    let sizes: Vec<usize> = sel.params().iter().map(|p| p.len()).collect();
    let mut opt = OptState::new(cfg.train.optimizer.clone(), &sizes);
    let mut log = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let mut rng = seed::rng(cfg.seed, "train-pick", step as u64);
        let (i, j) = pick_pair(corpus.len(), &mut rng);
        let xa = trunk_taps(extractor, &augment_draw(&corpus[i], &cfg.augment, step as u64)?)?;
        let pools = pools_for(&sel, &stacks[i], cfg, "train-pool", step as u64)?;
        let r = contrastive_objective(
            &sel,
            &stacks[i],
            &xa,
            &stacks[j],
            &pools,
            &cfg.sesim,
            seed::derive(cfg.seed, "train-negatives", step as u64),
        )?;
        let grads: Vec<&[f32]> = r.grads.iter().map(Vec::as_slice).collect();
        adam_step(&mut sel.params_mut(), &grads, &mut opt)?;
        let rec = TrainRecord { step, loss: r.loss, retrieval_rate: r.retrieval };
        on_step(&rec);
        log.push(rec);
    }
    let (heldout_loss, heldout_retrieval) = evaluate(&sel, heldout, extractor, cfg)?;
    Ok(TrainOutcome { selection: sel, log, heldout_loss, heldout_retrieval })
}

/// Block length used to smooth the training loss curve.
pub const SMOOTHING_BLOCK: usize = 200;

/// Means of consecutive non-overlapping blocks of `block` losses; a trailing
/// partial block is dropped.
pub fn block_means(log: &[TrainRecord], block: usize) -> Vec<f64> {
    log.chunks_exact(block.max(1)).map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64).collect()
}

pub fn is_non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}
