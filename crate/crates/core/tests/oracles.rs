//! Independent reference implementations checked against the library.

mod common;

use common::{randn, rel_diff, tap};
use sesim::config::{Metric, SesimConfig};
use sesim::contrast::{batch_from_maps, infonce, ContrastBatch, NegativeRef, NegativeSource};
use sesim::corr::{corr_maps, CorrMaps};
use sesim::extractor::{ArchSpec, Extractor, Layer, TapSource, TapSpec};
use sesim::gradcheck::{check_gradient, COMPOSED_TOL, KERNEL_TOL};
use sesim::loss::{fsesim_loss, multi_layer_loss, row_losses, tap_samples};
use sesim::ops::{conv2d_forward, ConvSpec, Padding};
use sesim::sampling::{SampleSet, SamplingMode};
use sesim::selection::StructureNet;
use sesim::Tensor;

fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape();
    let [oc, ic, kh, kw] = w.shape();
    assert_eq!(c, ic);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, oc, oh, ow]);
    for bn in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b[o];
                    for i in 0..ic {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let r = (y * stride + ky) as isize - pad as isize;
                                let q = (xx * stride + kx) as isize - pad as isize;
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                    s += w.at(o, i, ky, kx) * x.at(bn, i, r as usize, q as usize);
                                }
                            }
                        }
                    }
                    *out.at_mut(bn, o, y, xx) = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let mut seed = 0;
    for k in [1, 3, 5] {
        for stride in [1, 2, 3] {
            for padding in [Padding::Zero, Padding::None] {
                seed += 1;
                let x = randn([2, 3, 11, 9], seed);
                let w = randn([4, 3, k, k], seed + 100);
                let b = randn([1, 1, 1, 4], seed + 200).into_vec();
                let spec = ConvSpec::new(w.clone(), b.clone(), stride, padding).unwrap();
                let got = conv2d_forward(&x, &spec).unwrap();
                let want = conv_direct(&x, &w, &b, stride, padding.amount(k));
                assert_eq!(got.shape(), want.shape());
                let err = rel_diff(got.data(), want.data());
                assert!(err <= 1e-12, "k={k} stride={stride} {padding:?}: {err:e}");
            }
        }
    }
}

#[test]
fn linear_substack_doubles_with_input() {
    let conv = |i, o| Layer::Conv { in_ch: i, out_ch: o, kernel: 3, stride: 1, padding: Padding::Zero };
    // two convolutions with no relu between them; the tap relu follows
    let arch = ArchSpec {
        input_channels: 3,
        layers: vec![conv(3, 6), conv(6, 5), Layer::Relu],
        taps: vec![TapSpec { name: "t".into(), layer: 2 }],
    };
    let ex = Extractor::<f64>::seeded(arch, 4).unwrap();
    let x = randn([1, 3, 10, 12], 9);
    let a = ex.extract(&x).unwrap();
    let b = ex.extract(&x.scale(2.0)).unwrap();
    let (pa, pb) = (a.activation(2).unwrap(), b.activation(2).unwrap());
    let doubled = pa.scale(2.0);
    assert!(rel_diff(pb.data(), doubled.data()) <= 1e-14);
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
}

fn random_batch(n: usize, k: usize, np: usize, seed: u64) -> ContrastBatch<f64> {
    ContrastBatch {
        n_points: np,
        k,
        queries: randn([1, 1, n, np], seed).into_vec(),
        positives: randn([1, 1, n, np], seed + 1).into_vec(),
        negatives: randn([1, n, k, np], seed + 2).into_vec(),
        provenance: vec![NegativeRef { source: NegativeSource::External, index: 0 }; n * k],
    }
}

/// Plain softmax cross-entropy, no stabilization.
fn brute_infonce(b: &ContrastBatch<f64>, tau: f64) -> (f64, f64) {
    let n = b.n_queries();
    let (mut loss, mut hits) = (0.0, 0);
    for i in 0..n {
        let q = b.query(i);
        let pos = cos(q, b.positive(i));
        let negs: Vec<f64> = (0..b.k).map(|k| cos(q, b.negative(i, k))).collect();
        let denom = (pos / tau).exp() + negs.iter().map(|s| (s / tau).exp()).sum::<f64>();
        loss += -((pos / tau).exp() / denom).ln();
        if negs.iter().all(|&s| pos > s) {
            hits += 1;
        }
    }
    (loss / n as f64, hits as f64 / n as f64)
}

#[test]
fn infonce_matches_brute_force_softmax() {
    for k in [1, 7, 255] {
        for tau in [0.07, 0.5, 1.0] {
            let b = random_batch(12, k, 16, k as u64);
            let got = infonce(&b, tau).unwrap();
            let (loss, retrieval) = brute_infonce(&b, tau);
            assert!((got.loss - loss).abs() <= 1e-10, "K={k} tau={tau}: {} vs {loss}", got.loss);
            assert_eq!(got.retrieval, retrieval);
        }
    }
}

#[test]
fn infonce_gradients_match_finite_differences() {
    for k in [1, 7, 255] {
        let b = random_batch(4, k, 9, 40 + k as u64);
        let r = infonce(&b, 0.07).unwrap();
        let parts: [(&[f64], &[f64], usize); 3] =
            [(&b.queries, &r.grads.queries, 0), (&b.positives, &r.grads.positives, 1), (&b.negatives, &r.grads.negatives, 2)];
        for (x, g, which) in parts {
            let f = |p: &[f64]| {
                let mut b2 = b.clone();
                match which {
                    0 => b2.queries.copy_from_slice(p),
                    1 => b2.positives.copy_from_slice(p),
                    _ => b2.negatives.copy_from_slice(p),
                }
                infonce(&b2, 0.07).unwrap().loss
            };
            let (err, _) = check_gradient(x, g, &f, 1);
            assert!(err <= COMPOSED_TOL, "K={k} part {which}: {err:e}");
        }
    }
}

#[test]
fn uniform_similarities_give_log_k_plus_one() {
    for k in [1usize, 7, 255] {
        let row = randn([1, 1, 1, 25], k as u64).into_vec();
        let n = 3;
        let b = ContrastBatch {
            n_points: 25,
            k,
            queries: row.repeat(n),
            positives: row.repeat(n),
            negatives: row.repeat(n * k),
            provenance: vec![NegativeRef { source: NegativeSource::Internal, index: 0 }; n * k],
        };
        let loss = infonce(&b, 0.07).unwrap().loss;
        assert!((loss - ((k + 1) as f64).ln()).abs() <= 1e-9, "K={k}: {loss}");
    }
    assert!((256f64.ln() - 5.545177).abs() < 1e-6);
}

fn maps_for(features: &Tensor<f64>, samples: &SampleSet) -> CorrMaps<f64> {
    corr_maps(features, samples, false, "t").unwrap()
}

#[test]
fn negative_split_tally_and_positive_alignment() {
    let fx = randn([1, 4, 40, 40], 1);
    let fy = randn([1, 4, 40, 40], 2);
    let samples = SampleSet::draw(40, 40, SamplingMode::PatchRandom, 300, 3, 5).unwrap();
    let (sx, sy) = (maps_for(&fx, &samples), maps_for(&fy, &samples));
    for k in [1usize, 7, 255] {
        let cfg = SesimConfig { k_negatives: k, ..Default::default() };
        let (internal, external) = cfg.negative_split();
        assert_eq!((internal, external), (k.div_ceil(2), k / 2));
        let b = batch_from_maps(&sx, &sx, &sy, internal, external, 3).unwrap();
        assert_eq!(b.negatives.len(), samples.n_samples() * k * b.n_points);
        for i in 0..samples.n_samples() {
            let refs = &b.provenance[i * k..(i + 1) * k];
            let ints: Vec<usize> =
                refs.iter().filter(|r| r.source == NegativeSource::Internal).map(|r| r.index).collect();
            assert_eq!(ints.len(), internal);
            assert_eq!(refs.len() - ints.len(), external);
            assert!(ints.iter().all(|&j| samples.query(j) != samples.query(i)));
            // with x_aug = x the positive is the query row itself
            assert_eq!(b.positive(i), b.query(i));
        }
    }
}

fn brute_fsesim(sx: &CorrMaps<f64>, sy: &CorrMaps<f64>, metric: Metric) -> f64 {
    let (ns, np) = (sx.n_samples(), sx.n_points());
    let mut total = 0.0;
    for i in 0..ns {
        let (mut d1, mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..np {
            let (a, b) = (sx.values[i * np + j], sy.values[i * np + j]);
            d1 += (a - b).abs();
            ab += a * b;
            aa += a * a;
            bb += b * b;
        }
        total += match metric {
            Metric::L1 => d1 / np as f64,
            Metric::Cos => 1.0 - ab / (aa * bb).sqrt(),
        };
    }
    total / ns as f64
}

#[test]
fn fsesim_matches_scalar_loops_and_finite_differences() {
    let fx = randn([1, 6, 12, 12], 11);
    let fy = randn([1, 6, 12, 12], 12);
    for mode in [SamplingMode::PatchRandom, SamplingMode::PatchGrid, SamplingMode::ScatteredRandom] {
        let samples = SampleSet::draw(12, 12, mode, 10, 4, 3).unwrap();
        let (sx, sy) = (maps_for(&fx, &samples), maps_for(&fy, &samples));
        for metric in [Metric::L1, Metric::Cos] {
            let ml = fsesim_loss(&sx, &sy, metric).unwrap();
            let want = brute_fsesim(&sx, &sy, metric);
            assert!((ml.loss - want).abs() <= 1e-12 * want.abs().max(1.0), "{mode:?} {metric:?}");
            let f = |p: &[f64]| {
                let mut s = sx.clone();
                s.values.copy_from_slice(p);
                fsesim_loss(&s, &sy, metric).unwrap().loss
            };
            let (err, _) = check_gradient(&sx.values, &ml.grad_x, &f, 2);
            assert!(err <= KERNEL_TOL, "{mode:?} {metric:?}: {err:e}");
        }
    }
}

#[test]
fn multi_layer_loss_is_mean_of_tap_losses() {
    let ax = randn([1, 5, 14, 14], 21);
    let ay = randn([1, 5, 14, 14], 22);
    let bx = randn([1, 7, 9, 9], 23);
    let by = randn([1, 7, 9, 9], 24);
    let stack = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut v = tap("a", a.clone());
        v.extend(tap("b", b.clone()));
        v
    };
    let (x, y) = (stack(&ax, &bx), stack(&ay, &by));
    for metric in [Metric::L1, Metric::Cos] {
        let cfg = SesimConfig { taps: vec!["a".into(), "b".into()], n_samples: 12, patch: 5, metric, ..Default::default() };
        let per_tap: Vec<f64> = [(&ax, &ay), (&bx, &by)]
            .iter()
            .enumerate()
            .map(|(k, (fx, fy))| {
                let s = tap_samples(&cfg, k, fx.height(), fx.width()).unwrap();
                brute_fsesim(&maps_for(fx, &s), &maps_for(fy, &s), metric)
            })
            .collect();
        let ml = multi_layer_loss(&x, &y, &cfg).unwrap();
        assert!((ml.loss - (per_tap[0] + per_tap[1]) / 2.0).abs() <= 1e-12);

        let single = SesimConfig { taps: vec!["a".into()], ..cfg.clone() };
        let s = tap_samples(&single, 0, 14, 14).unwrap();
        let direct = fsesim_loss(&maps_for(&ax, &s), &maps_for(&ay, &s), metric).unwrap().loss;
        assert_eq!(multi_layer_loss(&x, &y, &single).unwrap().loss, direct);
        assert_eq!(multi_layer_loss(&x, &x, &cfg).unwrap().loss, 0.0);
    }
}

#[test]
fn error_grid_rows_are_per_query_losses() {
    let ex = Extractor::<f64>::seeded(ArchSpec::tiny(6, Padding::Zero), 2).unwrap();
    let net = StructureNet::fixed(&ex);
    let x = common::uniform([1, 3, 32, 32], 5);
    let y = common::uniform([1, 3, 32, 32], 6);
    for metric in [Metric::L1, Metric::Cos] {
        let cfg = SesimConfig { taps: vec!["tap".into()], n_samples: 16, patch: 5, metric, ..Default::default() };
        let grid = sesim::analysis::error_grid(&x, &y, &cfg, &net).unwrap();
        let (fx, fy) = (net.features(&x).unwrap(), net.features(&y).unwrap());
        let (tx, ty) = (&fx.tap("tap").unwrap().features, &fy.tap("tap").unwrap().features);
        let s = SampleSet::at_queries(16, 16, 5, grid.tap_coords.clone()).unwrap();
        let rows = row_losses(&maps_for(tx, &s), &maps_for(ty, &s), metric).unwrap();
        assert_eq!(grid.values, rows);
        assert_eq!((grid.rows, grid.cols), (4, 4));
        assert!(grid.values.iter().all(|&v| v >= 0.0));
        let same = sesim::analysis::error_grid(&x, &x, &cfg, &net).unwrap();
        assert!(same.values.iter().all(|&v| v == 0.0));
    }
}
