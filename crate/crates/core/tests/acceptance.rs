//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with `cargo test -p varprop --test acceptance -- --nocapture` to see
//! the per-criterion lines and timings.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use varprop::activations::{relu_moments_scalar, sigmoid, sigmoid_moments_scalar};
use varprop::audio::{
    segment_recording, synthetic_corpus, Annotation, GeneratorConfig, RecordingAnnotations, Sample,
};
use varprop::gaussian::GaussianTensor;
use varprop::layers::{RhoParam, VariationalConv2D, VariationalDense};
use varprop::losses::{smoothing_alpha, LossMode};
use varprop::metrics::{self, brute, ScoredSet};
use varprop::network::{ArchitectureConfig, PoolKind, SeBlockParams, SeResNet};
use varprop::oracle::{
    chain_network_reports, chain_se_block_reports, gauss_expectation, mc_probe, PointNet,
};
use varprop::tensor::{Padding, Tensor};
use varprop::train::{batch_step_loss, evaluate, gradcheck, train, Adam, Checkpoint, TrainOptions};

fn pass(criterion: &str, detail: String) {
    println!("criterion {criterion}: PASS — {detail}");
}

/// Collected z-scores of one oracle comparison family.
#[derive(Default)]
struct ZTally {
    total: usize,
    beyond3: usize,
    worst: f64,
}

impl ZTally {
    fn push(&mut self, z: f64) {
        self.total += 1;
        if z.abs() > 3.0 {
            self.beyond3 += 1;
        }
        if z.abs() > self.worst {
            self.worst = z.abs();
        }
    }
}

const MC_SAMPLES: usize = 200_000;

/// Criterion 1: propagated moments vs Monte-Carlo oracles on randomized
/// miniature instances of every operation family. With ~2800 calibrated
/// z-scores, roughly 0.27% are expected outside 3 standard errors by chance,
/// so the aggregate check is >= 99% within 3 SE and every comparison within
/// 5 SE (real moment bugs measure in the tens to hundreds of SE). Sigmoid
/// moments are held to their frozen approximation envelope instead.
#[test]
fn criterion_1_moment_propagation() {
    let start = Instant::now();
    let mut tally = ZTally::default();
    let mut kinds: Vec<(String, usize, usize, f64, f64)> = Vec::new();
    let mut clock = Instant::now();
    fn record(
        kinds: &mut Vec<(String, usize, usize, f64, f64)>,
        clock: &mut Instant,
        tally: &mut ZTally,
        name: &str,
        zs: &[f64],
    ) {
        let mut beyond = 0;
        let mut worst = 0.0f64;
        for &z in zs {
            tally.push(z);
            if z.abs() > 3.0 {
                beyond += 1;
            }
            worst = worst.max(z.abs());
        }
        kinds.push((
            name.to_string(),
            zs.len(),
            beyond,
            worst,
            clock.elapsed().as_secs_f64(),
        ));
        *clock = Instant::now();
    }

    // dense: conditional weight+input sampling, exact for a single layer
    let mut zs = Vec::new();
    for inst in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + inst);
        let (fin, fout) = (3, 2);
        let rho = 10f64.powf(rng.random::<f64>() * 2.0 - 3.0);
        let layer = VariationalDense {
            weight_mean: Tensor::new(
                vec![fin, fout],
                (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            ),
            bias_mean: Tensor::new(
                vec![fout],
                (0..2).map(|_| rng.random::<f64>() - 0.5).collect(),
            ),
            rho: RhoParam::learned(rho),
            bias_rho: RhoParam::learned(rho),
        };
        let im: Vec<f64> = (0..fin).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let iv: Vec<f64> = (0..fin).map(|_| rng.random::<f64>() * 0.5).collect();
        let input = GaussianTensor::new(
            Tensor::new(vec![fin], im.clone()),
            Tensor::new(vec![fin], iv.clone()),
        )
        .unwrap();
        let out = varprop::layers::forward_dense(&input, &layer).unwrap();
        let w = layer.weight_mean.data().to_vec();
        let b = layer.bias_mean.data().to_vec();
        let accs = mc_probe(MC_SAMPLES, 20_000 + inst, fout, |rng, buf| {
            let h: Vec<f64> = (0..fin)
                .map(|i| im[i] + iv[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for j in 0..fout {
                let mut acc =
                    b[j] + (rho * b[j] * b[j]).sqrt() * rng.sample::<f64, _>(StandardNormal);
                for i in 0..fin {
                    let wij = w[i * fout + j]
                        + (rho * w[i * fout + j] * w[i * fout + j]).sqrt()
                            * rng.sample::<f64, _>(StandardNormal);
                    acc += wij * h[i];
                }
                buf.push(acc);
            }
        });
        for (j, acc) in accs.iter().enumerate() {
            zs.push(acc.mean_z(out.mean().data()[j]));
            zs.push(acc.var_z(out.variance().data()[j]));
        }
    }
    record(&mut kinds, &mut clock, &mut tally, "dense", &zs);

    // conv: 4x4x2 Gaussian input, 3x3 kernel, valid padding
    let mut zs = Vec::new();
    for inst in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(30_000 + inst);
        let rho = 10f64.powf(rng.random::<f64>() * 2.0 - 3.0);
        let mut conv = VariationalConv2D::init(3, 3, 2, 1, Padding::Valid, rho, false, &mut rng);
        conv.bias_mean = Tensor::new(vec![1], vec![rng.random::<f64>() - 0.5]);
        let n_in = 4 * 4 * 2;
        let im: Vec<f64> = (0..n_in).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let iv: Vec<f64> = (0..n_in).map(|_| rng.random::<f64>() * 0.5).collect();
        let input = GaussianTensor::new(
            Tensor::new(vec![4, 4, 2], im.clone()),
            Tensor::new(vec![4, 4, 2], iv.clone()),
        )
        .unwrap();
        let out = varprop::layers::forward_conv2d(&input, &conv).unwrap();
        let k = conv.kernel_mean.data().to_vec();
        let b0 = conv.bias_mean.data()[0];
        let accs = mc_probe(MC_SAMPLES, 40_000 + inst, 4, |rng, buf| {
            let h: Vec<f64> = (0..n_in)
                .map(|i| im[i] + iv[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let kw: Vec<f64> = k
                .iter()
                .map(|&mu| mu + (rho * mu * mu).sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let bias = b0 + (rho * b0 * b0).sqrt() * rng.sample::<f64, _>(StandardNormal);
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = bias;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for ci in 0..2 {
                                acc += h[((oy + ky) * 4 + ox + kx) * 2 + ci]
                                    * kw[((ky * 3) + kx) * 2 + ci];
                            }
                        }
                    }
                    buf.push(acc);
                }
            }
        });
        for (j, acc) in accs.iter().enumerate() {
            zs.push(acc.mean_z(out.mean().data()[j]));
            zs.push(acc.var_z(out.variance().data()[j]));
        }
    }
    record(&mut kinds, &mut clock, &mut tally, "conv", &zs);

    // relu: exact Gaussian-ReLU moments. phi/sigma is kept within +-2.5 so
    // the positive-part distribution is not a rare-event tail, where sample
    // fourth moments (and with them the SE of the variance) are themselves
    // unestimable; the deep-tail regimes are pinned by quadrature instead.
    let mut zs = Vec::new();
    for inst in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + inst);
        let sigma = 10f64.powf(rng.random::<f64>() * 1.5 - 1.0);
        let phi = (rng.random::<f64>() * 5.0 - 2.5) * sigma;
        let lam = sigma * sigma;
        let (m, v) = relu_moments_scalar(phi, lam);
        let accs = mc_probe(MC_SAMPLES, 60_000 + inst, 1, |rng, buf| {
            let a = phi + lam.sqrt() * rng.sample::<f64, _>(StandardNormal);
            buf.push(a.max(0.0));
        });
        zs.push(accs[0].mean_z(m));
        zs.push(accs[0].var_z(v));
    }
    record(&mut kinds, &mut clock, &mut tally, "relu", &zs);

    // sigmoid: frozen approximation envelope against quadrature
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for inst in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(70_000 + inst);
        let phi = rng.random::<f64>() * 12.0 - 6.0;
        let lam = 10f64.powf(rng.random::<f64>() * 3.0 - 2.0);
        let (m, v) = sigmoid_moments_scalar(phi, lam);
        let em = gauss_expectation(sigmoid, phi, lam, 1e-12);
        let e2 = gauss_expectation(|x| sigmoid(x) * sigmoid(x), phi, lam, 1e-12);
        worst_mean = worst_mean.max((m - em).abs());
        worst_var = worst_var.max((v - (e2 - em * em)).abs());
    }
    assert!(
        worst_mean < 1.5e-2,
        "criterion 1 (sigmoid mean envelope): FAIL — {worst_mean}"
    );
    assert!(
        worst_var < 3.0e-2,
        "criterion 1 (sigmoid variance envelope): FAIL — {worst_var}"
    );
    kinds.push((
        "sigmoid-envelope".into(),
        200,
        0,
        0.0,
        clock.elapsed().as_secs_f64(),
    ));
    clock = Instant::now();

    // max co-pooling: moments of the element with the largest mean
    let mut zs = Vec::new();
    for inst in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(80_000 + inst);
        let im: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let iv: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 2.0 + 0.01).collect();
        let input = GaussianTensor::new(
            Tensor::new(vec![2, 2, 1], im.clone()),
            Tensor::new(vec![2, 2, 1], iv.clone()),
        )
        .unwrap();
        let out =
            varprop::pooling::max_co_pool(&input, &varprop::pooling::PoolWindow::two_by_two())
                .unwrap();
        // independent selection: scan the window in row-major order
        let mut sel = 0;
        for t in 1..4 {
            if im[t] > im[sel] {
                sel = t;
            }
        }
        let accs = mc_probe(MC_SAMPLES, 90_000 + inst, 1, |rng, buf| {
            buf.push(im[sel] + iv[sel].sqrt() * rng.sample::<f64, _>(StandardNormal));
        });
        zs.push(accs[0].mean_z(out.mean().data()[0]));
        zs.push(accs[0].var_z(out.variance().data()[0]));
    }
    record(&mut kinds, &mut clock, &mut tally, "max-co-pool", &zs);

    // attentive pooling: p pinned from the means, elements sampled
    let mut zs = Vec::new();
    for inst in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100_000 + inst);
        let c = 2usize;
        let im: Vec<f64> = (0..4 * c)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        let iv: Vec<f64> = (0..4 * c)
            .map(|_| rng.random::<f64>() * 0.5 + 0.01)
            .collect();
        let hw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let head = varprop::pooling::AttentionHead::new(VariationalDense {
            weight_mean: Tensor::new(vec![c, 1], hw.clone()),
            bias_mean: Tensor::zeros(vec![1]),
            rho: RhoParam::learned(1e-4),
            bias_rho: RhoParam::learned(1e-4),
        })
        .unwrap();
        let input = GaussianTensor::new(
            Tensor::new(vec![2, 2, c], im.clone()),
            Tensor::new(vec![2, 2, c], iv.clone()),
        )
        .unwrap();
        let out = varprop::pooling::attentive_local_pool(
            &input,
            &varprop::pooling::PoolWindow::two_by_two(),
            &head,
        )
        .unwrap();
        // independent energies and softmax from the means
        let energies: Vec<f64> = (0..4)
            .map(|t| (0..c).map(|ci| im[t * c + ci] * hw[ci]).sum::<f64>())
            .collect();
        let emax = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expd: Vec<f64> = energies.iter().map(|e| (e - emax).exp()).collect();
        let z: f64 = expd.iter().sum();
        let p: Vec<f64> = expd.iter().map(|e| e / z).collect();
        let accs = mc_probe(MC_SAMPLES, 110_000 + inst, c, |rng, buf| {
            for ci in 0..c {
                let mut acc = 0.0;
                for t in 0..4 {
                    let b = im[t * c + ci]
                        + iv[t * c + ci].sqrt() * rng.sample::<f64, _>(StandardNormal);
                    acc += p[t] * b;
                }
                buf.push(acc);
            }
        });
        for (ci, acc) in accs.iter().enumerate() {
            zs.push(acc.mean_z(out.mean().data()[ci]));
            zs.push(acc.var_z(out.variance().data()[ci]));
        }
    }
    record(&mut kinds, &mut clock, &mut tally, "attentive-pool", &zs);

    // SE block: chain oracle, three probes per instance
    let mut zs = Vec::new();
    for inst in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(120_000 + inst);
        let rho = 10f64.powf(rng.random::<f64>() * 2.0 - 3.0);
        let (cin, cout) = (2usize, 3usize);
        let params = SeBlockParams {
            conv1: VariationalConv2D::init(3, 3, cin, cout, Padding::Same, rho, false, &mut rng),
            conv2: VariationalConv2D::init(3, 3, cout, cout, Padding::Same, rho, false, &mut rng),
            se_down: VariationalDense::init(cout, 2, rho, false, &mut rng),
            se_up: VariationalDense::init(2, cout, rho, false, &mut rng),
            proj: Some(VariationalConv2D::init(
                1,
                1,
                cin,
                cout,
                Padding::Same,
                rho,
                false,
                &mut rng,
            )),
        };
        let n_in = 4 * 4 * cin;
        let input = GaussianTensor::new(
            Tensor::new(
                vec![4, 4, cin],
                (0..n_in).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            ),
            Tensor::new(
                vec![4, 4, cin],
                (0..n_in).map(|_| rng.random::<f64>() * 0.5).collect(),
            ),
        )
        .unwrap();
        let probes = [0usize, 23, 47];
        let reports =
            chain_se_block_reports(&params, &input, MC_SAMPLES, 130_000 + inst, &probes).unwrap();
        for r in &reports {
            zs.push(r.mean_z);
            zs.push(r.var_z);
        }
    }
    record(&mut kinds, &mut clock, &mut tally, "se-block", &zs);

    // full miniature network: chain oracle end to end, both pooling kinds
    let mut zs = Vec::new();
    for inst in 0..100u64 {
        let pooling = if inst % 2 == 0 {
            PoolKind::Max
        } else {
            PoolKind::Attentive
        };
        let mut rng = ChaCha8Rng::seed_from_u64(140_000 + inst);
        let mut cfg = ArchitectureConfig::micro(1, pooling);
        cfg.rho_init = 10f64.powf(rng.random::<f64>() * 2.0 - 3.0);
        let net = SeResNet::init(cfg, 150_000 + inst).unwrap();
        let input = Tensor::new(
            vec![8, 4],
            (0..32)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let reports = chain_network_reports(&net, &input, MC_SAMPLES, 160_000 + inst).unwrap();
        for r in &reports {
            zs.push(r.mean_z);
            zs.push(r.var_z);
        }
    }
    record(&mut kinds, &mut clock, &mut tally, "full-network", &zs);

    for (name, n, beyond, worst, secs) in &kinds {
        println!(
            "  {name}: {n} comparisons, {beyond} beyond 3 SE, worst |z| {worst:.2}, {secs:.1}s"
        );
    }
    let frac = 1.0 - tally.beyond3 as f64 / tally.total as f64;
    assert!(
        frac >= 0.99,
        "criterion 1 (moment propagation): FAIL — only {:.2}% of {} comparisons within 3 SE",
        frac * 100.0,
        tally.total
    );
    assert!(
        tally.worst <= 5.0,
        "criterion 1 (moment propagation): FAIL — worst |z| {:.2} exceeds 5 SE",
        tally.worst
    );
    pass(
        "1 (moment propagation)",
        format!(
            "{} comparisons, {:.2}% within 3 SE, worst |z| {:.2}, {:.0?}",
            tally.total,
            frac * 100.0,
            tally.worst,
            start.elapsed()
        ),
    );
}

/// Criterion 2: ReLU moments against adaptive quadrature on the grid
/// phi in [-6, 6] x lambda in {0.01, 0.1, 1, 4, 10}, absolute error < 1e-8.
#[test]
fn criterion_2_relu_quadrature() {
    let mut worst = 0.0f64;
    for lam in [0.01, 0.1, 1.0, 4.0, 10.0] {
        let mut phi = -6.0;
        while phi <= 6.0 + 1e-9 {
            let (m, v) = relu_moments_scalar(phi, lam);
            let mq = gauss_expectation(|x| x.max(0.0), phi, lam, 1e-13);
            let e2q = gauss_expectation(|x| x.max(0.0) * x.max(0.0), phi, lam, 1e-13);
            worst = worst.max((m - mq).abs()).max((v - (e2q - mq * mq)).abs());
            phi += 0.25;
        }
    }
    assert!(
        worst < 1e-8,
        "criterion 2 (relu vs quadrature): FAIL — worst {worst:.3e}"
    );
    pass(
        "2 (relu vs quadrature)",
        format!("worst absolute error {worst:.3e} over 245 grid points"),
    );
}

/// Criterion 3: the smoothing-probability surface.
#[test]
fn criterion_3_alpha_surface() {
    // alpha(V=0) = 0 exactly
    for e in [-9.0, -2.0, -0.3, 0.0, 0.7, 3.0, 8.0] {
        assert_eq!(
            smoothing_alpha(e, 0.0),
            0.0,
            "criterion 3: FAIL — alpha(V=0) != 0 at E={e}"
        );
    }
    // alpha(E=0, .) = 0 within 1e-12
    for v in [0.0, 0.3, 1.0, 4.0, 10.0] {
        assert!(
            smoothing_alpha(0.0, v).abs() < 1e-12,
            "criterion 3: FAIL — alpha(0, {v}) not ~0"
        );
    }
    // monotone non-decreasing in V for |E| in {1, 2, 4} over V in [0, 10]
    for e in [1.0, 2.0, 4.0, -1.0, -2.0, -4.0] {
        let mut prev = -1.0;
        let mut v = 0.0;
        while v <= 10.0 + 1e-9 {
            let a = smoothing_alpha(e, v);
            assert!(
                a >= prev - 1e-12,
                "criterion 3: FAIL — alpha not monotone in V at E={e}, V={v}"
            );
            prev = a;
            v += 0.05;
        }
    }
    // extremes smooth harder than moderate predictions
    assert!(
        smoothing_alpha(6.0, 4.0) > smoothing_alpha(0.0, 4.0),
        "criterion 3: FAIL — alpha(|E|=6, V=4) <= alpha(0, 4)"
    );
    pass(
        "3 (alpha surface)",
        "exact zeros, monotone in V, higher at extremes".into(),
    );
}

/// Criterion 4: finite differences vs reverse-mode on a miniature network.
#[test]
fn criterion_4_gradients() {
    let start = Instant::now();
    let mut worst_frac: f64 = 1.0;
    let mut worst_max: f64 = 0.0;
    let mut params = 0;
    for (pooling, seed) in [(PoolKind::Attentive, 11u64), (PoolKind::Max, 12u64)] {
        let mut arch = ArchitectureConfig::miniature(1, pooling);
        arch.rho_init = 0.05;
        assert!(arch.param_count().unwrap() <= 5_000);
        let net = SeResNet::init(arch, seed).unwrap();
        let mut gen = GeneratorConfig::miniature(seed);
        gen.train_clips = 3;
        gen.devel_clips = 1;
        gen.test_clips = 1;
        let data = synthetic_corpus(&gen).unwrap();
        let batch: Vec<&Sample> = data.train.iter().collect();
        let report = gradcheck(&net, &batch, LossMode::Variational, 1e-10, 4, 1e-4, seed).unwrap();
        println!(
            "  {pooling:?}: {} params, {:.2}% within 1e-3, max {:.3e} at {}, {} kinked",
            report.params,
            100.0 * report.frac_within_1e3(),
            report.max_rel_err,
            report.worst_param,
            report.kinked
        );
        assert!(
            (report.kinked as f64) <= 0.02 * (report.params + report.kinked) as f64,
            "criterion 4: FAIL — {} of {} parameters on subgradient boundaries",
            report.kinked,
            report.params + report.kinked
        );
        worst_frac = worst_frac.min(report.frac_within_1e3());
        worst_max = worst_max.max(report.max_rel_err);
        params = report.params;
    }
    assert!(
        worst_frac >= 0.99,
        "criterion 4 (gradients): FAIL — only {:.2}% within 1e-3",
        worst_frac * 100.0
    );
    assert!(
        worst_max < 1e-2,
        "criterion 4 (gradients): FAIL — max relative error {worst_max:.3e}"
    );
    pass(
        "4 (gradients)",
        format!(
            "{params} parameters per net, {:.2}% within 1e-3, max rel err {worst_max:.2e}, {:.0?}",
            worst_frac * 100.0,
            start.elapsed()
        ),
    );
}

/// Criterion 5: metrics match brute-force enumeration exactly on 1000 random
/// sets of size <= 50, plus the 30-task weighted-aggregation fixture.
#[test]
fn criterion_5_metrics_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(555);
    for case in 0..1000 {
        let n = rng.random_range(1..=50);
        let quantize = rng.random::<bool>();
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s = rng.random::<f64>();
                if quantize {
                    (s * 10.0).round() / 10.0
                } else {
                    s
                }
            })
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.4).collect();
        let s = ScoredSet::new(scores, labels, 0).unwrap();
        assert_eq!(
            metrics::au_pr(&s),
            brute::au_pr(&s),
            "criterion 5: FAIL — au_pr case {case}"
        );
        assert_eq!(
            metrics::au_roc(&s),
            brute::au_roc(&s),
            "criterion 5: FAIL — au_roc case {case}"
        );
        assert_eq!(
            metrics::macro_f1(&s, 0.5).to_bits(),
            brute::macro_f1(&s, 0.5).to_bits(),
            "criterion 5: FAIL — f1 case {case}"
        );
        assert_eq!(
            metrics::ece(&s, 10).to_bits(),
            brute::ece(&s).to_bits(),
            "criterion 5: FAIL — ece case {case}"
        );
    }
    // 30-task fixture vs independent summation
    let values: Vec<Option<f64>> = (0..30).map(|_| Some(rng.random::<f64>())).collect();
    let counts: Vec<usize> = (0..30).map(|_| rng.random_range(1..300)).collect();
    let got = metrics::weighted_aggregate(&values, &counts)
        .unwrap()
        .unwrap();
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let want: f64 = values
        .iter()
        .zip(&counts)
        .map(|(v, &c)| v.unwrap() * c as f64 / total)
        .sum();
    assert!(
        (got - want).abs() < 1e-12,
        "criterion 5: FAIL — 30-task aggregate {got} vs {want}"
    );
    pass(
        "5 (metrics oracles)",
        "1000 random sets exact, 30-task aggregate matches recomputation".into(),
    );
}

/// Criterion 6: with every rho frozen at zero and zero input variance the
/// variational forward equals the independent point-estimate reference
/// within 1e-6 max-norm, the logit variance is exactly zero, and the four
/// loss modes produce identical values.
#[test]
fn criterion_6_deterministic_limit() {
    let mut worst_gap = 0.0f64;
    for (pooling, seed) in [(PoolKind::Max, 31u64), (PoolKind::Attentive, 32u64)] {
        let mut arch = ArchitectureConfig::miniature(2, pooling);
        arch.frozen_rho = true;
        let net = SeResNet::init(arch, seed).unwrap();
        let reference = PointNet::from_means(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let input = Tensor::new(
                vec![32, 16],
                (0..512).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            );
            let moments = net.logit_moments(&input).unwrap();
            let point = reference.forward(&input);
            for (t, &(m, v)) in moments.iter().enumerate() {
                worst_gap = worst_gap.max((m - point[t]).abs());
                assert_eq!(v, 0.0, "criterion 6: FAIL — logit variance {v} != 0");
            }
        }
    }
    assert!(
        worst_gap < 1e-6,
        "criterion 6 (deterministic limit): FAIL — max |variational - point| = {worst_gap:.3e}"
    );

    // loss-mode differences vanish
    let mut arch = ArchitectureConfig::micro(2, PoolKind::Max);
    arch.frozen_rho = true;
    let net = SeResNet::init(arch, 5).unwrap();
    let mut gen = GeneratorConfig::miniature(33);
    gen.shape = (8, 4);
    gen.tasks = 2;
    gen.positive_priors = vec![0.5, 0.4];
    gen.train_clips = 8;
    gen.devel_clips = 2;
    gen.test_clips = 2;
    let data = synthetic_corpus(&gen).unwrap();
    let batch: Vec<&Sample> = data.train.iter().collect();
    let mut totals = Vec::new();
    for mode in [
        LossMode::Base,
        LossMode::Variational,
        LossMode::Smooth,
        LossMode::UaSmooth,
    ] {
        let (b, _) = batch_step_loss(&net, &batch, mode, 1e-10, 8, 17).unwrap();
        totals.push(b.total());
    }
    let spread = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - totals.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(
        spread <= 1e-6,
        "criterion 6 (deterministic limit): FAIL — loss modes differ by {spread:.3e}"
    );
    pass(
        "6 (deterministic limit)",
        format!("forward gap {worst_gap:.2e}, loss-mode spread {spread:.2e}"),
    );
}

/// Criterion 7: the canonical shape trace reproduces the reference stack
/// row for row, and the trace mechanism itself matches recorded forward
/// shapes at desk scale.
#[test]
fn criterion_7_shape_trace() {
    let cfg = ArchitectureConfig::canonical(30, PoolKind::Attentive);
    let trace = cfg.shape_trace().unwrap();
    let expected = vec![
        (150, 64, 64),
        (75, 32, 64),
        (37, 16, 128),
        (18, 8, 256),
        (9, 4, 512),
        (9, 4, 1024),
    ];
    assert_eq!(
        trace.stage_shapes, expected,
        "criterion 7: FAIL — stage shapes"
    );
    assert_eq!(trace.embedding, (9, 4096), "criterion 7: FAIL — embedding");
    assert_eq!(trace.pooled, 16384, "criterion 7: FAIL — pooled length");
    assert_eq!(trace.per_task, 1, "criterion 7: FAIL — per-task output");

    // the trace is honest: recorded forward shapes equal it at desk scale
    for pooling in [PoolKind::Max, PoolKind::Attentive] {
        let mini = ArchitectureConfig::miniature(1, pooling);
        let net = SeResNet::init(mini.clone(), 2).unwrap();
        let tape = varprop::graph::Tape::inference();
        let bound = net.bind(&tape);
        let out = net
            .forward(&tape, &bound, &Tensor::full(vec![32, 16], 0.3))
            .unwrap();
        assert_eq!(
            out.stage_shapes,
            mini.shape_trace().unwrap().stage_shapes,
            "criterion 7: FAIL — trace diverges from a real forward"
        );
    }
    pass(
        "7 (shape trace)",
        "canonical rows (150,64,64) … (9,4,1024), embedding (9,4096), pooled 16384".into(),
    );
}

fn criterion8_data() -> varprop::audio::Dataset {
    let gen = GeneratorConfig {
        tasks: 1,
        train_clips: 220,
        devel_clips: 110,
        test_clips: 110,
        positive_priors: vec![1.0 / 11.0], // 1:10 imbalance
        snr: 4.0,
        shape: (32, 16),
        seed: 4242,
    };
    synthetic_corpus(&gen).unwrap()
}

fn criterion8_opts(mode: LossMode, seed: u64) -> TrainOptions {
    TrainOptions {
        batch_size: 8,
        learning_rate: 3e-3,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        patience: 6,
        max_epochs: 24,
        cold_posterior: 1e-10,
        mode,
        logit_samples: 8,
        seed,
        augment: None,
    }
}

/// Criterion 8: end-to-end behavior on the imbalanced synthetic corpus.
#[test]
fn criterion_8_end_to_end_training() {
    let start = Instant::now();
    let data = criterion8_data();
    let mut eces = std::collections::BTreeMap::new();
    for mode in [LossMode::UaSmooth, LossMode::Variational] {
        let mut mode_eces = Vec::new();
        for trial in 0..3u64 {
            let t0 = Instant::now();
            let arch = ArchitectureConfig::miniature(1, PoolKind::Max);
            let mut net = SeResNet::init(arch, 100 + trial).unwrap();
            let record = train(&mut net, &data, &criterion8_opts(mode, 100 + trial)).unwrap();
            let auroc = record.test.weighted_au_roc.unwrap();
            let ece = record.test.weighted_ece;
            println!(
                "  {} trial {trial}: test AU-ROC {auroc:.4}, ECE {ece:.4} ({} epochs, {:.0?})",
                mode.name(),
                record.epochs.len(),
                t0.elapsed()
            );
            assert!(
                auroc >= 0.95,
                "criterion 8: FAIL — {} trial {trial} AU-ROC {auroc:.4} < 0.95",
                mode.name()
            );
            assert!(
                ece <= 0.15,
                "criterion 8: FAIL — {} trial {trial} ECE {ece:.4} > 0.15",
                mode.name()
            );
            mode_eces.push(ece);
        }
        eces.insert(mode.name(), mode_eces);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let ua = mean(&eces["ua-smooth"]);
    let var = mean(&eces["variational"]);
    assert!(
        ua <= var + 0.05,
        "criterion 8: FAIL — mean ECE ua-smooth {ua:.4} > variational {var:.4} + 0.05"
    );
    pass(
        "8 (end-to-end training)",
        format!(
            "all 6 runs AU-ROC >= 0.95 and ECE <= 0.15; mean ECE ua-smooth {ua:.4} vs variational {var:.4}, {:.0?}",
            start.elapsed()
        ),
    );
}

/// Criterion 9: segmentation invariants over 200 randomized layouts.
#[test]
fn criterion_9_segmentation_invariants() {
    let clip_len = 3.0;
    for case in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + case);
        let duration = 10.0 + rng.random::<f64>() * 50.0;
        let n_calls = rng.random_range(1..8);
        let species = ["a", "b", "c"];
        let calls: Vec<Annotation> = (0..n_calls)
            .map(|i| {
                let s = rng.random::<f64>() * (duration - 5.0);
                let e = (s + 0.2 + rng.random::<f64>() * 4.5).min(duration);
                Annotation {
                    recording_id: format!("rec{case}"),
                    start_s: s,
                    end_s: e,
                    species: species[i % 3].to_string(),
                }
            })
            .collect();
        let partition = ["train", "devel", "test"][case as usize % 3].to_string();
        let rec = RecordingAnnotations {
            recording_id: format!("rec{case}"),
            duration_s: duration,
            partition: partition.clone(),
            calls: calls.clone(),
        };
        let vocab: Vec<String> = species.iter().map(|s| s.to_string()).collect();
        let clips = segment_recording(&rec, &vocab, clip_len, case).unwrap();
        // every short call fully supported
        for call in &calls {
            if call.end_s - call.start_s <= clip_len {
                let supported = clips.iter().any(|c| {
                    c.start_s <= call.start_s + 1e-9 && call.end_s <= c.start_s + clip_len + 1e-9
                });
                assert!(
                    supported,
                    "criterion 9: FAIL — case {case}: call [{}, {}] unsupported",
                    call.start_s, call.end_s
                );
                // and the supporting clip obeys the uniform-interval bounds
                let ok_bounds = clips.iter().any(|c| {
                    c.start_s >= (call.end_s - clip_len).max(0.0) - 1e-9
                        && c.start_s <= call.start_s.min(duration - clip_len) + 1e-9
                        && c.start_s <= call.start_s + 1e-9
                        && call.end_s <= c.start_s + clip_len + 1e-9
                });
                assert!(
                    ok_bounds,
                    "criterion 9: FAIL — case {case}: bounds violated"
                );
            }
        }
        // clips stay inside the recording and inherit the partition
        for c in &clips {
            assert!(c.start_s >= -1e-9 && c.start_s + c.length_s <= duration + 1e-9);
            assert_eq!(c.partition, partition, "criterion 9: FAIL — partition leak");
        }
    }
    pass(
        "9 (segmentation invariants)",
        "200 layouts: support, bounds, and partitions hold".into(),
    );
}

/// Criterion 10: a fixed seed reproduces the training history and the
/// checkpoint bytes across two consecutive runs.
#[test]
fn criterion_10_reproducibility() {
    let start = Instant::now();
    let mut gen = GeneratorConfig::miniature(77);
    gen.shape = (8, 4);
    gen.train_clips = 24;
    gen.devel_clips = 12;
    gen.test_clips = 12;
    let data = synthetic_corpus(&gen).unwrap();
    let opts = TrainOptions {
        batch_size: 8,
        learning_rate: 3e-3,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        patience: 3,
        max_epochs: 5,
        cold_posterior: 1e-10,
        mode: LossMode::UaSmooth,
        logit_samples: 6,
        seed: 99,
        augment: Some(varprop::audio::SpecAugmentConfig {
            time_masks: 1,
            time_mask_width: 2,
            freq_masks: 1,
            freq_mask_width: 1,
            jitter_std: 1e-6,
        }),
    };
    let dir = std::env::temp_dir().join("varprop_acceptance_repro");
    std::fs::create_dir_all(&dir).unwrap();
    let mut histories = Vec::new();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let arch = ArchitectureConfig::micro(1, PoolKind::Attentive);
        let mut net = SeResNet::init(arch, opts.seed).unwrap();
        let record = train(&mut net, &data, &opts).unwrap();
        let adam = Adam::new(
            opts.learning_rate,
            opts.adam_beta1,
            opts.adam_beta2,
            opts.adam_eps,
        );
        let path = dir.join(format!("run{run}.ckpt"));
        Checkpoint::of(&net, &adam, record.best_epoch as u64, record.best_val_au_pr)
            .save(&path)
            .unwrap();
        histories.push(record);
        bytes.push(std::fs::read(&path).unwrap());
        // checkpoint save -> load -> evaluate equals pre-save evaluate
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(
            evaluate(&loaded.net, &data.test).unwrap(),
            evaluate(&net, &data.test).unwrap(),
            "criterion 10: FAIL — checkpoint round-trip changed evaluation"
        );
    }
    assert_eq!(
        histories[0], histories[1],
        "criterion 10: FAIL — training histories differ"
    );
    assert_eq!(
        bytes[0], bytes[1],
        "criterion 10: FAIL — checkpoint bytes differ"
    );
    pass(
        "10 (reproducibility)",
        format!(
            "bit-identical histories ({} epochs) and checkpoints ({} bytes), {:.0?}",
            histories[0].epochs.len(),
            bytes[0].len(),
            start.elapsed()
        ),
    );
}
