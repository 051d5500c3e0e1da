//! Analytic gradients against central finite differences.

use lenrank_core::baselines::{caus_e_penalty, caus_e_penalty_grad, RegressionTarget};
use lenrank_core::data::Dataset;
use lenrank_core::grouping::{compute_tau, GroupScheme};
use lenrank_core::model::{Activation, FeatureSpec, Gradients, Head, HeadConfig, InitMode, ModelParams};
use lenrank_core::sampling::{epoch_stream, LabelingConfig, PreferencePair, SamplingContext, TrainingTriple};
use lenrank_core::synthgen::{generate, SynthConfig};
use lenrank_core::training::{batch_loss, pairwise_batch_loss, regression_batch_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn tiny_data(seed: u64) -> Dataset {
    generate(&SynthConfig {
        n_users: 4,
        n_videos: 30,
        n_interactions: 160,
        n_topics: 3,
        seed,
        ..Default::default()
    })
    .unwrap()
    .0
}

fn random_model(d: &Dataset, dim: usize, hidden: Vec<usize>, dropout: f64, seed: u64) -> ModelParams {
    let scheme = GroupScheme::kuaishou();
    let spec = FeatureSpec {
        user_vocab: d.vocab().num_users(),
        video_vocab: d.vocab().num_videos(),
        length_buckets: scheme.num_groups(),
        embedding_dim: dim,
    };
    let head = HeadConfig {
        hidden_sizes: hidden,
        dropout_rate: dropout,
        activation: Activation::Relu,
    };
    let mut p = ModelParams::init(spec, head, scheme.video_groups(d).unwrap(), seed, InitMode::Random).unwrap();
    // spread the embeddings out so every parameter carries a visible gradient
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let flat: Vec<f64> = p.flat().iter().map(|_| rng.random_range(-0.6..0.6)).collect();
    p.set_flat(&flat).unwrap();
    p
}

fn triples(d: &Dataset, seed: u64, n: usize) -> Vec<TrainingTriple> {
    let tau = compute_tau(d, &GroupScheme::kuaishou(), 0.2).unwrap();
    let ctx = SamplingContext::new(d, &tau).unwrap();
    let mut t = epoch_stream(&ctx, &LabelingConfig::default(), seed).unwrap().triples;
    t.truncate(n);
    t
}

/// Worst component-wise relative error. The denominator floor sits above the
/// ~1e-10 roundoff of central differences so near-zero components do not dominate.
fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-5))
        .fold(0.0, f64::max)
}

fn numeric_gradient(params: &ModelParams, loss: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let base = params.flat();
    let mut p = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut x = base.clone();
    for i in 0..base.len() {
        x[i] = base[i] + H;
        p.set_flat(&x).unwrap();
        let up = loss(&p);
        x[i] = base[i] - H;
        p.set_flat(&x).unwrap();
        let down = loss(&p);
        x[i] = base[i];
        out.push((up - down) / (2.0 * H));
    }
    out
}

#[test]
fn two_head_loss_matches_finite_differences() {
    for seed in 0..6 {
        let d = tiny_data(seed);
        let dropout = if seed % 2 == 0 { 0.0 } else { 0.3 };
        let p = random_model(&d, 3, vec![5, 3], dropout, seed);
        let batch = triples(&d, seed, 12);
        let alpha = 0.2 + 0.1 * seed as f64;
        let drop_seed = Some(100 + seed);
        let mut g = Gradients::zeros_like(&p);
        batch_loss(&p, &d, &batch, alpha, drop_seed, Some(&mut g)).unwrap();
        let numeric = numeric_gradient(&p, |q| batch_loss(q, &d, &batch, alpha, drop_seed, None).unwrap().total);
        let err = max_rel_error(&g.flat(), &numeric);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn weighted_pairwise_loss_matches_finite_differences() {
    let d = tiny_data(7);
    let p = random_model(&d, 2, vec![4], 0.0, 7);
    let pairs: Vec<PreferencePair> = triples(&d, 7, 10).iter().filter_map(|t| t.general).collect();
    let weights: Vec<f64> = (0..pairs.len()).map(|i| 0.5 + 0.1 * i as f64).collect();
    let mut g = Gradients::zeros_like(&p);
    pairwise_batch_loss(&p, &d, &pairs, Some(&weights), None, Some(&mut g)).unwrap();
    let numeric = numeric_gradient(&p, |q| {
        pairwise_batch_loss(q, &d, &pairs, Some(&weights), None, None).unwrap()
    });
    assert!(max_rel_error(&g.flat(), &numeric) < 1e-4);
}

#[test]
fn regression_loss_matches_finite_differences() {
    let d = tiny_data(8);
    let p = random_model(&d, 2, vec![4, 3], 0.0, 8);
    let points: Vec<usize> = (0..15).collect();
    for target in [RegressionTarget::ViewTime, RegressionTarget::Progress] {
        let mut g = Gradients::zeros_like(&p);
        regression_batch_loss(&p, &d, &points, target, None, Some(&mut g)).unwrap();
        let numeric = numeric_gradient(&p, |q| {
            regression_batch_loss(q, &d, &points, target, None, None).unwrap()
        });
        assert!(max_rel_error(&g.flat(), &numeric) < 1e-4, "{target:?}");
    }
}

#[test]
fn embedding_tie_penalty_matches_finite_differences() {
    let d = tiny_data(9);
    let main = random_model(&d, 2, vec![3], 0.0, 9);
    let aux = random_model(&d, 2, vec![3], 0.0, 10);
    let lambda = 0.7;
    let mut gm = Gradients::zeros_like(&main);
    let mut ga = Gradients::zeros_like(&aux);
    caus_e_penalty_grad(&main, &aux, lambda, &mut gm, &mut ga).unwrap();
    let nm = numeric_gradient(&main, |q| caus_e_penalty(q, &aux, lambda).unwrap());
    let na = numeric_gradient(&aux, |q| caus_e_penalty(&main, q, lambda).unwrap());
    assert!(max_rel_error(&gm.flat(), &nm) < 1e-4);
    assert!(max_rel_error(&ga.flat(), &na) < 1e-4);
}

#[test]
fn pure_weights_silence_the_other_head() {
    let d = tiny_data(11);
    let p = random_model(&d, 3, vec![5, 3], 0.2, 11);
    let batch = triples(&d, 11, 20);
    for (alpha, silent, active) in [(1.0, Head::FUn, Head::F), (0.0, Head::F, Head::FUn)] {
        let mut g = Gradients::zeros_like(&p);
        batch_loss(&p, &d, &batch, alpha, Some(3), Some(&mut g)).unwrap();
        let head = g.head(silent);
        assert!(head
            .layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|&x| x == 0.0)));
        let head = g.head(active);
        assert!(head.layers.iter().any(|l| l.weight.iter().any(|&x| x != 0.0)));
    }
}
