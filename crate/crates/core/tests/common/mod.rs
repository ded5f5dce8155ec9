//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use topicnet_core::model::{init_params, InitConfig};
use topicnet_core::objective::total_loss_and_gradients;
use topicnet_core::{Architecture, Document, ModelParams, ObjectiveConfig, TopicTree, TreeIndex, Vocabulary};

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Simpson weights for `n` intervals on `[a, b]`: `(nodes, weights)`.
pub fn simpson_rule(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let nodes = (0..=n).map(|i| a + i as f64 * h).collect();
    let weights = (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0
        })
        .collect();
    (nodes, weights)
}

pub fn normal_log_pdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - m).powi(2) / (2.0 * v))
        .sum()
}

/// `KL(N(ma, va) || N(mb, vb))` by tensor-product Simpson quadrature over
/// `ma ± 12 sd`, without using the closed form.
pub fn gaussian_kl_quadrature(ma: &[f64], va: &[f64], mb: &[f64], vb: &[f64], n: usize) -> f64 {
    let d = ma.len();
    let rules: Vec<(Vec<f64>, Vec<f64>)> = (0..d)
        .map(|i| {
            let s = va[i].sqrt();
            simpson_rule(ma[i] - 12.0 * s, ma[i] + 12.0 * s, n)
        })
        .collect();
    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    let mut x = vec![0.0; d];
    loop {
        let mut w = 1.0;
        for i in 0..d {
            x[i] = rules[i].0[idx[i]];
            w *= rules[i].1[idx[i]];
        }
        let lp = normal_log_pdf(&x, ma, va);
        let lq = normal_log_pdf(&x, mb, vb);
        total += w * lp.exp() * (lp - lq);
        // Odometer increment.
        let mut k = 0;
        loop {
            if k == d {
                return total;
            }
            idx[k] += 1;
            if idx[k] <= n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// `KL(Weibull(k, λ) || Gamma(α, β))` by quadrature. With `θ = λ e^{s/k}`
/// the Weibull variable becomes `e^s ~ Exp(1)`, so the expectation is an
/// integral against the density `exp(s − e^s)` on the real line.
pub fn weibull_gamma_kl_quadrature(k: f64, lambda: f64, alpha: f64, beta: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let f = |s: f64| {
        let e = s.exp();
        let density = (s - e).exp();
        let ln_theta = lambda.ln() + s / k;
        let theta = ln_theta.exp();
        let log_w = k.ln() - lambda.ln() + (k - 1.0) * s / k - e;
        let log_g = alpha * beta.ln() - ln_gamma(alpha) + (alpha - 1.0) * ln_theta - beta * theta;
        density * (log_w - log_g)
    };
    simpson(f, -40.0, 5.0, 40_000)
}

/// The six-word, two-layer toy model used by the gradient checks.
pub fn toy_tree() -> TopicTree {
    let words = (0..6).map(|i| format!("w{i}")).collect();
    let mid = ["a", "b", "c"].map(String::from).to_vec();
    let top = ["x", "y"].map(String::from).to_vec();
    TopicTree::from_layers(vec![words, mid, top], vec![vec![0, 0, 1, 1, 2, 2], vec![0, 0, 1]]).unwrap()
}

pub fn toy_vocab() -> Vocabulary {
    Vocabulary::new((0..6).map(|i| format!("w{i}")).collect()).unwrap()
}

pub fn toy_params(hidden_widths: Option<Vec<usize>>, seed: u64) -> ModelParams {
    let arch = match hidden_widths {
        Some(w) => Architecture::with_hidden_widths(vec![6, 3, 2], 2, w).unwrap(),
        None => Architecture::new(vec![6, 3, 2], 2, 4).unwrap(),
    };
    let init = InitConfig {
        mean_std: 0.5,
        variance: 0.3,
        ..InitConfig::default()
    };
    let mut params = init_params(&arch, &init, &mut ChaCha8Rng::seed_from_u64(seed));
    // Spread the log-variances so no two embeddings coincide.
    for (l, layer) in params.embeddings.iter_mut().enumerate() {
        for (i, x) in layer.log_var.iter_mut().enumerate() {
            *x += 0.2 * ((i * 7 + l * 3) % 5) as f64 - 0.4;
        }
    }
    params
}

pub fn toy_batch() -> Vec<Document> {
    vec![
        Document::from_pairs([(0, 3), (2, 1), (5, 2)]),
        Document::from_pairs([(1, 4), (3, 2)]),
        Document::from_pairs([(4, 1), (5, 5), (0, 1)]),
    ]
}

#[derive(Debug)]
pub struct FdMismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub tensors: usize,
    pub mismatches: Vec<FdMismatch>,
    /// Entries whose ±h stencil straddled a ReLU kink and were re-checked
    /// with a smaller step.
    pub kinks: Vec<(String, usize)>,
    pub worst_rel: f64,
}

fn fd_agrees(a: f64, numeric: f64) -> bool {
    let abs = (a - numeric).abs();
    abs <= 1e-6 || abs / a.abs().max(numeric.abs()) <= 1e-3
}

/// Central differences of the total loss against the analytic gradient for
/// every entry of every trainable tensor. The same seed fixes the noise.
///
/// The loss is only piecewise smooth (ReLU, hinge, threshold). When the
/// central difference disagrees and the two one-sided differences disagree
/// with each other, the stencil crossed a kink; that entry is re-checked at
/// `h / 100` and listed in `kinks`.
pub fn finite_difference_check(
    params: &ModelParams,
    docs: &[Document],
    tree: Option<&TreeIndex>,
    cfg: &ObjectiveConfig,
    seed: u64,
    h: f64,
) -> FdReport {
    let batch: Vec<&Document> = docs.iter().collect();
    let loss = |p: &ModelParams| {
        total_loss_and_gradients(p, &batch, tree, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
            .0
            .total
    };
    let (base_loss, grads) = total_loss_and_gradients(params, &batch, tree, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let base = base_loss.total;
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, s)| (n, s.to_vec())).collect();
    let mut report = FdReport {
        tensors: analytic.len(),
        ..FdReport::default()
    };
    let shifted = |ti: usize, i: usize, d: f64| {
        let mut p = params.clone();
        p.tensors_mut()[ti][i] += d;
        loss(&p)
    };
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let (up, down) = (shifted(ti, i, h), shifted(ti, i, -h));
            let mut numeric = (up - down) / (2.0 * h);
            if !fd_agrees(a, numeric) {
                let forward = (up - base) / h;
                let backward = (base - down) / h;
                if !fd_agrees(forward, backward) {
                    let small = h / 100.0;
                    numeric = (shifted(ti, i, small) - shifted(ti, i, -small)) / (2.0 * small);
                    report.kinks.push((name.clone(), i));
                }
            }
            report.checked += 1;
            let abs = (a - numeric).abs();
            if abs > 1e-6 {
                report.worst_rel = report.worst_rel.max(abs / a.abs().max(numeric.abs()));
            }
            if !fd_agrees(a, numeric) {
                report.mismatches.push(FdMismatch {
                    tensor: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Objective settings for the gradient checks: zero threshold and several
/// samples so every term, including the prior, is active.
pub fn fd_objective(beta: f64) -> ObjectiveConfig {
    ObjectiveConfig {
        beta,
        gamma_threshold: 0.0,
        train_samples: 2,
        chunk_size: 2,
        ..ObjectiveConfig::default()
    }
}

pub struct RecoveryOutcome {
    pub trained: f64,
    /// The generating network's own perplexity: held-out tokens scored
    /// with its Φ and θ inferred from the observed tokens.
    pub generating: f64,
    /// Perplexity under the θ that actually generated each document.
    pub oracle: f64,
    pub unigram: f64,
    pub steps: u64,
}

/// Init spread of the recovery runs; the default spread starts every topic
/// at the corpus unigram and training settles in a flatter optimum.
pub const RECOVERY_INIT_STD: f64 = 0.3;

/// Samples 2000 documents from a known `[200, 20, 5]` network, trains on
/// the observed tokens and scores the held-out ones.
pub fn synthetic_recovery() -> RecoveryOutcome {
    use topicnet_core::corpus::split_tokens;
    use topicnet_core::evaluation::{heldout_perplexity, unigram_perplexity};
    use topicnet_core::synthetic::GenerativeModel;
    use topicnet_core::{Phis, TrainOptions, Trainer};
    let init = InitConfig {
        mean_std: RECOVERY_INIT_STD,
        ..InitConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let known = init_params(&Architecture::new(vec![200, 20, 5], 16, 8).unwrap(), &init, &mut rng);
    let phis = Phis::compute(&known);
    let truth = GenerativeModel::new(vec![phis.layer(1).clone(), phis.layer(2).clone()], vec![1.0; 5], vec![1.0 / 30.0, 1.0]).unwrap();
    let sample = truth.sample(2000, &mut rng).unwrap();
    let split = split_tokens(&sample.corpus, 0.8, 52).unwrap();

    let arch = Architecture::new(vec![200, 20, 5], 16, 64).unwrap();
    let params = init_params(&arch, &init, &mut ChaCha8Rng::seed_from_u64(53));
    let cfg = ObjectiveConfig {
        beta: 0.0,
        ..ObjectiveConfig::default()
    };
    let opts = TrainOptions {
        batch_size: 100,
        epochs: 800,
        seed: 54,
        ..TrainOptions::default()
    };
    let mut trainer = Trainer::new(params, cfg, opts);
    trainer.run(&split.train, None, None, |_, _, _| Ok(())).unwrap();
    let ppl = heldout_perplexity(&trainer.params, &split, 8, &mut ChaCha8Rng::seed_from_u64(55)).unwrap();
    RecoveryOutcome {
        trained: ppl.perplexity,
        generating: truth.posterior_perplexity(&split, 0.8, 8, &mut ChaCha8Rng::seed_from_u64(56)).unwrap(),
        oracle: truth.oracle_perplexity(&split, &sample.theta_1).unwrap(),
        unigram: unigram_perplexity(&split).unwrap(),
        steps: trainer.step(),
    }
}
