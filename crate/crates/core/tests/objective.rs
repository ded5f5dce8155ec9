mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicnet_core::geometry::gaussian_kl;
use topicnet_core::model::{init_params, InitConfig};
use topicnet_core::objective::{elbo, prior_loss, total_loss_and_gradients};
use topicnet_core::taxonomy::positive_negative_sets;
use topicnet_core::{Architecture, Document, ObjectiveConfig, TopicTree, TreeIndex};

#[test]
fn more_samples_lower_the_elbo_variance() {
    let params = toy_params(None, 8);
    let docs = toy_batch();
    let batch: Vec<&Document> = docs.iter().collect();
    let cfg = ObjectiveConfig::default();
    let variance = |samples: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(samples as u64);
        let xs: Vec<f64> = (0..100).map(|_| elbo(&params, &batch, &mut rng, samples, &cfg).unwrap().total).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let (one, eight) = (variance(1), variance(8));
    assert!(eight < one, "S=1 variance {one}, S=8 variance {eight}");
}

#[test]
fn satisfied_prior_adds_no_gradient() {
    let params = toy_params(None, 9);
    let tree = toy_tree().index(&toy_vocab()).unwrap();
    let docs = toy_batch();
    let batch: Vec<&Document> = docs.iter().collect();
    // A huge threshold zeroes every divergence; with no margin every hinge is 0.
    let cfg = ObjectiveConfig {
        margin: 0.0,
        gamma_threshold: 1e6,
        ..ObjectiveConfig::default()
    };
    let (with, g_with) = total_loss_and_gradients(&params, &batch, Some(&tree), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (without, g_without) = total_loss_and_gradients(&params, &batch, None, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(with.prior_loss, 0.0);
    assert_eq!(with.total, without.total);
    assert_eq!(g_with, g_without);
}

/// A random tree over `sizes` (bottom to top) where every topic has a child.
fn random_tree(sizes: &[usize], rng: &mut ChaCha8Rng) -> TopicTree {
    let layers: Vec<Vec<String>> = sizes
        .iter()
        .enumerate()
        .map(|(t, &k)| (0..k).map(|i| format!("n{t}_{i}")).collect())
        .collect();
    let parents = (0..sizes.len() - 1)
        .map(|t| {
            // The first K_{t+1} nodes cover every parent; the rest are random.
            (0..sizes[t])
                .map(|i| if i < sizes[t + 1] { i } else { rng.random_range(0..sizes[t + 1]) })
                .collect()
        })
        .collect();
    TopicTree::from_layers(layers, parents).unwrap()
}

#[test]
fn prior_matches_brute_force_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let sizes = [12, 6, 3, 2];
    let tree = random_tree(&sizes, &mut rng);
    let index = TreeIndex::from_word_ids(tree.clone(), (0..12).collect()).unwrap();
    let arch = Architecture::new(sizes.to_vec(), 3, 4).unwrap();
    let init = InitConfig {
        mean_std: 1.0,
        ..InitConfig::default()
    };
    let mut params = init_params(&arch, &init, &mut rng);
    for layer in &mut params.embeddings {
        layer.log_var.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    }
    let cfg = ObjectiveConfig {
        gamma_threshold: 0.5,
        margin: 1.0,
        ..ObjectiveConfig::default()
    };
    let (fast, _) = prior_loss(&index, &params, &cfg).unwrap();

    let mut brute = 0.0;
    for layer in 1..sizes.len() {
        for j in 0..sizes[layer] {
            let (pos, neg) = positive_negative_sets(&tree, layer, j).unwrap();
            let d = |i: usize| {
                let a = params.embeddings[layer - 1].row(i);
                let b = params.embeddings[layer].row(j);
                (gaussian_kl(a, b).unwrap() - cfg.gamma_threshold).max(0.0)
            };
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let max_pos = pos.iter().map(|&i| d(i)).fold(f64::MIN, f64::max);
            let min_neg = neg.iter().map(|&i| d(i)).fold(f64::MAX, f64::min);
            brute += (cfg.margin + max_pos - min_neg).max(0.0);
        }
    }
    assert!(brute > 0.0);
    assert!((fast - brute).abs() <= 1e-12 * brute, "{fast} vs {brute}");
}
