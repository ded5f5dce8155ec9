//! Shared fixtures for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use topicnet_core::model::init_params;
use topicnet_core::synthetic::{balanced_tree, tree_loadings, tree_vocabulary, GenerativeModel};
use topicnet_core::{Architecture, Document, InitConfig, ModelParams, TreeIndex};

pub struct Fixture {
    pub params: ModelParams,
    pub docs: Vec<Document>,
    pub tree: TreeIndex,
}

/// A taxonomy-shaped model of `top` root topics with the given fan-outs,
/// `n`-dimensional embeddings and 200 documents drawn from matching loadings.
pub fn fixture(top: usize, branching: &[usize], n: usize, hidden: usize) -> Fixture {
    let tree = balanced_tree(top, branching).unwrap();
    let vocab = tree_vocabulary(&tree).unwrap();
    let index = tree.index(&vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let phis = tree_loadings(&tree, 0.5, 0.05, &mut rng).unwrap();
    let depth = phis.len();
    let mut rates = vec![0.1; depth];
    rates[depth - 1] = 1.0;
    let truth = GenerativeModel::new(phis, vec![1.0; top], rates).unwrap();
    let docs = truth.sample(200, &mut rng).unwrap().corpus.docs().to_vec();
    let arch = Architecture::new(truth.layer_sizes(), n, hidden).unwrap();
    let params = init_params(&arch, &InitConfig::default(), &mut rng);
    Fixture { params, docs, tree: index }
}
