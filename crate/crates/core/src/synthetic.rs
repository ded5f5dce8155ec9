//! Corpora sampled from a known gamma belief network, for recovery checks.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};

use crate::corpus::{Document, HeldoutSplit, SparseCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::perplexity_with;
use crate::taxonomy::TopicTree;

/// Generating parameters: loadings `Φ^(1..T)`, the top-layer gamma shape and
/// the gamma rate of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel {
    pub phis: Vec<Array2<f64>>,
    pub top_shape: Vec<f64>,
    /// Rate of the gamma prior on `θ^(t)` at index `t - 1`.
    pub rates: Vec<f64>,
}

/// A sampled corpus with the `θ^(1)` that produced each document.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: SparseCorpus,
    pub theta_1: Vec<Vec<f64>>,
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    // Shapes this small only arise from underflowed parents; treat as zero.
    if shape < 1e-300 {
        return 0.0;
    }
    Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(rng)
}

impl GenerativeModel {
    pub fn new(phis: Vec<Array2<f64>>, top_shape: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if phis.is_empty() || rates.len() != phis.len() {
            return Err(Error::InvalidArgument("need one rate per layer".into()));
        }
        for w in phis.windows(2) {
            if w[0].ncols() != w[1].nrows() {
                return Err(Error::DimensionMismatch {
                    expected: w[0].ncols(),
                    actual: w[1].nrows(),
                });
            }
        }
        let top = phis.last().expect("non-empty").ncols();
        if top_shape.len() != top {
            return Err(Error::DimensionMismatch {
                expected: top,
                actual: top_shape.len(),
            });
        }
        for phi in &phis {
            for col in phi.columns() {
                if (col.sum() - 1.0).abs() > 1e-9 || col.iter().any(|&p| p < 0.0) {
                    return Err(Error::InvalidArgument("loading columns must be distributions".into()));
                }
            }
        }
        if top_shape.iter().chain(&rates).any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidArgument("shapes and rates must be positive".into()));
        }
        Ok(Self { phis, top_shape, rates })
    }

    pub fn vocab_size(&self) -> usize {
        self.phis[0].nrows()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.vocab_size()).chain(self.phis.iter().map(|p| p.ncols())).collect()
    }

    /// Samples `θ^(T)` down to `θ^(1)`, then Poisson counts.
    pub fn sample<R: Rng + ?Sized>(&self, num_docs: usize, rng: &mut R) -> Result<SyntheticCorpus> {
        let depth = self.phis.len();
        let mut docs = Vec::with_capacity(num_docs);
        let mut theta_1 = Vec::with_capacity(num_docs);
        for _ in 0..num_docs {
            let mut theta: Vec<f64> = self.top_shape.iter().map(|&r| gamma_draw(r, self.rates[depth - 1], rng)).collect();
            for t in (1..depth).rev() {
                let shape = self.phis[t].dot(&ndarray::ArrayView1::from(&theta[..]));
                theta = shape.iter().map(|&a| gamma_draw(a, self.rates[t - 1], rng)).collect();
            }
            let rate = self.phis[0].dot(&ndarray::ArrayView1::from(&theta[..]));
            let mut pairs = Vec::new();
            for (v, &r) in rate.iter().enumerate() {
                if r > 0.0 {
                    let c = Poisson::new(r).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(rng);
                    if c > 0.0 {
                        pairs.push((v, c as u32));
                    }
                }
            }
            docs.push(Document::from_pairs(pairs));
            theta_1.push(theta);
        }
        Ok(SyntheticCorpus {
            corpus: SparseCorpus::new(docs, self.vocab_size())?,
            theta_1,
        })
    }

    /// Held-out perplexity when each document's true `θ^(1)` is known.
    pub fn oracle_perplexity(&self, split: &HeldoutSplit, theta_1: &[Vec<f64>]) -> Result<f64> {
        if theta_1.len() != split.test.num_docs() {
            return Err(Error::DimensionMismatch {
                expected: split.test.num_docs(),
                actual: theta_1.len(),
            });
        }
        perplexity_with(&split.test, |n| {
            let rate = self.phis[0].dot(&ndarray::ArrayView1::from(&theta_1[n][..]));
            let total = rate.sum();
            Ok(rate.iter().map(|r| r / total).collect())
        })
    }

    /// Posterior draws of `θ^(1)` for one document given counts observed
    /// with thinning `fraction` (`x ~ Pois(fraction · Φ^(1) θ^(1))`), by the
    /// augment-and-split Gibbs sampler: counts are split across topics
    /// upward, Chinese-restaurant-table counts carry them through each
    /// gamma layer, and every `θ^(t)` is then redrawn from its gamma
    /// conditional downward.
    pub fn gibbs_theta_1<R: Rng + ?Sized>(
        &self,
        doc: &Document,
        fraction: f64,
        burn_in: usize,
        samples: usize,
        thin: usize,
        rng: &mut R,
    ) -> Vec<Vec<f64>> {
        let depth = self.phis.len();
        let sizes = self.layer_sizes();
        let mut theta: Vec<Vec<f64>> = (1..=depth).map(|t| vec![1.0; sizes[t]]).collect();
        // Poisson rate multiplier of each layer once everything below is marginalised.
        let mut q = vec![fraction; depth];
        for t in 1..depth {
            q[t] = (1.0 + q[t - 1] / self.rates[t - 1]).ln();
        }
        let mut out = Vec::with_capacity(samples);
        let mut iter = 0;
        while out.len() < samples {
            // Upward: latent counts m^(t) attributed to each topic of layer t.
            let mut m: Vec<Vec<f64>> = Vec::with_capacity(depth);
            let mut lower: Vec<(usize, u64)> = doc.entries().iter().map(|&(w, c)| (w, c as u64)).collect();
            for t in 0..depth {
                let phi = &self.phis[t];
                let mut counts = vec![0.0; sizes[t + 1]];
                let mut weights = vec![0.0; sizes[t + 1]];
                for &(row, c) in &lower {
                    for (k, w) in weights.iter_mut().enumerate() {
                        *w = phi[[row, k]] * theta[t][k];
                    }
                    let total: f64 = weights.iter().sum();
                    for _ in 0..c {
                        let mut u = rng.random::<f64>() * total;
                        let mut k = 0;
                        while k + 1 < weights.len() && u >= weights[k] {
                            u -= weights[k];
                            k += 1;
                        }
                        counts[k] += 1.0;
                    }
                }
                if t + 1 < depth {
                    let shape = self.phis[t + 1].dot(&ndarray::ArrayView1::from(&theta[t + 1][..]));
                    lower = counts
                        .iter()
                        .enumerate()
                        .map(|(k, &c)| (k, crt(c as u64, shape[k], rng)))
                        .filter(|&(_, l)| l > 0)
                        .collect();
                }
                m.push(counts);
            }
            // Downward: gamma conditionals.
            for t in (0..depth).rev() {
                let shape: Vec<f64> = if t + 1 == depth {
                    self.top_shape.clone()
                } else {
                    self.phis[t + 1].dot(&ndarray::ArrayView1::from(&theta[t + 1][..])).to_vec()
                };
                let rate = self.rates[t] + q[t];
                theta[t] = shape.iter().zip(&m[t]).map(|(&a, &c)| gamma_draw(a + c, rate, rng)).collect();
            }
            iter += 1;
            if iter > burn_in && (iter - burn_in).is_multiple_of(thin.max(1)) {
                out.push(theta[0].clone());
            }
        }
        out
    }

    /// Held-out perplexity of the generating model itself, averaging its
    /// loadings over `samples` Gibbs posterior draws of `θ^(1)` per document.
    pub fn posterior_perplexity<R: Rng + ?Sized>(&self, split: &HeldoutSplit, fraction: f64, samples: usize, rng: &mut R) -> Result<f64> {
        if split.train.vocab_size() != self.vocab_size() {
            return Err(Error::DimensionMismatch {
                expected: self.vocab_size(),
                actual: split.train.vocab_size(),
            });
        }
        let draws: Vec<Vec<Vec<f64>>> = split
            .train
            .docs()
            .iter()
            .zip(split.test.docs())
            .map(|(train, test)| {
                if test.is_empty() {
                    Vec::new()
                } else {
                    self.gibbs_theta_1(train, fraction, 200, samples, 10, rng)
                }
            })
            .collect();
        perplexity_with(&split.test, |n| {
            let k = self.phis[0].ncols();
            let mut sum = ndarray::Array1::<f64>::zeros(k);
            for th in &draws[n] {
                sum += &ndarray::ArrayView1::from(&th[..]);
            }
            let rate = self.phis[0].dot(&sum);
            let total = rate.sum();
            Ok(rate.iter().map(|r| r / total).collect())
        })
    }
}

/// Chinese-restaurant-table count: tables occupied by `customers` under
/// concentration `a`.
fn crt<R: Rng + ?Sized>(customers: u64, a: f64, rng: &mut R) -> u64 {
    (0..customers).filter(|&i| rng.random::<f64>() < a / (a + i as f64)).count() as u64
}

/// `rows × cols` matrix whose columns are `Dirichlet(concentration)` draws.
pub fn dirichlet_loadings<R: Rng + ?Sized>(rows: usize, cols: usize, concentration: f64, rng: &mut R) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for mut col in m.columns_mut() {
        // Normalised gammas; redraw the (vanishingly rare) all-zero column.
        loop {
            for x in col.iter_mut() {
                *x = gamma_draw(concentration, 1.0, rng);
            }
            let s = col.sum();
            if s > 0.0 {
                col.mapv_inplace(|x| x / s);
                break;
            }
        }
    }
    m
}

/// Complete tree with `branching[t]` children per node of layer `t + 1` and
/// `top` root topics. Words are named `w{i}`, topics `t{layer}_{k}`.
pub fn balanced_tree(top: usize, branching: &[usize]) -> Result<TopicTree> {
    if top == 0 || branching.is_empty() || branching.contains(&0) {
        return Err(Error::InvalidArgument("tree shape must be positive".into()));
    }
    let depth = branching.len();
    let mut sizes = vec![0; depth + 1];
    sizes[depth] = top;
    for t in (0..depth).rev() {
        sizes[t] = sizes[t + 1] * branching[t];
    }
    let layers = (0..=depth)
        .map(|t| {
            (0..sizes[t])
                .map(|i| if t == 0 { format!("w{i}") } else { format!("t{t}_{i}") })
                .collect()
        })
        .collect();
    let parents = (0..depth).map(|t| (0..sizes[t]).map(|i| i / branching[t]).collect()).collect();
    TopicTree::from_layers(layers, parents)
}

/// Vocabulary holding the word layer of `tree` in order.
pub fn tree_vocabulary(tree: &TopicTree) -> Result<Vocabulary> {
    Vocabulary::new(tree.layer(0).to_vec())
}

/// Loadings that follow `tree`: each topic puts `1 − leak` of its mass on its
/// children (Dirichlet-weighted) and spreads `leak` over everything else.
pub fn tree_loadings<R: Rng + ?Sized>(tree: &TopicTree, concentration: f64, leak: f64, rng: &mut R) -> Result<Vec<Array2<f64>>> {
    if !(0.0..1.0).contains(&leak) {
        return Err(Error::InvalidArgument("leak must lie in [0, 1)".into()));
    }
    let mut phis = Vec::with_capacity(tree.depth());
    for t in 1..=tree.depth() {
        let rows = tree.layer(t - 1).len();
        let cols = tree.layer(t).len();
        let mut phi = Array2::zeros((rows, cols));
        for j in 0..cols {
            let children = tree.children(t, j);
            let w = dirichlet_loadings(children.len(), 1, concentration, rng);
            let others = rows - children.len();
            for v in 0..rows {
                phi[[v, j]] = if others > 0 { leak / others as f64 } else { 0.0 };
            }
            let own = if others > 0 { 1.0 - leak } else { 1.0 };
            for (c, &i) in children.iter().enumerate() {
                phi[[i, j]] = own * w[[c, 0]];
            }
        }
        phis.push(phi);
    }
    Ok(phis)
}
