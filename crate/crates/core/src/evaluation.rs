//! Held-out perplexity, topic coherence/diversity/quality, taxonomy alignment
//! diagnostics and exports.

use std::collections::HashSet;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{HeldoutSplit, SparseCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::geometry::gaussian_kl_unchecked;
use crate::model::{encode, encode_entries, ModelParams, Phis, ThetaMode};
use crate::taxonomy::TreeIndex;

/// Per-held-out-word perplexity given a predictive word distribution for
/// each document. Documents without held-out tokens are skipped.
pub fn perplexity_with<F>(test: &SparseCorpus, mut predict: F) -> Result<f64>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let mut log_lik = 0.0;
    let mut tokens = 0u64;
    for (n, doc) in test.docs().iter().enumerate() {
        if doc.is_empty() {
            continue;
        }
        let probs = predict(n)?;
        for &(w, y) in doc.entries() {
            log_lik += y as f64 * probs[w].ln();
        }
        tokens += doc.total();
    }
    if tokens == 0 {
        return Err(Error::InvalidArgument("held-out side has no tokens".into()));
    }
    let ppl = (-log_lik / tokens as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::non_finite("perplexity"));
    }
    Ok(ppl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub samples: usize,
    /// Perplexity obtained from each posterior sample on its own.
    pub per_sample: Vec<f64>,
    pub per_sample_std: f64,
    pub heldout_tokens: u64,
    pub split_seed: u64,
}

/// Perplexity of the held-out tokens with `samples` posterior draws of
/// `θ^(1)` per document, conditioned on the training counts.
pub fn heldout_perplexity<R: Rng + ?Sized>(params: &ModelParams, split: &HeldoutSplit, samples: usize, rng: &mut R) -> Result<PerplexityReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one posterior sample".into()));
    }
    if split.train.vocab_size() != params.vocab_size() {
        return Err(Error::DimensionMismatch {
            expected: params.vocab_size(),
            actual: split.train.vocab_size(),
        });
    }
    let phis = Phis::compute(params);
    let phi1 = phis.layer(1);
    let k1 = phi1.ncols();
    // theta draws per document, per sample.
    let mut draws: Vec<Vec<Vec<f64>>> = Vec::with_capacity(split.test.num_docs());
    for (n, doc) in split.test.docs().iter().enumerate() {
        if doc.is_empty() {
            draws.push(Vec::new());
            continue;
        }
        let train_doc = split.train.doc(n);
        let mut per = Vec::with_capacity(samples);
        for _ in 0..samples {
            per.push(encode(params, &phis, train_doc, true, rng)?.theta[1].clone());
        }
        draws.push(per);
    }
    let predict = |thetas: &[&Vec<f64>]| -> Vec<f64> {
        let mut sum = Array1::<f64>::zeros(k1);
        for th in thetas {
            sum += &Array1::from(th.to_vec());
        }
        let rate = phi1.dot(&sum);
        let total = rate.sum();
        rate.mapv(|r| r / total).to_vec()
    };
    let perplexity = perplexity_with(&split.test, |n| Ok(predict(&draws[n].iter().collect::<Vec<_>>())))?;
    let per_sample = (0..samples)
        .map(|s| perplexity_with(&split.test, |n| Ok(predict(&[&draws[n][s]]))))
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_sample.iter().sum::<f64>() / samples as f64;
    let var = per_sample.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / samples.max(2).saturating_sub(1) as f64;
    Ok(PerplexityReport {
        perplexity,
        samples,
        per_sample,
        per_sample_std: var.sqrt(),
        heldout_tokens: split.test.total_tokens(),
        split_seed: split.seed,
    })
}

/// Added to every word count of the unigram baseline so held-out words
/// unseen in training keep nonzero probability.
pub const UNIGRAM_PSEUDO_COUNT: f64 = 1.0;

/// Perplexity of the add-one smoothed unigram distribution of the training side.
pub fn unigram_perplexity(split: &HeldoutSplit) -> Result<f64> {
    let v = split.train.vocab_size() as f64;
    let total = split.train.total_tokens() as f64 + UNIGRAM_PSEUDO_COUNT * v;
    let unigram: Vec<f64> = split
        .train
        .unigram()
        .iter()
        .map(|&p| (p * split.train.total_tokens() as f64 + UNIGRAM_PSEUDO_COUNT) / total)
        .collect();
    perplexity_with(&split.test, |_| Ok(unigram.clone()))
}

/// Topic `k` of layer `t` projected to the vocabulary: column `k` of
/// `Φ^(1) Φ^(2) ··· Φ^(t)`.
pub fn effective_word_distribution(phis: &Phis, t: usize, k: usize) -> Result<Vec<f64>> {
    if t == 0 || t > phis.0.len() {
        return Err(Error::InvalidArgument(format!("layer {t} outside 1..={}", phis.0.len())));
    }
    if k >= phis.layer(t).ncols() {
        return Err(Error::InvalidArgument(format!("topic {k} not in layer {t}")));
    }
    let mut v = phis.layer(t).column(k).to_owned();
    for s in (1..t).rev() {
        v = phis.layer(s).dot(&v);
    }
    Ok(v.to_vec())
}

/// Word ids of the `n` largest entries, ties broken by lower id.
pub fn top_words(dist: &[f64], n: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    idx.into_iter().take(n).map(|i| (i, dist[i])).collect()
}

/// Document-frequency index over a reference corpus.
#[derive(Debug, Clone)]
pub struct CooccurrenceIndex {
    postings: Vec<Vec<u32>>,
    num_docs: usize,
}

impl CooccurrenceIndex {
    pub fn new(reference: &SparseCorpus) -> Result<Self> {
        if reference.num_docs() == 0 {
            return Err(Error::InvalidArgument("reference corpus is empty".into()));
        }
        let mut postings = vec![Vec::new(); reference.vocab_size()];
        for (d, doc) in reference.docs().iter().enumerate() {
            for &(w, _) in doc.entries() {
                postings[w].push(d as u32);
            }
        }
        Ok(Self {
            postings,
            num_docs: reference.num_docs(),
        })
    }

    pub fn doc_freq(&self, w: usize) -> usize {
        self.postings.get(w).map_or(0, Vec::len)
    }

    pub fn joint_freq(&self, a: usize, b: usize) -> usize {
        let (x, y) = (&self.postings[a], &self.postings[b]);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < x.len() && j < y.len() {
            match x[i].cmp(&y[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }
}

/// Pseudo-count substituted for a zero joint document frequency.
pub const NPMI_ZERO_JOINT_PSEUDO_COUNT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    pub npmi: f64,
    pub pairs: usize,
    /// Pairs skipped because a word never occurs in the reference corpus.
    pub skipped_pairs: usize,
}

/// NPMI of one word pair from document frequencies.
pub fn pair_npmi(index: &CooccurrenceIndex, a: usize, b: usize) -> Option<f64> {
    let n = index.num_docs() as f64;
    let (da, db) = (index.doc_freq(a), index.doc_freq(b));
    if da == 0 || db == 0 {
        return None;
    }
    let joint = index.joint_freq(a, b) as f64;
    let joint = if joint == 0.0 { NPMI_ZERO_JOINT_PSEUDO_COUNT } else { joint };
    let (pa, pb, pab) = (da as f64 / n, db as f64 / n, joint / n);
    if pab >= 1.0 {
        return Some(1.0);
    }
    Some(((pab.ln() - pa.ln() - pb.ln()) / -pab.ln()).clamp(-1.0, 1.0))
}

/// Mean NPMI over all unordered pairs of `words`.
pub fn npmi_coherence(words: &[usize], index: &CooccurrenceIndex) -> Coherence {
    let mut sum = 0.0;
    let mut pairs = 0;
    let mut skipped = 0;
    for i in 0..words.len() {
        for j in i + 1..words.len() {
            match pair_npmi(index, words[i], words[j]) {
                Some(v) => {
                    sum += v;
                    pairs += 1;
                }
                None => skipped += 1,
            }
        }
    }
    Coherence {
        npmi: if pairs > 0 { sum / pairs as f64 } else { 0.0 },
        pairs,
        skipped_pairs: skipped,
    }
}

pub const DIVERSITY_TOP_N: usize = 25;

/// Share of unique words among the top-25 lists of all topics.
pub fn topic_diversity(lists: &[Vec<usize>]) -> Result<f64> {
    topic_diversity_n(lists, DIVERSITY_TOP_N)
}

/// [`topic_diversity`] for lists of length `n`.
pub fn topic_diversity_n(lists: &[Vec<usize>], n: usize) -> Result<f64> {
    if lists.is_empty() || n == 0 {
        return Err(Error::InvalidArgument("need at least one non-empty topic list".into()));
    }
    if let Some(l) = lists.iter().find(|l| l.len() != n) {
        return Err(Error::InvalidArgument(format!("topic list has {} words, expected {n}", l.len())));
    }
    let unique: HashSet<usize> = lists.iter().flatten().copied().collect();
    Ok(unique.len() as f64 / (n * lists.len()) as f64)
}

pub fn topic_quality(coherence: f64, diversity: f64) -> f64 {
    coherence * diversity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub index: usize,
    pub concept: Option<String>,
    pub top_words: Vec<usize>,
    pub top_terms: Option<Vec<String>>,
    pub weights: Vec<f64>,
    pub coherence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub topics: Vec<TopicEntry>,
    pub coherence: f64,
    pub diversity: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicReport {
    pub layers: Vec<LayerReport>,
    pub top_n: usize,
    pub diversity_top_n: usize,
    pub coherence_reference: String,
    pub npmi_zero_joint_pseudo_count: f64,
}

impl TopicReport {
    pub fn num_topics(&self) -> usize {
        self.layers.iter().map(|l| l.topics.len()).sum()
    }
}

/// Top words, coherence and diversity for every topic of every layer.
pub fn topic_report(
    params: &ModelParams,
    reference: &SparseCorpus,
    vocab: Option<&Vocabulary>,
    tree: Option<&TreeIndex>,
    top_n: usize,
) -> Result<TopicReport> {
    let phis = Phis::compute(params);
    let index = CooccurrenceIndex::new(reference)?;
    let v = params.vocab_size();
    let div_n = DIVERSITY_TOP_N.min(v);
    let mut layers = Vec::new();
    for t in 1..=params.depth() {
        let mut topics = Vec::new();
        let mut lists = Vec::new();
        for k in 0..params.arch.layer_sizes[t] {
            let dist = effective_word_distribution(&phis, t, k)?;
            let top = top_words(&dist, top_n.min(v));
            let words: Vec<usize> = top.iter().map(|p| p.0).collect();
            lists.push(top_words(&dist, div_n).into_iter().map(|p| p.0).collect::<Vec<_>>());
            topics.push(TopicEntry {
                index: k,
                concept: tree.map(|tr| tr.tree().layer(t)[k].clone()),
                top_terms: vocab.map(|voc| words.iter().map(|&w| voc.term(w).unwrap_or("?").to_string()).collect()),
                weights: top.iter().map(|p| p.1).collect(),
                coherence: npmi_coherence(&words, &index).npmi,
                top_words: words,
            });
        }
        let coherence = topics.iter().map(|t| t.coherence).sum::<f64>() / topics.len() as f64;
        let diversity = topic_diversity_n(&lists, div_n)?;
        layers.push(LayerReport {
            layer: t,
            topics,
            coherence,
            diversity,
            quality: topic_quality(coherence, diversity),
        });
    }
    Ok(TopicReport {
        layers,
        top_n,
        diversity_top_n: div_n,
        coherence_reference: "training split".into(),
        npmi_zero_joint_pseudo_count: NPMI_ZERO_JOINT_PSEUDO_COUNT,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub gamma_threshold: f64,
    pub num_edges: usize,
    pub num_non_edges: usize,
    pub edge_mean: f64,
    pub non_edge_mean: f64,
    pub edge_encapsulation: f64,
    pub non_edge_encapsulation: f64,
    /// One-sided permutation p-value for `edge_mean < non_edge_mean`.
    pub p_value: f64,
    pub permutations: usize,
}

/// Divergences over tree edges against an equal number of sampled
/// non-edges: each edge's child is paired with a random non-parent topic.
pub fn taxonomy_alignment(params: &ModelParams, tree: &TreeIndex, gamma_threshold: f64, permutations: usize, seed: u64) -> Result<AlignmentReport> {
    if tree.depth() != params.depth() {
        return Err(Error::Config("tree depth does not match the model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = |lower: usize, i: usize, j: usize| {
        let kl = gaussian_kl_unchecked(params.embeddings[lower].row(i), params.embeddings[lower + 1].row(j));
        (kl - gamma_threshold).max(0.0)
    };
    let mut edges = Vec::new();
    let mut non_edges = Vec::new();
    for t in 1..=params.depth() {
        let width = params.arch.layer_sizes[t];
        for (i, j) in tree.edges(t) {
            edges.push(d(t - 1, i, j));
            if width > 1 {
                let others: Vec<usize> = (0..width).filter(|&x| x != j).collect();
                let &o = others.choose(&mut rng).expect("non-empty");
                non_edges.push(d(t - 1, i, o));
            }
        }
    }
    if edges.is_empty() || non_edges.is_empty() {
        return Err(Error::InvalidArgument("alignment needs edges and non-edges".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let rate = |v: &[f64]| v.iter().filter(|&&x| x == 0.0).count() as f64 / v.len() as f64;
    let observed = mean(&non_edges) - mean(&edges);
    let mut pooled: Vec<f64> = edges.iter().chain(&non_edges).copied().collect();
    let total: f64 = pooled.iter().sum();
    let ne = edges.len();
    let mut hits = 0usize;
    for _ in 0..permutations {
        // Partial Fisher-Yates: the first `ne` entries form the relabelled edge set.
        for i in 0..ne {
            let j = rng.random_range(i..pooled.len());
            pooled.swap(i, j);
        }
        let e: f64 = pooled[..ne].iter().sum();
        let diff = (total - e) / (pooled.len() - ne) as f64 - e / ne as f64;
        if diff >= observed {
            hits += 1;
        }
    }
    Ok(AlignmentReport {
        gamma_threshold,
        num_edges: edges.len(),
        num_non_edges: non_edges.len(),
        edge_mean: mean(&edges),
        non_edge_mean: mean(&non_edges),
        edge_encapsulation: rate(&edges),
        non_edge_encapsulation: rate(&non_edges),
        p_value: (hits + 1) as f64 / (permutations + 1) as f64,
        permutations,
    })
}

/// Mean-mode `θ` of every layer, concatenated bottom-up, one row per document.
pub fn export_document_features(params: &ModelParams, corpus: &SparseCorpus) -> Result<Array2<f64>> {
    if corpus.vocab_size() != params.vocab_size() {
        return Err(Error::DimensionMismatch {
            expected: params.vocab_size(),
            actual: corpus.vocab_size(),
        });
    }
    let phis = Phis::compute(params);
    let width = params.arch.num_topics();
    let mut out = Array2::zeros((corpus.num_docs(), width));
    for (n, doc) in corpus.docs().iter().enumerate() {
        let entries: Vec<(usize, f64)> = doc.entries().iter().map(|&(w, c)| (w, c as f64)).collect();
        let st = encode_entries(params, &phis, &entries, &ThetaMode::Mean)?;
        let row: Vec<f64> = st.theta[1..].iter().flatten().copied().collect();
        out.row_mut(n).assign(&Array1::from(row));
    }
    Ok(out)
}

/// Tab-separated rows `doc<TAB>f_1<TAB>...`, preceded by a `#` header line.
pub fn features_tsv(features: &Array2<f64>, header: &str) -> String {
    let mut out = format!("# {header}\n");
    for (n, row) in features.rows().into_iter().enumerate() {
        let _ = write!(out, "{n}");
        for v in row {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

/// Embedding means as `id<TAB>layer<TAB>concept<TAB>m_1 ...` rows.
pub fn embedding_means_tsv(params: &ModelParams, vocab: Option<&Vocabulary>, tree: Option<&TreeIndex>, header: &str) -> String {
    let mut out = format!("# {header}\n");
    for (t, layer) in params.embeddings.iter().enumerate() {
        for i in 0..layer.len() {
            let concept = match (t, vocab, tree) {
                (0, Some(v), _) => v.term(i).unwrap_or("?").to_string(),
                (0, None, _) => format!("word{i}"),
                (_, _, Some(tr)) => tr.tree().layer(t)[i].clone(),
                _ => format!("topic{t}_{i}"),
            };
            let _ = write!(out, "{i}\t{t}\t{concept}");
            for m in layer.mean.row(i) {
                let _ = write!(out, "\t{m}");
            }
            out.push('\n');
        }
    }
    out
}
