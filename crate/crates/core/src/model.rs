//! Generative stack and Weibull upward-downward encoder.
//!
//! Layer `t` of the decoder owns `K_t` Gaussian embeddings in a shared
//! `n`-dimensional space; layer 0 holds the `V` word embeddings. The loading
//! matrix `Φ^(t)` (`K_{t-1} × K_t`) is the column-wise softmax of the log
//! expected-likelihood kernel between the two layers.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::geometry::{log_el_kernel_unchecked, GaussianEmbedding, GaussianRef};
use crate::special::{gamma, sigmoid, softplus};
use crate::taxonomy::TopicTree;

/// Lower clamp on Weibull shapes. Small shapes give `θ = λ w^{1/k}` such heavy
/// tails that single reparameterised draws dominate the gradient.
pub const WEIBULL_SHAPE_MIN: f64 = 0.5;
/// Lower clamp on Weibull scales.
pub const WEIBULL_SCALE_MIN: f64 = 1e-10;
/// Default additive floor on the gamma prior shapes `Φθ`.
pub const DEFAULT_SHAPE_FLOOR: f64 = 1e-3;

/// Sizes of every tensor in the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[V, K_1, .., K_T]`.
    pub layer_sizes: Vec<usize>,
    pub embedding_dim: usize,
    /// Widths of the upward hidden states `h'^(0) .. h'^(T)`.
    pub hidden_widths: Vec<usize>,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>, embedding_dim: usize, hidden: usize) -> Result<Self> {
        let depth = layer_sizes.len().saturating_sub(1);
        Self::with_hidden_widths(layer_sizes, embedding_dim, vec![hidden; depth + 1])
    }

    pub fn with_hidden_widths(layer_sizes: Vec<usize>, embedding_dim: usize, hidden_widths: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("need a word layer and at least one topic layer".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config("every layer needs at least one unit".into()));
        }
        if embedding_dim == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        if hidden_widths.len() != layer_sizes.len() || hidden_widths.contains(&0) {
            return Err(Error::Config(format!(
                "need {} positive hidden widths, got {:?}",
                layer_sizes.len(),
                hidden_widths
            )));
        }
        Ok(Self {
            layer_sizes,
            embedding_dim,
            hidden_widths,
        })
    }

    /// Word layer of size `vocab_size` followed by the topic layers of `tree`.
    pub fn from_tree(vocab_size: usize, tree: &TopicTree, embedding_dim: usize, hidden: usize) -> Result<Self> {
        if tree.layer(0).len() > vocab_size {
            return Err(Error::Config("tree has more words than the vocabulary".into()));
        }
        let mut sizes = vec![vocab_size];
        sizes.extend_from_slice(&tree.layer_sizes()[1..]);
        Self::new(sizes, embedding_dim, hidden)
    }

    /// Number of latent layers `T`.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn vocab_size(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Width of the head input `h^(t)`: the upward state, concatenated with
    /// `Φ^(t+1) θ^(t+1)` below the top layer.
    pub fn head_input_width(&self, t: usize) -> usize {
        if t < self.depth() {
            self.hidden_widths[t] + self.layer_sizes[t]
        } else {
            self.hidden_widths[t]
        }
    }

    /// Total number of topics across the latent layers.
    pub fn num_topics(&self) -> usize {
        self.layer_sizes[1..].iter().sum()
    }
}

/// Means and log-variances of one layer, one row per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingLayer {
    pub mean: Array2<f64>,
    pub log_var: Array2<f64>,
}

impl EmbeddingLayer {
    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn row(&self, i: usize) -> GaussianRef<'_> {
        GaussianRef {
            mean: self.mean.row(i).to_slice().expect("standard layout"),
            log_var: self.log_var.row(i).to_slice().expect("standard layout"),
        }
    }

    pub fn embedding(&self, i: usize) -> GaussianEmbedding {
        GaussianEmbedding {
            mean: self.mean.row(i).to_vec(),
            log_var: self.log_var.row(i).to_vec(),
        }
    }
}

/// Encoder weights of latent layer `t >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    /// `H_t × H_{t-1}`.
    pub up_weight: Array2<f64>,
    pub up_bias: Array1<f64>,
    /// Identity-path projection, present only when `H_t != H_{t-1}`.
    pub skip: Option<Array2<f64>>,
    /// `K_t × head_input_width(t)`.
    pub shape_weight: Array2<f64>,
    pub shape_bias: Array1<f64>,
    pub scale_weight: Array2<f64>,
    pub scale_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    /// `T + 1` layers; index 0 is the word layer.
    pub embeddings: Vec<EmbeddingLayer>,
    /// `V × H_0`, stored word-major so sparse documents touch whole rows.
    pub input_weight: Array2<f64>,
    pub input_bias: Array1<f64>,
    /// `encoder[t - 1]` serves latent layer `t`.
    pub encoder: Vec<EncoderLayer>,
    /// Log of the top-layer gamma shape vector.
    pub log_gamma_shape: Array1<f64>,
    /// Gamma rate of the prior on `θ^(t)`, at index `t - 1`. Not trained.
    pub scale_c: Vec<f64>,
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

fn uniform_vector<R: Rng + ?Sized>(len: usize, bound: f64, rng: &mut R) -> Array1<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array1::from_shape_simple_fn(len, || dist.sample(rng))
}

/// Initialisation constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub mean_std: f64,
    pub variance: f64,
    pub gamma_shape: f64,
    pub scale_c: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            mean_std: 0.02,
            variance: 0.05,
            gamma_shape: 0.1,
            scale_c: 1.0,
        }
    }
}

/// Random initial parameters for `arch`.
pub fn init_params<R: Rng + ?Sized>(arch: &Architecture, init: &InitConfig, rng: &mut R) -> ModelParams {
    let n = arch.embedding_dim;
    let depth = arch.depth();
    let normal = Normal::new(0.0, init.mean_std).expect("valid std");
    let embeddings = arch
        .layer_sizes
        .iter()
        .map(|&k| EmbeddingLayer {
            mean: Array2::from_shape_simple_fn((k, n), || normal.sample(rng)),
            log_var: Array2::from_elem((k, n), init.variance.ln()),
        })
        .collect();

    let v = arch.vocab_size();
    let h0 = arch.hidden_widths[0];
    let bound = 1.0 / (v as f64).sqrt();
    let input_weight = uniform_matrix(v, h0, bound, rng);
    let input_bias = uniform_vector(h0, bound, rng);

    let mut encoder = Vec::with_capacity(depth);
    for t in 1..=depth {
        let (prev, cur) = (arch.hidden_widths[t - 1], arch.hidden_widths[t]);
        let bound = 1.0 / (prev as f64).sqrt();
        let up_weight = uniform_matrix(cur, prev, bound, rng);
        let up_bias = uniform_vector(cur, bound, rng);
        let skip = (prev != cur).then(|| uniform_matrix(cur, prev, bound, rng));
        let width = arch.head_input_width(t);
        let k = arch.layer_sizes[t];
        let bound = 1.0 / (width as f64).sqrt();
        encoder.push(EncoderLayer {
            up_weight,
            up_bias,
            skip,
            shape_weight: uniform_matrix(k, width, bound, rng),
            shape_bias: uniform_vector(k, bound, rng),
            scale_weight: uniform_matrix(k, width, bound, rng),
            scale_bias: uniform_vector(k, bound, rng),
        });
    }

    ModelParams {
        arch: arch.clone(),
        embeddings,
        input_weight,
        input_bias,
        encoder,
        log_gamma_shape: Array1::from_elem(arch.layer_sizes[depth], init.gamma_shape.ln()),
        scale_c: vec![init.scale_c; depth],
    }
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

impl ModelParams {
    pub fn depth(&self) -> usize {
        self.arch.depth()
    }

    pub fn vocab_size(&self) -> usize {
        self.arch.vocab_size()
    }

    pub fn gamma_shape(&self) -> Array1<f64> {
        self.log_gamma_shape.mapv(f64::exp)
    }

    /// Every trainable tensor as a named flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (t, e) in self.embeddings.iter().enumerate() {
            out.push((format!("embeddings[{t}].mean"), slice2(&e.mean)));
            out.push((format!("embeddings[{t}].log_var"), slice2(&e.log_var)));
        }
        out.push(("input_weight".into(), slice2(&self.input_weight)));
        out.push(("input_bias".into(), slice1(&self.input_bias)));
        for (i, l) in self.encoder.iter().enumerate() {
            let t = i + 1;
            out.push((format!("encoder[{t}].up_weight"), slice2(&l.up_weight)));
            out.push((format!("encoder[{t}].up_bias"), slice1(&l.up_bias)));
            if let Some(p) = &l.skip {
                out.push((format!("encoder[{t}].skip"), slice2(p)));
            }
            out.push((format!("encoder[{t}].shape_weight"), slice2(&l.shape_weight)));
            out.push((format!("encoder[{t}].shape_bias"), slice1(&l.shape_bias)));
            out.push((format!("encoder[{t}].scale_weight"), slice2(&l.scale_weight)));
            out.push((format!("encoder[{t}].scale_bias"), slice1(&l.scale_bias)));
        }
        out.push(("log_gamma_shape".into(), slice1(&self.log_gamma_shape)));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn m2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn m1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out = Vec::new();
        for e in &mut self.embeddings {
            out.push(m2(&mut e.mean));
            out.push(m2(&mut e.log_var));
        }
        out.push(m2(&mut self.input_weight));
        out.push(m1(&mut self.input_bias));
        for l in &mut self.encoder {
            out.push(m2(&mut l.up_weight));
            out.push(m1(&mut l.up_bias));
            if let Some(p) = &mut l.skip {
                out.push(m2(p));
            }
            out.push(m2(&mut l.shape_weight));
            out.push(m1(&mut l.shape_bias));
            out.push(m2(&mut l.scale_weight));
            out.push(m1(&mut l.scale_bias));
        }
        out.push(m1(&mut self.log_gamma_shape));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, s)| s.len()).sum()
    }

    /// Same shapes, every trainable entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Checks the structural invariants; used after loading checkpoints.
    pub fn validate(&self) -> Result<()> {
        let arch = &self.arch;
        let depth = arch.depth();
        let bad = |what: String| Err(Error::Checkpoint(what));
        if self.embeddings.len() != depth + 1 || self.encoder.len() != depth || self.scale_c.len() != depth {
            return bad("layer count mismatch".into());
        }
        for (t, e) in self.embeddings.iter().enumerate() {
            let want = (arch.layer_sizes[t], arch.embedding_dim);
            if e.mean.dim() != want || e.log_var.dim() != want {
                return bad(format!("embedding layer {t} has shape {:?}, want {want:?}", e.mean.dim()));
            }
        }
        if self.input_weight.dim() != (arch.vocab_size(), arch.hidden_widths[0])
            || self.input_bias.len() != arch.hidden_widths[0]
        {
            return bad("input layer shape mismatch".into());
        }
        for t in 1..=depth {
            let l = &self.encoder[t - 1];
            let (prev, cur) = (arch.hidden_widths[t - 1], arch.hidden_widths[t]);
            let k = arch.layer_sizes[t];
            let w = arch.head_input_width(t);
            let ok = l.up_weight.dim() == (cur, prev)
                && l.up_bias.len() == cur
                && l.skip.as_ref().map(|p| p.dim()) == (prev != cur).then_some((cur, prev))
                && l.shape_weight.dim() == (k, w)
                && l.scale_weight.dim() == (k, w)
                && l.shape_bias.len() == k
                && l.scale_bias.len() == k;
            if !ok {
                return bad(format!("encoder layer {t} shape mismatch"));
            }
        }
        if self.log_gamma_shape.len() != arch.layer_sizes[depth] {
            return bad("gamma shape length mismatch".into());
        }
        if self.scale_c.iter().any(|&c| !(c > 0.0)) {
            return bad("scale constants must be positive".into());
        }
        if let Some((name, _)) = self.tensors().into_iter().find(|(_, s)| s.iter().any(|v| !v.is_finite())) {
            return bad(format!("non-finite entries in {name}"));
        }
        Ok(())
    }
}

/// Column-stochastic `Φ^(t)` for layer `t` in `1..=T`.
pub fn compute_phi(params: &ModelParams, t: usize) -> Array2<f64> {
    assert!(t >= 1 && t <= params.depth(), "layer {t} outside 1..={}", params.depth());
    let lower = &params.embeddings[t - 1];
    let upper = &params.embeddings[t];
    let (rows, cols) = (lower.len(), upper.len());
    let columns: Vec<Vec<f64>> = (0..cols)
        .into_par_iter()
        .map(|k| {
            let top = upper.row(k);
            let mut col: Vec<f64> = (0..rows).map(|v| log_el_kernel_unchecked(lower.row(v), top)).collect();
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in col.iter_mut() {
                *c = (*c - max).exp();
                sum += *c;
            }
            col.iter_mut().for_each(|c| *c /= sum);
            col
        })
        .collect();
    let mut phi = Array2::zeros((rows, cols));
    for (k, col) in columns.into_iter().enumerate() {
        phi.column_mut(k).assign(&Array1::from(col));
    }
    phi
}

/// `Φ^(1) .. Φ^(T)`, stored at index `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Phis(pub Vec<Array2<f64>>);

impl Phis {
    pub fn compute(params: &ModelParams) -> Self {
        Self((1..=params.depth()).map(|t| compute_phi(params, t)).collect())
    }

    pub fn layer(&self, t: usize) -> &Array2<f64> {
        &self.0[t - 1]
    }
}

/// Poisson rates `Φ^(1) θ^(1)` over the vocabulary.
pub fn decode(phis: &Phis, theta_1: &[f64]) -> Result<Vec<f64>> {
    let phi = phis.layer(1);
    if theta_1.len() != phi.ncols() {
        return Err(Error::DimensionMismatch {
            expected: phi.ncols(),
            actual: theta_1.len(),
        });
    }
    if theta_1.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidArgument("theta must be nonnegative".into()));
    }
    Ok(phi.dot(&ArrayView1::from(theta_1)).to_vec())
}

/// Gamma prior shape of `θ^(t)`: `Φ^(t+1) θ^(t+1) + floor` below the top,
/// the learned top-layer shape at `t = T`.
pub fn prior_shape(params: &ModelParams, phis: &Phis, t: usize, theta_next: Option<&[f64]>, shape_floor: f64) -> Result<Vec<f64>> {
    let depth = params.depth();
    if t == 0 || t > depth {
        return Err(Error::InvalidArgument(format!("layer {t} outside 1..={depth}")));
    }
    if t == depth {
        return Ok(params.gamma_shape().to_vec());
    }
    let theta = theta_next.ok_or_else(|| Error::InvalidArgument(format!("layer {t} needs theta of layer {}", t + 1)))?;
    let phi = phis.layer(t + 1);
    if theta.len() != phi.ncols() {
        return Err(Error::DimensionMismatch {
            expected: phi.ncols(),
            actual: theta.len(),
        });
    }
    Ok(phi.dot(&ArrayView1::from(theta)).iter().map(|v| v + shape_floor).collect())
}

/// `θ = λ (−ln(1 − u))^(1/k)`, the inverse Weibull CDF.
pub fn sample_weibull(k: &[f64], lambda: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if k.len() != lambda.len() || k.len() != u.len() {
        return Err(Error::DimensionMismatch {
            expected: k.len(),
            actual: if lambda.len() != k.len() { lambda.len() } else { u.len() },
        });
    }
    if k.iter().chain(lambda).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("Weibull parameters must be positive".into()));
    }
    if u.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::InvalidArgument("uniform draws must lie in (0, 1)".into()));
    }
    Ok(k.iter()
        .zip(lambda)
        .zip(u)
        .map(|((&k, &l), &u)| l * (-(-u).ln_1p()).powf(1.0 / k))
        .collect())
}

pub fn weibull_mean(k: f64, lambda: f64) -> f64 {
    lambda * gamma(1.0 + 1.0 / k)
}

/// How `θ` is produced from the Weibull parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaMode {
    /// The Weibull mean `λ Γ(1 + 1/k)`.
    Mean,
    /// Reparameterised samples from uniforms `u[t - 1]` of length `K_t`.
    Sample(Vec<Vec<f64>>),
}

impl ThetaMode {
    pub fn draw<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        ThetaMode::Sample(
            arch.layer_sizes[1..]
                .iter()
                .map(|&k| (0..k).map(|_| rng.sample::<f64, _>(Open01)).collect())
                .collect(),
        )
    }
}

/// Encoder activations for one document. Index `t` runs over `0..=T`;
/// entries for the word layer (`t = 0`) are empty where undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// Upward states `h'^(0) .. h'^(T)`.
    pub hidden_up: Vec<Vec<f64>>,
    /// Head inputs `h^(t)`.
    pub hidden: Vec<Vec<f64>>,
    pub weibull_k: Vec<Vec<f64>>,
    pub weibull_lambda: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub(crate) input: Vec<(usize, f64)>,
    pub(crate) pre_input: Vec<f64>,
    pub(crate) pre_up: Vec<Vec<f64>>,
    pub(crate) pre_shape: Vec<Vec<f64>>,
    pub(crate) pre_scale: Vec<Vec<f64>>,
    /// `−ln(1 − u)` per layer when sampling, empty in mean mode.
    pub(crate) exp_noise: Vec<Vec<f64>>,
    /// `Φ^(t+1) θ^(t+1)` for `t < T`.
    pub(crate) top_down: Vec<Vec<f64>>,
}

impl LatentState {
    pub fn depth(&self) -> usize {
        self.theta.len() - 1
    }
}

fn check_finite(values: &[f64], what: &str, t: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(format!("{what} at layer {t}")))
    }
}

fn matvec(w: &Array2<f64>, x: &[f64], b: &Array1<f64>) -> Vec<f64> {
    let mut out = w.dot(&ArrayView1::from(x));
    out += b;
    out.to_vec()
}

/// Runs the upward-downward encoder on sparse inputs `(word, count)`.
pub fn encode_entries(params: &ModelParams, phis: &Phis, entries: &[(usize, f64)], mode: &ThetaMode) -> Result<LatentState> {
    let arch = &params.arch;
    let depth = arch.depth();
    let v = arch.vocab_size();
    let mut input = Vec::with_capacity(entries.len());
    for &(w, c) in entries {
        if w >= v {
            return Err(Error::WordIdOutOfRange { id: w, vocab_size: v });
        }
        if !(c >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative count {c} for word {w}")));
        }
        if c > 0.0 {
            input.push((w, c.ln_1p()));
        }
    }

    let mut pre_input = params.input_bias.to_vec();
    for &(w, x) in &input {
        for (p, wt) in pre_input.iter_mut().zip(params.input_weight.row(w)) {
            *p += x * wt;
        }
    }
    let mut hidden_up = Vec::with_capacity(depth + 1);
    hidden_up.push(pre_input.iter().map(|&z| z.max(0.0)).collect::<Vec<_>>());
    check_finite(&hidden_up[0], "hidden state", 0)?;
    let mut pre_up = vec![Vec::new()];
    for t in 1..=depth {
        let layer = &params.encoder[t - 1];
        let prev = &hidden_up[t - 1];
        let pre = matvec(&layer.up_weight, prev, &layer.up_bias);
        let identity: Vec<f64> = match &layer.skip {
            Some(p) => p.dot(&ArrayView1::from(prev.as_slice())).to_vec(),
            None => prev.clone(),
        };
        let h: Vec<f64> = identity.iter().zip(&pre).map(|(a, z)| a + z.max(0.0)).collect();
        check_finite(&h, "hidden state", t)?;
        hidden_up.push(h);
        pre_up.push(pre);
    }

    let empty = || vec![Vec::new(); depth + 1];
    let mut hidden = empty();
    let mut weibull_k = empty();
    let mut weibull_lambda = empty();
    let mut theta = empty();
    let mut pre_shape = empty();
    let mut pre_scale = empty();
    let mut exp_noise = empty();
    let mut top_down = empty();
    for t in (1..=depth).rev() {
        let layer = &params.encoder[t - 1];
        let mut h = hidden_up[t].clone();
        if t < depth {
            let y = phis.layer(t + 1).dot(&ArrayView1::from(theta[t + 1].as_slice())).to_vec();
            h.extend_from_slice(&y);
            top_down[t] = y;
        }
        let zs = matvec(&layer.shape_weight, &h, &layer.shape_bias);
        let zl = matvec(&layer.scale_weight, &h, &layer.scale_bias);
        let k: Vec<f64> = zs.iter().map(|&z| softplus(z).max(WEIBULL_SHAPE_MIN)).collect();
        let lam: Vec<f64> = zl.iter().map(|&z| softplus(z).max(WEIBULL_SCALE_MIN)).collect();
        check_finite(&k, "Weibull shape", t)?;
        check_finite(&lam, "Weibull scale", t)?;
        let th: Vec<f64> = match mode {
            ThetaMode::Mean => k.iter().zip(&lam).map(|(&k, &l)| weibull_mean(k, l)).collect(),
            ThetaMode::Sample(u) => {
                let u = &u[t - 1];
                if u.len() != k.len() {
                    return Err(Error::DimensionMismatch {
                        expected: k.len(),
                        actual: u.len(),
                    });
                }
                let w: Vec<f64> = u.iter().map(|&u| -(-u).ln_1p()).collect();
                let th = k.iter().zip(&lam).zip(&w).map(|((&k, &l), &w)| l * w.powf(1.0 / k)).collect();
                exp_noise[t] = w;
                th
            }
        };
        check_finite(&th, "theta", t)?;
        hidden[t] = h;
        weibull_k[t] = k;
        weibull_lambda[t] = lam;
        theta[t] = th;
        pre_shape[t] = zs;
        pre_scale[t] = zl;
    }

    Ok(LatentState {
        hidden_up,
        hidden,
        weibull_k,
        weibull_lambda,
        theta,
        input,
        pre_input,
        pre_up,
        pre_shape,
        pre_scale,
        exp_noise,
        top_down,
    })
}

/// Encodes a document, sampling `θ` with `rng` when `sample` is set.
pub fn encode<R: Rng + ?Sized>(params: &ModelParams, phis: &Phis, doc: &Document, sample: bool, rng: &mut R) -> Result<LatentState> {
    let mode = if sample {
        ThetaMode::draw(&params.arch, rng)
    } else {
        ThetaMode::Mean
    };
    let entries: Vec<(usize, f64)> = doc.entries().iter().map(|&(w, c)| (w, c as f64)).collect();
    encode_entries(params, phis, &entries, &mode)
}

/// Encodes a dense count vector of length `V`.
pub fn encode_dense(params: &ModelParams, phis: &Phis, x: &[f64], mode: &ThetaMode) -> Result<LatentState> {
    if x.len() != params.vocab_size() {
        return Err(Error::DimensionMismatch {
            expected: params.vocab_size(),
            actual: x.len(),
        });
    }
    let entries: Vec<(usize, f64)> = x.iter().copied().enumerate().filter(|&(_, c)| c != 0.0).collect();
    encode_entries(params, phis, &entries, mode)
}

/// Sigmoid of the pre-activation, zero where the clamp is active.
pub(crate) fn head_slope(z: f64, clamp: f64) -> f64 {
    if softplus(z) < clamp {
        0.0
    } else {
        sigmoid(z)
    }
}

/// Matrix-vector product `Φ x` for a dense `Φ`.
pub(crate) fn phi_times(phi: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    phi.dot(&ArrayView1::from(x)).to_vec()
}

/// Column sums of a matrix; used by invariant checks.
pub fn column_sums(m: &Array2<f64>) -> Vec<f64> {
    m.sum_axis(Axis(0)).to_vec()
}

/// Copies `rows` of the word-layer embeddings into a fresh layer; a small
/// helper for building oracle models in tests and fixtures.
pub fn embedding_layer_from(embeddings: &[GaussianEmbedding]) -> Result<EmbeddingLayer> {
    let n = embeddings.first().map(GaussianEmbedding::dim).unwrap_or(0);
    let mut mean = Array2::zeros((embeddings.len(), n));
    let mut log_var = Array2::zeros((embeddings.len(), n));
    for (i, e) in embeddings.iter().enumerate() {
        if e.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: e.dim() });
        }
        mean.slice_mut(s![i, ..]).assign(&ArrayView1::from(e.mean.as_slice()));
        log_var.slice_mut(s![i, ..]).assign(&ArrayView1::from(e.log_var.as_slice()));
    }
    Ok(EmbeddingLayer { mean, log_var })
}
