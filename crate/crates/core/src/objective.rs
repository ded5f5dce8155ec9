//! Training objective and its gradient.
//!
//! The scalar being minimised is
//!
//! ```text
//! total = mean_j [ −ln p(x_j | Φ^(1), θ_j^(1)) + Σ_t KL(q(θ_j^(t)) || p(θ_j^(t))) ] + β · L_prior
//! ```
//!
//! where `θ` comes from reparameterised Weibull samples, the Weibull‖Gamma KL
//! is analytic, and `L_prior` is the taxonomy hinge loss. Gradients are
//! produced by a hand-written reverse pass over this fixed graph.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::geometry::{gaussian_kl_backward, gaussian_kl_unchecked};
use crate::model::{
    encode_entries, head_slope, phi_times, LatentState, ModelParams, Phis, ThetaMode, WEIBULL_SCALE_MIN,
    WEIBULL_SHAPE_MIN,
};
use crate::special::{digamma, gamma, ln_factorial, ln_gamma, EULER_GAMMA};
use crate::taxonomy::TreeIndex;

/// Which reading of the hinge to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MarginSign {
    /// `max(0, m + max_pos − min_neg)`: positive pairs end up below negatives.
    #[default]
    Intent,
    /// `max(0, m − max_pos + min_neg)`, the formula as typeset.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub margin: f64,
    pub beta: f64,
    pub gamma_threshold: f64,
    /// Reparameterised samples per document per step.
    pub train_samples: usize,
    pub margin_sign: MarginSign,
    pub shape_floor: f64,
    pub rate_floor: f64,
    /// Documents per parallel work unit; fixed so reductions are reproducible.
    pub chunk_size: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            margin: 10.0,
            beta: 1.0,
            gamma_threshold: 2.0,
            train_samples: 1,
            margin_sign: MarginSign::Intent,
            shape_floor: crate::model::DEFAULT_SHAPE_FLOOR,
            rate_floor: 1e-10,
            chunk_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub neg_log_likelihood: f64,
    pub kl_per_layer: Vec<f64>,
    pub prior_loss: f64,
    pub total: f64,
    pub beta: f64,
    pub margin: f64,
}

impl LossBreakdown {
    fn assemble(nll: f64, kl: Vec<f64>, prior: f64, cfg: &ObjectiveConfig) -> Self {
        let total = nll + kl.iter().sum::<f64>() + cfg.beta * prior;
        Self {
            neg_log_likelihood: nll,
            kl_per_layer: kl,
            prior_loss: prior,
            total,
            beta: cfg.beta,
            margin: cfg.margin,
        }
    }
}

/// One gradient tensor per trainable tensor of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub ModelParams);

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self(params.zeros_like())
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        self.0.tensors()
    }

    /// Errors with the first tensor holding a non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        match self.tensors().into_iter().find(|(_, s)| s.iter().any(|v| !v.is_finite())) {
            Some((name, _)) => Err(Error::non_finite(format!("gradient of {name}"))),
            None => Ok(()),
        }
    }

    fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.0.tensors_mut().into_iter().zip(other.0.tensors()) {
            for (x, y) in a.iter_mut().zip(b.1) {
                *x += y;
            }
        }
    }
}

/// `Σ_v [x_v ln(rate_v) − rate_v − ln(x_v!)]` with the rate floored at
/// `rate_floor` inside the logarithm.
pub fn poisson_log_likelihood(x: &[f64], rate: &[f64], rate_floor: f64) -> Result<f64> {
    if x.len() != rate.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: rate.len(),
        });
    }
    Ok(x.iter()
        .zip(rate)
        .map(|(&x, &r)| {
            let log_term = if x > 0.0 { x * (r + rate_floor).ln() } else { 0.0 };
            log_term - r - ln_factorial(x)
        })
        .sum())
}

/// `KL(Weibull(k, λ) || Gamma(α, rate β))`.
pub fn kl_weibull_gamma(k: f64, lambda: f64, alpha: f64, beta_rate: f64) -> f64 {
    let k = k.max(WEIBULL_SHAPE_MIN);
    EULER_GAMMA * alpha / k - alpha * lambda.ln() + k.ln() + beta_rate * lambda * gamma(1.0 + 1.0 / k)
        - EULER_GAMMA
        - 1.0
        - alpha * beta_rate.ln()
        + ln_gamma(alpha)
}

/// Value and partial derivatives `(∂k, ∂λ, ∂α)` of [`kl_weibull_gamma`].
pub fn kl_weibull_gamma_grad(k: f64, lambda: f64, alpha: f64, beta_rate: f64) -> (f64, f64, f64, f64) {
    let clamped = k < WEIBULL_SHAPE_MIN;
    let k = k.max(WEIBULL_SHAPE_MIN);
    let inv_k = 1.0 / k;
    let g = gamma(1.0 + inv_k);
    let value = EULER_GAMMA * alpha * inv_k - alpha * lambda.ln() + k.ln() + beta_rate * lambda * g
        - EULER_GAMMA
        - 1.0
        - alpha * beta_rate.ln()
        + ln_gamma(alpha);
    let dk = if clamped {
        0.0
    } else {
        -EULER_GAMMA * alpha * inv_k * inv_k + inv_k - beta_rate * lambda * g * digamma(1.0 + inv_k) * inv_k * inv_k
    };
    let dlambda = -alpha / lambda + beta_rate * g;
    let dalpha = EULER_GAMMA * inv_k - lambda.ln() - beta_rate.ln() + digamma(alpha);
    (value, dk, dlambda, dalpha)
}

/// Per-document loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct DocTerms {
    pub nll: f64,
    pub kl: Vec<f64>,
}

fn doc_entries(doc: &Document) -> Vec<(usize, f64)> {
    doc.entries().iter().map(|&(w, c)| (w, c as f64)).collect()
}

/// Prior shapes `α^(t)` for `t = 1..=T` (index `t`), given a latent state.
fn prior_shapes(params: &ModelParams, state: &LatentState, shape_floor: f64) -> Vec<Vec<f64>> {
    let depth = params.depth();
    let mut shapes = vec![Vec::new(); depth + 1];
    for t in 1..=depth {
        shapes[t] = if t == depth {
            params.gamma_shape().to_vec()
        } else {
            state.top_down[t].iter().map(|y| y + shape_floor).collect()
        };
    }
    shapes
}

/// Negative log-likelihood and per-layer KL for one encoded document.
pub fn doc_terms(params: &ModelParams, phis: &Phis, entries: &[(usize, f64)], state: &LatentState, cfg: &ObjectiveConfig) -> Result<DocTerms> {
    let depth = params.depth();
    let phi1 = phis.layer(1);
    let theta1 = &state.theta[1];
    let mut nll: f64 = theta1.iter().sum();
    for &(w, x) in entries {
        let rate: f64 = phi1.row(w).iter().zip(theta1).map(|(p, t)| p * t).sum();
        nll -= x * (rate + cfg.rate_floor).ln() - ln_factorial(x);
    }
    if !nll.is_finite() {
        return Err(Error::non_finite("negative log-likelihood"));
    }
    let shapes = prior_shapes(params, state, cfg.shape_floor);
    let mut kl = vec![0.0; depth];
    for t in 1..=depth {
        let c = params.scale_c[t - 1];
        let mut acc = 0.0;
        for i in 0..state.theta[t].len() {
            acc += kl_weibull_gamma(state.weibull_k[t][i], state.weibull_lambda[t][i], shapes[t][i], c);
        }
        if !acc.is_finite() {
            return Err(Error::non_finite(format!("KL at layer {t}")));
        }
        kl[t - 1] = acc;
    }
    Ok(DocTerms { nll, kl })
}

/// Gradient buffers for a group of documents.
struct Accumulator {
    grads: GradientSet,
    /// `∂loss/∂Φ^(t)` at index `t - 1`.
    dphi: Vec<Array2<f64>>,
    nll: f64,
    kl: Vec<f64>,
}

impl Accumulator {
    fn new(params: &ModelParams, phis: &Phis) -> Self {
        Self {
            grads: GradientSet::zeros_like(params),
            dphi: phis.0.iter().map(|p| Array2::zeros(p.dim())).collect(),
            nll: 0.0,
            kl: vec![0.0; params.depth()],
        }
    }

    fn merge(&mut self, other: Accumulator) {
        self.grads.add_assign(&other.grads);
        for (a, b) in self.dphi.iter_mut().zip(&other.dphi) {
            *a += b;
        }
        self.nll += other.nll;
        for (a, b) in self.kl.iter_mut().zip(&other.kl) {
            *a += b;
        }
    }
}

fn add_outer(m: &mut Array2<f64>, left: &[f64], right: &[f64]) {
    for (i, &l) in left.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let mut row = m.row_mut(i);
        for (r, &x) in row.iter_mut().zip(right) {
            *r += l * x;
        }
    }
}

fn transpose_times(m: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    m.t().dot(&ndarray::ArrayView1::from(v)).to_vec()
}

/// Reverse pass for one document, scaled by `weight`.
fn doc_backward(
    params: &ModelParams,
    phis: &Phis,
    entries: &[(usize, f64)],
    state: &LatentState,
    cfg: &ObjectiveConfig,
    weight: f64,
    acc: &mut Accumulator,
) {
    let depth = params.depth();
    let grads = &mut acc.grads.0;
    let mut dtheta: Vec<Vec<f64>> = (0..=depth).map(|t| vec![0.0; state.theta[t].len()]).collect();
    let mut dhidden_up: Vec<Vec<f64>> = state.hidden_up.iter().map(|h| vec![0.0; h.len()]).collect();

    // Poisson term: Σθ − Σ_v x_v ln(Φθ + ε); column-stochastic Φ makes Σ_v rate_v = Σθ.
    {
        let phi1 = phis.layer(1);
        let theta1 = &state.theta[1];
        dtheta[1].iter_mut().for_each(|d| *d += weight);
        for &(w, x) in entries {
            let row = phi1.row(w);
            let rate: f64 = row.iter().zip(theta1).map(|(p, t)| p * t).sum();
            let g = -weight * x / (rate + cfg.rate_floor);
            for (k, &p) in row.iter().enumerate() {
                dtheta[1][k] += g * p;
            }
            let mut drow = acc.dphi[0].row_mut(w);
            for (d, &t) in drow.iter_mut().zip(theta1) {
                *d += g * t;
            }
        }
    }

    let gamma_shape = params.gamma_shape();
    for t in 1..=depth {
        let k_t = &state.weibull_k[t];
        let lam_t = &state.weibull_lambda[t];
        let c = params.scale_c[t - 1];
        let width = k_t.len();
        let mut dk = vec![0.0; width];
        let mut dlam = vec![0.0; width];
        // Gradient w.r.t. y = Φ^(t+1) θ^(t+1) from both the prior shape and the head input.
        let mut dy = vec![0.0; if t < depth { width } else { 0 }];
        for i in 0..width {
            let alpha = if t < depth {
                state.top_down[t][i] + cfg.shape_floor
            } else {
                gamma_shape[i]
            };
            let (_, gk, gl, ga) = kl_weibull_gamma_grad(k_t[i], lam_t[i], alpha, c);
            dk[i] += weight * gk;
            dlam[i] += weight * gl;
            if t < depth {
                dy[i] += weight * ga;
            } else {
                grads.log_gamma_shape[i] += weight * ga * alpha;
            }
            // θ = λ w^(1/k) or λ Γ(1 + 1/k).
            let dth = dtheta[t][i];
            if dth != 0.0 {
                let k = k_t[i];
                let th = state.theta[t][i];
                if state.exp_noise[t].is_empty() {
                    let g = gamma(1.0 + 1.0 / k);
                    dlam[i] += dth * g;
                    dk[i] -= dth * lam_t[i] * g * digamma(1.0 + 1.0 / k) / (k * k);
                } else {
                    let w = state.exp_noise[t][i];
                    dlam[i] += dth * w.powf(1.0 / k);
                    dk[i] -= dth * th * w.ln() / (k * k);
                }
            }
        }
        let layer = &params.encoder[t - 1];
        let dz_shape: Vec<f64> = dk
            .iter()
            .zip(&state.pre_shape[t])
            .map(|(d, &z)| d * head_slope(z, WEIBULL_SHAPE_MIN))
            .collect();
        let dz_scale: Vec<f64> = dlam
            .iter()
            .zip(&state.pre_scale[t])
            .map(|(d, &z)| d * head_slope(z, WEIBULL_SCALE_MIN))
            .collect();
        let g_layer = &mut grads.encoder[t - 1];
        add_outer(&mut g_layer.shape_weight, &dz_shape, &state.hidden[t]);
        add_outer(&mut g_layer.scale_weight, &dz_scale, &state.hidden[t]);
        for i in 0..width {
            g_layer.shape_bias[i] += dz_shape[i];
            g_layer.scale_bias[i] += dz_scale[i];
        }
        let dh_shape = transpose_times(&layer.shape_weight, &dz_shape);
        let dh_scale = transpose_times(&layer.scale_weight, &dz_scale);
        let hw = params.arch.hidden_widths[t];
        for (j, (a, b)) in dh_shape.iter().zip(&dh_scale).enumerate() {
            if j < hw {
                dhidden_up[t][j] += a + b;
            } else {
                dy[j - hw] += a + b;
            }
        }
        if t < depth {
            let phi_next = phis.layer(t + 1);
            let dth_next = transpose_times(phi_next, &dy);
            for (d, g) in dtheta[t + 1].iter_mut().zip(dth_next) {
                *d += g;
            }
            add_outer(&mut acc.dphi[t], &dy, &state.theta[t + 1]);
        }
    }

    // Upward path: h'^(t) = skip(h'^(t-1)) + ReLU(W h'^(t-1) + b).
    for t in (1..=depth).rev() {
        let layer = &params.encoder[t - 1];
        let g_layer = &mut grads.encoder[t - 1];
        let dh = std::mem::take(&mut dhidden_up[t]);
        let dpre: Vec<f64> = dh
            .iter()
            .zip(&state.pre_up[t])
            .map(|(d, &z)| if z > 0.0 { *d } else { 0.0 })
            .collect();
        let prev = &state.hidden_up[t - 1];
        add_outer(&mut g_layer.up_weight, &dpre, prev);
        for (b, d) in g_layer.up_bias.iter_mut().zip(&dpre) {
            *b += d;
        }
        let mut dprev = transpose_times(&layer.up_weight, &dpre);
        match &layer.skip {
            Some(p) => {
                add_outer(g_layer.skip.as_mut().expect("gradient mirrors params"), &dh, prev);
                for (a, b) in dprev.iter_mut().zip(transpose_times(p, &dh)) {
                    *a += b;
                }
            }
            None => {
                for (a, b) in dprev.iter_mut().zip(&dh) {
                    *a += b;
                }
            }
        }
        for (a, b) in dhidden_up[t - 1].iter_mut().zip(dprev) {
            *a += b;
        }
    }
    let dpre0: Vec<f64> = dhidden_up[0]
        .iter()
        .zip(&state.pre_input)
        .map(|(d, &z)| if z > 0.0 { *d } else { 0.0 })
        .collect();
    for (b, d) in grads.input_bias.iter_mut().zip(&dpre0) {
        *b += d;
    }
    for &(w, x) in &state.input {
        let mut row = grads.input_weight.row_mut(w);
        for (r, d) in row.iter_mut().zip(&dpre0) {
            *r += x * d;
        }
    }
}

/// Pushes `∂loss/∂Φ^(t)` through the column softmax and the log kernel into
/// the embedding gradients.
fn phi_backward(params: &ModelParams, phis: &Phis, dphi: &[Array2<f64>], grads: &mut GradientSet) {
    for t in 1..=params.depth() {
        let phi = phis.layer(t);
        let g = &dphi[t - 1];
        let (rows, cols) = phi.dim();
        // ∂/∂logit_vk = Φ_vk (g_vk − Σ_u Φ_uk g_uk)
        let mut dlogit = Array2::<f64>::zeros((rows, cols));
        for k in 0..cols {
            let dot: f64 = (0..rows).map(|v| phi[[v, k]] * g[[v, k]]).sum();
            for v in 0..rows {
                dlogit[[v, k]] = phi[[v, k]] * (g[[v, k]] - dot);
            }
        }
        let lower = &params.embeddings[t - 1];
        let upper = &params.embeddings[t];
        let n = params.arch.embedding_dim;
        let var_lo = lower.log_var.mapv(f64::exp);
        let var_up = upper.log_var.mapv(f64::exp);
        // Partials w.r.t. mean and log-variance on each side of the kernel.
        let pair = |v: usize, k: usize, d: usize| {
            let s = var_lo[[v, d]] + var_up[[k, d]];
            let delta = lower.mean[[v, d]] - upper.mean[[k, d]];
            (-delta / s, -0.5 / s + delta * delta / (2.0 * s * s))
        };
        let lower_rows: Vec<(Vec<f64>, Vec<f64>)> = (0..rows)
            .into_par_iter()
            .map(|v| {
                let mut gm = vec![0.0; n];
                let mut gl = vec![0.0; n];
                for k in 0..cols {
                    let u = dlogit[[v, k]];
                    if u == 0.0 {
                        continue;
                    }
                    for d in 0..n {
                        let (dm, ds) = pair(v, k, d);
                        gm[d] += u * dm;
                        gl[d] += u * ds * var_lo[[v, d]];
                    }
                }
                (gm, gl)
            })
            .collect();
        let upper_rows: Vec<(Vec<f64>, Vec<f64>)> = (0..cols)
            .into_par_iter()
            .map(|k| {
                let mut gm = vec![0.0; n];
                let mut gl = vec![0.0; n];
                for v in 0..rows {
                    let u = dlogit[[v, k]];
                    if u == 0.0 {
                        continue;
                    }
                    for d in 0..n {
                        let (dm, ds) = pair(v, k, d);
                        gm[d] -= u * dm;
                        gl[d] += u * ds * var_up[[k, d]];
                    }
                }
                (gm, gl)
            })
            .collect();
        let ge = &mut grads.0.embeddings;
        for (v, (gm, gl)) in lower_rows.into_iter().enumerate() {
            for d in 0..n {
                ge[t - 1].mean[[v, d]] += gm[d];
                ge[t - 1].log_var[[v, d]] += gl[d];
            }
        }
        for (k, (gm, gl)) in upper_rows.into_iter().enumerate() {
            for d in 0..n {
                ge[t].mean[[k, d]] += gm[d];
                ge[t].log_var[[k, d]] += gl[d];
            }
        }
    }
}

/// Monte-Carlo estimate of the negative ELBO averaged over `batch`, with
/// `samples` reparameterised draws per document. `prior_loss` is zero.
pub fn elbo<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[&Document],
    rng: &mut R,
    samples: usize,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let phis = Phis::compute(params);
    let depth = params.depth();
    let mut nll = 0.0;
    let mut kl = vec![0.0; depth];
    let weight = 1.0 / (batch.len() * samples) as f64;
    for (j, doc) in batch.iter().enumerate() {
        let entries = doc_entries(doc);
        for _ in 0..samples {
            let mode = ThetaMode::draw(&params.arch, rng);
            let state = encode_entries(params, &phis, &entries, &mode)
                .map_err(|e| Error::non_finite(format!("document {j}: {e}")))?;
            let terms = doc_terms(params, &phis, &entries, &state, cfg)
                .map_err(|e| Error::non_finite(format!("document {j}: {e}")))?;
            nll += weight * terms.nll;
            for (a, b) in kl.iter_mut().zip(&terms.kl) {
                *a += weight * b;
            }
        }
    }
    Ok(LossBreakdown::assemble(nll, kl, 0.0, cfg))
}

/// Diagnostics from evaluating the taxonomy prior.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorStats {
    /// Topics without hyponyms, skipped.
    pub childless: usize,
    /// Topics whose hyponyms cover the whole layer below, skipped.
    pub no_negatives: usize,
    /// Topics whose hinge is active.
    pub active: usize,
}

/// The hinge for one topic plus the pairs that attain its max and min.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginTerm {
    pub loss: f64,
    pub max_positive: f64,
    pub min_negative: f64,
    /// Model index (layer below) of the attaining positive and negative.
    pub argmax_positive: Option<usize>,
    pub argmin_negative: Option<usize>,
}

fn divergence(params: &ModelParams, lower_layer: usize, i: usize, j: usize, threshold: f64) -> f64 {
    let a = params.embeddings[lower_layer].row(i);
    let b = params.embeddings[lower_layer + 1].row(j);
    (gaussian_kl_unchecked(a, b) - threshold).max(0.0)
}

/// Hinge `max(0, m + max_{i∈D} d_γ(i, j) − min_{i∉D} d_γ(i, j))` for topic
/// `j` of `layer`; zero when either set is empty.
pub fn margin_loss(tree: &TreeIndex, params: &ModelParams, layer: usize, topic: usize, cfg: &ObjectiveConfig) -> Result<MarginTerm> {
    let (pos, neg) = tree.pair_sets(layer, topic)?;
    let below = layer - 1;
    let extreme = |set: &[usize], better: fn(f64, f64) -> bool| {
        let mut best: Option<(usize, f64)> = None;
        for &i in set {
            let d = divergence(params, below, i, topic, cfg.gamma_threshold);
            if best.is_none_or(|(_, b)| better(d, b)) {
                best = Some((i, d));
            }
        }
        best
    };
    let max_pos = extreme(&pos, |d, b| d > b);
    let min_neg = extreme(&neg, |d, b| d < b);
    let (Some((ip, dp)), Some((in_, dn))) = (max_pos, min_neg) else {
        return Ok(MarginTerm {
            loss: 0.0,
            max_positive: max_pos.map_or(0.0, |p| p.1),
            min_negative: min_neg.map_or(0.0, |p| p.1),
            argmax_positive: max_pos.map(|p| p.0),
            argmin_negative: min_neg.map(|p| p.0),
        });
    };
    Ok(MarginTerm {
        loss: hinge(cfg, dp, dn),
        max_positive: dp,
        min_negative: dn,
        argmax_positive: Some(ip),
        argmin_negative: Some(in_),
    })
}

/// `max(0, m ± (max_pos − min_neg))` from precomputed extremes.
pub fn hinge(cfg: &ObjectiveConfig, max_positive: f64, min_negative: f64) -> f64 {
    let gap = match cfg.margin_sign {
        MarginSign::Intent => max_positive - min_negative,
        MarginSign::Literal => min_negative - max_positive,
    };
    (cfg.margin + gap).max(0.0)
}

fn check_tree(tree: &TreeIndex, params: &ModelParams) -> Result<()> {
    let sizes = tree.tree().layer_sizes();
    let arch = &params.arch.layer_sizes;
    if sizes.len() != arch.len() || sizes[1..] != arch[1..] || sizes[0] > arch[0] {
        return Err(Error::Config(format!(
            "tree layer sizes {sizes:?} do not match model layer sizes {arch:?}"
        )));
    }
    Ok(())
}

/// Sum of the hinge over every topic of every latent layer.
pub fn prior_loss(tree: &TreeIndex, params: &ModelParams, cfg: &ObjectiveConfig) -> Result<(f64, PriorStats)> {
    prior_loss_impl(tree, params, cfg, None)
}

fn prior_loss_impl(
    tree: &TreeIndex,
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    mut grads: Option<(&mut GradientSet, f64)>,
) -> Result<(f64, PriorStats)> {
    check_tree(tree, params)?;
    let mut stats = PriorStats::default();
    let mut total = 0.0;
    for layer in 1..=params.depth() {
        let terms: Vec<Result<MarginTerm>> = (0..params.arch.layer_sizes[layer])
            .into_par_iter()
            .map(|j| margin_loss(tree, params, layer, j, cfg))
            .collect();
        for (j, term) in terms.into_iter().enumerate() {
            let term = term?;
            match (term.argmax_positive, term.argmin_negative) {
                (None, _) => {
                    stats.childless += 1;
                    continue;
                }
                (_, None) => {
                    stats.no_negatives += 1;
                    continue;
                }
                _ => {}
            }
            total += term.loss;
            if term.loss <= 0.0 {
                continue;
            }
            stats.active += 1;
            let Some((g, scale)) = grads.as_mut() else { continue };
            let sign = match cfg.margin_sign {
                MarginSign::Intent => 1.0,
                MarginSign::Literal => -1.0,
            };
            let below = layer - 1;
            for (i, s, d) in [
                (term.argmax_positive.unwrap(), sign, term.max_positive),
                (term.argmin_negative.unwrap(), -sign, term.min_negative),
            ] {
                if d <= 0.0 {
                    continue;
                }
                let emb = &params.embeddings;
                let ge = &mut g.0.embeddings;
                let (lo, hi) = ge.split_at_mut(layer);
                let (lo_e, hi_e) = (&mut lo[below], &mut hi[0]);
                let mut gam = lo_e.mean.row(i).to_vec();
                let mut gal = lo_e.log_var.row(i).to_vec();
                let mut gbm = hi_e.mean.row(j).to_vec();
                let mut gbl = hi_e.log_var.row(j).to_vec();
                gaussian_kl_backward(
                    emb[below].row(i),
                    emb[layer].row(j),
                    *scale * s,
                    &mut gam,
                    &mut gal,
                    &mut gbm,
                    &mut gbl,
                );
                lo_e.mean.row_mut(i).assign(&ndarray::ArrayView1::from(&gam));
                lo_e.log_var.row_mut(i).assign(&ndarray::ArrayView1::from(&gal));
                hi_e.mean.row_mut(j).assign(&ndarray::ArrayView1::from(&gbm));
                hi_e.log_var.row_mut(j).assign(&ndarray::ArrayView1::from(&gbl));
            }
        }
    }
    if stats.childless > 0 {
        log::debug!("{} childless topics skipped by the prior", stats.childless);
    }
    Ok((total, stats))
}

/// Loss and gradients for a minibatch. Empty documents are skipped; the
/// taxonomy prior is added when `tree` is given.
pub fn total_loss_and_gradients<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[&Document],
    tree: Option<&TreeIndex>,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, GradientSet)> {
    if cfg.train_samples == 0 || cfg.chunk_size == 0 {
        return Err(Error::Config("train_samples and chunk_size must be >= 1".into()));
    }
    let phis = Phis::compute(params);
    let docs: Vec<(usize, Vec<(usize, f64)>)> = batch
        .iter()
        .enumerate()
        .filter(|(_, d)| !d.is_empty())
        .map(|(j, d)| (j, doc_entries(d)))
        .collect();
    // Noise is drawn up front in batch order so results do not depend on scheduling.
    let noise: Vec<Vec<ThetaMode>> = docs
        .iter()
        .map(|_| (0..cfg.train_samples).map(|_| ThetaMode::draw(&params.arch, rng)).collect())
        .collect();
    let weight = if docs.is_empty() {
        0.0
    } else {
        1.0 / (docs.len() * cfg.train_samples) as f64
    };

    let work: Vec<usize> = (0..docs.len()).collect();
    let partials: Vec<Result<Accumulator>> = work
        .par_chunks(cfg.chunk_size)
        .map(|chunk| {
            let mut acc = Accumulator::new(params, &phis);
            for &d in chunk {
                let (j, entries) = &docs[d];
                for mode in &noise[d] {
                    let state = encode_entries(params, &phis, entries, mode)
                        .map_err(|e| Error::non_finite(format!("document {j}: {e}")))?;
                    let terms = doc_terms(params, &phis, entries, &state, cfg)
                        .map_err(|e| Error::non_finite(format!("document {j}: {e}")))?;
                    acc.nll += weight * terms.nll;
                    for (a, b) in acc.kl.iter_mut().zip(&terms.kl) {
                        *a += weight * b;
                    }
                    doc_backward(params, &phis, entries, &state, cfg, weight, &mut acc);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut acc = Accumulator::new(params, &phis);
    for p in partials {
        acc.merge(p?);
    }
    let mut grads = acc.grads;
    phi_backward(params, &phis, &acc.dphi, &mut grads);

    let prior = match tree {
        Some(tree) if cfg.beta != 0.0 => prior_loss_impl(tree, params, cfg, Some((&mut grads, cfg.beta)))?.0,
        Some(tree) => prior_loss(tree, params, cfg)?.0,
        None => 0.0,
    };
    let loss = LossBreakdown::assemble(acc.nll, acc.kl, prior, cfg);
    if !loss.total.is_finite() {
        return Err(Error::non_finite("total loss"));
    }
    grads.check_finite()?;
    Ok((loss, grads))
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every trainable tensor.
pub fn optimizer_step(params: &mut ModelParams, grads: &GradientSet, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let g_tensors = grads.tensors();
    let m_tensors = state.first_moment.tensors_mut();
    let v_tensors = state.second_moment.tensors_mut();
    for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(g_tensors).zip(m_tensors).zip(v_tensors) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Mean rate `Φ^(1) θ^(1)` for a latent state.
pub fn state_rate(phis: &Phis, state: &LatentState) -> Vec<f64> {
    phi_times(phis.layer(1), &state.theta[1])
}
