//! Dense encoder/head stack with hand-written gradients.
//!
//! The encoder is a small MLP: hidden ReLU layers, an optional per-domain
//! normalization layer on the last hidden representation, a final linear map
//! into feature space, and row-wise L2 normalization. A linear projection
//! head (also L2-normalized) feeds the contrastive loss; a linear
//! classification head feeds the cross-entropy loss. Every gradient is
//! derived by hand and checked against central finite differences in the
//! test suite.
//!
//! Per-domain normalization keeps separate running statistics per domain tag
//! with shared affine parameters. In train mode a batch is standardized by
//! its own statistics and the tagged domain's running statistics are updated
//! (momentum 0.9); in eval mode the stored statistics are used.

use serde::{Deserialize, Serialize};

use crate::data::DomainTag;
use crate::error::{Error, Result};
use crate::mat::{dot, l2_norm, Matrix};
use crate::rng::{stream, Stream};

/// Running-statistics momentum for per-domain normalization.
pub const NORM_MOMENTUM: f64 = 0.9;
/// Variance floor inside the normalization denominator.
pub const NORM_EPS: f64 = 1e-5;

/// Activation for hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

/// Layer widths and structural switches for the stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub projection_dim: usize,
    pub class_count: usize,
    pub activation: Activation,
    /// Per-domain normalization on the last hidden representation.
    pub domain_norm: bool,
    /// Row-wise L2 normalization of encoder and projection outputs.
    pub l2_normalize: bool,
}

impl Architecture {
    pub fn desk_default(input_dim: usize, class_count: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![64, 64],
            feature_dim: 16,
            projection_dim: 8,
            class_count,
            activation: Activation::Relu,
            domain_norm: true,
            l2_normalize: true,
        }
    }

    /// Width the normalization layer acts on.
    fn norm_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }
}

/// One dense layer, `w` stored row-major as `out × in`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseLayer {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Matrix::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    fn init(out_dim: usize, in_dim: usize, rng: &mut impl rand::Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut w = Matrix::zeros(out_dim, in_dim);
        for v in w.data.iter_mut() {
            *v = rng.gen_range(-limit..limit);
        }
        Self { w, b: vec![0.0; out_dim] }
    }

    fn forward(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols != self.w.cols {
            return Err(Error::DimensionMismatch {
                what: "dense input width",
                expected: self.w.cols,
                got: input.cols,
            });
        }
        let mut out = Matrix::zeros(input.rows, self.w.rows);
        for b in 0..input.rows {
            let x = input.row(b);
            let y = out.row_mut(b);
            for (o, yo) in y.iter_mut().enumerate() {
                *yo = dot(self.w.row(o), x) + self.b[o];
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, input: &Matrix, d_out: &Matrix, grad: &mut LayerGrad) -> Matrix {
        let mut d_in = Matrix::zeros(input.rows, self.w.cols);
        for b in 0..input.rows {
            let x = input.row(b);
            let dy = d_out.row(b);
            for (o, &g) in dy.iter().enumerate() {
                grad.b[o] += g;
                let wrow = grad.w.row_mut(o);
                for (i, &xi) in x.iter().enumerate() {
                    wrow[i] += g * xi;
                }
                let win = self.w.row(o);
                let dx = d_in.row_mut(b);
                for (i, &wi) in win.iter().enumerate() {
                    dx[i] += g * wi;
                }
            }
        }
        d_in
    }
}

/// Mean/variance pair tracked per domain. Variances stay strictly positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn init(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

/// Per-domain standardization with shared affine parameters.
#[derive(Debug, Clone)]
pub struct DomainNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    source_stats: RunningStats,
    target_stats: RunningStats,
}

impl DomainNorm {
    fn init(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            source_stats: RunningStats::init(dim),
            target_stats: RunningStats::init(dim),
        }
    }

    pub fn stats(&self, domain: DomainTag) -> &RunningStats {
        match domain {
            DomainTag::Source => &self.source_stats,
            DomainTag::Target => &self.target_stats,
        }
    }

    fn stats_mut(&mut self, domain: DomainTag) -> &mut RunningStats {
        match domain {
            DomainTag::Source => &mut self.source_stats,
            DomainTag::Target => &mut self.target_stats,
        }
    }
}

/// Encoder, heads, and per-domain statistics.
#[derive(Debug, Clone)]
pub struct MlpState {
    pub arch: Architecture,
    pub encoder: Vec<DenseLayer>,
    pub norm: Option<DomainNorm>,
    pub proj: DenseLayer,
    pub classifier: DenseLayer,
}

impl MlpState {
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Init, 0);
        let mut encoder = Vec::new();
        let mut in_dim = arch.input_dim;
        for &h in &arch.hidden_dims {
            encoder.push(DenseLayer::init(h, in_dim, &mut rng));
            in_dim = h;
        }
        encoder.push(DenseLayer::init(arch.feature_dim, in_dim, &mut rng));
        let norm = arch.domain_norm.then(|| DomainNorm::init(arch.norm_dim()));
        let proj = DenseLayer::init(arch.projection_dim, arch.feature_dim, &mut rng);
        let classifier = DenseLayer::init(arch.class_count, arch.feature_dim, &mut rng);
        Self { arch, encoder, norm, proj, classifier }
    }

    /// Parameter arrays in a fixed order, with stable names.
    pub fn named_params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.w"), &layer.w.data));
            out.push((format!("encoder.{i}.b"), &layer.b));
        }
        if let Some(norm) = &self.norm {
            out.push(("norm.gamma".into(), &norm.gamma));
            out.push(("norm.beta".into(), &norm.beta));
        }
        out.push(("proj.w".into(), &self.proj.w.data));
        out.push(("proj.b".into(), &self.proj.b));
        out.push(("classifier.w".into(), &self.classifier.w.data));
        out.push(("classifier.b".into(), &self.classifier.b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// All parameters flattened in `named_params` order. Running statistics
    /// are state, not parameters, and are excluded.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (_, p) in self.named_params() {
            flat.extend_from_slice(p);
        }
        flat
    }

    pub fn load_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "flat parameters",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        let mut take = |slice: &mut [f64]| {
            slice.copy_from_slice(&flat[offset..offset + slice.len()]);
            offset += slice.len();
        };
        for layer in self.encoder.iter_mut() {
            take(&mut layer.w.data);
            take(&mut layer.b);
        }
        if let Some(norm) = self.norm.as_mut() {
            take(&mut norm.gamma);
            take(&mut norm.beta);
        }
        take(&mut self.proj.w.data);
        take(&mut self.proj.b);
        take(&mut self.classifier.w.data);
        take(&mut self.classifier.b);
        Ok(())
    }
}

/// One gradient array per parameter array, shape-matched to an [`MlpState`].
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub encoder: Vec<LayerGrad>,
    pub norm_gamma: Vec<f64>,
    pub norm_beta: Vec<f64>,
    pub proj: LayerGrad,
    pub classifier: LayerGrad,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(state: &MlpState) -> Self {
        let enc = state
            .encoder
            .iter()
            .map(|l| LayerGrad {
                w: Matrix::zeros(l.w.rows, l.w.cols),
                b: vec![0.0; l.b.len()],
            })
            .collect();
        let norm_dim = state.norm.as_ref().map_or(0, |n| n.gamma.len());
        Self {
            encoder: enc,
            norm_gamma: vec![0.0; norm_dim],
            norm_beta: vec![0.0; norm_dim],
            proj: LayerGrad {
                w: Matrix::zeros(state.proj.w.rows, state.proj.w.cols),
                b: vec![0.0; state.proj.b.len()],
            },
            classifier: LayerGrad {
                w: Matrix::zeros(state.classifier.w.rows, state.classifier.w.cols),
                b: vec![0.0; state.classifier.b.len()],
            },
        }
    }

    /// Flattened in the same order as [`MlpState::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for g in &self.encoder {
            flat.extend_from_slice(&g.w.data);
            flat.extend_from_slice(&g.b);
        }
        flat.extend_from_slice(&self.norm_gamma);
        flat.extend_from_slice(&self.norm_beta);
        flat.extend_from_slice(&self.proj.w.data);
        flat.extend_from_slice(&self.proj.b);
        flat.extend_from_slice(&self.classifier.w.data);
        flat.extend_from_slice(&self.classifier.b);
        flat
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    input: Matrix,
    x_hat: Matrix,
    inv_std: Vec<f64>,
    batch_mode: bool,
}

/// Intermediate values from an encoder forward pass, needed by backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    hidden_pre: Vec<Matrix>,
    hidden_post: Vec<Matrix>,
    norm: Option<NormCache>,
    feature_pre: Matrix,
    /// Final encoder output, one row per sample.
    pub features: Matrix,
}

fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Row-wise L2 normalization; errors on a zero row.
fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows {
        let n = l2_norm(m.row(i));
        if n < 1e-300 {
            return Err(Error::Contract("zero-norm row cannot be L2-normalized".into()));
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Backward through row-wise L2 normalization:
/// `d_pre = (d_out − ẑ (ẑ·d_out)) / ‖pre‖`.
fn l2_normalize_backward(pre: &Matrix, d_out: &Matrix) -> Matrix {
    let mut d_pre = Matrix::zeros(pre.rows, pre.cols);
    for i in 0..pre.rows {
        let v = pre.row(i);
        let n = l2_norm(v);
        let g = d_out.row(i);
        let zhat: Vec<f64> = v.iter().map(|&x| x / n).collect();
        let proj = dot(&zhat, g);
        let dst = d_pre.row_mut(i);
        for j in 0..v.len() {
            dst[j] = (g[j] - zhat[j] * proj) / n;
        }
    }
    d_pre
}

fn norm_forward(
    gamma: &[f64],
    beta: &[f64],
    stats: &RunningStats,
    input: &Matrix,
    train_mode: bool,
) -> (Matrix, NormCache, Option<RunningStats>) {
    let (rows, cols) = (input.rows, input.cols);
    let (mean, var, update) = if train_mode {
        let mut mean = vec![0.0; cols];
        for i in 0..rows {
            for (j, &v) in input.row(i).iter().enumerate() {
                mean[j] += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for i in 0..rows {
            for (j, &v) in input.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        for v in var.iter_mut() {
            *v /= rows as f64;
        }
        let updated = RunningStats {
            mean: stats
                .mean
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| NORM_MOMENTUM * r + (1.0 - NORM_MOMENTUM) * b)
                .collect(),
            var: stats
                .var
                .iter()
                .zip(&var)
                .map(|(&r, &b)| NORM_MOMENTUM * r + (1.0 - NORM_MOMENTUM) * b)
                .collect(),
        };
        (mean, var, Some(updated))
    } else {
        (stats.mean.clone(), stats.var.clone(), None)
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut x_hat = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let xh = (input.get(i, j) - mean[j]) * inv_std[j];
            x_hat.set(i, j, xh);
            out.set(i, j, gamma[j] * xh + beta[j]);
        }
    }
    let cache = NormCache {
        input: input.clone(),
        x_hat,
        inv_std,
        batch_mode: train_mode,
    };
    (out, cache, update)
}

fn norm_backward(
    gamma: &[f64],
    cache: &NormCache,
    d_out: &Matrix,
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Matrix {
    let (rows, cols) = (cache.input.rows, cache.input.cols);
    for i in 0..rows {
        for j in 0..cols {
            d_gamma[j] += d_out.get(i, j) * cache.x_hat.get(i, j);
            d_beta[j] += d_out.get(i, j);
        }
    }
    let mut d_in = Matrix::zeros(rows, cols);
    if cache.batch_mode {
        // Batch statistics participate in the forward pass, so their
        // dependence on the inputs shows up in the gradient.
        let n = rows as f64;
        for j in 0..cols {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..rows {
                sum_dy += d_out.get(i, j);
                sum_dy_xhat += d_out.get(i, j) * cache.x_hat.get(i, j);
            }
            let scale = gamma[j] * cache.inv_std[j] / n;
            for i in 0..rows {
                let v = n * d_out.get(i, j) - sum_dy - cache.x_hat.get(i, j) * sum_dy_xhat;
                d_in.set(i, j, scale * v);
            }
        }
    } else {
        for i in 0..rows {
            for j in 0..cols {
                d_in.set(i, j, d_out.get(i, j) * gamma[j] * cache.inv_std[j]);
            }
        }
    }
    d_in
}

fn encoder_forward_pure(
    state: &MlpState,
    batch: &Matrix,
    domain: DomainTag,
    train_mode: bool,
) -> Result<(ForwardCache, Option<RunningStats>)> {
    if batch.rows == 0 {
        return Err(Error::Empty("batch"));
    }
    if batch.cols != state.arch.input_dim {
        return Err(Error::DimensionMismatch {
            what: "encoder input width",
            expected: state.arch.input_dim,
            got: batch.cols,
        });
    }
    let n_hidden = state.arch.hidden_dims.len();
    let mut hidden_pre = Vec::with_capacity(n_hidden);
    let mut hidden_post = Vec::with_capacity(n_hidden);
    let mut current = batch.clone();
    for layer in &state.encoder[..n_hidden] {
        let pre = layer.forward(&current)?;
        let post = relu(&pre);
        hidden_pre.push(pre);
        hidden_post.push(post.clone());
        current = post;
    }

    let (normed, norm_cache, stats_update) = match &state.norm {
        Some(norm) => {
            let (out, cache, update) =
                norm_forward(&norm.gamma, &norm.beta, norm.stats(domain), &current, train_mode);
            (out, Some(cache), update)
        }
        None => (current, None, None),
    };

    let feature_pre = state.encoder[n_hidden].forward(&normed)?;
    let features = if state.arch.l2_normalize {
        l2_normalize_rows(&feature_pre)?
    } else {
        feature_pre.clone()
    };

    Ok((
        ForwardCache {
            input: batch.clone(),
            hidden_pre,
            hidden_post,
            norm: norm_cache,
            feature_pre,
            features,
        },
        stats_update,
    ))
}

/// Encoder forward pass. In train mode the tagged domain's running
/// statistics are updated; the other domain's statistics are untouched.
pub fn forward(
    state: &mut MlpState,
    batch: &Matrix,
    domain: DomainTag,
    train_mode: bool,
) -> Result<ForwardCache> {
    let (cache, update) = encoder_forward_pure(state, batch, domain, train_mode)?;
    if let (Some(new_stats), Some(norm)) = (update, state.norm.as_mut()) {
        *norm.stats_mut(domain) = new_stats;
    }
    Ok(cache)
}

/// Eval-mode forward on a frozen state: no statistics are touched, so this
/// is safe to run concurrently on snapshots.
pub fn forward_eval(state: &MlpState, batch: &Matrix, domain: DomainTag) -> Result<ForwardCache> {
    encoder_forward_pure(state, batch, domain, false).map(|(cache, _)| cache)
}

/// Backward through the encoder, accumulating into `grads`.
pub fn backward(
    state: &MlpState,
    cache: &ForwardCache,
    d_features: &Matrix,
    grads: &mut GradientSet,
) -> Result<()> {
    if d_features.rows != cache.features.rows || d_features.cols != cache.features.cols {
        return Err(Error::DimensionMismatch {
            what: "encoder upstream gradient",
            expected: cache.features.rows * cache.features.cols,
            got: d_features.rows * d_features.cols,
        });
    }
    let n_hidden = state.arch.hidden_dims.len();

    let d_feature_pre = if state.arch.l2_normalize {
        l2_normalize_backward(&cache.feature_pre, d_features)
    } else {
        d_features.clone()
    };

    let final_input: &Matrix = match &cache.norm {
        Some(nc) => &nc.x_hat, // placeholder, replaced below
        None => {
            if n_hidden == 0 {
                &cache.input
            } else {
                &cache.hidden_post[n_hidden - 1]
            }
        }
    };
    // The final dense layer consumes the normalized output when a norm layer
    // is present; reconstruct it from the cache.
    let normed_input;
    let final_input = if let Some(nc) = &cache.norm {
        let norm = state.norm.as_ref().expect("norm cache implies norm layer");
        let mut m = Matrix::zeros(nc.x_hat.rows, nc.x_hat.cols);
        for i in 0..m.rows {
            for j in 0..m.cols {
                m.set(i, j, norm.gamma[j] * nc.x_hat.get(i, j) + norm.beta[j]);
            }
        }
        normed_input = m;
        &normed_input
    } else {
        final_input
    };

    let mut d_current =
        state.encoder[n_hidden].backward(final_input, &d_feature_pre, &mut grads.encoder[n_hidden]);

    if let Some(nc) = &cache.norm {
        let norm = state.norm.as_ref().expect("norm cache implies norm layer");
        d_current = norm_backward(
            &norm.gamma,
            nc,
            &d_current,
            &mut grads.norm_gamma,
            &mut grads.norm_beta,
        );
    }

    for l in (0..n_hidden).rev() {
        // ReLU mask from the pre-activation.
        let pre = &cache.hidden_pre[l];
        let mut d_post = d_current;
        for (v, &p) in d_post.data.iter_mut().zip(pre.data.iter()) {
            if p <= 0.0 {
                *v = 0.0;
            }
        }
        let input = if l == 0 { &cache.input } else { &cache.hidden_post[l - 1] };
        d_current = state.encoder[l].backward(input, &d_post, &mut grads.encoder[l]);
    }
    Ok(())
}

/// Projection-head forward: linear map plus optional L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjCache {
    input: Matrix,
    pre: Matrix,
    pub out: Matrix,
}

pub fn project(state: &MlpState, features: &Matrix) -> Result<ProjCache> {
    let pre = state.proj.forward(features)?;
    let out = if state.arch.l2_normalize {
        l2_normalize_rows(&pre)?
    } else {
        pre.clone()
    };
    Ok(ProjCache { input: features.clone(), pre, out })
}

/// Backward through the projection head; returns the feature gradient.
pub fn project_backward(
    state: &MlpState,
    cache: &ProjCache,
    d_out: &Matrix,
    grads: &mut GradientSet,
) -> Result<Matrix> {
    let d_pre = if state.arch.l2_normalize {
        l2_normalize_backward(&cache.pre, d_out)
    } else {
        d_out.clone()
    };
    Ok(state.proj.backward(&cache.input, &d_pre, &mut grads.proj))
}

/// Classification-head logits.
pub fn classify(state: &MlpState, features: &Matrix) -> Result<Matrix> {
    state.classifier.forward(features)
}

/// Backward through the classification head; returns the feature gradient.
pub fn classify_backward(
    state: &MlpState,
    features: &Matrix,
    d_logits: &Matrix,
    grads: &mut GradientSet,
) -> Result<Matrix> {
    Ok(state.classifier.backward(features, d_logits, &mut grads.classifier))
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits:
/// `(softmax − onehot) / batch`.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "cross-entropy labels",
            expected: logits.rows,
            got: labels.len(),
        });
    }
    if logits.rows == 0 {
        return Err(Error::Empty("cross-entropy batch"));
    }
    let classes = logits.cols;
    let batch = logits.rows as f64;
    let mut grad = Matrix::zeros(logits.rows, classes);
    let mut loss = 0.0;
    for i in 0..logits.rows {
        let label = labels[i];
        if label >= classes {
            return Err(Error::OutOfRange {
                what: "class label",
                value: label as f64,
                lo: 0.0,
                hi: (classes - 1) as f64,
            });
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let log_sum = m + sum_exp.ln();
        loss += log_sum - row[label];
        let g = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            g[j] = ((v - m).exp() / sum_exp) / batch;
        }
        g[label] -= 1.0 / batch;
    }
    Ok((loss / batch, grad))
}

/// Supervised contrastive loss over a key dictionary.
///
/// For each query, every same-label key is a positive; each positive is
/// scored against the different-label keys only:
/// `−ln( e^{⟨q,k⁺⟩/τ} / (e^{⟨q,k⁺⟩/τ} + Σ_{k∈N} e^{⟨q,k⟩/τ}) )`,
/// averaged over positives, then over queries. All vectors are assumed
/// L2-normalized by the caller, so the critic is the dot product over τ.
/// Returns the loss and its gradient w.r.t. the queries; keys receive no
/// gradient (they come from the momentum encoder).
pub fn contrastive_loss(
    queries: &Matrix,
    query_labels: &[usize],
    keys: &Matrix,
    key_labels: &[usize],
    tau: f64,
) -> Result<(f64, Matrix)> {
    if tau <= 0.0 {
        return Err(Error::OutOfRange {
            what: "temperature",
            value: tau,
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
        });
    }
    if queries.rows != query_labels.len() {
        return Err(Error::DimensionMismatch {
            what: "query labels",
            expected: queries.rows,
            got: query_labels.len(),
        });
    }
    if keys.rows != key_labels.len() {
        return Err(Error::DimensionMismatch {
            what: "key labels",
            expected: keys.rows,
            got: key_labels.len(),
        });
    }
    if queries.cols != keys.cols {
        return Err(Error::DimensionMismatch {
            what: "key width",
            expected: queries.cols,
            got: keys.cols,
        });
    }
    if queries.rows == 0 {
        return Err(Error::Empty("query batch"));
    }

    let n_queries = queries.rows;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n_queries, queries.cols);
    for qi in 0..n_queries {
        let q = queries.row(qi);
        let scores: Vec<f64> = (0..keys.rows).map(|ki| dot(q, keys.row(ki)) / tau).collect();
        let positives: Vec<usize> =
            (0..keys.rows).filter(|&ki| key_labels[ki] == query_labels[qi]).collect();
        if positives.is_empty() {
            return Err(Error::Contract(format!(
                "query {qi} has no positive key (label {})",
                query_labels[qi]
            )));
        }
        let negatives: Vec<usize> =
            (0..keys.rows).filter(|&ki| key_labels[ki] != query_labels[qi]).collect();

        let shift = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let neg_sum: f64 = negatives.iter().map(|&ki| (scores[ki] - shift).exp()).sum();

        let n_pos = positives.len() as f64;
        // d(loss_i)/d(score_k), accumulated over the per-positive terms.
        let mut d_scores = vec![0.0; keys.rows];
        let mut query_loss = 0.0;
        for &p in &positives {
            let e_pos = (scores[p] - shift).exp();
            let denom = e_pos + neg_sum;
            query_loss += -(scores[p] - shift - denom.ln());
            d_scores[p] += (e_pos / denom - 1.0) / n_pos;
            for &n in &negatives {
                d_scores[n] += ((scores[n] - shift).exp() / denom) / n_pos;
            }
        }
        loss += query_loss / n_pos;

        let scale = 1.0 / (tau * n_queries as f64);
        let gq = grad.row_mut(qi);
        for (ki, &ds) in d_scores.iter().enumerate() {
            if ds != 0.0 {
                let k = keys.row(ki);
                for (j, &kj) in k.iter().enumerate() {
                    gq[j] += scale * ds * kj;
                }
            }
        }
    }
    Ok((loss / n_queries as f64, grad))
}

/// Polynomial learning-rate decay `η_0 (1 + α p)^{−β}` over progress `p`.
pub fn lr_schedule(p: f64, eta0: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::OutOfRange { what: "progress", value: p, lo: 0.0, hi: 1.0 });
    }
    if eta0 <= 0.0 {
        return Err(Error::OutOfRange {
            what: "base learning rate",
            value: eta0,
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
        });
    }
    Ok(eta0 * (1.0 + alpha * p).powf(-beta))
}

/// Velocity buffers and schedule constants for heavy-ball SGD.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Vec<f64>,
    pub momentum: f64,
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    progress: f64,
}

impl OptimizerState {
    pub fn new(state: &MlpState, momentum: f64, eta0: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::OutOfRange {
                what: "momentum",
                value: momentum,
                lo: 0.0,
                hi: 1.0,
            });
        }
        lr_schedule(0.0, eta0, alpha, beta)?;
        Ok(Self {
            velocity: vec![0.0; state.param_count()],
            momentum,
            eta0,
            alpha,
            beta,
            progress: 0.0,
        })
    }

    pub fn set_progress(&mut self, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::OutOfRange { what: "progress", value: p, lo: 0.0, hi: 1.0 });
        }
        self.progress = p;
        Ok(())
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.progress, self.eta0, self.alpha, self.beta)
            .expect("progress and eta0 validated on entry")
    }
}

/// Heavy-ball update: `v ← momentum·v + g`, `θ ← θ − η_p·v`.
pub fn sgd_step(state: &mut MlpState, grads: &GradientSet, opt: &mut OptimizerState) -> Result<()> {
    let g = grads.flatten();
    if g.len() != opt.velocity.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient set",
            expected: opt.velocity.len(),
            got: g.len(),
        });
    }
    let lr = opt.lr();
    let mut params = state.flatten_params();
    for ((p, v), gi) in params.iter_mut().zip(opt.velocity.iter_mut()).zip(&g) {
        *v = opt.momentum * *v + gi;
        *p -= lr * *v;
    }
    state.load_params(&params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_arch() -> Architecture {
        Architecture {
            input_dim: 3,
            hidden_dims: vec![4],
            feature_dim: 3,
            projection_dim: 2,
            class_count: 3,
            activation: Activation::Relu,
            domain_norm: true,
            l2_normalize: true,
        }
    }

    fn random_batch(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        m
    }

    fn unit_rows(m: &Matrix) -> Matrix {
        l2_normalize_rows(m).unwrap()
    }

    #[test]
    fn identity_encoder_passes_unit_input_through() {
        let arch = Architecture {
            input_dim: 2,
            hidden_dims: vec![],
            feature_dim: 2,
            projection_dim: 2,
            class_count: 2,
            activation: Activation::Relu,
            domain_norm: false,
            l2_normalize: true,
        };
        let mut state = MlpState::init(arch, 0);
        state.encoder[0].w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        state.encoder[0].b = vec![0.0, 0.0];
        let x = Matrix::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap();
        let cache = forward(&mut state, &x, DomainTag::Source, false).unwrap();
        for i in 0..x.rows {
            for j in 0..x.cols {
                assert!((cache.features.get(i, j) - x.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_output_rows_are_unit_norm() {
        let mut state = MlpState::init(tiny_arch(), 1);
        let mut rng = stream(2, Stream::Instance, 0);
        let batch = random_batch(&mut rng, 6, 3);
        let cache = forward(&mut state, &batch, DomainTag::Source, true).unwrap();
        for i in 0..cache.features.rows {
            assert!((l2_norm(cache.features.row(i)) - 1.0).abs() < 1e-9);
        }
        let proj = project(&state, &cache.features).unwrap();
        for i in 0..proj.out.rows {
            assert!((l2_norm(proj.out.row(i)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_bit_stable() {
        let arch = tiny_arch();
        let mut s1 = MlpState::init(arch.clone(), 5);
        let mut s2 = MlpState::init(arch, 5);
        let mut rng = stream(6, Stream::Instance, 0);
        let batch = random_batch(&mut rng, 4, 3);
        let c1 = forward(&mut s1, &batch, DomainTag::Target, true).unwrap();
        let c2 = forward(&mut s2, &batch, DomainTag::Target, true).unwrap();
        let bits1: Vec<u64> = c1.features.data.iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = c2.features.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    #[test]
    fn per_domain_stats_are_isolated() {
        let mut state = MlpState::init(tiny_arch(), 7);
        let mut rng = stream(8, Stream::Instance, 0);
        let batch = random_batch(&mut rng, 5, 3);
        let before = state.norm.as_ref().unwrap().stats(DomainTag::Source).clone();
        forward(&mut state, &batch, DomainTag::Target, true).unwrap();
        let after = state.norm.as_ref().unwrap().stats(DomainTag::Source);
        let eq_bits = |a: &[f64], b: &[f64]| {
            a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits()))
        };
        assert!(eq_bits(&before.mean, &after.mean));
        assert!(eq_bits(&before.var, &after.var));
        // And the target stats did move.
        let target = state.norm.as_ref().unwrap().stats(DomainTag::Target);
        assert!(target.mean.iter().any(|&m| m != 0.0));
        assert!(target.var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn eval_mode_does_not_touch_stats() {
        let mut state = MlpState::init(tiny_arch(), 9);
        let mut rng = stream(10, Stream::Instance, 0);
        let batch = random_batch(&mut rng, 5, 3);
        let before = state.norm.as_ref().unwrap().stats(DomainTag::Target).clone();
        let frozen = state.clone();
        forward(&mut state, &batch, DomainTag::Target, false).unwrap();
        let after = state.norm.as_ref().unwrap().stats(DomainTag::Target);
        assert_eq!(before.mean, after.mean);
        assert_eq!(before.var, after.var);
        // forward_eval on a shared reference gives the same output.
        let a = forward_eval(&frozen, &batch, DomainTag::Target).unwrap();
        let b = forward(&mut state, &batch, DomainTag::Target, false).unwrap();
        assert_eq!(a.features.data, b.features.data);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut state = MlpState::init(tiny_arch(), 11);
        let mut rng = stream(12, Stream::Instance, 0);
        let batch = random_batch(&mut rng, 4, 3);
        let cache = forward(&mut state, &batch, DomainTag::Source, true).unwrap();
        let mut grads = GradientSet::zeros(&state);
        let zero = Matrix::zeros(cache.features.rows, cache.features.cols);
        backward(&state, &cache, &zero, &mut grads).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_net_quadratic_loss_matches_closed_form() {
        let arch = Architecture {
            input_dim: 2,
            hidden_dims: vec![],
            feature_dim: 2,
            projection_dim: 2,
            class_count: 2,
            activation: Activation::Relu,
            domain_norm: false,
            l2_normalize: false,
        };
        let mut state = MlpState::init(arch, 13);
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3], vec![0.2, -1.1]]).unwrap();
        let t = Matrix::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.4], vec![-0.3, 0.9]]).unwrap();
        let cache = forward(&mut state, &x, DomainTag::Source, false).unwrap();
        // Loss = (1/2B)·Σ‖z − t‖²  ⇒  dL/dz = (z − t)/B.
        let b = x.rows as f64;
        let mut d_z = Matrix::zeros(3, 2);
        for i in 0..3 {
            for j in 0..2 {
                d_z.set(i, j, (cache.features.get(i, j) - t.get(i, j)) / b);
            }
        }
        let mut grads = GradientSet::zeros(&state);
        backward(&state, &cache, &d_z, &mut grads).unwrap();
        // Closed form: dW[o][i] = (1/B) Σ_b (z_bo − t_bo)·x_bi.
        for o in 0..2 {
            for i in 0..2 {
                let expected: f64 = (0..3)
                    .map(|r| (cache.features.get(r, o) - t.get(r, o)) * x.get(r, i))
                    .sum::<f64>()
                    / b;
                assert!((grads.encoder[0].w.get(o, i) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_known_values() {
        // Uniform logits over C classes.
        let logits = Matrix::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy_loss(&logits, &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        let logits = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);

        // Dominant correct logit drives the loss to zero.
        let logits = Matrix::from_rows(&[vec![50.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!(loss < 1e-12);

        assert!(cross_entropy_loss(&logits, &[7]).is_err());
    }

    #[test]
    fn cross_entropy_batch_permutation_invariant() {
        let logits =
            Matrix::from_rows(&[vec![1.0, -0.3, 0.2], vec![0.4, 2.0, -1.0], vec![0.0, 0.1, 0.2]])
                .unwrap();
        let (a, _) = cross_entropy_loss(&logits, &[0, 1, 2]).unwrap();
        let permuted = logits.take_rows(&[2, 0, 1]);
        let (b, _) = cross_entropy_loss(&permuted, &[2, 0, 1]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn contrastive_known_values() {
        // One positive, zero negatives: softmax over a single element.
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let (loss, grad) = contrastive_loss(&q, &[0], &k, &[0], 1.0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data.iter().all(|&g| g.abs() < 1e-12));

        // sim(q, k+) = 1, one negative with sim 0, τ = 1:
        // −ln(e/(e + 1)) = ln(1 + e^{−1}).
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let keys = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (loss, _) = contrastive_loss(&q, &[0], &keys, &[0, 1], 1.0).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_empty_positive_set_is_contract_error() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            contrastive_loss(&q, &[0], &k, &[1], 0.5),
            Err(Error::Contract(_))
        ));
        assert!(contrastive_loss(&q, &[0], &k, &[0], 0.0).is_err());
    }

    #[test]
    fn contrastive_queue_permutation_invariant() {
        let mut rng = stream(14, Stream::Instance, 0);
        let q = unit_rows(&random_batch(&mut rng, 3, 4));
        let k = unit_rows(&random_batch(&mut rng, 6, 4));
        let ql = [0, 1, 2];
        let kl = [0, 1, 2, 0, 1, 2];
        let (a, _) = contrastive_loss(&q, &ql, &k, &kl, 0.05).unwrap();
        let order = [5, 3, 0, 2, 4, 1];
        let kp = k.take_rows(&order);
        let klp: Vec<usize> = order.iter().map(|&i| kl[i]).collect();
        let (b, _) = contrastive_loss(&q, &ql, &kp, &klp, 0.05).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_values_and_monotonicity() {
        assert_eq!(lr_schedule(0.0, 0.01, 10.0, 0.75).unwrap(), 0.01);
        assert_eq!(lr_schedule(0.7, 0.01, 0.0, 0.75).unwrap(), 0.01);
        let expected = 0.01 * 11f64.powf(-0.75);
        assert!((lr_schedule(1.0, 0.01, 10.0, 0.75).unwrap() - expected).abs() < 1e-15);
        assert!(lr_schedule(1.5, 0.01, 10.0, 0.75).is_err());
        assert!(lr_schedule(0.5, 0.0, 10.0, 0.75).is_err());

        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let lr = lr_schedule(i as f64 / 100.0, 0.01, 10.0, 0.75).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn sgd_step_momentum_recurrence() {
        let arch = Architecture {
            input_dim: 1,
            hidden_dims: vec![],
            feature_dim: 1,
            projection_dim: 1,
            class_count: 1,
            activation: Activation::Relu,
            domain_norm: false,
            l2_normalize: false,
        };
        let mut state = MlpState::init(arch, 0);
        let n = state.param_count();
        state.load_params(&vec![0.0; n]).unwrap();
        let mut opt = OptimizerState::new(&state, 0.9, 1.0, 0.0, 0.0).unwrap();

        // Zero gradient, zero velocity: parameters unchanged.
        let zero = GradientSet::zeros(&state);
        sgd_step(&mut state, &zero, &mut opt).unwrap();
        assert!(state.flatten_params().iter().all(|&p| p == 0.0));

        // Two unit-gradient steps with momentum 0.9, η = 1: displacement 2.9.
        let mut unit = GradientSet::zeros(&state);
        for g in unit.encoder.iter_mut() {
            g.w.data.iter_mut().for_each(|v| *v = 1.0);
            g.b.iter_mut().for_each(|v| *v = 1.0);
        }
        unit.proj.w.data.iter_mut().for_each(|v| *v = 1.0);
        unit.proj.b.iter_mut().for_each(|v| *v = 1.0);
        unit.classifier.w.data.iter_mut().for_each(|v| *v = 1.0);
        unit.classifier.b.iter_mut().for_each(|v| *v = 1.0);
        sgd_step(&mut state, &unit, &mut opt).unwrap();
        sgd_step(&mut state, &unit, &mut opt).unwrap();
        for &p in &state.flatten_params() {
            assert!((p + 2.9).abs() < 1e-12);
        }

        // Momentum 0 reduces to plain SGD.
        let mut state2 = MlpState::init(
            Architecture {
                input_dim: 1,
                hidden_dims: vec![],
                feature_dim: 1,
                projection_dim: 1,
                class_count: 1,
                activation: Activation::Relu,
                domain_norm: false,
                l2_normalize: false,
            },
            0,
        );
        let n2 = state2.param_count();
        state2.load_params(&vec![0.0; n2]).unwrap();
        let mut opt2 = OptimizerState::new(&state2, 0.0, 0.5, 0.0, 0.0).unwrap();
        let mut unit2 = GradientSet::zeros(&state2);
        unit2.encoder[0].w.data[0] = 1.0;
        sgd_step(&mut state2, &unit2, &mut opt2).unwrap();
        assert!((state2.flatten_params()[0] + 0.5).abs() < 1e-15);
    }

    // Full-stack gradient check: encoder (ReLU, per-domain norm, L2) feeding
    // both heads and both losses, against central finite differences.
    fn combined_loss(
        state: &MlpState,
        batch: &Matrix,
        labels: &[usize],
        keys: &Matrix,
        key_labels: &[usize],
        tau: f64,
        gamma: f64,
    ) -> f64 {
        let mut s = state.clone();
        let cache = forward(&mut s, batch, DomainTag::Source, true).unwrap();
        let logits = classify(&s, &cache.features).unwrap();
        let (ls, _) = cross_entropy_loss(&logits, labels).unwrap();
        let proj = project(&s, &cache.features).unwrap();
        let (lc, _) = contrastive_loss(&proj.out, labels, keys, key_labels, tau).unwrap();
        ls + gamma * lc
    }

    #[test]
    fn full_stack_gradients_match_finite_differences() {
        let tau = 0.3;
        let gamma = 0.7;
        for seed in 0..20u64 {
            let mut rng = stream(seed, Stream::Instance, 3);
            let state = MlpState::init(tiny_arch(), seed);
            let batch = random_batch(&mut rng, 5, 3);
            let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
            let keys = unit_rows(&random_batch(&mut rng, 7, 2));
            let key_labels: Vec<usize> = (0..7).map(|i| i % 3).collect();

            // Analytic gradients.
            let mut s = state.clone();
            let cache = forward(&mut s, &batch, DomainTag::Source, true).unwrap();
            let mut grads = GradientSet::zeros(&s);
            let logits = classify(&s, &cache.features).unwrap();
            let (_, d_logits) = cross_entropy_loss(&logits, &labels).unwrap();
            let d_z_ce = classify_backward(&s, &cache.features, &d_logits, &mut grads).unwrap();
            let proj = project(&s, &cache.features).unwrap();
            let (_, d_w) = contrastive_loss(&proj.out, &labels, &keys, &key_labels, tau).unwrap();
            let mut d_w_scaled = d_w.clone();
            d_w_scaled.data.iter_mut().for_each(|v| *v *= gamma);
            let d_z_cl = project_backward(&s, &proj, &d_w_scaled, &mut grads).unwrap();
            let mut d_z = d_z_ce.clone();
            for (a, b) in d_z.data.iter_mut().zip(&d_z_cl.data) {
                *a += b;
            }
            backward(&s, &cache, &d_z, &mut grads).unwrap();
            let analytic = grads.flatten();

            // Central finite differences over every parameter.
            let base = state.flatten_params();
            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let mut sp = state.clone();
                sp.load_params(&plus).unwrap();
                let mut sm = state.clone();
                sm.load_params(&minus).unwrap();
                let fp = combined_loss(&sp, &batch, &labels, &keys, &key_labels, tau, gamma);
                let fm = combined_loss(&sm, &batch, &labels, &keys, &key_labels, tau, gamma);
                let numeric = (fp - fm) / (2.0 * h);
                let diff = (analytic[i] - numeric).abs();
                if diff > 1e-8 {
                    let rel = diff / (analytic[i].abs() + numeric.abs()).max(1e-6);
                    max_rel = max_rel.max(rel);
                }
            }
            assert!(max_rel < 1e-4, "seed {seed}: max relative error {max_rel}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences_directly() {
        let mut rng = stream(33, Stream::Instance, 0);

        // Cross-entropy w.r.t. logits.
        let logits = random_batch(&mut rng, 4, 3);
        let labels = [2, 0, 1, 1];
        let (_, grad) = cross_entropy_loss(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..logits.rows {
            for j in 0..logits.cols {
                let mut p = logits.clone();
                p.set(i, j, p.get(i, j) + h);
                let mut m = logits.clone();
                m.set(i, j, m.get(i, j) - h);
                let fp = cross_entropy_loss(&p, &labels).unwrap().0;
                let fm = cross_entropy_loss(&m, &labels).unwrap().0;
                let numeric = (fp - fm) / (2.0 * h);
                assert!((grad.get(i, j) - numeric).abs() < 1e-6);
            }
        }

        // Contrastive loss w.r.t. queries.
        let q = unit_rows(&random_batch(&mut rng, 3, 4));
        let keys = unit_rows(&random_batch(&mut rng, 8, 4));
        let ql = [0, 1, 0];
        let kl = [0, 0, 1, 1, 0, 1, 0, 1];
        let (_, grad) = contrastive_loss(&q, &ql, &keys, &kl, 0.2).unwrap();
        for i in 0..q.rows {
            for j in 0..q.cols {
                let mut p = q.clone();
                p.set(i, j, p.get(i, j) + h);
                let mut m = q.clone();
                m.set(i, j, m.get(i, j) - h);
                let fp = contrastive_loss(&p, &ql, &keys, &kl, 0.2).unwrap().0;
                let fm = contrastive_loss(&m, &ql, &keys, &kl, 0.2).unwrap().0;
                let numeric = (fp - fm) / (2.0 * h);
                let diff = (grad.get(i, j) - numeric).abs();
                let rel = diff / (grad.get(i, j).abs() + numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "({i},{j}): rel {rel}");
            }
        }
    }

    #[test]
    fn rejects_width_mismatch_and_empty_batch() {
        let mut state = MlpState::init(tiny_arch(), 15);
        let wrong = Matrix::zeros(2, 5);
        assert!(forward(&mut state, &wrong, DomainTag::Source, true).is_err());
        let empty = Matrix { rows: 0, cols: 3, data: vec![] };
        assert!(forward(&mut state, &empty, DomainTag::Source, true).is_err());
    }
}
