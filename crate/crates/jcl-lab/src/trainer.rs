//! End-to-end training: pseudo-labeled joint contrastive adaptation, the
//! source-only baseline, the linear-probe diagnostic, and the γ sweep.
//!
//! One epoch: cluster the target features, split them by the certainty
//! threshold, rebalance the source and certain-target sets to uniform label
//! histograms, then iterate — sample the three mini-batch streams, compute
//! the source cross-entropy on query features, forward the uncertain target
//! batch in train mode so only its domain statistics move, merge the
//! source/certain query and key projections, enqueue keys, score the
//! contrastive loss against the dictionary, and step the query network by
//! heavy-ball SGD under the polynomial decay schedule; the key network
//! follows by momentum update. Everything is driven by named random streams,
//! so a rerun with the same config is bit-identical, and the source-only
//! baseline consumes the same source-batch stream as the full loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{rebalance_classes, spherical_kmeans, split_certain};
use crate::data::{augment, gen_synthetic_pair, DomainDataset, DomainTag, SyntheticTaskConfig};
use crate::error::{Error, Result};
use crate::infotheory::infonce_estimate;
use crate::mat::{dot, l2_norm, Matrix};
use crate::moco::{KeyQueue, MomentumPair};
use crate::nn::{
    backward, classify, classify_backward, contrastive_loss, cross_entropy_loss, forward,
    forward_eval, project, project_backward, sgd_step, Activation, Architecture, GradientSet,
    MlpState, OptimizerState,
};
use crate::rng::{stream, Stream};

fn default_gamma() -> f64 {
    1.0
}
fn default_tau() -> f64 {
    0.05
}
fn default_certain_threshold() -> f64 {
    0.1
}
fn default_queue_capacity() -> usize {
    512
}
fn default_key_momentum() -> f64 {
    0.9
}
fn default_eta0() -> f64 {
    0.01
}
fn default_lr_alpha() -> f64 {
    10.0
}
fn default_lr_beta() -> f64 {
    0.75
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    30
}
fn default_iterations_per_epoch() -> usize {
    10
}
fn default_warmup_epochs() -> usize {
    1
}
fn default_augment_sigma() -> f64 {
    0.1
}
fn default_hidden_dims() -> Vec<usize> {
    vec![64, 64]
}
fn default_feature_dim() -> usize {
    16
}
fn default_projection_dim() -> usize {
    8
}
fn default_true() -> bool {
    true
}

/// Full training configuration; every field has a desk-scale default so a
/// partial JSON config resolves completely.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Contrastive weight γ in the combined objective.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Critic temperature τ.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Cosine-dissimilarity threshold d for the certain split.
    #[serde(default = "default_certain_threshold")]
    pub certain_threshold: f64,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    /// Momentum m of the key encoder.
    #[serde(default = "default_key_momentum")]
    pub key_momentum: f64,
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    #[serde(default = "default_lr_alpha")]
    pub lr_alpha: f64,
    #[serde(default = "default_lr_beta")]
    pub lr_beta: f64,
    #[serde(default = "default_batch")]
    pub batch_source: usize,
    #[serde(default = "default_batch")]
    pub batch_certain: usize,
    #[serde(default = "default_batch")]
    pub batch_uncertain: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_iterations_per_epoch")]
    pub iterations_per_epoch: usize,
    /// Epochs of source-loss-only training while the dictionary fills.
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Std-dev of the additive-noise view jitter.
    #[serde(default = "default_augment_sigma")]
    pub augment_sigma: f64,
    /// Dictionary order: enqueue fresh keys before scoring the loss (the
    /// listed order) or after (ablation).
    #[serde(default = "default_true")]
    pub enqueue_before_loss: bool,
    /// Warm-start cluster centers from the previous epoch instead of
    /// re-initializing from source class centroids.
    #[serde(default)]
    pub warm_start_centers: bool,
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
    #[serde(default)]
    pub task: SyntheticTaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config resolves via defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.certain_threshold) {
            return Err(Error::Config("certain_threshold must lie in [0, 2]".into()));
        }
        if !(0.0..1.0).contains(&self.key_momentum) {
            return Err(Error::Config("key_momentum must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || self.iterations_per_epoch == 0 {
            return Err(Error::Config("epochs and iterations_per_epoch must be positive".into()));
        }
        if self.batch_source == 0 || self.batch_certain == 0 || self.batch_uncertain == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.queue_capacity < self.batch_source + self.batch_certain {
            return Err(Error::Config(
                "queue_capacity must hold at least one merged key batch".into(),
            ));
        }
        if self.eta0 <= 0.0 {
            return Err(Error::Config("eta0 must be positive".into()));
        }
        Ok(())
    }

    fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: 2,
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            projection_dim: self.projection_dim,
            class_count: self.task.class_count,
            activation: Activation::Relu,
            domain_norm: true,
            l2_normalize: true,
        }
    }
}

/// One metrics row. Loss fields are per iteration; the rest are filled at
/// evaluation points (epoch boundaries; the probe only at the end).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub l_s: f64,
    pub l_c: f64,
    pub lr: f64,
    pub target_accuracy: Option<f64>,
    pub pseudo_label_accuracy: Option<f64>,
    pub certain_fraction: Option<f64>,
    pub infonce_estimate: Option<f64>,
    pub linear_probe_error: Option<f64>,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "iteration,l_s,l_c,lr,target_accuracy,pseudo_label_accuracy,certain_fraction,infonce_estimate,linear_probe_error";

    pub fn csv_row(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.l_s,
            self.l_c,
            self.lr,
            opt(&self.target_accuracy),
            opt(&self.pseudo_label_accuracy),
            opt(&self.certain_fraction),
            opt(&self.infonce_estimate),
            opt(&self.linear_probe_error),
        )
    }
}

/// Final state plus the metrics series and the datasets used.
pub struct TrainOutcome {
    pub state: MlpState,
    pub metrics: Vec<MetricsRecord>,
    pub source: DomainDataset,
    pub target: DomainDataset,
}

impl TrainOutcome {
    pub fn final_target_accuracy(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.target_accuracy)
    }

    pub fn final_probe_error(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.linear_probe_error)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(MetricsRecord::CSV_HEADER);
        out.push('\n');
        for m in &self.metrics {
            out.push_str(&m.csv_row());
            out.push('\n');
        }
        out
    }

    /// Feature dump for external plotting:
    /// `x1,x2,z1..zd,label,pseudo_label,domain`.
    pub fn features_csv(&self) -> Result<String> {
        let mut out = String::from("x1,x2");
        for j in 0..self.state.arch.feature_dim {
            out.push_str(&format!(",z{}", j + 1));
        }
        out.push_str(",label,pseudo_label,domain\n");
        for ds in [&self.source, &self.target] {
            let cache = forward_eval(&self.state, ds.features(), ds.domain())?;
            for i in 0..ds.len() {
                out.push_str(&format!("{},{}", ds.features().get(i, 0), ds.features().get(i, 1)));
                for &z in cache.features.row(i) {
                    out.push_str(&format!(",{z}"));
                }
                let pseudo = ds
                    .pseudo_labels
                    .as_ref()
                    .map(|p| p[i].to_string())
                    .unwrap_or_default();
                out.push_str(&format!(
                    ",{},{},{}\n",
                    ds.true_labels_for_eval()[i],
                    pseudo,
                    ds.domain()
                ));
            }
        }
        Ok(out)
    }
}

fn draw_batch(len: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..len)).collect()
}

/// Per-class normalized centroids of encoder features, used to seed the
/// spherical clustering so cluster index equals class label.
fn class_centroids(features: &Matrix, labels: &[usize], class_count: usize) -> Result<Matrix> {
    let dim = features.cols;
    let mut sums = Matrix::zeros(class_count, dim);
    let mut counts = vec![0usize; class_count];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        let row = sums.row_mut(l);
        for (j, &v) in features.row(i).iter().enumerate() {
            row[j] += v;
        }
    }
    for c in 0..class_count {
        if counts[c] == 0 {
            return Err(Error::Contract(format!("class {c} has no source samples")));
        }
        let norm = l2_norm(sums.row(c));
        if norm < 1e-12 {
            return Err(Error::Contract(format!("class {c} centroid has zero norm")));
        }
        for v in sums.row_mut(c) {
            *v /= norm;
        }
    }
    Ok(sums)
}

fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows)
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .expect("non-empty logits row")
        })
        .collect()
}

/// Classifier accuracy on a dataset's withheld true labels (evaluator path).
fn target_accuracy(state: &MlpState, ds: &DomainDataset) -> Result<f64> {
    let cache = forward_eval(state, ds.features(), ds.domain())?;
    let logits = classify(state, &cache.features)?;
    let preds = argmax_rows(&logits);
    let truth = ds.true_labels_for_eval();
    let correct = preds
        .iter()
        .zip(truth)
        .filter(|(p, t)| **p as i32 == **t)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// K same-class view pairs scored by the cosine critic, reduced by the
/// K-sample estimator. A collapse diagnostic: high values mean projected
/// views identify their partner against the batch.
fn infonce_diagnostic(
    state: &MlpState,
    pool: &DomainDataset,
    tau: f64,
    sigma: f64,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    let k = 32.min(pool.len());
    if k < 2 {
        return Ok(0.0);
    }
    let mut rng = stream(seed, Stream::Eval, epoch);
    let rows = draw_batch(pool.len(), k, &mut rng);
    let batch = pool.features().take_rows(&rows);
    let (va, vb) = augment(&batch, sigma, seed, (1 << 32) | epoch);
    let za = forward_eval(state, &va, pool.domain())?;
    let zb = forward_eval(state, &vb, pool.domain())?;
    let wa = project(state, &za.features)?.out;
    let wb = project(state, &zb.features)?.out;
    let critic: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| dot(wa.row(i), wb.row(j)) / tau).collect())
        .collect();
    infonce_estimate(&critic)
}

/// Trains one linear softmax layer on frozen features by full-batch gradient
/// descent and returns the combined error rate.
pub fn linear_probe(features: &Matrix, labels: &[usize], class_count: usize) -> Result<f64> {
    if features.rows != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "probe labels",
            expected: features.rows,
            got: labels.len(),
        });
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Contract("probe needs at least two classes present".into()));
    }
    let mut w = Matrix::zeros(class_count, features.cols);
    let mut b = vec![0.0; class_count];
    let n = features.rows;
    let lr = 1.0;
    for _ in 0..2000 {
        let mut logits = Matrix::zeros(n, class_count);
        for i in 0..n {
            let x = features.row(i);
            let row = logits.row_mut(i);
            for (c, bc) in b.iter().enumerate() {
                row[c] = dot(w.row(c), x) + bc;
            }
        }
        let (_, grad) = cross_entropy_loss(&logits, labels)?;
        for i in 0..n {
            let x = features.row(i);
            for c in 0..class_count {
                let g = grad.get(i, c);
                b[c] -= lr * g;
                let wr = w.row_mut(c);
                for (j, &xj) in x.iter().enumerate() {
                    wr[j] -= lr * g * xj;
                }
            }
        }
    }
    let mut errors = 0usize;
    for i in 0..n {
        let x = features.row(i);
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..class_count {
            let s = dot(w.row(c), x) + b[c];
            if s > best.1 {
                best = (c, s);
            }
        }
        if best.0 != labels[i] {
            errors += 1;
        }
    }
    Ok(errors as f64 / n as f64)
}

/// Frozen encoder features of both domains with their true labels, then the
/// probe error (evaluator path: both domains' labels are visible here only).
pub fn joint_probe_error(state: &MlpState, source: &DomainDataset, target: &DomainDataset) -> Result<f64> {
    let zs = forward_eval(state, source.features(), DomainTag::Source)?.features;
    let zt = forward_eval(state, target.features(), DomainTag::Target)?.features;
    let all = zs.vstack(&zt)?;
    let mut labels: Vec<usize> = source
        .true_labels_for_eval()
        .iter()
        .chain(target.true_labels_for_eval())
        .map(|&l| l as usize)
        .collect();
    // Guard against any stray unlabeled rows.
    if labels.iter().any(|&l| l >= state.arch.class_count) {
        labels.retain(|&l| l < state.arch.class_count);
    }
    linear_probe(&all, &labels, state.arch.class_count)
}

struct EpochPlan {
    balanced_source: DomainDataset,
    balanced_certain: Option<DomainDataset>,
    uncertain: Option<DomainDataset>,
    pseudo_label_accuracy: Option<f64>,
    certain_fraction: Option<f64>,
    contrastive_ready: bool,
}

/// Clusters the target in feature space, splits by the threshold, and
/// rebalances both training pools for one epoch.
fn plan_epoch(
    cfg: &TrainConfig,
    state: &MlpState,
    source: &DomainDataset,
    target: &mut DomainDataset,
    prev_centers: Option<&Matrix>,
    epoch: usize,
    source_only: bool,
) -> Result<(EpochPlan, Option<Matrix>)> {
    let c = cfg.task.class_count;
    let balanced_source =
        rebalance_classes(source, c, cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9))?;

    if source_only {
        return Ok((
            EpochPlan {
                balanced_source,
                balanced_certain: None,
                uncertain: None,
                pseudo_label_accuracy: None,
                certain_fraction: None,
                contrastive_ready: false,
            },
            None,
        ));
    }

    let src_cache = forward_eval(state, source.features(), DomainTag::Source)?;
    let src_labels = source.training_labels()?;
    let init_centers = match prev_centers {
        Some(centers) if cfg.warm_start_centers => centers.clone(),
        _ => class_centroids(&src_cache.features, &src_labels, c)?,
    };
    let tgt_cache = forward_eval(state, target.features(), DomainTag::Target)?;
    let model = spherical_kmeans(
        &tgt_cache.features,
        &init_centers,
        crate::cluster::DEFAULT_MAX_ITERS,
        crate::cluster::DEFAULT_TOL,
    )?;
    let (certain, uncertain_idx) = split_certain(&model, cfg.certain_threshold)?;

    target.pseudo_labels = Some(model.assignments.clone());
    let mut certainty = vec![false; target.len()];
    for &(i, _) in &certain {
        certainty[i] = true;
    }
    target.certainty = Some(certainty);

    let certain_fraction = certain.len() as f64 / target.len() as f64;
    // Pseudo-label accuracy on the certain set (withheld labels; eval only).
    let truth = target.true_labels_for_eval();
    let pseudo_label_accuracy = if certain.is_empty() {
        None
    } else {
        let hits = certain.iter().filter(|&&(i, p)| truth[i] == p as i32).count();
        Some(hits as f64 / certain.len() as f64)
    };

    let certain_rows: Vec<usize> = certain.iter().map(|&(i, _)| i).collect();
    let mut certain_ds = target.subset(&certain_rows);
    certain_ds.pseudo_labels = Some(certain.iter().map(|&(_, p)| p).collect());

    // Contrastive training needs every class represented among the certain
    // targets; until then the epoch runs in warm-up style.
    let mut class_seen = vec![false; c];
    for &(_, p) in &certain {
        class_seen[p] = true;
    }
    let contrastive_ready = epoch >= cfg.warmup_epochs && class_seen.iter().all(|&s| s);

    let balanced_certain = if contrastive_ready {
        Some(rebalance_classes(
            &certain_ds,
            c,
            cfg.seed ^ (epoch as u64).wrapping_mul(0x85eb_ca6b),
        )?)
    } else {
        None
    };
    let uncertain = if uncertain_idx.is_empty() {
        None
    } else {
        Some(target.subset(&uncertain_idx))
    };

    Ok((
        EpochPlan {
            balanced_source,
            balanced_certain,
            uncertain,
            pseudo_label_accuracy: Some(pseudo_label_accuracy.unwrap_or(0.0)),
            certain_fraction: Some(certain_fraction),
            contrastive_ready,
        },
        Some(model.centers),
    ))
}

fn train_impl(cfg: &TrainConfig, source_only: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (source, mut target) = gen_synthetic_pair(&cfg.task)?;
    let mut state = MlpState::init(cfg.architecture(), cfg.seed);
    let mut key_pair = MomentumPair::new(&state, cfg.key_momentum)?;
    let mut queue = KeyQueue::new(cfg.queue_capacity)?;
    let mut opt =
        OptimizerState::new(&state, 0.9, cfg.eta0, cfg.lr_alpha, cfg.lr_beta)?;
    let total_iters = cfg.epochs * cfg.iterations_per_epoch;
    let mut metrics: Vec<MetricsRecord> = Vec::with_capacity(total_iters);
    let mut queue_has_filled = false;
    let mut prev_centers: Option<Matrix> = None;

    for epoch in 0..cfg.epochs {
        let (plan, centers) = plan_epoch(
            cfg,
            &state,
            &source,
            &mut target,
            prev_centers.as_ref(),
            epoch,
            source_only,
        )?;
        prev_centers = centers;

        for it in 0..cfg.iterations_per_epoch {
            let gi = epoch * cfg.iterations_per_epoch + it;
            opt.set_progress(gi as f64 / total_iters as f64)?;

            // Source stream.
            let mut rng_s = stream(cfg.seed, Stream::BatchSource, gi as u64);
            let idx_s = draw_batch(plan.balanced_source.len(), cfg.batch_source, &mut rng_s);
            let src_x = plan.balanced_source.features().take_rows(&idx_s);
            let src_labels_all = plan.balanced_source.training_labels()?;
            let labels_s: Vec<usize> = idx_s.iter().map(|&i| src_labels_all[i]).collect();
            let (src_q_view, src_k_view) = augment(&src_x, cfg.augment_sigma, cfg.seed, gi as u64);

            let mut grads = GradientSet::zeros(&state);
            let src_cache = forward(&mut state, &src_q_view, DomainTag::Source, true)?;
            let logits = classify(&state, &src_cache.features)?;
            let (l_s, d_logits) = cross_entropy_loss(&logits, &labels_s)?;
            let d_z_source_ce =
                classify_backward(&state, &src_cache.features, &d_logits, &mut grads)?;

            let mut l_c = 0.0;
            let mut d_z_source = d_z_source_ce;
            let mut tc_backprop: Option<(crate::nn::ForwardCache, Matrix)> = None;

            if !source_only {
                // Key-side source view through the momentum encoder.
                let src_key_cache =
                    forward(&mut key_pair.key, &src_k_view, DomainTag::Source, true)?;
                let src_keys = project(&key_pair.key, &src_key_cache.features)?.out;

                let contrastive_active = plan.contrastive_ready
                    && (queue_has_filled || !cfg.enqueue_before_loss || {
                        // The queue reaches capacity during this iteration's
                        // enqueue at the latest once enough keys have flowed.
                        queue.len() + cfg.batch_source + cfg.batch_certain >= cfg.queue_capacity
                    });

                if let (Some(balanced_certain), true) =
                    (plan.balanced_certain.as_ref(), plan.contrastive_ready)
                {
                    // Certain-target stream.
                    let mut rng_c = stream(cfg.seed, Stream::BatchCertain, gi as u64);
                    let idx_c = draw_batch(balanced_certain.len(), cfg.batch_certain, &mut rng_c);
                    let tc_x = balanced_certain.features().take_rows(&idx_c);
                    let tc_labels_all = balanced_certain.training_labels()?;
                    let labels_c: Vec<usize> = idx_c.iter().map(|&i| tc_labels_all[i]).collect();
                    let (tc_q_view, tc_k_view) =
                        augment(&tc_x, cfg.augment_sigma, cfg.seed, (1 << 40) | gi as u64);

                    let tc_cache = forward(&mut state, &tc_q_view, DomainTag::Target, true)?;
                    let tc_proj = project(&state, &tc_cache.features)?;
                    let src_proj = project(&state, &src_cache.features)?;

                    let tc_key_cache =
                        forward(&mut key_pair.key, &tc_k_view, DomainTag::Target, true)?;
                    let tc_keys = project(&key_pair.key, &tc_key_cache.features)?.out;

                    let merged_keys = src_keys.vstack(&tc_keys)?;
                    let mut merged_key_labels = labels_s.clone();
                    merged_key_labels.extend_from_slice(&labels_c);

                    if cfg.enqueue_before_loss {
                        queue.enqueue_batch(&merged_keys, &merged_key_labels)?;
                    }

                    if contrastive_active {
                        let merged_queries = src_proj.out.vstack(&tc_proj.out)?;
                        let mut merged_query_labels = labels_s.clone();
                        merged_query_labels.extend_from_slice(&labels_c);

                        let (dict_keys, dict_labels) = if cfg.enqueue_before_loss {
                            queue.snapshot()
                        } else {
                            // Own keys join the dictionary for this batch so
                            // every query has a positive.
                            let (qk, ql) = queue.snapshot();
                            let keys = if qk.rows == 0 {
                                merged_keys.clone()
                            } else {
                                qk.vstack(&merged_keys)?
                            };
                            let mut labels = ql;
                            labels.extend_from_slice(&merged_key_labels);
                            (keys, labels)
                        };

                        let (lc, d_queries) = contrastive_loss(
                            &merged_queries,
                            &merged_query_labels,
                            &dict_keys,
                            &dict_labels,
                            cfg.tau,
                        )?;
                        l_c = lc;

                        // Split the query gradient back through the two
                        // projection caches, scaled by γ.
                        let b_s = cfg.batch_source;
                        let mut d_src_w = Matrix::zeros(b_s, d_queries.cols);
                        d_src_w
                            .data
                            .copy_from_slice(&d_queries.data[..b_s * d_queries.cols]);
                        let mut d_tc_w =
                            Matrix::zeros(d_queries.rows - b_s, d_queries.cols);
                        d_tc_w
                            .data
                            .copy_from_slice(&d_queries.data[b_s * d_queries.cols..]);
                        for v in d_src_w.data.iter_mut() {
                            *v *= cfg.gamma;
                        }
                        for v in d_tc_w.data.iter_mut() {
                            *v *= cfg.gamma;
                        }
                        let d_z_src_cl =
                            project_backward(&state, &src_proj, &d_src_w, &mut grads)?;
                        for (a, b) in d_z_source.data.iter_mut().zip(&d_z_src_cl.data) {
                            *a += b;
                        }
                        let d_z_tc = project_backward(&state, &tc_proj, &d_tc_w, &mut grads)?;
                        tc_backprop = Some((tc_cache, d_z_tc));
                    }

                    if !cfg.enqueue_before_loss {
                        queue.enqueue_batch(&merged_keys, &merged_key_labels)?;
                    }
                } else {
                    // Warm-up style iteration: source keys keep the queue warm.
                    queue.enqueue_batch(&src_keys, &labels_s)?;
                }

                // Uncertain-target forward: normalization statistics only.
                let uncertain_pool = plan.uncertain.as_ref().unwrap_or(&target);
                if uncertain_pool.len() > 0 {
                    let mut rng_u = stream(cfg.seed, Stream::BatchUncertain, gi as u64);
                    let idx_u = draw_batch(uncertain_pool.len(), cfg.batch_uncertain, &mut rng_u);
                    let unc_x = uncertain_pool.features().take_rows(&idx_u);
                    forward(&mut state, &unc_x, DomainTag::Target, true)?;
                }

                if queue.is_full() {
                    queue_has_filled = true;
                }
                if queue_has_filled {
                    assert!(queue.is_full(), "queue shrank below capacity");
                }
            }

            let total_loss = l_s + cfg.gamma * l_c;
            if !total_loss.is_finite() {
                return Err(Error::TrainingAborted {
                    iteration: gi,
                    reason: format!("non-finite loss (l_s={l_s}, l_c={l_c})"),
                });
            }

            backward(&state, &src_cache, &d_z_source, &mut grads)?;
            if let Some((tc_cache, d_z_tc)) = tc_backprop {
                backward(&state, &tc_cache, &d_z_tc, &mut grads)?;
            }
            sgd_step(&mut state, &grads, &mut opt)?;
            if !source_only {
                key_pair.momentum_update(&state)?;
            }

            metrics.push(MetricsRecord {
                iteration: gi,
                l_s,
                l_c,
                lr: opt.lr(),
                target_accuracy: None,
                pseudo_label_accuracy: None,
                certain_fraction: None,
                infonce_estimate: None,
                linear_probe_error: None,
            });
        }

        // Epoch-boundary evaluation on the frozen state.
        let accuracy = target_accuracy(&state, &target)?;
        let infonce = if source_only {
            None
        } else {
            Some(infonce_diagnostic(
                &state,
                &source,
                cfg.tau,
                cfg.augment_sigma,
                cfg.seed,
                epoch as u64,
            )?)
        };
        let last = metrics.last_mut().expect("at least one iteration per epoch");
        last.target_accuracy = Some(accuracy);
        last.pseudo_label_accuracy = plan.pseudo_label_accuracy;
        last.certain_fraction = plan.certain_fraction;
        last.infonce_estimate = infonce;
    }

    // Final diagnostic: linear probe on frozen joint features.
    let probe = joint_probe_error(&state, &source, &target)?;
    metrics
        .last_mut()
        .expect("training ran at least one iteration")
        .linear_probe_error = Some(probe);

    Ok(TrainOutcome { state, metrics, source, target })
}

/// Full joint contrastive training (per-epoch pseudo-labeling, dictionary,
/// momentum keys, combined objective).
pub fn train_jcl(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_impl(cfg, false)
}

/// Source-only baseline: the same loop and source sampling stream with the
/// contrastive weight, clustering, and queue machinery removed.
pub fn train_source_only(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_impl(cfg, true)
}

/// One full run per γ value under shared seeds; rows of (γ, final accuracy).
pub fn gamma_sweep(cfg: &TrainConfig, gammas: &[f64]) -> Result<Vec<(f64, f64)>> {
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        if gamma < 0.0 {
            return Err(Error::Config("gamma values must be non-negative".into()));
        }
        let mut run_cfg = cfg.clone();
        run_cfg.gamma = gamma;
        let outcome = train_jcl(&run_cfg)?;
        let acc = outcome
            .final_target_accuracy()
            .ok_or_else(|| Error::Contract("run produced no accuracy".into()))?;
        rows.push((gamma, acc));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg(seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.seed = seed;
        cfg.epochs = 4;
        cfg.iterations_per_epoch = 5;
        cfg.queue_capacity = 64;
        cfg.batch_source = 16;
        cfg.batch_certain = 16;
        cfg.batch_uncertain = 16;
        cfg.task.samples_per_class = 40;
        cfg
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical() {
        let cfg = quick_cfg(5);
        let a = train_jcl(&cfg).unwrap();
        let b = train_jcl(&cfg).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        let pa = a.state.flatten_params();
        let pb = b.state.flatten_params();
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gamma_zero_full_warmup_matches_source_only_loss_trajectory() {
        let mut cfg = quick_cfg(6);
        cfg.gamma = 0.0;
        cfg.warmup_epochs = cfg.epochs; // contrastive never activates
        let jcl = train_jcl(&cfg).unwrap();
        let baseline = train_source_only(&cfg).unwrap();
        for (a, b) in jcl.metrics.iter().zip(&baseline.metrics) {
            assert_eq!(a.l_s.to_bits(), b.l_s.to_bits(), "iteration {}", a.iteration);
        }
    }

    #[test]
    fn lr_follows_schedule_exactly() {
        let cfg = quick_cfg(7);
        let out = train_source_only(&cfg).unwrap();
        let total = (cfg.epochs * cfg.iterations_per_epoch) as f64;
        for m in &out.metrics {
            let expected =
                crate::nn::lr_schedule(m.iteration as f64 / total, cfg.eta0, cfg.lr_alpha, cfg.lr_beta)
                    .unwrap();
            assert_eq!(m.lr.to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn losses_stay_non_negative_and_finite() {
        let cfg = quick_cfg(8);
        let out = train_jcl(&cfg).unwrap();
        for m in &out.metrics {
            assert!(m.l_s >= 0.0 && m.l_s.is_finite());
            assert!(m.l_c >= 0.0 && m.l_c.is_finite());
        }
    }

    #[test]
    fn uncertain_forward_leaves_parameters_untouched() {
        let cfg = quick_cfg(9);
        let mut state = MlpState::init(cfg.architecture(), 3);
        let (_, target) = gen_synthetic_pair(&cfg.task).unwrap();
        let before = state.flatten_params();
        let stats_before = state.norm.as_ref().unwrap().stats(DomainTag::Source).clone();
        forward(&mut state, target.features(), DomainTag::Target, true).unwrap();
        let after = state.flatten_params();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
        // Source statistics also untouched; only target stats moved.
        let stats_after = state.norm.as_ref().unwrap().stats(DomainTag::Source);
        assert_eq!(stats_before.mean, stats_after.mean);
        assert_eq!(stats_before.var, stats_after.var);
    }

    #[test]
    fn probe_on_separable_features_is_near_zero() {
        // Three well-separated unit-ish blobs in 4 dims.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = stream(60, Stream::Probe, 0);
        for c in 0..3usize {
            for _ in 0..40 {
                let mut v = vec![0.0; 4];
                v[c] = 1.0;
                for x in v.iter_mut() {
                    *x += rng.gen_range(-0.05..0.05);
                }
                rows.push(v);
                labels.push(c);
            }
        }
        let features = Matrix::from_rows(&rows).unwrap();
        let err = linear_probe(&features, &labels, 3).unwrap();
        assert!(err <= 0.01, "probe error {err}");
    }

    #[test]
    fn probe_on_shuffled_labels_is_chance_level() {
        let mut rng = stream(61, Stream::Probe, 0);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let features = Matrix::from_rows(&rows).unwrap();
        let labels: Vec<usize> = (0..300).map(|_| rng.gen_range(0..3)).collect();
        let err = linear_probe(&features, &labels, 3).unwrap();
        let chance = 2.0 / 3.0;
        assert!((err - chance).abs() <= 0.05, "probe error {err} vs chance {chance}");
    }

    #[test]
    fn probe_rejects_single_class() {
        let features = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(linear_probe(&features, &[1, 1], 2).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = quick_cfg(1);
        cfg.gamma = -0.5;
        assert!(train_jcl(&cfg).is_err());
        let mut cfg = quick_cfg(1);
        cfg.tau = 0.0;
        assert!(train_jcl(&cfg).is_err());
        let mut cfg = quick_cfg(1);
        cfg.certain_threshold = 3.0;
        assert!(train_jcl(&cfg).is_err());
        let mut cfg = quick_cfg(1);
        cfg.queue_capacity = 4;
        assert!(train_jcl(&cfg).is_err());
    }

    #[test]
    fn easy_task_reaches_high_accuracy() {
        let mut cfg = quick_cfg(12);
        cfg.epochs = 8;
        cfg.task.covariance_scale = 0.15;
        cfg.task.shift_rotation_deg = 10.0;
        let out = train_jcl(&cfg).unwrap();
        let acc = out.final_target_accuracy().unwrap();
        assert!(acc >= 0.95, "target accuracy {acc}");
    }

    #[test]
    fn gamma_sweep_emits_one_row_per_value() {
        let mut cfg = quick_cfg(13);
        cfg.epochs = 2;
        let rows = gamma_sweep(&cfg, &[0.5]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, 0.5);
    }
}
