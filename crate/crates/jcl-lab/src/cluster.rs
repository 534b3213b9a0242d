//! Spherical k-means pseudo-labeling, certainty splitting, and class-uniform
//! rebalancing.

use rand::Rng;

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::mat::{dot, l2_norm, Matrix};
use crate::rng::{stream, Stream};

/// Relative objective-change stopping threshold.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Iteration cap.
pub const DEFAULT_MAX_ITERS: usize = 100;

/// Unit-norm cluster centers with per-point assignments and cosine
/// dissimilarities (`1 − cos`).
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub dissimilarity: Vec<f64>,
}

impl ClusterModel {
    /// Mean cosine dissimilarity of points to their assigned centers.
    pub fn objective(&self) -> f64 {
        self.dissimilarity.iter().sum::<f64>() / self.dissimilarity.len().max(1) as f64
    }

    /// Report CSV: `point_id,cluster,dissimilarity,certain` for a threshold.
    pub fn to_csv(&self, threshold: f64) -> String {
        let mut out = String::from("point_id,cluster,dissimilarity,certain\n");
        for i in 0..self.assignments.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i,
                self.assignments[i],
                self.dissimilarity[i],
                self.dissimilarity[i] <= threshold
            ));
        }
        out
    }
}

fn assign(features: &Matrix, centers: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let mut assignments = Vec::with_capacity(features.rows);
    let mut dissimilarity = Vec::with_capacity(features.rows);
    for i in 0..features.rows {
        let x = features.row(i);
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..centers.rows {
            let sim = dot(x, centers.row(c));
            if sim > best.1 {
                best = (c, sim);
            }
        }
        assignments.push(best.0);
        dissimilarity.push(1.0 - best.1);
    }
    (assignments, dissimilarity)
}

fn check_unit_rows(what: &'static str, m: &Matrix) -> Result<()> {
    for i in 0..m.rows {
        if (l2_norm(m.row(i)) - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "{what} row {i} is not unit-norm (norm {})",
                l2_norm(m.row(i))
            )));
        }
    }
    Ok(())
}

/// Alternates maximum-cosine assignment and normalized-mean center updates.
///
/// The mean dissimilarity never increases between assignment steps; a center
/// that ends up empty (or with a cancelling mean) is re-seeded with the point
/// farthest from its own assigned center.
pub fn spherical_kmeans(
    features: &Matrix,
    init_centers: &Matrix,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterModel> {
    if features.rows == 0 {
        return Err(Error::Empty("clustering features"));
    }
    if init_centers.rows == 0 {
        return Err(Error::Empty("initial centers"));
    }
    if features.cols != init_centers.cols {
        return Err(Error::DimensionMismatch {
            what: "center width",
            expected: features.cols,
            got: init_centers.cols,
        });
    }
    check_unit_rows("feature", features)?;
    check_unit_rows("center", init_centers)?;

    let k = init_centers.rows;
    let dim = features.cols;
    let mut centers = init_centers.clone();
    let (mut assignments, mut dissimilarity) = assign(features, &centers);
    let mut objective = dissimilarity.iter().sum::<f64>() / features.rows as f64;

    for _ in 0..max_iters {
        // Center update: normalized mean of each cluster.
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            let row = sums.row_mut(a);
            for (j, &v) in features.row(i).iter().enumerate() {
                row[j] += v;
            }
        }
        for c in 0..k {
            let norm = l2_norm(sums.row(c));
            if counts[c] == 0 || norm < 1e-12 {
                // Deterministic recovery: seed with the globally worst-fit point.
                let far = dissimilarity
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .expect("non-empty features");
                centers.row_mut(c).copy_from_slice(features.row(far));
            } else {
                let dst = centers.row_mut(c);
                for (j, &s) in sums.row(c).iter().enumerate() {
                    dst[j] = s / norm;
                }
            }
        }

        let (new_assignments, new_dissimilarity) = assign(features, &centers);
        let new_objective = new_dissimilarity.iter().sum::<f64>() / features.rows as f64;
        assert!(
            new_objective <= objective + 1e-12,
            "objective increased: {objective} -> {new_objective}"
        );
        assignments = new_assignments;
        dissimilarity = new_dissimilarity;
        let improvement = (objective - new_objective).abs() / objective.abs().max(1e-12);
        objective = new_objective;
        if improvement < tol {
            break;
        }
    }

    Ok(ClusterModel { centers, assignments, dissimilarity })
}

/// Splits points into a certain set (dissimilarity ≤ `d`, pseudo-label =
/// cluster index) and the uncertain rest.
pub fn split_certain(model: &ClusterModel, d: f64) -> Result<(Vec<(usize, usize)>, Vec<usize>)> {
    if !(0.0..=2.0).contains(&d) {
        return Err(Error::OutOfRange { what: "distance threshold", value: d, lo: 0.0, hi: 2.0 });
    }
    let mut certain = Vec::new();
    let mut uncertain = Vec::new();
    for i in 0..model.assignments.len() {
        if model.dissimilarity[i] <= d {
            certain.push((i, model.assignments[i]));
        } else {
            uncertain.push(i);
        }
    }
    Ok((certain, uncertain))
}

/// Oversamples deficit classes (uniformly, with replacement) until every
/// class matches the largest class count. Existing samples are all kept.
pub fn rebalance_classes(
    dataset: &DomainDataset,
    class_count: usize,
    seed: u64,
) -> Result<DomainDataset> {
    let labels = dataset.training_labels()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= class_count {
            return Err(Error::Contract(format!("label {l} out of range")));
        }
        by_class[l].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Contract(format!("class {c} has no samples")));
        }
    }
    let max_count = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = stream(seed, Stream::Rebalance, 0);
    let mut indices = Vec::with_capacity(class_count * max_count);
    for members in &by_class {
        indices.extend_from_slice(members);
        for _ in members.len()..max_count {
            indices.push(members[rng.gen_range(0..members.len())]);
        }
    }
    Ok(dataset.subset(&indices))
}
