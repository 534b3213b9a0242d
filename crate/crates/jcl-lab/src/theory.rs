//! Exact finite-domain evaluation of target-error bounds.
//!
//! Everything here works on explicit finite input spaces, so every error
//! term, the hypothesis-pair discrepancy and the ideal joint error are
//! computed exactly (double-precision sums over at most a few dozen points),
//! and the bound checkers report rather than assert.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Comparison tolerance for the exact checks.
pub const TOL: f64 = 1e-12;

/// A finite input space carrying a distribution and a labeling function.
///
/// Points are identified by index; `probs[i]` is the mass on point `i` and
/// `label_fn[i]` its label in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDomain {
    probs: Vec<f64>,
    label_fn: Vec<f64>,
}

impl FiniteDomain {
    pub fn new(probs: Vec<f64>, label_fn: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("domain points"));
        }
        if probs.len() != label_fn.len() {
            return Err(Error::DimensionMismatch {
                what: "domain label_fn",
                expected: probs.len(),
                got: label_fn.len(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::NonFinite("domain probs"));
        }
        if (sum - 1.0).abs() > TOL {
            return Err(Error::NotNormalized {
                what: "domain probs",
                sum,
            });
        }
        for &v in &label_fn {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    what: "label_fn",
                    value: v,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
        Ok(Self { probs, label_fn })
    }

    pub fn n_points(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn label_fn(&self) -> &[f64] {
        &self.label_fn
    }
}

/// A finite set of `[0, 1]`-valued hypotheses over a shared point set.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisClass {
    hypotheses: Vec<Vec<f64>>,
}

impl HypothesisClass {
    pub fn new(hypotheses: Vec<Vec<f64>>) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(Error::Empty("hypothesis class"));
        }
        let n = hypotheses[0].len();
        for h in &hypotheses {
            if h.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "hypothesis length",
                    expected: n,
                    got: h.len(),
                });
            }
            for &v in h {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::OutOfRange {
                        what: "hypothesis value",
                        value: v,
                        lo: 0.0,
                        hi: 1.0,
                    });
                }
            }
        }
        Ok(Self { hypotheses })
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.hypotheses[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.hypotheses.iter()
    }

    pub fn point_count(&self) -> usize {
        self.hypotheses[0].len()
    }

    fn contains(&self, h: &[f64]) -> bool {
        self.hypotheses.iter().any(|c| c.as_slice() == h)
    }
}

/// One named additive term on the right-hand side of a bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTerm {
    pub name: &'static str,
    pub value: f64,
}

/// Result of checking one bound on one instance. Reports, never asserts.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs_terms: Vec<BoundTerm>,
    pub rhs_total: f64,
    pub holds: bool,
    pub slack: f64,
}

impl BoundReport {
    fn new(lhs: f64, rhs_terms: Vec<BoundTerm>) -> Self {
        let rhs_total: f64 = rhs_terms.iter().map(|t| t.value).sum();
        let slack = rhs_total - lhs;
        Self {
            lhs,
            rhs_terms,
            rhs_total,
            holds: slack >= -TOL,
            slack,
        }
    }

    /// CSV header for reports with this report's term names.
    pub fn csv_header(&self) -> String {
        let terms: Vec<&str> = self.rhs_terms.iter().map(|t| t.name).collect();
        format!("instance_id,h_index,lhs,{},rhs_total,slack,holds", terms.join(","))
    }

    pub fn csv_row(&self, instance_id: usize, h_index: usize) -> String {
        let terms: Vec<String> = self.rhs_terms.iter().map(|t| t.value.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{}",
            instance_id,
            h_index,
            self.lhs,
            terms.join(","),
            self.rhs_total,
            self.slack,
            self.holds
        )
    }
}

/// Outcome of a lemma check: the inequality slack and whether it holds.
#[derive(Debug, Clone, Copy)]
pub struct LemmaReport {
    pub holds: bool,
    pub slack: f64,
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

/// Expected error of `h` against labeling `f` under `d`: `Σ_x probs[x]·|h[x] − f[x]|`.
pub fn expected_error(h: &[f64], f: &[f64], d: &FiniteDomain) -> Result<f64> {
    check_len("expected_error h", d.n_points(), h.len())?;
    check_len("expected_error f", d.n_points(), f.len())?;
    Ok(d
        .probs
        .iter()
        .zip(h.iter().zip(f))
        .map(|(&p, (&a, &b))| p * (a - b).abs())
        .sum())
}

/// Hypothesis-pair discrepancy between two distributions:
/// `2·max_{h,h' ∈ H} |ε_S(h,h') − ε_T(h,h')|`.
///
/// The disagreement between two hypotheses is measured as the expected
/// absolute difference, which coincides with the disagreement probability
/// for binary-valued hypotheses.
pub fn hdh_distance(class: &HypothesisClass, d_s: &FiniteDomain, d_t: &FiniteDomain) -> Result<f64> {
    check_len("hdh_distance source", class.point_count(), d_s.n_points())?;
    check_len("hdh_distance target", class.point_count(), d_t.n_points())?;
    let mut sup = 0.0f64;
    for i in 0..class.len() {
        for j in (i + 1)..class.len() {
            let es = expected_error(class.get(i), class.get(j), d_s)?;
            let et = expected_error(class.get(i), class.get(j), d_t)?;
            sup = sup.max((es - et).abs());
        }
    }
    Ok(2.0 * sup)
}

/// Equal mixture of two domains: probabilities and labels are both averaged.
pub fn combine_domains(d_s: &FiniteDomain, d_t: &FiniteDomain) -> Result<FiniteDomain> {
    check_len("combine_domains", d_s.n_points(), d_t.n_points())?;
    let probs = d_s
        .probs
        .iter()
        .zip(&d_t.probs)
        .map(|(&a, &b)| 0.5 * (a + b))
        .collect();
    let labels = d_s
        .label_fn
        .iter()
        .zip(&d_t.label_fn)
        .map(|(&a, &b)| 0.5 * (a + b))
        .collect();
    FiniteDomain::new(probs, labels)
}

/// Minimizer of the summed source + target error over the class.
///
/// Returns `(index, lambda)`; ties break toward the lowest index.
pub fn ideal_joint_lambda(
    class: &HypothesisClass,
    d_s: &FiniteDomain,
    d_t: &FiniteDomain,
) -> Result<(usize, f64)> {
    let mut best = (0usize, f64::INFINITY);
    for (i, h) in class.iter().enumerate() {
        let combined =
            expected_error(h, d_s.label_fn(), d_s)? + expected_error(h, d_t.label_fn(), d_t)?;
        if combined < best.1 {
            best = (i, combined);
        }
    }
    Ok(best)
}

/// Classic bound: `ε_T(h) ≤ ε_S(h) + ½·d_HΔH + λ`.
pub fn check_theorem1(
    h_index: usize,
    class: &HypothesisClass,
    d_s: &FiniteDomain,
    d_t: &FiniteDomain,
) -> Result<BoundReport> {
    let h = class.get(h_index);
    let lhs = expected_error(h, d_t.label_fn(), d_t)?;
    let source_error = expected_error(h, d_s.label_fn(), d_s)?;
    let half_hdh = 0.5 * hdh_distance(class, d_s, d_t)?;
    let (_, lambda) = ideal_joint_lambda(class, d_s, d_t)?;
    Ok(BoundReport::new(
        lhs,
        vec![
            BoundTerm { name: "source_error", value: source_error },
            BoundTerm { name: "half_hdh", value: half_hdh },
            BoundTerm { name: "lambda", value: lambda },
        ],
    ))
}

/// Combined-domain bound: `ε_T(h) ≤ ε_S(h) + ¼·d_HΔH + 2·ε_U(h, f_U)`.
pub fn check_theorem2(
    h_index: usize,
    class: &HypothesisClass,
    d_s: &FiniteDomain,
    d_t: &FiniteDomain,
) -> Result<BoundReport> {
    let h = class.get(h_index);
    let lhs = expected_error(h, d_t.label_fn(), d_t)?;
    let source_error = expected_error(h, d_s.label_fn(), d_s)?;
    let quarter_hdh = 0.25 * hdh_distance(class, d_s, d_t)?;
    let combined = combine_domains(d_s, d_t)?;
    let combined_error_x2 = 2.0 * expected_error(h, combined.label_fn(), &combined)?;
    Ok(BoundReport::new(
        lhs,
        vec![
            BoundTerm { name: "source_error", value: source_error },
            BoundTerm { name: "quarter_hdh", value: quarter_hdh },
            BoundTerm { name: "combined_error_x2", value: combined_error_x2 },
        ],
    ))
}

/// Pseudo-label bound: the combined labels use `f_hat_t` in place of the true
/// target labels, and the target disagreement `ε_T(f_T, f_hat_T)` is added.
pub fn check_theorem3(
    h_index: usize,
    class: &HypothesisClass,
    d_s: &FiniteDomain,
    d_t: &FiniteDomain,
    f_hat_t: &[f64],
) -> Result<BoundReport> {
    check_len("check_theorem3 f_hat_t", d_t.n_points(), f_hat_t.len())?;
    for &v in f_hat_t {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange {
                what: "f_hat_t",
                value: v,
                lo: 0.0,
                hi: 1.0,
            });
        }
    }
    let h = class.get(h_index);
    let lhs = expected_error(h, d_t.label_fn(), d_t)?;
    let source_error = expected_error(h, d_s.label_fn(), d_s)?;
    let quarter_hdh = 0.25 * hdh_distance(class, d_s, d_t)?;
    let pseudo_target = FiniteDomain::new(d_t.probs.clone(), f_hat_t.to_vec())?;
    let combined = combine_domains(d_s, &pseudo_target)?;
    let combined_pseudo_error_x2 = 2.0 * expected_error(h, combined.label_fn(), &combined)?;
    let pseudo_disagreement = expected_error(d_t.label_fn(), f_hat_t, d_t)?;
    Ok(BoundReport::new(
        lhs,
        vec![
            BoundTerm { name: "source_error", value: source_error },
            BoundTerm { name: "quarter_hdh", value: quarter_hdh },
            BoundTerm { name: "combined_pseudo_error_x2", value: combined_pseudo_error_x2 },
            BoundTerm { name: "pseudo_disagreement", value: pseudo_disagreement },
        ],
    ))
}

/// Triangle inequality of the expected error:
/// `ε_D(h, h') ≤ ε_D(h, h'') + ε_D(h'', h')`.
pub fn check_lemma_triangle(
    h: &[f64],
    h_prime: &[f64],
    h_mid: &[f64],
    d: &FiniteDomain,
) -> Result<LemmaReport> {
    let lhs = expected_error(h, h_prime, d)?;
    let rhs = expected_error(h, h_mid, d)? + expected_error(h_mid, h_prime, d)?;
    let slack = rhs - lhs;
    Ok(LemmaReport { holds: slack >= -TOL, slack })
}

/// Pairwise discrepancy bound: `|ε_S(h,h') − ε_T(h,h')| ≤ ½·d_HΔH`.
///
/// Both hypotheses must be members of the class the distance ranges over.
pub fn check_lemma_hdh(
    h: &[f64],
    h_prime: &[f64],
    class: &HypothesisClass,
    d_s: &FiniteDomain,
    d_t: &FiniteDomain,
) -> Result<LemmaReport> {
    if !class.contains(h) || !class.contains(h_prime) {
        return Err(Error::Contract(
            "lemma 2 requires both hypotheses to be members of the class".into(),
        ));
    }
    let gap = (expected_error(h, h_prime, d_s)? - expected_error(h, h_prime, d_t)?).abs();
    let half_hdh = 0.5 * hdh_distance(class, d_s, d_t)?;
    let slack = half_hdh - gap;
    Ok(LemmaReport { holds: slack >= -TOL, slack })
}

/// One randomly generated verification instance.
#[derive(Debug, Clone)]
pub struct TheoryInstance {
    pub source: FiniteDomain,
    pub target: FiniteDomain,
    pub class: HypothesisClass,
}

/// JSON wire form of an instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceJson {
    pub points: usize,
    pub probs_s: Vec<f64>,
    pub probs_t: Vec<f64>,
    pub f_s: Vec<f64>,
    pub f_t: Vec<f64>,
    pub hypotheses: Vec<Vec<f64>>,
}

impl TheoryInstance {
    pub fn to_json(&self) -> InstanceJson {
        InstanceJson {
            points: self.source.n_points(),
            probs_s: self.source.probs().to_vec(),
            probs_t: self.target.probs().to_vec(),
            f_s: self.source.label_fn().to_vec(),
            f_t: self.target.label_fn().to_vec(),
            hypotheses: self.class.iter().cloned().collect(),
        }
    }

    pub fn from_json(j: &InstanceJson) -> Result<Self> {
        let source = FiniteDomain::new(j.probs_s.clone(), j.f_s.clone())?;
        let target = FiniteDomain::new(j.probs_t.clone(), j.f_t.clone())?;
        if source.n_points() != j.points || target.n_points() != j.points {
            return Err(Error::DimensionMismatch {
                what: "instance points",
                expected: j.points,
                got: source.n_points(),
            });
        }
        let class = HypothesisClass::new(j.hypotheses.clone())?;
        if class.point_count() != j.points {
            return Err(Error::DimensionMismatch {
                what: "instance hypotheses",
                expected: j.points,
                got: class.point_count(),
            });
        }
        Ok(Self { source, target, class })
    }
}

fn random_probs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    // Occasionally zero out entries so disjoint / partial supports show up.
    let mut p: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    if n > 1 && rng.gen_bool(0.3) {
        let zeros = rng.gen_range(1..n);
        for _ in 0..zeros {
            let i = rng.gen_range(0..n);
            p[i] = 0.0;
        }
    }
    let s: f64 = p.iter().sum();
    if s <= 0.0 {
        p[0] = 1.0;
        return p;
    }
    // Normalize and push rounding residue into the largest entry.
    for v in p.iter_mut() {
        *v /= s;
    }
    let resid = 1.0 - p.iter().sum::<f64>();
    let imax = p
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    p[imax] += resid;
    p
}

fn random_labels(rng: &mut impl Rng, n: usize, binary: bool) -> Vec<f64> {
    if binary {
        (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()
    } else {
        // Values on a coarse grid in [0, 1].
        (0..n).map(|_| rng.gen_range(0..=8) as f64 / 8.0).collect()
    }
}

/// Sample a random instance: binary hypotheses, labels binary or on a
/// `[0, 1]` grid, distributions with occasional sparse supports.
///
/// Both labeling functions are included as members of the generated class.
/// The combined-domain bounds compare the labeling functions through the
/// class-pair discrepancy, so they are guaranteed only when the class is
/// rich enough to contain them; a one-hypothesis class over disjoint
/// supports violates them otherwise.
pub fn random_instance(
    rng: &mut impl Rng,
    max_points: usize,
    max_hypotheses: usize,
) -> TheoryInstance {
    let n = rng.gen_range(1..=max_points.max(1));
    let binary_s = rng.gen_bool(0.5);
    let source = FiniteDomain::new(random_probs(rng, n), random_labels(rng, n, binary_s))
        .expect("generated source domain is valid");
    let binary_t = rng.gen_bool(0.5);
    let target = FiniteDomain::new(random_probs(rng, n), random_labels(rng, n, binary_t))
        .expect("generated target domain is valid");
    let m = rng.gen_range(1..=max_hypotheses.max(3) - 2);
    let mut hypotheses: Vec<Vec<f64>> = (0..m).map(|_| random_labels(rng, n, true)).collect();
    hypotheses.push(source.label_fn().to_vec());
    hypotheses.push(target.label_fn().to_vec());
    let class = HypothesisClass::new(hypotheses).expect("generated class is valid");
    TheoryInstance { source, target, class }
}
