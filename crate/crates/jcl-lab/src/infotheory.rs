//! Discrete information measures and estimator checks.
//!
//! All quantities are in nats. `0·ln 0` is taken as 0 throughout. Identity
//! checks are exact (1e-10); Monte-Carlo checks use three standard errors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Tolerance for exact identities.
pub const IDENTITY_TOL: f64 = 1e-10;

fn entropy_raw(p: impl Iterator<Item = f64>) -> f64 {
    let mut h = 0.0;
    for v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

fn validate_pmf(what: &'static str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty(what));
    }
    for &v in p {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::NonFinite(what));
        }
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::NotNormalized { what, sum });
    }
    Ok(())
}

/// A pmf over a finite alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    pmf: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(pmf: Vec<f64>) -> Result<Self> {
        validate_pmf("distribution pmf", &pmf)?;
        Ok(Self { pmf })
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn len(&self) -> usize {
        self.pmf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmf.is_empty()
    }
}

/// Joint pmf over two finite alphabets, rows × cols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pmf: Vec<Vec<f64>>,
}

impl DiscreteJoint {
    pub fn new(pmf: Vec<Vec<f64>>) -> Result<Self> {
        if pmf.is_empty() || pmf[0].is_empty() {
            return Err(Error::Empty("joint pmf"));
        }
        let cols = pmf[0].len();
        let mut sum = 0.0;
        for row in &pmf {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: "joint row",
                    expected: cols,
                    got: row.len(),
                });
            }
            for &v in row {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::NonFinite("joint pmf"));
                }
                sum += v;
            }
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::NotNormalized { what: "joint pmf", sum });
        }
        Ok(Self { pmf })
    }

    /// Joint of a label mixture: row `i` is `pi[i] · dists[i]`.
    pub fn from_mixture(dists: &[DiscreteDistribution], pi: &[f64]) -> Result<Self> {
        validate_pmf("mixture weights", pi)?;
        if dists.len() != pi.len() {
            return Err(Error::DimensionMismatch {
                what: "mixture components",
                expected: pi.len(),
                got: dists.len(),
            });
        }
        let alphabet = dists[0].len();
        let mut pmf = Vec::with_capacity(dists.len());
        for (d, &w) in dists.iter().zip(pi) {
            if d.len() != alphabet {
                return Err(Error::DimensionMismatch {
                    what: "mixture alphabet",
                    expected: alphabet,
                    got: d.len(),
                });
            }
            pmf.push(d.pmf().iter().map(|&p| w * p).collect());
        }
        Self::new(pmf)
    }

    pub fn rows(&self) -> usize {
        self.pmf.len()
    }

    pub fn cols(&self) -> usize {
        self.pmf[0].len()
    }

    pub fn pmf(&self) -> &[Vec<f64>] {
        &self.pmf
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pmf[i][j]
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        self.pmf.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols()];
        for row in &self.pmf {
            for (j, &v) in row.iter().enumerate() {
                m[j] += v;
            }
        }
        m
    }
}

/// Shannon entropy `−Σ p ln p` in nats.
pub fn entropy(p: &DiscreteDistribution) -> f64 {
    entropy_raw(p.pmf.iter().copied())
}

/// Mutual information of a joint: `H(A) + H(B) − H(A,B)`.
pub fn mutual_information(j: &DiscreteJoint) -> f64 {
    let h_rows = entropy_raw(j.row_marginal().into_iter());
    let h_cols = entropy_raw(j.col_marginal().into_iter());
    let h_joint = entropy_raw(j.pmf.iter().flatten().copied());
    h_rows + h_cols - h_joint
}

/// Generalized Jensen-Shannon divergence of weighted components:
/// `H(Σ π_i D_i) − Σ π_i H(D_i)`.
pub fn generalized_js(dists: &[DiscreteDistribution], pi: &[f64]) -> Result<f64> {
    validate_pmf("js weights", pi)?;
    if dists.len() != pi.len() {
        return Err(Error::DimensionMismatch {
            what: "js components",
            expected: pi.len(),
            got: dists.len(),
        });
    }
    let alphabet = dists[0].len();
    let mut mixture = vec![0.0; alphabet];
    let mut weighted_h = 0.0;
    for (d, &w) in dists.iter().zip(pi) {
        if d.len() != alphabet {
            return Err(Error::DimensionMismatch {
                what: "js alphabet",
                expected: alphabet,
                got: d.len(),
            });
        }
        for (m, &p) in mixture.iter_mut().zip(d.pmf()) {
            *m += w * p;
        }
        weighted_h += w * entropy(d);
    }
    Ok(entropy_raw(mixture.into_iter()) - weighted_h)
}

/// Absolute gap between the generalized JS divergence and the mutual
/// information of the label-mixture joint. Equal for every instance, so the
/// returned slack should not exceed [`IDENTITY_TOL`].
pub fn check_js_mi_identity(dists: &[DiscreteDistribution], pi: &[f64]) -> Result<f64> {
    let js = generalized_js(dists, pi)?;
    let joint = DiscreteJoint::from_mixture(dists, pi)?;
    Ok((js - mutual_information(&joint)).abs())
}

/// K-sample noise-contrastive estimate from a critic score matrix.
///
/// `critic[i][j]` scores query `i` against candidate `j`; the diagonal holds
/// the jointly drawn pairs. Returns
/// `(1/K) Σ_i ln( e^{c_ii} / ((1/K) Σ_j e^{c_ij}) )`, which never exceeds
/// `ln K` regardless of the critic.
pub fn infonce_estimate(critic: &[Vec<f64>]) -> Result<f64> {
    let k = critic.len();
    if k == 0 {
        return Err(Error::Empty("critic matrix"));
    }
    let mut total = 0.0;
    for (i, row) in critic.iter().enumerate() {
        if row.len() != k {
            return Err(Error::DimensionMismatch {
                what: "critic row",
                expected: k,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("critic value"));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&c| (c - m).exp()).sum::<f64>().ln();
        // c_ii − ln((1/K)Σ_j e^{c_ij}) = c_ii − lse + ln K
        total += row[i] - lse + (k as f64).ln();
    }
    Ok(total / k as f64)
}

/// Monte-Carlo check that the K-sample estimate with the optimal critic
/// stays below the true mutual information and `ln K`.
#[derive(Debug, Clone)]
pub struct InfoNceReport {
    pub k: usize,
    pub trials: usize,
    pub mean_estimate: f64,
    pub sem: f64,
    pub mi: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Runs `trials` independent K-sample estimates on the joint, with the critic
/// fixed to the log density ratio `ln(p(x,y)/(p(x)p(y)))`, and tests
/// `mean ≤ min(I(X;Y), ln K) + 3·SEM`.
pub fn check_infonce_bound(
    joint: &DiscreteJoint,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<InfoNceReport> {
    if k == 0 {
        return Err(Error::Empty("sample count"));
    }
    if trials == 0 {
        return Err(Error::Empty("trial count"));
    }
    let rows = joint.rows();
    let cols = joint.cols();
    let p_row = joint.row_marginal();
    let p_col = joint.col_marginal();

    // Log density ratio per cell; cells outside the joint support get the
    // most negative finite score so they vanish from the softmax.
    let floor = f64::MIN_POSITIVE.ln();
    let mut log_ratio = vec![vec![floor; cols]; rows];
    for a in 0..rows {
        for b in 0..cols {
            let p = joint.get(a, b);
            if p > 0.0 {
                log_ratio[a][b] = p.ln() - p_row[a].ln() - p_col[b].ln();
            }
        }
    }

    // Flattened cdf for sampling cells from the joint.
    let flat: Vec<f64> = joint.pmf().iter().flatten().copied().collect();

    let mi = mutual_information(joint);
    let mut estimates = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = stream(seed, Stream::Trial, t as u64);
        let mut xs = Vec::with_capacity(k);
        let mut ys = Vec::with_capacity(k);
        for _ in 0..k {
            let cell = sample_index(&flat, &mut rng);
            xs.push(cell / cols);
            ys.push(cell % cols);
        }
        let critic: Vec<Vec<f64>> = xs
            .iter()
            .map(|&x| ys.iter().map(|&y| log_ratio[x][y]).collect())
            .collect();
        estimates.push(infonce_estimate(&critic)?);
    }

    let mean = estimates.iter().sum::<f64>() / trials as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
        / (trials.max(2) - 1) as f64;
    let sem = (var / trials as f64).sqrt();
    let bound = mi.min((k as f64).ln());
    Ok(InfoNceReport {
        k,
        trials,
        mean_estimate: mean,
        sem,
        mi,
        bound,
        pass: mean <= bound + 3.0 * sem,
    })
}

fn sample_index(pmf: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pmf.len() - 1
}

/// A three-variable chain `Y → X → Z`: prior over `Y` plus two row-stochastic
/// channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovChain3 {
    prior: Vec<f64>,
    channel_yx: Vec<Vec<f64>>,
    channel_xz: Vec<Vec<f64>>,
}

impl MarkovChain3 {
    pub fn new(prior: Vec<f64>, channel_yx: Vec<Vec<f64>>, channel_xz: Vec<Vec<f64>>) -> Result<Self> {
        validate_pmf("chain prior", &prior)?;
        if channel_yx.len() != prior.len() {
            return Err(Error::DimensionMismatch {
                what: "channel Y→X rows",
                expected: prior.len(),
                got: channel_yx.len(),
            });
        }
        let x_size = channel_yx[0].len();
        for row in &channel_yx {
            validate_pmf("channel Y→X row", row)?;
            if row.len() != x_size {
                return Err(Error::DimensionMismatch {
                    what: "channel Y→X row",
                    expected: x_size,
                    got: row.len(),
                });
            }
        }
        if channel_xz.len() != x_size {
            return Err(Error::DimensionMismatch {
                what: "channel X→Z rows",
                expected: x_size,
                got: channel_xz.len(),
            });
        }
        let z_size = channel_xz[0].len();
        for row in &channel_xz {
            validate_pmf("channel X→Z row", row)?;
            if row.len() != z_size {
                return Err(Error::DimensionMismatch {
                    what: "channel X→Z row",
                    expected: z_size,
                    got: row.len(),
                });
            }
        }
        Ok(Self { prior, channel_yx, channel_xz })
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// `p(z | y)`: the composed channel Y→Z.
    fn composed(&self) -> Vec<Vec<f64>> {
        let z_size = self.channel_xz[0].len();
        self.channel_yx
            .iter()
            .map(|yx| {
                let mut out = vec![0.0; z_size];
                for (x, &pyx) in yx.iter().enumerate() {
                    for (z, &pxz) in self.channel_xz[x].iter().enumerate() {
                        out[z] += pyx * pxz;
                    }
                }
                out
            })
            .collect()
    }
}

/// One named inequality from the chain check.
#[derive(Debug, Clone)]
pub struct DpiInequality {
    pub name: &'static str,
    pub statistic: f64,
    pub bound: f64,
    pub slack: f64,
    pub pass: bool,
}

/// The full data-processing report for one chain.
#[derive(Debug, Clone)]
pub struct DpiReport {
    pub inequalities: Vec<DpiInequality>,
    pub pass: bool,
}

fn joint_from_prior_channel(prior: &[f64], channel: &[Vec<f64>]) -> DiscreteJoint {
    let pmf: Vec<Vec<f64>> = prior
        .iter()
        .zip(channel)
        .map(|(&py, row)| row.iter().map(|&c| py * c).collect())
        .collect();
    DiscreteJoint::new(pmf).expect("prior × channel is a valid joint")
}

fn inequality(name: &'static str, statistic: f64, bound: f64) -> DpiInequality {
    let slack = bound - statistic;
    DpiInequality {
        name,
        statistic,
        bound,
        slack,
        pass: slack >= -IDENTITY_TOL,
    }
}

/// Verifies processing inequalities on the chain:
/// `I(Y;Z) ≤ I(Y;X)`, and for two conditionally independent draws passed
/// through the channel, `I(Z1;Z2) ≤ I(Y;Z1) ≤ I(Y;(Z1,Z2))`.
pub fn check_dpi_chain(chain: &MarkovChain3) -> DpiReport {
    let prior = chain.prior();
    let i_yx = mutual_information(&joint_from_prior_channel(prior, &chain.channel_yx));
    let q = chain.composed(); // p(z|y)
    let i_yz = mutual_information(&joint_from_prior_channel(prior, &q));

    let z_size = q[0].len();
    // p(z1, z2) = Σ_y p(y) q(z1|y) q(z2|y)
    let mut z1z2 = vec![vec![0.0; z_size]; z_size];
    for (y, &py) in prior.iter().enumerate() {
        for z1 in 0..z_size {
            for z2 in 0..z_size {
                z1z2[z1][z2] += py * q[y][z1] * q[y][z2];
            }
        }
    }
    let i_z1z2 = mutual_information(&DiscreteJoint::new(z1z2).expect("valid pair joint"));

    // p(y, (z1, z2)) with the pair flattened to one axis.
    let pair_channel: Vec<Vec<f64>> = q
        .iter()
        .map(|qy| {
            let mut row = Vec::with_capacity(z_size * z_size);
            for &a in qy {
                for &b in qy {
                    row.push(a * b);
                }
            }
            row
        })
        .collect();
    let i_y_z1z2 = mutual_information(&joint_from_prior_channel(prior, &pair_channel));

    let inequalities = vec![
        inequality("i_yz_le_i_yx", i_yz, i_yx),
        inequality("i_z1z2_le_i_yz1", i_z1z2, i_yz),
        inequality("i_yz1_le_i_y_z1z2", i_yz, i_y_z1z2),
    ];
    let pass = inequalities.iter().all(|i| i.pass);
    DpiReport { inequalities, pass }
}

/// Decomposition `I = H(Z) − H(Z|Y)` for a joint with `Y` on the first axis.
///
/// The two components diagnose collapse: a degenerate representation drives
/// `H(Z)` (and with it the information) to zero even when `H(Z|Y)` is small.
pub fn entropy_tradeoff(joint: &DiscreteJoint) -> (f64, f64, f64) {
    let h_z = entropy_raw(joint.col_marginal().into_iter());
    let h_y = entropy_raw(joint.row_marginal().into_iter());
    let h_yz = entropy_raw(joint.pmf().iter().flatten().copied());
    let h_z_given_y = h_yz - h_y;
    (h_z, h_z_given_y, h_z - h_z_given_y)
}

/// Random strictly positive pmf.
pub fn random_distribution(rng: &mut impl Rng, alphabet: usize) -> DiscreteDistribution {
    let mut p: Vec<f64> = (0..alphabet).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let s: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= s;
    }
    let resid = 1.0 - p.iter().sum::<f64>();
    p[0] += resid;
    DiscreteDistribution::new(p).expect("generated pmf is valid")
}

/// Random strictly positive joint.
pub fn random_joint(rng: &mut impl Rng, rows: usize, cols: usize) -> DiscreteJoint {
    let mut pmf: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen::<f64>() + 1e-3).collect())
        .collect();
    let s: f64 = pmf.iter().flatten().sum();
    for row in pmf.iter_mut() {
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    let resid = 1.0 - pmf.iter().flatten().sum::<f64>();
    pmf[0][0] += resid;
    DiscreteJoint::new(pmf).expect("generated joint is valid")
}

/// Random chain with alphabets up to the given sizes.
pub fn random_chain(rng: &mut impl Rng, y: usize, x: usize, z: usize) -> MarkovChain3 {
    let prior = random_distribution(rng, y).pmf().to_vec();
    let yx = (0..y).map(|_| random_distribution(rng, x).pmf().to_vec()).collect();
    let xz = (0..x).map(|_| random_distribution(rng, z).pmf().to_vec()).collect();
    MarkovChain3::new(prior, yx, xz).expect("generated chain is valid")
}
