//! Private dropout learning of linear losses over the simplex, plus an
//! exhaustive privacy auditor for the masked-argmin outcome distribution.
//!
//! The learner gates on a noisy leave-one-out column statistic and, on
//! pass, releases the coordinate minimizing the masked column sums. The
//! auditor enumerates every mask assignment on small instances and reports
//! the exact outcome distributions of a neighboring pair side by side.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::DropoutMask;
use crate::rng::SeededRng;

const STREAM_MASKS: u64 = 4;

/// Rows over the binary domain {0,1}^p.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryDataset {
    rows: Vec<Vec<u8>>,
}

impl BinaryDataset {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data(
                "binary dataset must contain at least one row".into(),
            ));
        }
        let p = rows[0].len();
        if p == 0 {
            return Err(Error::Data("binary rows must be non-empty".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: row.len(),
                });
            }
            if row.iter().any(|&b| b > 1) {
                return Err(Error::Data(format!("row {i} has an entry outside {{0,1}}")));
            }
        }
        Ok(Self { rows })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn p(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.rows[i]
    }

    /// Number of ones in column j.
    pub fn column_count(&self, j: usize) -> usize {
        self.rows.iter().filter(|r| r[j] == 1).count()
    }

    /// Dataset with row `i` replaced.
    pub fn replace_row(&self, i: usize, row: Vec<u8>) -> Result<Self> {
        if i >= self.n() {
            return Err(Error::InvalidParameter(format!(
                "row index {i} out of range"
            )));
        }
        let mut rows = self.rows.clone();
        rows[i] = row;
        Self::new(rows)
    }
}

/// Leave-one-out column means c(j) = min_k (1/n) sum_{i != k} x_i(j) and
/// their minimum Lambda.
pub fn compute_c_lambda(d: &BinaryDataset) -> Result<(Vec<f64>, f64)> {
    if d.n() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: d.n(),
        });
    }
    let n = d.n() as f64;
    let mut c = Vec::with_capacity(d.p());
    for j in 0..d.p() {
        let total = d.column_count(j);
        let min_excluded = (0..d.n())
            .map(|k| total - d.row(k)[j] as usize)
            .min()
            .expect("n >= 2");
        c.push(min_excluded as f64 / n);
    }
    let lambda = c.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((c, lambda))
}

/// Index of the smallest masked column sum sum_i x_i(j) b_i(j); ties break
/// toward the lowest index.
pub fn dropout_argmin(d: &BinaryDataset, masks: &[DropoutMask]) -> Result<usize> {
    if masks.len() != d.n() {
        return Err(Error::DimensionMismatch {
            expected: d.n(),
            got: masks.len(),
        });
    }
    for m in masks {
        if m.len() != d.p() {
            return Err(Error::DimensionMismatch {
                expected: d.p(),
                got: m.len(),
            });
        }
    }
    let mut best = 0usize;
    let mut best_sum = usize::MAX;
    for j in 0..d.p() {
        let sum: usize = d
            .rows
            .iter()
            .zip(masks)
            .map(|(row, m)| (row[j] & m.bits()[j]) as usize)
            .sum();
        if sum < best_sum {
            best = j;
            best_sum = sum;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SimplexOutcome {
    /// The released vertex e_j of the simplex, as its coordinate index.
    Vertex(usize),
    Failure,
}

#[derive(Clone, Debug)]
pub struct SimplexPrivateResult {
    pub outcome: SimplexOutcome,
    pub lambda: f64,
    pub lambda_hat: f64,
    pub threshold: f64,
    /// End-to-end privacy cost of gate plus release: (2 eps, delta).
    pub total_eps: f64,
    pub total_delta: f64,
}

fn validate_budget(eps: f64, delta: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    Ok(())
}

/// Gate on Lambda_hat = Lambda + Lap(1/(n eps)); on pass draw one fair mask
/// per row and release the masked argmin coordinate, otherwise fail.
pub fn private_simplex_learn(
    d: &BinaryDataset,
    eps: f64,
    delta: f64,
    rng: &mut SeededRng,
) -> Result<SimplexPrivateResult> {
    validate_budget(eps, delta)?;
    if d.n() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: d.n(),
        });
    }
    let noise = rng.laplace(1.0 / (d.n() as f64 * eps))?;
    private_simplex_learn_with_noise(d, eps, delta, noise, rng)
}

/// Same as [`private_simplex_learn`] but with the Laplace draw pinned; used
/// by tests and audits that need a deterministic gate.
pub fn private_simplex_learn_with_noise(
    d: &BinaryDataset,
    eps: f64,
    delta: f64,
    noise: f64,
    rng: &mut SeededRng,
) -> Result<SimplexPrivateResult> {
    validate_budget(eps, delta)?;
    let (_, lambda) = compute_c_lambda(d)?;
    let lambda_hat = lambda + noise;
    let threshold = 2.0 * (1.0 / delta).ln() / (d.n() as f64 * eps);
    let outcome = if lambda_hat > threshold {
        let masks: Vec<DropoutMask> = (0..d.n())
            .map(|_| DropoutMask::sample(d.p(), 0.5, rng))
            .collect::<Result<_>>()?;
        SimplexOutcome::Vertex(dropout_argmin(d, &masks)?)
    } else {
        SimplexOutcome::Failure
    };
    Ok(SimplexPrivateResult {
        outcome,
        lambda,
        lambda_hat,
        threshold,
        total_eps: 2.0 * eps,
        total_delta: delta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditRow {
    pub outcome: usize,
    pub prob_d: f64,
    pub prob_d_prime: f64,
    /// max(p/p', p'/p); 1 when both are zero, infinite when exactly one is.
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct AuditTable {
    pub rows: Vec<AuditRow>,
    pub max_ratio: f64,
}

impl AuditTable {
    fn from_probs(pd: &[f64], pdp: &[f64]) -> Self {
        let rows: Vec<AuditRow> = pd
            .iter()
            .zip(pdp)
            .enumerate()
            .map(|(j, (&a, &b))| AuditRow {
                outcome: j,
                prob_d: a,
                prob_d_prime: b,
                ratio: prob_ratio(a, b),
            })
            .collect();
        let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0f64, f64::max);
        AuditTable { rows, max_ratio }
    }

    /// CSV with header `outcome,prob_D,prob_Dprime,ratio`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("outcome,prob_D,prob_Dprime,ratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.outcome, r.prob_d, r.prob_d_prime, r.ratio
            ));
        }
        out
    }
}

fn prob_ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        1.0
    } else if a == 0.0 || b == 0.0 {
        f64::INFINITY
    } else {
        (a / b).max(b / a)
    }
}

fn check_neighbors(d: &BinaryDataset, d_prime: &BinaryDataset) -> Result<()> {
    if d.n() != d_prime.n() || d.p() != d_prime.p() {
        return Err(Error::Data(
            "neighboring datasets must share n and p".into(),
        ));
    }
    let differing = d
        .rows()
        .iter()
        .zip(d_prime.rows())
        .filter(|(a, b)| a != b)
        .count();
    if differing > 1 {
        return Err(Error::Data(format!(
            "datasets differ in {differing} rows; neighbors differ in at most one"
        )));
    }
    Ok(())
}

/// Exact outcome distribution of the masked argmin for both datasets, by
/// enumerating all 2^(n*p) mask assignments. Requires n * p <= 20.
pub fn audit_argmin_distribution(d: &BinaryDataset, d_prime: &BinaryDataset) -> Result<AuditTable> {
    check_neighbors(d, d_prime)?;
    let (n, p) = (d.n(), d.p());
    let bits = n * p;
    if bits > 20 {
        return Err(Error::TooLarge(format!(
            "exhaustive audit enumerates 2^(n*p); n*p = {bits} exceeds 20"
        )));
    }
    let total = 1u64 << bits;
    // enumerate in blocks; each block is pure and the counts merge by
    // exact integer addition
    let block = 1u64 << bits.min(14);
    let ranges: Vec<(u64, u64)> = (0..total)
        .step_by(block as usize)
        .map(|start| (start, (start + block).min(total)))
        .collect();
    let (count_d, count_dp) = ranges
        .par_iter()
        .map(|&(start, end)| {
            let mut count_d = vec![0u64; p];
            let mut count_dp = vec![0u64; p];
            let mut sums_d = vec![0usize; p];
            let mut sums_dp = vec![0usize; p];
            for assignment in start..end {
                sums_d.iter_mut().for_each(|s| *s = 0);
                sums_dp.iter_mut().for_each(|s| *s = 0);
                for i in 0..n {
                    for j in 0..p {
                        if assignment >> (i * p + j) & 1 == 1 {
                            sums_d[j] += d.row(i)[j] as usize;
                            sums_dp[j] += d_prime.row(i)[j] as usize;
                        }
                    }
                }
                count_d[argmin(&sums_d)] += 1;
                count_dp[argmin(&sums_dp)] += 1;
            }
            (count_d, count_dp)
        })
        .reduce(
            || (vec![0u64; p], vec![0u64; p]),
            |(mut ad, mut adp), (bd, bdp)| {
                ad.iter_mut().zip(&bd).for_each(|(a, b)| *a += b);
                adp.iter_mut().zip(&bdp).for_each(|(a, b)| *a += b);
                (ad, adp)
            },
        );
    // total is a power of two, so each division below is exact
    let pd: Vec<f64> = count_d.iter().map(|&c| c as f64 / total as f64).collect();
    let pdp: Vec<f64> = count_dp.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(AuditTable::from_probs(&pd, &pdp))
}

fn argmin(sums: &[usize]) -> usize {
    let mut best = 0;
    for (j, &s) in sums.iter().enumerate().skip(1) {
        if s < sums[best] {
            best = j;
        }
    }
    best
}

/// Exact outcome distribution computed from the independent binomial laws
/// of the masked column sums; no instance-size limit.
///
/// Column j's masked sum is Binomial(nu_j, 1/2) with nu_j the count of ones
/// in that column, independent across columns because the mask bits are
/// disjoint.
pub fn audit_argmin_analytic(d: &BinaryDataset, d_prime: &BinaryDataset) -> Result<AuditTable> {
    check_neighbors(d, d_prime)?;
    Ok(AuditTable::from_probs(
        &argmin_distribution(d),
        &argmin_distribution(d_prime),
    ))
}

fn argmin_distribution(d: &BinaryDataset) -> Vec<f64> {
    let p = d.p();
    let counts: Vec<usize> = (0..p).map(|j| d.column_count(j)).collect();
    let pmfs: Vec<Vec<f64>> = counts.iter().map(|&nu| binomial_pmf_half(nu)).collect();
    // survival[j][v] = Pr[f_j >= v]
    let survival: Vec<Vec<f64>> = pmfs
        .iter()
        .map(|pmf| {
            let mut s = vec![0.0; pmf.len() + 1];
            for v in (0..pmf.len()).rev() {
                s[v] = s[v + 1] + pmf[v];
            }
            s
        })
        .collect();
    let mut out = vec![0.0; p];
    for j in 0..p {
        for v in 0..=counts[j] {
            let mut term = pmfs[j][v];
            for jp in 0..p {
                if jp == j {
                    continue;
                }
                let surv = &survival[jp];
                let at_least = |t: usize| if t < surv.len() { surv[t] } else { 0.0 };
                term *= if jp < j { at_least(v + 1) } else { at_least(v) };
            }
            out[j] += term;
        }
    }
    out
}

fn binomial_pmf_half(nu: usize) -> Vec<f64> {
    let scale = 0.5f64.powi(nu as i32);
    (0..=nu)
        .map(|k| binom_u128(nu as u64, k as u64) as f64 * scale)
        .collect()
}

/// Sampled outcome distribution with a 95% CI half-width per outcome, for
/// instances too large to enumerate.
#[derive(Clone, Debug)]
pub struct SampledAuditTable {
    pub table: AuditTable,
    pub trials: usize,
    /// 95% normal-approximation half-widths for (prob_D, prob_Dprime).
    pub ci_halfwidth: Vec<(f64, f64)>,
}

pub fn audit_argmin_sampled(
    d: &BinaryDataset,
    d_prime: &BinaryDataset,
    trials: usize,
    seed: u64,
) -> Result<SampledAuditTable> {
    check_neighbors(d, d_prime)?;
    if trials == 0 {
        return Err(Error::InvalidParameter(
            "trial count must be at least 1".into(),
        ));
    }
    let (n, p) = (d.n(), d.p());
    let mut rng = SeededRng::new(seed, STREAM_MASKS);
    let mut count_d = vec![0u64; p];
    let mut count_dp = vec![0u64; p];
    let mut sums_d = vec![0usize; p];
    let mut sums_dp = vec![0usize; p];
    for _ in 0..trials {
        sums_d.iter_mut().for_each(|s| *s = 0);
        sums_dp.iter_mut().for_each(|s| *s = 0);
        for i in 0..n {
            for j in 0..p {
                if rng.bit(0.5) == 1 {
                    sums_d[j] += d.row(i)[j] as usize;
                    sums_dp[j] += d_prime.row(i)[j] as usize;
                }
            }
        }
        count_d[argmin(&sums_d)] += 1;
        count_dp[argmin(&sums_dp)] += 1;
    }
    let t = trials as f64;
    let pd: Vec<f64> = count_d.iter().map(|&c| c as f64 / t).collect();
    let pdp: Vec<f64> = count_dp.iter().map(|&c| c as f64 / t).collect();
    let ci = pd
        .iter()
        .zip(&pdp)
        .map(|(&a, &b)| {
            let hw = |q: f64| 1.96 * (q * (1.0 - q) / t).sqrt();
            (hw(a), hw(b))
        })
        .collect();
    Ok(SampledAuditTable {
        table: AuditTable::from_probs(&pd, &pdp),
        trials,
        ci_halfwidth: ci,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinomialRatioRow {
    pub k: u64,
    /// Largest realized point-mass ratio between Bin(nu, 1/2) and
    /// Bin(nu + 1, 1/2) at value nu/2 + k, in either direction.
    pub ratio: f64,
    /// (nu/2 + k + 1) / (nu/2 - k)
    pub bound: f64,
    pub within_bound: bool,
}

/// Exact point-mass ratio check for a column with nu ones against a
/// neighbor with one more: both directions must obey the stated bound for
/// every k < nu/2. All comparisons are exact integer cross-multiplications.
pub fn binomial_ratio_check(nu: u64) -> Result<Vec<BinomialRatioRow>> {
    if nu < 2 || !nu.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "nu must be even and at least 2, got {nu}"
        )));
    }
    let half = nu / 2;
    let mut rows = Vec::with_capacity(half as usize);
    for k in 0..half {
        let t = half + k;
        let c_nu = binom_u128(nu, t);
        let c_nu1 = binom_u128(nu + 1, t);
        // Pr[Bin(nu,1/2)   = t] = c_nu  / 2^nu
        // Pr[Bin(nu+1,1/2) = t] = c_nu1 / 2^(nu+1)
        let up = c_nu1 as f64 / (2.0 * c_nu as f64);
        let down = 2.0 * c_nu as f64 / c_nu1 as f64;
        let bound_num = half + k + 1;
        let bound_den = half - k;
        let up_ok = c_nu1 * bound_den as u128 <= 2 * c_nu * bound_num as u128;
        let down_ok = 2 * c_nu * bound_den as u128 <= c_nu1 * bound_num as u128;
        rows.push(BinomialRatioRow {
            k,
            ratio: up.max(down),
            bound: bound_num as f64 / bound_den as f64,
            within_bound: up_ok && down_ok,
        });
    }
    Ok(rows)
}

pub(crate) fn binom_u128(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}
