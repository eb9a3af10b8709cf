//! Losses, datasets, and the data-dependent curvature statistics that the
//! training and privacy bounds consume.

use crate::error::{Error, Result};
use crate::math::{self, Constraint};

/// Per-example convex loss ell(u; y) of the linear prediction u.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlmLoss {
    /// ell(u; y) = (u - y)^2; curvature is the constant 2.
    Squared,
    /// ell(u; y) = log(1 + exp(-y u)) with labels y in {-1, +1}.
    Logistic,
}

/// Value and first two derivatives of a loss at (u, y).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: f64,
    pub curvature: f64,
}

impl GlmLoss {
    pub fn eval(&self, u: f64, y: f64) -> Result<LossEval> {
        if let GlmLoss::Logistic = self {
            if y != 1.0 && y != -1.0 {
                return Err(Error::InvalidLabel(y));
            }
        }
        Ok(self.eval_unchecked(u, y))
    }

    /// Same as `eval` but skips label validation; used on pre-validated data
    /// in training loops.
    #[inline]
    pub fn eval_unchecked(&self, u: f64, y: f64) -> LossEval {
        match self {
            GlmLoss::Squared => {
                let r = u - y;
                LossEval {
                    value: r * r,
                    grad: 2.0 * r,
                    curvature: 2.0,
                }
            }
            GlmLoss::Logistic => {
                let t = y * u;
                // log(1 + e^{-t}) and sigma(-t) computed stably on both tails
                let value = if t > 0.0 {
                    (-t).exp().ln_1p()
                } else {
                    -t + t.exp().ln_1p()
                };
                let sig = 1.0 / (1.0 + (-t).exp());
                let one_minus_sig = 1.0 / (1.0 + t.exp());
                LossEval {
                    value,
                    grad: -y * one_minus_sig,
                    curvature: sig * one_minus_sig,
                }
            }
        }
    }

    /// Largest possible curvature d2 ell / du2 anywhere.
    pub fn curvature_max(&self) -> f64 {
        match self {
            GlmLoss::Squared => 2.0,
            GlmLoss::Logistic => 0.25,
        }
    }

    /// Lower bound on the curvature over |u| <= u_max: the strong-convexity
    /// constant the excess-risk bounds plug in.
    pub fn strong_convexity(&self, u_max: f64) -> f64 {
        match self {
            GlmLoss::Squared => 2.0,
            GlmLoss::Logistic => {
                let s = 1.0 / (1.0 + u_max.exp());
                s * (1.0 - s)
            }
        }
    }

    /// Require labels valid for this loss.
    pub fn validate_labels(&self, labels: &[f64]) -> Result<()> {
        if let GlmLoss::Logistic = self {
            for &y in labels {
                if y != 1.0 && y != -1.0 {
                    return Err(Error::InvalidLabel(y));
                }
            }
        }
        Ok(())
    }
}

/// Which leave-one-out column statistic to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaVariant {
    /// (1/n) min_k min_j sum_{i != k} x_i(j)^2 -- the GLM stability statistic.
    Squared,
    /// min_j min_k (1/n) sum_{i != k} x_i(j) -- the unsquared form gated by
    /// the simplex learner.
    Binary,
}

/// Immutable labelled dataset with a declared feature-norm bound.
#[derive(Clone, Debug)]
pub struct Dataset {
    rows: Vec<Vec<f64>>,
    labels: Vec<f64>,
    norm_bound: f64,
}

impl Dataset {
    /// Build a dataset, taking the norm bound B as the largest row norm.
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        let bound = rows.iter().map(|r| math::norm2(r)).fold(0.0f64, f64::max);
        Self::with_norm_bound(rows, labels, bound)
    }

    /// Build a dataset with an explicit norm bound; every row must obey it.
    pub fn with_norm_bound(rows: Vec<Vec<f64>>, labels: Vec<f64>, norm_bound: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("dataset must contain at least one row".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        let p = rows[0].len();
        if p == 0 {
            return Err(Error::Data("feature vectors must be non-empty".into()));
        }
        if !norm_bound.is_finite() || norm_bound < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "norm bound must be finite, got {norm_bound}"
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: row.len(),
                });
            }
            if !math::all_finite(row) {
                return Err(Error::Data(format!("row {i} contains a non-finite entry")));
            }
            if math::norm2(row) > norm_bound * (1.0 + 1e-12) + 1e-12 {
                return Err(Error::Data(format!(
                    "row {i} violates the norm bound {norm_bound}"
                )));
            }
        }
        if !math::all_finite(&labels) {
            return Err(Error::Data("labels contain a non-finite entry".into()));
        }
        Ok(Self {
            rows,
            labels,
            norm_bound,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn p(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    /// Dataset with row `i` replaced; the replacement must obey the declared
    /// norm bound, so the result is a neighbor with the same B.
    pub fn replace_row(&self, i: usize, x: Vec<f64>, y: f64) -> Result<Self> {
        if i >= self.n() {
            return Err(Error::InvalidParameter(format!(
                "row index {i} out of range"
            )));
        }
        let mut rows = self.rows.clone();
        let mut labels = self.labels.clone();
        rows[i] = x;
        labels[i] = y;
        Self::with_norm_bound(rows, labels, self.norm_bound)
    }

    /// Dataset restricted to the given row indices (kept in the given order).
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::Data("subset would be empty".into()));
        }
        let rows = keep.iter().map(|&i| self.rows[i].clone()).collect();
        let labels = keep.iter().map(|&i| self.labels[i]).collect();
        Self::with_norm_bound(rows, labels, self.norm_bound)
    }

    /// Per-coordinate mean of squares, (1/n) sum_i x_i(j)^2.
    pub fn column_mean_squares(&self) -> Vec<f64> {
        let n = self.n() as f64;
        let mut out = vec![0.0; self.p()];
        for row in &self.rows {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v * v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Empirical second-moment matrix S = (1/n) sum_i x_i x_i^T.
    pub fn second_moment(&self) -> Vec<Vec<f64>> {
        let p = self.p();
        let n = self.n() as f64;
        let mut s = vec![vec![0.0; p]; p];
        for row in &self.rows {
            for a in 0..p {
                for b in 0..p {
                    s[a][b] += row[a] * row[b];
                }
            }
        }
        for r in &mut s {
            for v in r.iter_mut() {
                *v /= n;
            }
        }
        s
    }

    /// Delta_1: the smallest per-coordinate mean of squares.
    pub fn delta1(&self) -> f64 {
        self.column_mean_squares()
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Leave-one-out minimum column statistic, scaled by 1/n.
    pub fn lambda(&self, variant: LambdaVariant) -> Result<f64> {
        if self.n() < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                got: self.n(),
            });
        }
        let n = self.n() as f64;
        let mut best = f64::INFINITY;
        for j in 0..self.p() {
            let col: Vec<f64> = self
                .rows
                .iter()
                .map(|r| match variant {
                    LambdaVariant::Squared => r[j] * r[j],
                    LambdaVariant::Binary => r[j],
                })
                .collect();
            let total: f64 = col.iter().sum();
            for &v in &col {
                best = best.min(total - v);
            }
        }
        Ok(best / n)
    }

    /// Lambda_Gamma: remove the `gamma` largest squared entries per
    /// coordinate, take the smallest remaining column sum, divide by n.
    /// The per-coordinate greedy removal is exact for this objective.
    pub fn lambda_gamma(&self, gamma: usize) -> Result<f64> {
        if gamma >= self.n() {
            return Err(Error::InvalidParameter(format!(
                "gamma {gamma} must be smaller than n = {}",
                self.n()
            )));
        }
        let n = self.n() as f64;
        let mut best = f64::INFINITY;
        for j in 0..self.p() {
            let mut col: Vec<f64> = self.rows.iter().map(|r| r[j] * r[j]).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let kept: f64 = col[gamma..].iter().sum();
            best = best.min(kept);
        }
        Ok(best / n)
    }
}

/// Bundle of the curvature statistics referenced by the bounds.
#[derive(Clone, Debug)]
pub struct DataStats {
    pub delta1: f64,
    pub lambda_squared: f64,
    pub lambda_binary: f64,
    /// (gamma, Lambda_gamma) pairs, in the order requested.
    pub lambda_gamma: Vec<(usize, f64)>,
    pub column_mean_squares: Vec<f64>,
    /// Population Delta when the generating distribution is known; callers
    /// fall back to `delta1` as the plug-in when absent.
    pub population_delta: Option<f64>,
}

impl DataStats {
    pub fn compute(d: &Dataset, gammas: &[usize]) -> Result<Self> {
        let lambda_gamma = gammas
            .iter()
            .map(|&g| d.lambda_gamma(g).map(|v| (g, v)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DataStats {
            delta1: d.delta1(),
            lambda_squared: d.lambda(LambdaVariant::Squared)?,
            lambda_binary: d.lambda(LambdaVariant::Binary)?,
            lambda_gamma,
            column_mean_squares: d.column_mean_squares(),
            population_delta: None,
        })
    }

    /// Delta to plug into population-risk bounds: the supplied population
    /// value when known, else Delta_1.
    pub fn delta_plugin(&self) -> f64 {
        self.population_delta.unwrap_or(self.delta1)
    }
}

/// Upper bound on |d ell / du| over the operating range of a constrained
/// model: u ranges over +/- scale * B * radius(C), labels over the observed
/// ones. `scale` is the prediction scaling (1/alpha for dropout training).
pub fn lipschitz_over_constraint(
    loss: GlmLoss,
    d: &Dataset,
    c: &Constraint,
    scale: f64,
) -> Result<f64> {
    c.validate()?;
    if scale.is_nan() || scale <= 0.0 || !scale.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "scale must be positive, got {scale}"
        )));
    }
    let radius = c.radius(d.p());
    if !radius.is_finite() {
        return Err(Error::InvalidParameter(
            "constraint set is unbounded".into(),
        ));
    }
    match loss {
        GlmLoss::Logistic => Ok(1.0),
        GlmLoss::Squared => {
            let u_max = scale * d.norm_bound() * radius;
            let y_max = d.labels.iter().fold(0.0f64, |m, &y| m.max(y.abs()));
            Ok(2.0 * (u_max + y_max))
        }
    }
}
