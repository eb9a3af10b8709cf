//! Dropout gradient descent for GLMs, dropout-risk evaluators, and the
//! fixed-mask ERM solver.
//!
//! The prediction convention throughout is u = (1/alpha) <theta, b*x>: the
//! 1/alpha scaling makes the masked prediction unbiased for every keep-rate
//! and reduces to the factor-2 convention at alpha = 1/2.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::glm::{Dataset, GlmLoss};
use crate::math::{Constraint, GaussHermite};
use crate::rng::SeededRng;

const STREAM_TRAIN: u64 = 1;
const STREAM_RISK_MC: u64 = 2;

/// Step-size rule, indexed by the 1-based step number.
#[derive(Clone, Debug, PartialEq)]
pub enum LearningRate {
    /// eta_t = 1 / (Delta_1 * t); requires Delta_1 > 0.
    InverseDelta1T,
    /// eta_t = scale / t.
    InverseT { scale: f64 },
    /// Constant step.
    Fixed(f64),
}

impl LearningRate {
    fn at(&self, t: usize, delta1: f64) -> f64 {
        match *self {
            LearningRate::InverseDelta1T => 1.0 / (delta1 * t as f64),
            LearningRate::InverseT { scale } => scale / t as f64,
            LearningRate::Fixed(eta) => eta,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LearningRate::InverseDelta1T => true,
            LearningRate::InverseT { scale } => scale > 0.0 && scale.is_finite(),
            LearningRate::Fixed(eta) => eta > 0.0 && eta.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid learning rate {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug)]
pub struct SgdConfig {
    pub iterations: usize,
    /// Keep-rate alpha in (0, 1].
    pub rate: f64,
    pub constraint: Constraint,
    pub learning_rate: LearningRate,
    /// Starting model; zeros when absent. Projected onto the constraint set
    /// before the first step.
    pub init: Option<Vec<f64>>,
    pub seed: u64,
    /// Record (step, dropout risk) every this many steps; 0 disables.
    pub log_every: usize,
}

impl SgdConfig {
    pub fn new(iterations: usize, rate: f64, constraint: Constraint, seed: u64) -> Self {
        SgdConfig {
            iterations,
            rate,
            constraint,
            learning_rate: LearningRate::InverseDelta1T,
            init: None,
            seed,
            log_every: 0,
        }
    }

    fn validate(&self, d: &Dataset) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate must be in (0, 1], got {}",
                self.rate
            )));
        }
        self.constraint.validate()?;
        self.learning_rate.validate()?;
        if let Some(init) = &self.init {
            if init.len() != d.p() {
                return Err(Error::DimensionMismatch {
                    expected: d.p(),
                    got: init.len(),
                });
            }
            if !crate::math::all_finite(init) {
                return Err(Error::InvalidParameter(
                    "initial model has non-finite entries".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub risk: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub theta: Vec<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub config: SgdConfig,
}

/// One pass of dropout stochastic gradient descent.
///
/// Each step draws a uniformly random training row and a fresh mask at the
/// configured keep-rate, forms the unbiased prediction u = (1/alpha)
/// <theta, b*x>, takes the step theta <- theta - eta_t (1/alpha) ell'(u, y)
/// (b*x), and projects back onto the constraint set.
pub fn dropout_sgd_train(d: &Dataset, loss: GlmLoss, cfg: &SgdConfig) -> Result<TrainedModel> {
    cfg.validate(d)?;
    loss.validate_labels(d.labels())?;
    let delta1 = d.delta1();
    if matches!(cfg.learning_rate, LearningRate::InverseDelta1T) && delta1 <= 0.0 {
        return Err(Error::DegenerateData(
            "Delta_1 = 0: the 1/(Delta_1 t) step rule is undefined on data with an empty column"
                .into(),
        ));
    }

    let (n, p) = (d.n(), d.p());
    let mut theta = cfg
        .constraint
        .project(&cfg.init.clone().unwrap_or_else(|| vec![0.0; p]));
    let mut rng = SeededRng::new(cfg.seed, STREAM_TRAIN);
    let mut bits = vec![0u8; p];
    let mut trajectory = Vec::new();
    let inv_rate = 1.0 / cfg.rate;

    for t in 1..=cfg.iterations {
        let i = rng.index(n);
        let x = d.row(i);
        let mut u = 0.0;
        for j in 0..p {
            let b = rng.bit(cfg.rate);
            bits[j] = b;
            u += theta[j] * x[j] * b as f64;
        }
        u *= inv_rate;
        let g = loss.eval_unchecked(u, d.label(i)).grad * inv_rate;
        let eta = cfg.learning_rate.at(t, delta1);
        for j in 0..p {
            theta[j] -= eta * g * x[j] * bits[j] as f64;
        }
        theta = cfg.constraint.project(&theta);
        if cfg.log_every > 0 && t % cfg.log_every == 0 {
            trajectory.push(TrajectoryPoint {
                step: t,
                risk: deterministic_dropout_risk(&theta, d, loss, cfg.rate)?,
            });
        }
    }

    Ok(TrainedModel {
        theta,
        trajectory,
        config: cfg.clone(),
    })
}

/// Monte Carlo dropout risk: averages the masked loss over `samples` full
/// passes, drawing a fresh mask per row per pass.
pub fn dropout_risk_mc(
    theta: &[f64],
    d: &Dataset,
    loss: GlmLoss,
    alpha: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidParameter(
            "sample count must be at least 1".into(),
        ));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "rate must be in (0, 1], got {alpha}"
        )));
    }
    if theta.len() != d.p() {
        return Err(Error::DimensionMismatch {
            expected: d.p(),
            got: theta.len(),
        });
    }
    loss.validate_labels(d.labels())?;
    let mut rng = SeededRng::new(seed, STREAM_RISK_MC);
    let inv_rate = 1.0 / alpha;
    let mut acc = 0.0;
    for _ in 0..samples {
        for i in 0..d.n() {
            let x = d.row(i);
            let mut u = 0.0;
            for j in 0..d.p() {
                if rng.bit(alpha) == 1 {
                    u += theta[j] * x[j];
                }
            }
            acc += loss.eval_unchecked(u * inv_rate, d.label(i)).value;
        }
    }
    Ok(acc / (samples as f64 * d.n() as f64))
}

/// Exact expected dropout risk of the squared loss at keep-rate alpha:
/// (1/n) sum_i (y_i - <x_i, theta>)^2 + ((1-alpha)/alpha) sum_j S_jj theta_j^2
/// with S the empirical second-moment matrix.
pub fn ls_dropout_risk(theta: &[f64], d: &Dataset, alpha: f64) -> f64 {
    debug_assert_eq!(theta.len(), d.p());
    let n = d.n() as f64;
    let mut fit = 0.0;
    for i in 0..d.n() {
        let r = d.label(i) - crate::math::dot(d.row(i), theta);
        fit += r * r;
    }
    let kappa = (1.0 - alpha) / alpha;
    let reg: f64 = d
        .column_mean_squares()
        .iter()
        .zip(theta)
        .map(|(&s, &t)| s * t * t)
        .sum();
    fit / n + kappa * reg
}

/// The uniform-mask (alpha = 1/2) closed form: empirical squared risk plus
/// the diagonal second-moment penalty.
pub fn dropout_risk_exact_ls(theta: &[f64], d: &Dataset) -> f64 {
    ls_dropout_risk(theta, d, 0.5)
}

fn gh20() -> &'static GaussHermite {
    static GH: OnceLock<GaussHermite> = OnceLock::new();
    GH.get_or_init(|| GaussHermite::new(20))
}

/// Deterministic (sampling-free) dropout risk at keep-rate alpha.
///
/// Squared loss: the exact closed form. Logistic loss: the masked margin is
/// approximated by a normal with matched mean <theta, x> and variance
/// ((1-alpha)/alpha) sum_j x_j^2 theta_j^2, then integrated by a 20-node
/// Gauss-Hermite rule.
pub fn deterministic_dropout_risk(
    theta: &[f64],
    d: &Dataset,
    loss: GlmLoss,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "rate must be in (0, 1], got {alpha}"
        )));
    }
    if theta.len() != d.p() {
        return Err(Error::DimensionMismatch {
            expected: d.p(),
            got: theta.len(),
        });
    }
    match loss {
        GlmLoss::Squared => Ok(ls_dropout_risk(theta, d, alpha)),
        GlmLoss::Logistic => {
            loss.validate_labels(d.labels())?;
            let gh = gh20();
            let kappa = (1.0 - alpha) / alpha;
            let mut acc = 0.0;
            for i in 0..d.n() {
                let x = d.row(i);
                let mean = crate::math::dot(x, theta);
                let var: f64 = kappa * x.iter().zip(theta).map(|(v, t)| v * v * t * t).sum::<f64>();
                acc += if var > 0.0 {
                    let sd = var.sqrt();
                    let y = d.label(i);
                    gh.expect(mean, sd, |u| loss.eval_unchecked(u, y).value)
                } else {
                    loss.eval_unchecked(mean, d.label(i)).value
                };
            }
            Ok(acc / d.n() as f64)
        }
    }
}

/// Smallest eigenvalue of the exact expected dropout-risk Hessian for the
/// squared loss: 2 [ S + ((1-alpha)/alpha) diag(S) ].
pub fn expected_hessian_min_eig_ls(d: &Dataset, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "rate must be in (0, 1], got {alpha}"
        )));
    }
    let s = d.second_moment();
    let p = d.p();
    let kappa = (1.0 - alpha) / alpha;
    let h = DMatrix::from_fn(p, p, |a, b| {
        let diag = if a == b { kappa * s[a][a] } else { 0.0 };
        2.0 * (s[a][b] + diag)
    });
    Ok(h.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min))
}

pub(crate) struct GdOptions {
    pub step: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Fail with a convergence error when the iteration cap is hit.
    pub strict: bool,
}

/// Projected gradient descent with monotone step halving. Stops when the
/// gradient-mapping norm falls below `tol`.
pub(crate) fn projected_gd(
    mut obj_grad: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    init: Vec<f64>,
    constraint: Option<&Constraint>,
    opts: &GdOptions,
) -> Result<Vec<f64>> {
    let project = |v: Vec<f64>| match constraint {
        Some(c) => c.project(&v),
        None => v,
    };
    let mut theta = project(init);
    let (mut value, mut grad) = obj_grad(&theta);
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iters {
        let mut s = opts.step;
        loop {
            let raw: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - s * g).collect();
            let cand = project(raw);
            residual = cand
                .iter()
                .zip(&theta)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / s;
            if residual <= opts.tol {
                return Ok(cand);
            }
            let (cand_value, cand_grad) = obj_grad(&cand);
            if cand_value <= value + 1e-12 * value.abs().max(1.0) || s <= opts.step * 1e-12 {
                theta = cand;
                value = cand_value;
                grad = cand_grad;
                break;
            }
            s *= 0.5;
        }
    }
    if opts.strict {
        Err(Error::NoConvergence {
            iterations: opts.max_iters,
            residual,
        })
    } else {
        Ok(theta)
    }
}

/// Solve the fixed-mask dropout ERM
/// min_C (1/n) sum_i ell((1/rate_i) <x_i * b_i, theta>; y_i)
/// by projected full-gradient descent until the gradient-mapping norm is at
/// most `tol`.
pub fn erm_dropout_solve(
    d: &Dataset,
    masks: &[crate::math::DropoutMask],
    loss: GlmLoss,
    constraint: &Constraint,
    tol: f64,
) -> Result<Vec<f64>> {
    if masks.len() != d.n() {
        return Err(Error::DimensionMismatch {
            expected: d.n(),
            got: masks.len(),
        });
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    constraint.validate()?;
    loss.validate_labels(d.labels())?;
    let p = d.p();
    let mut scaled_rows = Vec::with_capacity(d.n());
    for (i, mask) in masks.iter().enumerate() {
        if mask.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: mask.len(),
            });
        }
        let inv = 1.0 / mask.rate();
        let z: Vec<f64> = d
            .row(i)
            .iter()
            .zip(mask.bits())
            .map(|(v, &b)| v * b as f64 * inv)
            .collect();
        scaled_rows.push(z);
    }

    let n = d.n() as f64;
    let mean_sq: f64 = scaled_rows
        .iter()
        .map(|z| crate::math::norm2_sq(z))
        .sum::<f64>()
        / n;
    let smoothness = loss.curvature_max() * mean_sq;
    let init = vec![0.0; p];
    if smoothness == 0.0 {
        // every mask is all-zero: the objective ignores theta
        return Ok(constraint.project(&init));
    }

    let labels = d.labels().to_vec();
    let obj_grad = move |theta: &[f64]| {
        let mut value = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for (z, &y) in scaled_rows.iter().zip(&labels) {
            let u = crate::math::dot(z, theta);
            let e = loss.eval_unchecked(u, y);
            value += e.value;
            for (g, &zj) in grad.iter_mut().zip(z) {
                *g += e.grad * zj;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        (value / n, grad)
    };
    projected_gd(
        obj_grad,
        init,
        Some(constraint),
        &GdOptions {
            step: 1.0 / smoothness,
            tol,
            max_iters: 500_000,
            strict: true,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::DropoutMask;
    use crate::rng::derive_seed;
    use crate::synth;

    fn tiny(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Dataset {
        Dataset::new(rows, labels).unwrap()
    }

    #[test]
    fn zero_iterations_returns_projected_init() {
        let d = tiny(vec![vec![1.0]], vec![0.0]);
        let mut cfg = SgdConfig::new(0, 1.0, Constraint::L2Ball(1.0), 0);
        cfg.init = Some(vec![0.25]);
        let m = dropout_sgd_train(&d, GlmLoss::Squared, &cfg).unwrap();
        assert_eq!(m.theta, vec![0.25]);
    }

    #[test]
    fn single_step_matches_hand_execution() {
        // p=1, x=1, y=0, squared loss, alpha=1, theta0=1, Delta_1=1:
        // eta_1 = 1, update 1 - 1*2*1 = -1; stays at -1 inside [-1, 1] ball
        let d = tiny(vec![vec![1.0]], vec![0.0]);
        let mut cfg = SgdConfig::new(1, 1.0, Constraint::L2Ball(1.0), 3);
        cfg.init = Some(vec![1.0]);
        let m = dropout_sgd_train(&d, GlmLoss::Squared, &cfg).unwrap();
        assert!((m.theta[0] + 1.0).abs() < 1e-15, "theta {:?}", m.theta);
    }

    #[test]
    fn degenerate_delta1_is_rejected_under_default_rate() {
        let d = tiny(vec![vec![1.0, 0.0], vec![2.0, 0.0]], vec![0.0, 0.0]);
        let cfg = SgdConfig::new(10, 0.5, Constraint::L2Ball(1.0), 0);
        assert!(matches!(
            dropout_sgd_train(&d, GlmLoss::Squared, &cfg),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn mean_single_step_update_matches_exact_risk_gradient() {
        // The average stochastic update direction is the gradient of the
        // exact dropout risk: checked at a fixed theta over 10^4 steps.
        let d = synth::gaussian_regression(12, 3, 0.2, 5).unwrap();
        let theta0 = vec![0.4, -0.2, 0.1];
        let alpha = 0.5;
        let trials = 10_000;
        let mut mean_update = [0.0; 3];
        for t in 0..trials {
            let mut cfg = SgdConfig::new(1, alpha, Constraint::L2Ball(1e6), derive_seed(40, t));
            cfg.init = Some(theta0.clone());
            cfg.learning_rate = LearningRate::Fixed(1.0);
            let m = dropout_sgd_train(&d, GlmLoss::Squared, &cfg).unwrap();
            for j in 0..3 {
                mean_update[j] += (theta0[j] - m.theta[j]) / trials as f64;
            }
        }
        // analytic gradient of ls_dropout_risk
        let mut grad = [0.0; 3];
        let n = d.n() as f64;
        for i in 0..d.n() {
            let r = crate::math::dot(d.row(i), &theta0) - d.label(i);
            for j in 0..3 {
                grad[j] += 2.0 * r * d.row(i)[j] / n;
            }
        }
        let kappa = (1.0 - alpha) / alpha;
        for (j, s) in d.column_mean_squares().iter().enumerate() {
            grad[j] += 2.0 * kappa * s * theta0[j];
        }
        // per-coordinate tolerance: 2 standard errors estimated loosely
        for j in 0..3 {
            let se = 4.0 / (trials as f64).sqrt();
            assert!(
                (mean_update[j] - grad[j]).abs() <= 2.0 * se,
                "coordinate {j}: mean update {} vs gradient {}",
                mean_update[j],
                grad[j]
            );
        }
    }

    #[test]
    fn risk_mc_rate_one_is_empirical_risk() {
        let d = synth::gaussian_regression(8, 3, 0.3, 9).unwrap();
        let theta = vec![0.2, 0.1, -0.4];
        let mc = dropout_risk_mc(&theta, &d, GlmLoss::Squared, 1.0, 7, 1).unwrap();
        let plain: f64 = (0..d.n())
            .map(|i| {
                let u = crate::math::dot(d.row(i), &theta);
                (u - d.label(i)) * (u - d.label(i))
            })
            .sum::<f64>()
            / d.n() as f64;
        assert!((mc - plain).abs() < 1e-12);
    }

    #[test]
    fn risk_mc_single_row_converges_to_two() {
        // one row (x=1, y=0), theta=1, alpha=0.5: losses {0, 4}, mean 2
        let d = tiny(vec![vec![1.0]], vec![0.0]);
        let mc = dropout_risk_mc(&[1.0], &d, GlmLoss::Squared, 0.5, 200_000, 2).unwrap();
        assert!((mc - 2.0).abs() < 0.03, "mc {mc}");
        assert!((dropout_risk_exact_ls(&[1.0], &d) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn risk_at_zero_is_mask_independent() {
        let d = synth::gaussian_regression(6, 2, 0.1, 3).unwrap();
        let base: f64 = (0..d.n()).map(|i| d.label(i) * d.label(i)).sum::<f64>() / d.n() as f64;
        let mc = dropout_risk_mc(&[0.0, 0.0], &d, GlmLoss::Squared, 0.5, 3, 4).unwrap();
        assert!((mc - base).abs() < 1e-12);
        assert!((dropout_risk_exact_ls(&[0.0, 0.0], &d) - base).abs() < 1e-12);
    }

    /// Exhaustive-mask oracle for the squared dropout risk at alpha = 1/2.
    fn enumerate_ls_risk(theta: &[f64], d: &Dataset) -> f64 {
        let p = d.p();
        assert!(p <= 12);
        let masks = 1usize << p;
        let mut total = 0.0;
        for i in 0..d.n() {
            let x = d.row(i);
            let mut row_acc = 0.0;
            for m in 0..masks {
                let mut u = 0.0;
                for j in 0..p {
                    if m & (1 << j) != 0 {
                        u += theta[j] * x[j];
                    }
                }
                let r = 2.0 * u - d.label(i);
                row_acc += r * r;
            }
            total += row_acc / masks as f64;
        }
        total / d.n() as f64
    }

    #[test]
    fn exact_ls_risk_matches_mask_enumeration() {
        let d = synth::gaussian_regression(5, 10, 0.2, 21).unwrap();
        let mut rng = SeededRng::new(77, 0);
        for _ in 0..5 {
            let theta: Vec<f64> = (0..10).map(|_| rng.standard_normal() * 0.5).collect();
            let exact = dropout_risk_exact_ls(&theta, &d);
            let enumerated = enumerate_ls_risk(&theta, &d);
            assert!(
                (exact - enumerated).abs() <= 1e-12 * enumerated.abs().max(1.0),
                "{exact} vs {enumerated}"
            );
        }
    }

    #[test]
    fn general_rate_ls_risk_matches_weighted_enumeration() {
        // oracle: enumerate all masks with Bernoulli(alpha) weights
        let d = synth::gaussian_regression(4, 6, 0.2, 25).unwrap();
        let mut rng = SeededRng::new(26, 0);
        let theta: Vec<f64> = (0..6).map(|_| rng.standard_normal() * 0.5).collect();
        for alpha in [0.3, 0.5, 0.8, 1.0] {
            let mut oracle = 0.0;
            for i in 0..d.n() {
                let x = d.row(i);
                let mut row = 0.0;
                for mask in 0..(1usize << 6) {
                    let mut u = 0.0;
                    let mut weight = 1.0;
                    for j in 0..6 {
                        if mask >> j & 1 == 1 {
                            u += theta[j] * x[j];
                            weight *= alpha;
                        } else {
                            weight *= 1.0 - alpha;
                        }
                    }
                    let r = u / alpha - d.label(i);
                    row += weight * r * r;
                }
                oracle += row;
            }
            oracle /= d.n() as f64;
            let exact = ls_dropout_risk(&theta, &d, alpha);
            assert!(
                (exact - oracle).abs() <= 1e-12 * oracle.abs().max(1.0),
                "alpha {alpha}: {exact} vs {oracle}"
            );
        }
    }

    #[test]
    fn exact_ls_risk_close_to_mc() {
        let d = synth::gaussian_regression(20, 5, 0.3, 31).unwrap();
        let theta = vec![0.3, -0.1, 0.2, 0.05, -0.25];
        let exact = dropout_risk_exact_ls(&theta, &d);
        let mc = dropout_risk_mc(&theta, &d, GlmLoss::Squared, 0.5, 100_000, 8).unwrap();
        assert!(
            (exact - mc).abs() <= 0.015 * exact,
            "exact {exact} vs mc {mc}"
        );
    }

    #[test]
    fn erm_matches_normal_equations_oracle() {
        // all-ones masks at rate 1/2 double the prediction, so the minimizer
        // is the least-squares solution of 2 X theta = y
        let d = tiny(
            vec![
                vec![1.0, 0.3, -0.2],
                vec![0.2, -1.0, 0.5],
                vec![-0.4, 0.8, 1.0],
                vec![0.7, 0.1, 0.4],
                vec![-0.3, 0.5, -0.9],
            ],
            vec![1.0, -0.5, 0.25, 0.8, -1.1],
        );
        let masks: Vec<DropoutMask> = (0..5).map(|_| DropoutMask::ones(3, 0.5).unwrap()).collect();
        let got = erm_dropout_solve(
            &d,
            &masks,
            GlmLoss::Squared,
            &Constraint::L2Ball(100.0),
            1e-10,
        )
        .unwrap();

        let x = DMatrix::from_fn(5, 3, |i, j| d.row(i)[j]);
        let rhs = nalgebra::DVector::from_fn(5, |i, _| d.label(i) / 2.0);
        let normal = x.transpose() * &x;
        let oracle = normal.lu().solve(&(x.transpose() * rhs)).unwrap();
        for j in 0..3 {
            assert!(
                (got[j] - oracle[j]).abs() < 1e-6,
                "coordinate {j}: {} vs {}",
                got[j],
                oracle[j]
            );
        }
    }

    #[test]
    fn erm_all_zero_masks_returns_projected_init() {
        let d = tiny(vec![vec![1.0, 2.0], vec![0.5, -1.0]], vec![1.0, 2.0]);
        let masks: Vec<DropoutMask> = (0..2)
            .map(|_| DropoutMask::new(vec![0, 0], 0.5).unwrap())
            .collect();
        let got =
            erm_dropout_solve(&d, &masks, GlmLoss::Squared, &Constraint::Simplex, 1e-8).unwrap();
        // projection of the zero vector onto the simplex is uniform
        assert!((got[0] - 0.5).abs() < 1e-12 && (got[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn erm_reports_non_convergence_with_residual() {
        // condition number ~1e8: the slow mode cannot reach tolerance
        // within the iteration cap
        let d = tiny(vec![vec![1.0, 0.0], vec![0.0, 1e-4]], vec![0.3, 0.7]);
        let masks: Vec<DropoutMask> = (0..2).map(|_| DropoutMask::ones(2, 0.5).unwrap()).collect();
        match erm_dropout_solve(
            &d,
            &masks,
            GlmLoss::Squared,
            &Constraint::L2Ball(1e9),
            1e-12,
        ) {
            Err(Error::NoConvergence {
                residual,
                iterations,
            }) => {
                assert!(residual.is_finite() && residual > 1e-12);
                assert_eq!(iterations, 500_000);
            }
            other => panic!("expected a convergence error, got {other:?}"),
        }
    }

    #[test]
    fn erm_single_equation() {
        let d = tiny(vec![vec![1.0]], vec![2.0]);
        let masks = vec![DropoutMask::ones(1, 0.5).unwrap()];
        let got = erm_dropout_solve(
            &d,
            &masks,
            GlmLoss::Squared,
            &Constraint::Box {
                lo: -10.0,
                hi: 10.0,
            },
            1e-10,
        )
        .unwrap();
        assert!((got[0] - 1.0).abs() < 1e-8, "theta {got:?}");
    }

    #[test]
    fn hessian_min_eig_single_basis_row() {
        let d = tiny(vec![vec![1.0, 0.0]], vec![0.0]);
        let eig = expected_hessian_min_eig_ls(&d, 0.5).unwrap();
        assert!(eig.abs() < 1e-12, "min eig {eig}");
    }

    #[test]
    fn hessian_min_eig_parallel_rows() {
        // all rows (1,1)/sqrt(2): S = [[.5,.5],[.5,.5]], H = 2(diag(S)+S),
        // min eig = 1 despite rank-one data
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let d = tiny(vec![vec![r, r]; 4], vec![0.0; 4]);
        let eig = expected_hessian_min_eig_ls(&d, 0.5).unwrap();
        assert!((eig - 1.0).abs() < 1e-12, "min eig {eig}");
    }

    #[test]
    fn hessian_min_eig_dominates_twice_delta1() {
        let mut rng = SeededRng::new(15, 0);
        for trial in 0..10 {
            let n = 3 + trial % 5;
            let p = 2 + trial % 3;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..p).map(|_| rng.standard_normal()).collect())
                .collect();
            let d = Dataset::new(rows, vec![0.0; n]).unwrap();
            let eig = expected_hessian_min_eig_ls(&d, 0.5).unwrap();
            assert!(
                eig >= 2.0 * d.delta1() - 1e-10,
                "trial {trial}: {eig} < {}",
                2.0 * d.delta1()
            );
        }
    }

    #[test]
    fn prediction_unbiased_over_enumerated_masks() {
        // E over masks of (1/alpha) <theta, b*x> = <theta, x> at alpha = 1/2
        let mut rng = SeededRng::new(23, 0);
        for p in 1..=12usize {
            let theta: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
            let x: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
            let masks = 1usize << p;
            let mut mean = 0.0;
            for m in 0..masks {
                let mut u = 0.0;
                for j in 0..p {
                    if m & (1 << j) != 0 {
                        u += theta[j] * x[j];
                    }
                }
                mean += 2.0 * u;
            }
            mean /= masks as f64;
            let plain = crate::math::dot(&theta, &x);
            assert!((mean - plain).abs() < 1e-12, "p = {p}: {mean} vs {plain}");
        }
    }

    #[test]
    fn final_model_stays_in_constraint_set() {
        let d = synth::gaussian_regression(30, 4, 0.2, 12).unwrap();
        for constraint in [
            Constraint::Simplex,
            Constraint::L2Ball(0.5),
            Constraint::Box { lo: -0.1, hi: 0.1 },
        ] {
            let cfg = SgdConfig::new(500, 0.5, constraint.clone(), 77);
            let m = dropout_sgd_train(&d, GlmLoss::Squared, &cfg).unwrap();
            assert!(
                constraint.contains(&m.theta, 1e-9),
                "left {constraint:?}: {:?}",
                m.theta
            );
        }
    }

    #[test]
    fn excess_risk_contracts_between_horizons() {
        // the 4x-horizon excess dropout risk drops to at most 0.75x,
        // checked at T = 4e3 on a well-conditioned instance
        let d = synth::gaussian_regression(60, 4, 0.3, 91).unwrap();
        let constraint = Constraint::L2Ball(3.0);
        let horizon = 4_000usize;
        let j_star = reference_risk(&d, &constraint, 10 * 4 * horizon);
        let mut at_t = Vec::new();
        let mut at_4t = Vec::new();
        for s in 0..20u64 {
            let mut cfg =
                SgdConfig::new(4 * horizon, 0.5, constraint.clone(), derive_seed(1000, s));
            cfg.log_every = horizon;
            let m = dropout_sgd_train(&d, GlmLoss::Squared, &cfg).unwrap();
            at_t.push(m.trajectory[0].risk - j_star);
            at_4t.push(m.trajectory[3].risk - j_star);
        }
        let med_t = median(&mut at_t);
        let med_4t = median(&mut at_4t);
        assert!(med_t > 0.0, "reference risk too low: median excess {med_t}");
        assert!(
            med_4t <= 0.75 * med_t,
            "excess at 4T = {med_4t} vs 0.75 * excess at T = {}",
            0.75 * med_t
        );
    }

    pub(crate) fn reference_risk(d: &Dataset, constraint: &Constraint, steps: usize) -> f64 {
        (0..5u64)
            .map(|s| {
                let cfg = SgdConfig::new(steps, 0.5, constraint.clone(), derive_seed(0xbe57, s));
                let m = dropout_sgd_train(d, GlmLoss::Squared, &cfg).unwrap();
                dropout_risk_exact_ls(&m.theta, d)
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn median(v: &mut [f64]) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = v.len();
        if k % 2 == 1 {
            v[k / 2]
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2])
        }
    }

    #[test]
    fn deterministic_logistic_risk_reduces_to_plain_at_zero() {
        let d = synth::separable_logistic(12, 3, 4).unwrap();
        let theta = vec![0.0; 3];
        let det = deterministic_dropout_risk(&theta, &d, GlmLoss::Logistic, 0.5).unwrap();
        assert!((det - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
