//! Private GLM training from dropout stability: the model-stability bound
//! calculator, stability boosting, Gaussian output perturbation, the
//! generic propose-test-release gate, and empirical stability measurement.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::{Dataset, GlmLoss, LambdaVariant};
use crate::rng::{derive_seed, SeededRng};
use crate::sgd::{dropout_risk_mc, dropout_sgd_train, ls_dropout_risk, SgdConfig};

/// (epsilon, delta) privacy budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacyBudget {
    pub eps: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(eps: f64, delta: f64) -> Result<Self> {
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
        Ok(Self { eps, delta })
    }
}

/// Inputs to the model-stability bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInputs {
    /// Loss Lipschitz constant G over the operating range.
    pub lipschitz: f64,
    /// Feature norm bound B.
    pub norm_bound: f64,
    /// Leave-one-out curvature statistic Lambda.
    pub lambda: f64,
    /// Minimum column second moment Delta_1.
    pub delta1: f64,
    /// Step count T (real-valued so the calculator can be probed anywhere).
    pub t: f64,
    /// Sample count n; may be infinite to drop the 1/n term.
    pub n: f64,
    /// The single calibration constant standing in for the big-O.
    pub constant: f64,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        let fields = [
            ("lipschitz", self.lipschitz),
            ("norm_bound", self.norm_bound),
            ("lambda", self.lambda),
            ("delta1", self.delta1),
            ("constant", self.constant),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.t.is_nan() || !self.t.is_finite() || self.t < 2.0 {
            return Err(Error::InvalidParameter(format!(
                "t must be at least 2, got {}",
                self.t
            )));
        }
        if self.n.is_nan() || self.n <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "n must be positive, got {}",
                self.n
            )));
        }
        Ok(())
    }
}

/// Evaluated model-stability bound, with its inputs echoed.
#[derive(Clone, Copy, Debug)]
pub struct StabilityBound {
    pub eps_mod: f64,
    pub inputs: BoundInputs,
    /// Present when the high-probability variant (with its sqrt(log(1/delta))
    /// factor) was requested.
    pub highprob_delta: Option<f64>,
}

fn raw_bound(inp: &BoundInputs, highprob_delta: Option<f64>) -> f64 {
    let ratio = (inp.delta1 / inp.lambda).max(inp.lambda / inp.delta1);
    let mut eps = inp.constant
        * (inp.lipschitz * inp.norm_bound / inp.lambda)
        * ((inp.t.ln() * ratio / inp.t).sqrt() + 1.0 / inp.n);
    if let Some(delta) = highprob_delta {
        eps *= (1.0 / delta).ln().sqrt();
    }
    eps
}

/// Expected L2 distance between models trained on neighboring datasets:
/// c (GB/Lambda) (sqrt(log T max{Delta_1/Lambda, Lambda/Delta_1} / T) + 1/n),
/// times sqrt(log(1/delta)) for the boosted high-probability variant.
pub fn epsilon_mod_bound(inp: &BoundInputs, highprob_delta: Option<f64>) -> Result<StabilityBound> {
    inp.validate()?;
    if let Some(delta) = highprob_delta {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "high-probability delta must lie in (0, 1), got {delta}"
            )));
        }
    }
    Ok(StabilityBound {
        eps_mod: raw_bound(inp, highprob_delta),
        inputs: *inp,
        highprob_delta,
    })
}

/// Noise standard deviation of the Gaussian mechanism at the given
/// sensitivity: sqrt(4 eta^2 log(1/delta) / eps^2).
pub fn gaussian_mechanism_sigma(sensitivity: f64, budget: &PrivacyBudget) -> f64 {
    2.0 * sensitivity * (1.0 / budget.delta).ln().sqrt() / budget.eps
}

/// Expected excess-risk inflation caused by the Gaussian release noise:
/// G sigma for the improper (unprojected) release, G B sqrt(p) sigma after
/// projecting back onto the constraint set.
pub fn risk_inflation_bound(
    lipschitz: f64,
    norm_bound: f64,
    dim: usize,
    sigma: f64,
    proper: bool,
) -> f64 {
    if proper {
        lipschitz * norm_bound * (dim as f64).sqrt() * sigma
    } else {
        lipschitz * sigma
    }
}

/// Release theta plus spherical Gaussian noise with per-coordinate variance
/// 4 sensitivity^2 log(1/delta) / eps^2.
pub fn gaussian_perturb_private(
    theta: &[f64],
    sensitivity: f64,
    budget: &PrivacyBudget,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sensitivity must be positive (use an exact release explicitly for zero), got {sensitivity}"
        )));
    }
    let sigma = gaussian_mechanism_sigma(sensitivity, budget);
    let noise = rng.gaussian_vector(theta.len(), sigma)?;
    Ok(theta.iter().zip(&noise).map(|(t, z)| t + z).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PtrOutcome {
    pub pass: bool,
    pub g_hat: f64,
    pub threshold: f64,
}

/// Generic propose-test-release gate: g_hat = g + Lap(sensitivity/eps);
/// pass iff g_hat > zeta + sensitivity log(1/delta) / eps.
pub fn ptr_gate(
    g_value: f64,
    sensitivity: f64,
    zeta: f64,
    budget: &PrivacyBudget,
    rng: &mut SeededRng,
) -> Result<PtrOutcome> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sensitivity must be positive, got {sensitivity}"
        )));
    }
    let noise = rng.laplace(sensitivity / budget.eps)?;
    ptr_gate_with_noise(g_value, sensitivity, zeta, budget, noise)
}

/// [`ptr_gate`] with the Laplace draw pinned.
pub fn ptr_gate_with_noise(
    g_value: f64,
    sensitivity: f64,
    zeta: f64,
    budget: &PrivacyBudget,
    noise: f64,
) -> Result<PtrOutcome> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sensitivity must be positive, got {sensitivity}"
        )));
    }
    let g_hat = g_value + noise;
    let threshold = zeta + sensitivity * (1.0 / budget.delta).ln() / budget.eps;
    Ok(PtrOutcome {
        pass: g_hat > threshold,
        g_hat,
        threshold,
    })
}

/// Outcome of `k` boosted training runs.
#[derive(Clone, Debug)]
pub struct BoostResult {
    pub theta: Vec<f64>,
    /// Index of the selected run.
    pub selected: usize,
    /// Evaluated dropout risk of every run, in run order.
    pub risks: Vec<f64>,
}

fn eval_risk(theta: &[f64], d: &Dataset, loss: GlmLoss, rate: f64, seed: u64) -> Result<f64> {
    match loss {
        GlmLoss::Squared => Ok(ls_dropout_risk(theta, d, rate)),
        GlmLoss::Logistic => dropout_risk_mc(theta, d, loss, rate, 10_000, seed),
    }
}

/// Run dropout SGD `k` times on independent derived seeds and keep the run
/// with the smallest dropout risk (exact for least squares, 10^4-sample
/// Monte Carlo otherwise).
pub fn boosted_dropout_sgd(
    d: &Dataset,
    loss: GlmLoss,
    cfg: &SgdConfig,
    k: usize,
) -> Result<BoostResult> {
    if k == 0 {
        return Err(Error::InvalidParameter(
            "boosting needs at least one run".into(),
        ));
    }
    let models: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|j| {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = derive_seed(cfg.seed, j as u64);
            dropout_sgd_train(d, loss, &run_cfg).map(|m| m.theta)
        })
        .collect::<Result<_>>()?;
    let risks: Vec<f64> = models
        .iter()
        .enumerate()
        .map(|(j, theta)| {
            eval_risk(
                theta,
                d,
                loss,
                cfg.rate,
                derive_seed(cfg.seed, 0xe7a1 + j as u64),
            )
        })
        .collect::<Result<_>>()?;
    let selected = risks
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(j, _)| j)
        .unwrap();
    Ok(BoostResult {
        theta: models[selected].clone(),
        selected,
        risks,
    })
}

/// Smallest Lambda at which the Gaussian noise needed for the budget stays
/// within `sigma_cap`, floored at Delta_1 / 2. This is the propose-test
/// threshold zeta: once the gate certifies Lambda above it, the calibrated
/// noise is data-independent and within the cap.
pub fn zeta_for_sigma_cap(
    template: &BoundInputs,
    budget: &PrivacyBudget,
    sigma_cap: f64,
) -> Result<f64> {
    if !(sigma_cap > 0.0 && sigma_cap.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma cap must be positive, got {sigma_cap}"
        )));
    }
    let mut probe = *template;
    probe.lambda = 1.0;
    probe.validate()?;
    let sigma_at = |lambda: f64| {
        let mut inp = probe;
        inp.lambda = lambda;
        gaussian_mechanism_sigma(raw_bound(&inp, Some(budget.delta)), budget)
    };
    let lo = 1e-12;
    if sigma_at(lo) <= sigma_cap {
        return Ok(template.delta1 / 2.0);
    }
    let mut hi = template.delta1.max(1.0);
    while sigma_at(hi) > sigma_cap {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::InvalidParameter(
                "sigma cap unattainable for any Lambda".into(),
            ));
        }
    }
    let mut lo = lo;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sigma_at(mid) > sigma_cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi.max(template.delta1 / 2.0))
}

/// Which column statistic the gate certifies, with its matching sensitivity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateStatistic {
    /// Leave-one-out squared column sums; sensitivity B^2 / n.
    SquaredColumns,
    /// Leave-one-out plain column sums; sensitivity B / n.
    BinaryColumns,
}

#[derive(Clone, Copy, Debug)]
pub struct PrivateGlmOptions {
    pub budget: PrivacyBudget,
    /// Upper bound on the Gaussian noise standard deviation (the accuracy
    /// level the release must meet).
    pub sigma_cap: f64,
    /// Project the released model back onto the constraint set.
    pub proper: bool,
    /// Calibration constant for the stability bound.
    pub constant: f64,
    pub gate_statistic: GateStatistic,
}

impl PrivateGlmOptions {
    pub fn new(budget: PrivacyBudget, sigma_cap: f64) -> Self {
        PrivateGlmOptions {
            budget,
            sigma_cap,
            proper: false,
            constant: 1.0,
            gate_statistic: GateStatistic::SquaredColumns,
        }
    }
}

#[derive(Clone, Debug)]
pub enum PrivateGlmOutcome {
    Released(Vec<f64>),
    Gated,
}

/// Run record: written out as the CSV manifest by the CLI.
#[derive(Clone, Debug)]
pub struct GlmManifest {
    pub lambda: f64,
    pub lambda_hat: f64,
    pub zeta: f64,
    pub passed: bool,
    pub boost_runs: usize,
    pub noise_sigma: f64,
    pub final_risk: f64,
}

impl GlmManifest {
    /// CSV with header `lambda,lambda_hat,zeta,pass,k,sigma,final_risk`.
    pub fn to_csv(&self) -> String {
        format!(
            "lambda,lambda_hat,zeta,pass,k,sigma,final_risk\n{},{},{},{},{},{},{}\n",
            self.lambda,
            self.lambda_hat,
            self.zeta,
            self.passed,
            self.boost_runs,
            self.noise_sigma,
            self.final_risk
        )
    }
}

#[derive(Clone, Debug)]
pub struct PrivateGlmResult {
    pub outcome: PrivateGlmOutcome,
    pub manifest: GlmManifest,
}

/// End-to-end private GLM training: gate the leave-one-out curvature
/// statistic through propose-test-release, and on pass release the boosted
/// dropout-SGD model under Gaussian output perturbation calibrated at the
/// certified threshold.
pub fn private_glm_train(
    d: &Dataset,
    loss: GlmLoss,
    cfg: &SgdConfig,
    opts: &PrivateGlmOptions,
    rng: &mut SeededRng,
) -> Result<PrivateGlmResult> {
    let sens = gate_sensitivity(d, opts)?;
    let noise = rng.laplace(sens / opts.budget.eps)?;
    private_glm_train_with_gate_noise(d, loss, cfg, opts, noise, rng)
}

fn gate_sensitivity(d: &Dataset, opts: &PrivateGlmOptions) -> Result<f64> {
    let b = d.norm_bound();
    if b <= 0.0 {
        return Err(Error::DegenerateData("feature norm bound is zero".into()));
    }
    Ok(match opts.gate_statistic {
        GateStatistic::SquaredColumns => b * b / d.n() as f64,
        GateStatistic::BinaryColumns => b / d.n() as f64,
    })
}

/// [`private_glm_train`] with the gate's Laplace draw pinned.
pub fn private_glm_train_with_gate_noise(
    d: &Dataset,
    loss: GlmLoss,
    cfg: &SgdConfig,
    opts: &PrivateGlmOptions,
    gate_noise: f64,
    rng: &mut SeededRng,
) -> Result<PrivateGlmResult> {
    if cfg.iterations < 2 {
        return Err(Error::InvalidParameter(
            "private training needs at least 2 steps".into(),
        ));
    }
    loss.validate_labels(d.labels())?;
    let delta1 = d.delta1();
    if delta1 <= 0.0 {
        return Err(Error::DegenerateData(
            "Delta_1 = 0: a feature column is identically zero".into(),
        ));
    }
    let lipschitz =
        crate::glm::lipschitz_over_constraint(loss, d, &cfg.constraint, 1.0 / cfg.rate)?;
    let lambda = match opts.gate_statistic {
        GateStatistic::SquaredColumns => d.lambda(LambdaVariant::Squared)?,
        GateStatistic::BinaryColumns => d.lambda(LambdaVariant::Binary)?,
    };
    let template = BoundInputs {
        lipschitz,
        norm_bound: d.norm_bound(),
        lambda: 1.0,
        delta1,
        t: cfg.iterations as f64,
        n: d.n() as f64,
        constant: opts.constant,
    };
    let zeta = zeta_for_sigma_cap(&template, &opts.budget, opts.sigma_cap)?;
    let sens = gate_sensitivity(d, opts)?;
    let gate = ptr_gate_with_noise(lambda, sens, zeta, &opts.budget, gate_noise)?;

    if !gate.pass {
        return Ok(PrivateGlmResult {
            outcome: PrivateGlmOutcome::Gated,
            manifest: GlmManifest {
                lambda,
                lambda_hat: gate.g_hat,
                zeta,
                passed: false,
                boost_runs: 0,
                noise_sigma: f64::NAN,
                final_risk: f64::NAN,
            },
        });
    }

    let k = (1.0 / opts.budget.delta).ln().ceil().max(1.0) as usize;
    let boost = boosted_dropout_sgd(d, loss, cfg, k)?;
    // model sensitivity certified by the gate: the bound at the public
    // threshold zeta, not at the private Lambda
    let mut certified = template;
    certified.lambda = zeta;
    let model_sens = epsilon_mod_bound(&certified, Some(opts.budget.delta))?.eps_mod;
    let sigma = gaussian_mechanism_sigma(model_sens, &opts.budget);
    let mut released = gaussian_perturb_private(&boost.theta, model_sens, &opts.budget, rng)?;
    if opts.proper {
        released = cfg.constraint.project(&released);
    }
    let final_risk = eval_risk(&released, d, loss, cfg.rate, derive_seed(cfg.seed, 0xf1a7))?;
    Ok(PrivateGlmResult {
        outcome: PrivateGlmOutcome::Released(released),
        manifest: GlmManifest {
            lambda,
            lambda_hat: gate.g_hat,
            zeta,
            passed: true,
            boost_runs: k,
            noise_sigma: sigma,
            final_risk,
        },
    })
}

/// Per-trial distances and their mean.
#[derive(Clone, Debug)]
pub struct StabilityMeasurement {
    pub distances: Vec<f64>,
    pub mean: f64,
}

impl StabilityMeasurement {
    pub fn median(&self) -> f64 {
        let mut v = self.distances.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = v.len();
        if k % 2 == 1 {
            v[k / 2]
        } else {
            0.5 * (v[k / 2 - 1] + v[k / 2])
        }
    }
}

/// Monte Carlo estimate of E ||A(D) - A(D')||_2 for dropout SGD, with the
/// neighbor obtained by replacing one row. Both runs of a trial share the
/// same seed, hence the same sample-index and mask streams.
pub fn model_stability_measure(
    d: &Dataset,
    row_index: usize,
    replacement_x: Vec<f64>,
    replacement_y: f64,
    loss: GlmLoss,
    cfg: &SgdConfig,
    trials: usize,
) -> Result<StabilityMeasurement> {
    if trials == 0 {
        return Err(Error::InvalidParameter(
            "trial count must be at least 1".into(),
        ));
    }
    if replacement_x.len() != d.p() {
        return Err(Error::DimensionMismatch {
            expected: d.p(),
            got: replacement_x.len(),
        });
    }
    if crate::math::norm2(&replacement_x) > d.norm_bound() * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(
            "replacement row violates the dataset norm bound".into(),
        ));
    }
    let neighbor = d.replace_row(row_index, replacement_x, replacement_y)?;
    let distances: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = derive_seed(cfg.seed, t as u64);
            let a = dropout_sgd_train(d, loss, &run_cfg)?;
            let b = dropout_sgd_train(&neighbor, loss, &run_cfg)?;
            let dist = a
                .theta
                .iter()
                .zip(&b.theta)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            Ok(dist)
        })
        .collect::<Result<_>>()?;
    let mean = distances.iter().sum::<f64>() / trials as f64;
    Ok(StabilityMeasurement { distances, mean })
}
