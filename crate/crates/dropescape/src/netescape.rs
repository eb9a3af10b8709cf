//! One-hidden-layer network lab: node-level dropout perturbation,
//! distributional error norms, gradient-descent training, and escape
//! trials measuring how often a perturbation cuts the approximation error
//! by the predicted multiplicative factor.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::math::{self, DropoutMask};
use crate::rng::{derive_seed, SeededRng};

const STREAM_SAMPLES: u64 = 3;
const STREAM_MASKS: u64 = 4;
const STREAM_NET_TRAIN: u64 = 6;

/// Per-node link function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkKind {
    Identity,
    Tanh,
    /// t -> t^degree.
    Monomial(u32),
}

impl LinkKind {
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            LinkKind::Identity => t,
            LinkKind::Tanh => t.tanh(),
            LinkKind::Monomial(d) => t.powi(d as i32),
        }
    }

    #[inline]
    pub fn deriv(&self, t: f64) -> f64 {
        match *self {
            LinkKind::Identity => 1.0,
            LinkKind::Tanh => {
                let th = t.tanh();
                1.0 - th * th
            }
            LinkKind::Monomial(d) => d as f64 * t.powi(d as i32 - 1),
        }
    }
}

/// x -> sum_i alpha_i phi_i(<theta_i, x>), with fixed nonnegative output
/// weights alpha_i.
#[derive(Clone, Debug)]
pub struct OneHiddenNet {
    alphas: Vec<f64>,
    thetas: Vec<Vec<f64>>,
    links: Vec<LinkKind>,
}

impl OneHiddenNet {
    pub fn new(alphas: Vec<f64>, thetas: Vec<Vec<f64>>, links: Vec<LinkKind>) -> Result<Self> {
        let m = alphas.len();
        if m == 0 {
            return Err(Error::InvalidParameter(
                "a network needs at least one node".into(),
            ));
        }
        if thetas.len() != m || links.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: thetas.len().min(links.len()),
            });
        }
        if alphas
            .iter()
            .any(|&a| a.is_nan() || a < 0.0 || !a.is_finite())
        {
            return Err(Error::InvalidParameter(
                "output weights must be nonnegative and finite".into(),
            ));
        }
        let dim = thetas[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "node weights must be non-empty".into(),
            ));
        }
        for t in &thetas {
            if t.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: t.len(),
                });
            }
            if !math::all_finite(t) {
                return Err(Error::InvalidParameter(
                    "node weights must be finite".into(),
                ));
            }
        }
        Ok(Self {
            alphas,
            thetas,
            links,
        })
    }

    /// Identical link on every node.
    pub fn uniform_link(alphas: Vec<f64>, thetas: Vec<Vec<f64>>, link: LinkKind) -> Result<Self> {
        let m = alphas.len();
        Self::new(alphas, thetas, vec![link; m])
    }

    pub fn m(&self) -> usize {
        self.alphas.len()
    }

    pub fn dim(&self) -> usize {
        self.thetas[0].len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }

    pub fn links(&self) -> &[LinkKind] {
        &self.links
    }

    pub fn alpha_min(&self) -> f64 {
        self.alphas
            .iter()
            .map(|a| a.abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Unweighted node output g_i(x) = phi_i(<theta_i, x>).
    #[inline]
    pub fn node(&self, i: usize, x: &[f64]) -> f64 {
        self.links[i].eval(math::dot(&self.thetas[i], x))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "input dimension mismatch");
        (0..self.m())
            .map(|i| self.alphas[i] * self.node(i, x))
            .sum()
    }
}

/// Input distribution the error norms integrate against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleDistribution {
    StandardNormal {
        dim: usize,
    },
    /// Uniform on [-1, 1]^dim.
    UniformCube {
        dim: usize,
    },
}

impl SampleDistribution {
    pub fn dim(&self) -> usize {
        match *self {
            SampleDistribution::StandardNormal { dim } => dim,
            SampleDistribution::UniformCube { dim } => dim,
        }
    }

    fn fill(&self, rng: &mut SeededRng, out: &mut [f64]) {
        match *self {
            SampleDistribution::StandardNormal { .. } => {
                out.iter_mut().for_each(|v| *v = rng.standard_normal());
            }
            SampleDistribution::UniformCube { .. } => {
                out.iter_mut().for_each(|v| *v = 2.0 * rng.uniform() - 1.0);
            }
        }
    }
}

/// Frozen evaluation points shared across function comparisons, so that
/// every pairwise statement uses common random numbers.
#[derive(Clone, Debug)]
pub struct SampleSet {
    dim: usize,
    points: Vec<f64>,
}

impl SampleSet {
    pub fn draw(dist: &SampleDistribution, samples: usize, seed: u64) -> Self {
        let dim = dist.dim();
        let mut rng = SeededRng::new(seed, STREAM_SAMPLES);
        let mut points = vec![0.0; samples * dim];
        for chunk in points.chunks_mut(dim) {
            dist.fill(&mut rng, chunk);
        }
        Self { dim, points }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, s: usize) -> &[f64] {
        &self.points[s * self.dim..(s + 1) * self.dim]
    }
}

/// Mean squared difference over the shared sample set.
pub fn dist_sq_on(set: &SampleSet, g: impl Fn(&[f64]) -> f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut acc = 0.0;
    for s in 0..set.len() {
        let x = set.point(s);
        let d = g(x) - f(x);
        acc += d * d;
    }
    acc / set.len() as f64
}

/// Mean product over the shared sample set.
pub fn inner_prod_on(set: &SampleSet, g: impl Fn(&[f64]) -> f64, h: impl Fn(&[f64]) -> f64) -> f64 {
    let mut acc = 0.0;
    for s in 0..set.len() {
        let x = set.point(s);
        acc += g(x) * h(x);
    }
    acc / set.len() as f64
}

/// Monte Carlo estimate of E_x |g(x) - f(x)|^2 over fresh draws.
pub fn dist_sq_mc(
    g: impl Fn(&[f64]) -> f64,
    f: impl Fn(&[f64]) -> f64,
    dist: &SampleDistribution,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidParameter(
            "sample count must be at least 1".into(),
        ));
    }
    Ok(dist_sq_on(&SampleSet::draw(dist, samples, seed), g, f))
}

/// Monte Carlo estimate of the distributional inner product E_x [g(x) h(x)].
pub fn inner_prod_mc(
    g: impl Fn(&[f64]) -> f64,
    h: impl Fn(&[f64]) -> f64,
    dist: &SampleDistribution,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidParameter(
            "sample count must be at least 1".into(),
        ));
    }
    Ok(inner_prod_on(&SampleSet::draw(dist, samples, seed), g, h))
}

/// The three terms of the perturbed-error decomposition
/// ||ghat - f||^2 - ||g - f||^2 = ||ghat - g||^2 + 2 <ghat - g, g - f>,
/// all evaluated on one shared sample set so the identity is algebraic.
#[derive(Clone, Copy, Debug)]
pub struct ErrorIdentity {
    pub lhs: f64,
    pub quadratic: f64,
    pub cross: f64,
}

pub fn error_identity_decompose(
    g: impl Fn(&[f64]) -> f64,
    g_hat: impl Fn(&[f64]) -> f64,
    f: impl Fn(&[f64]) -> f64,
    set: &SampleSet,
) -> ErrorIdentity {
    let mut lhs = 0.0;
    let mut quadratic = 0.0;
    let mut cross = 0.0;
    for s in 0..set.len() {
        let x = set.point(s);
        let (gv, hv, fv) = (g(x), g_hat(x), f(x));
        let e = gv - fv;
        let e_hat = hv - fv;
        let dg = hv - gv;
        lhs += e_hat * e_hat - e * e;
        quadratic += dg * dg;
        cross += 2.0 * dg * e;
    }
    let n = set.len() as f64;
    ErrorIdentity {
        lhs: lhs / n,
        quadratic: quadratic / n,
        cross: cross / n,
    }
}

/// Node-level dropout: each node kept with probability 1/2 and the kept
/// weights doubled, so the perturbation is unbiased. Returns the perturbed
/// network and the drawn node mask.
pub fn dropout_perturb(net: &OneHiddenNet, rng: &mut SeededRng) -> (OneHiddenNet, DropoutMask) {
    let mask = DropoutMask::sample(net.m(), 0.5, rng).expect("valid rate");
    (perturb_with_mask(net, mask.bits()), mask)
}

/// The deterministic part of [`dropout_perturb`]: alphas become 2 alpha_i b_i.
pub fn perturb_with_mask(net: &OneHiddenNet, mask: &[u8]) -> OneHiddenNet {
    assert_eq!(mask.len(), net.m());
    let alphas = net
        .alphas
        .iter()
        .zip(mask)
        .map(|(a, &b)| 2.0 * a * b as f64)
        .collect();
    OneHiddenNet {
        alphas,
        thetas: net.thetas.clone(),
        links: net.links.clone(),
    }
}

/// Outcome of one escape trial.
#[derive(Clone, Debug)]
pub struct EscapeReport {
    pub initial_error: f64,
    pub perturbed_errors: Vec<f64>,
    pub successes: usize,
    pub success_frequency: f64,
    /// Target decrease factor 1 - sqrt(alpha_min / (16 m)).
    pub factor: f64,
    /// Measured ||g||^2 >= ||f||^2.
    pub norm_precondition_ok: bool,
    /// Measured initial error >= the size threshold below.
    pub threshold_precondition_ok: bool,
    pub g_norm_sq: f64,
    pub f_norm_sq: f64,
    /// ||alpha||^2 max_i ||g_i||^2 sqrt(m) / (16 sqrt(alpha_min)), measured.
    pub error_threshold: f64,
}

/// Draw `n_draws` node masks and measure how often the perturbed error
/// drops below factor * initial error, with all errors estimated on one
/// shared sample set. Precondition failures are flagged, not fatal: the
/// report still carries the frequencies for diagnostics.
pub fn escape_trial(
    g: &OneHiddenNet,
    f: impl Fn(&[f64]) -> f64,
    dist: &SampleDistribution,
    n_draws: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<EscapeReport> {
    if dist.dim() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: g.dim(),
            got: dist.dim(),
        });
    }
    if n_draws == 0 || mc_samples == 0 {
        return Err(Error::InvalidParameter(
            "draw and sample counts must be positive".into(),
        ));
    }
    let m = g.m();
    let alpha_min = g.alpha_min();
    if alpha_min <= 0.0 {
        return Err(Error::InvalidParameter(
            "escape trials need alpha_min > 0 (some output weight is zero)".into(),
        ));
    }

    let set = SampleSet::draw(dist, mc_samples, seed);
    let samples = set.len();
    // per-node outputs once; every masked error reuses them
    let mut node_vals = vec![vec![0.0f64; samples]; m];
    let mut f_vals = vec![0.0f64; samples];
    let mut g_vals = vec![0.0f64; samples];
    for s in 0..samples {
        let x = set.point(s);
        f_vals[s] = f(x);
        let mut gv = 0.0;
        for i in 0..m {
            let v = g.node(i, x);
            node_vals[i][s] = v;
            gv += g.alphas[i] * v;
        }
        g_vals[s] = gv;
    }

    let mean = |vals: &[f64]| vals.iter().sum::<f64>() / samples as f64;
    let initial_error = mean(
        &g_vals
            .iter()
            .zip(&f_vals)
            .map(|(a, b)| (a - b) * (a - b))
            .collect::<Vec<_>>(),
    );
    let g_norm_sq = mean(&g_vals.iter().map(|v| v * v).collect::<Vec<_>>());
    let f_norm_sq = mean(&f_vals.iter().map(|v| v * v).collect::<Vec<_>>());
    let max_node_norm_sq = (0..m)
        .map(|i| mean(&node_vals[i].iter().map(|v| v * v).collect::<Vec<_>>()))
        .fold(0.0f64, f64::max);
    let alpha_norm_sq = math::norm2_sq(&g.alphas);
    let error_threshold =
        alpha_norm_sq * max_node_norm_sq * (m as f64).sqrt() / (16.0 * alpha_min.sqrt());
    let factor = 1.0 - (alpha_min / (16.0 * m as f64)).sqrt();

    let mut rng = SeededRng::new(seed, STREAM_MASKS);
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut mask = vec![0u8; m];
    let mut perturbed = vec![0.0f64; samples];
    let mut perturbed_errors = Vec::with_capacity(n_draws);
    let mut successes = 0usize;
    let cutoff = factor * initial_error;
    for _ in 0..n_draws {
        let mut key = 0u64;
        for (i, b) in mask.iter_mut().enumerate() {
            *b = rng.bit(0.5);
            if *b == 1 && i < 64 {
                key |= 1 << i;
            }
        }
        let err = if m <= 64 {
            match cache.get(&key) {
                Some(&e) => e,
                None => {
                    let e = masked_error(g, &node_vals, &f_vals, &mask, &mut perturbed);
                    cache.insert(key, e);
                    e
                }
            }
        } else {
            masked_error(g, &node_vals, &f_vals, &mask, &mut perturbed)
        };
        if err <= cutoff {
            successes += 1;
        }
        perturbed_errors.push(err);
    }

    Ok(EscapeReport {
        initial_error,
        success_frequency: successes as f64 / n_draws as f64,
        successes,
        perturbed_errors,
        factor,
        norm_precondition_ok: g_norm_sq >= f_norm_sq,
        threshold_precondition_ok: initial_error >= error_threshold,
        g_norm_sq,
        f_norm_sq,
        error_threshold,
    })
}

fn masked_error(
    g: &OneHiddenNet,
    node_vals: &[Vec<f64>],
    f_vals: &[f64],
    mask: &[u8],
    scratch: &mut [f64],
) -> f64 {
    scratch.iter_mut().for_each(|v| *v = 0.0);
    for (i, &b) in mask.iter().enumerate() {
        if b == 1 {
            let w = 2.0 * g.alphas[i];
            for (acc, &v) in scratch.iter_mut().zip(&node_vals[i]) {
                *acc += w * v;
            }
        }
    }
    let mut err = 0.0;
    for (acc, &fv) in scratch.iter().zip(f_vals) {
        let d = *acc - fv;
        err += d * d;
    }
    err / f_vals.len() as f64
}

/// Gradient of the pointwise squared error (g(x) - target)^2 with respect
/// to every node weight vector.
pub fn squared_error_gradient(net: &OneHiddenNet, target_value: f64, x: &[f64]) -> Vec<Vec<f64>> {
    let residual = net.eval(x) - target_value;
    (0..net.m())
        .map(|i| {
            let slope =
                2.0 * residual * net.alphas[i] * net.links[i].deriv(math::dot(&net.thetas[i], x));
            x.iter().map(|&v| slope * v).collect()
        })
        .collect()
}

/// Plain stochastic gradient descent on the node weights; the output
/// weights stay fixed.
pub fn sgd_train_net(
    target: impl Fn(&[f64]) -> f64,
    net: &OneHiddenNet,
    dist: &SampleDistribution,
    eta: f64,
    steps: usize,
    seed: u64,
) -> OneHiddenNet {
    let mut out = net.clone();
    let mut rng = SeededRng::new(seed, STREAM_NET_TRAIN);
    let mut x = vec![0.0; dist.dim()];
    for _ in 0..steps {
        dist.fill(&mut rng, &mut x);
        let grads = squared_error_gradient(&out, target(&x), &x);
        for (theta, grad) in out.thetas.iter_mut().zip(&grads) {
            for (t, g) in theta.iter_mut().zip(grad) {
                *t -= eta * g;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct EscapeLoopConfig {
    pub eta: f64,
    pub steps_per_phase: usize,
    /// Perturb instead of training once the estimated gradient norm falls
    /// below this; infinity gives a pure perturbation search.
    pub stagnation_tol: f64,
    pub max_rounds: usize,
    pub mc_samples: usize,
    pub probe_samples: usize,
}

impl EscapeLoopConfig {
    pub fn new(eta: f64, steps_per_phase: usize, stagnation_tol: f64, max_rounds: usize) -> Self {
        EscapeLoopConfig {
            eta,
            steps_per_phase,
            stagnation_tol,
            max_rounds,
            mc_samples: 4096,
            probe_samples: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EscapeTrajectory {
    /// Estimated error after each round, starting with the initial error.
    pub errors: Vec<f64>,
    /// Best-so-far network.
    pub net: OneHiddenNet,
    pub rounds_used: usize,
    /// True when the round budget ran out.
    pub exhausted: bool,
    pub accepted_perturbations: usize,
}

/// Alternate training phases with accept-only-if-better dropout
/// perturbations once the gradient stagnates. Errors are tracked on one
/// shared evaluation set.
pub fn dropout_escape_loop(
    target: impl Fn(&[f64]) -> f64,
    net: &OneHiddenNet,
    dist: &SampleDistribution,
    cfg: &EscapeLoopConfig,
    seed: u64,
) -> EscapeTrajectory {
    let eval_set = SampleSet::draw(dist, cfg.mc_samples, derive_seed(seed, 0xe4a1));
    let err_of = |n: &OneHiddenNet| dist_sq_on(&eval_set, |x| n.eval(x), &target);

    let mut current = net.clone();
    let mut cur_err = err_of(&current);
    let mut best = current.clone();
    let mut best_err = cur_err;
    let mut errors = vec![cur_err];
    let mut accepted = 0usize;
    let mut mask_rng = SeededRng::new(seed, STREAM_MASKS);
    let mut rounds_used = 0usize;
    let mut exhausted = true;

    for round in 1..=cfg.max_rounds {
        if cur_err == 0.0 {
            exhausted = false;
            break;
        }
        rounds_used = round;
        let gnorm = mean_gradient_norm(
            &current,
            &target,
            dist,
            cfg.probe_samples,
            derive_seed(seed, 0xbead + round as u64),
        );
        if gnorm < cfg.stagnation_tol {
            let (candidate, _) = dropout_perturb(&current, &mut mask_rng);
            let cand_err = err_of(&candidate);
            if cand_err < cur_err {
                current = candidate;
                cur_err = cand_err;
                accepted += 1;
            }
        } else {
            current = sgd_train_net(
                &target,
                &current,
                dist,
                cfg.eta,
                cfg.steps_per_phase,
                derive_seed(seed, round as u64),
            );
            cur_err = err_of(&current);
        }
        errors.push(cur_err);
        if cur_err < best_err {
            best = current.clone();
            best_err = cur_err;
        }
    }
    if cur_err == 0.0 {
        exhausted = false;
    }
    EscapeTrajectory {
        errors,
        net: best,
        rounds_used,
        exhausted,
        accepted_perturbations: accepted,
    }
}

fn mean_gradient_norm(
    net: &OneHiddenNet,
    target: impl Fn(&[f64]) -> f64,
    dist: &SampleDistribution,
    probes: usize,
    seed: u64,
) -> f64 {
    let mut rng = SeededRng::new(seed, STREAM_SAMPLES);
    let mut x = vec![0.0; dist.dim()];
    let mut acc = vec![vec![0.0; net.dim()]; net.m()];
    for _ in 0..probes {
        dist.fill(&mut rng, &mut x);
        let grads = squared_error_gradient(net, target(&x), &x);
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (av, gv) in a.iter_mut().zip(g) {
                *av += gv;
            }
        }
    }
    let p = probes as f64;
    acc.iter()
        .map(|a| a.iter().map(|v| (v / p) * (v / p)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Identity-link instance on orthonormal node directions: the estimate g
/// uses theta_i = e_i with weight `alpha`, the target f uses
/// theta_i* = -target_scale * e_i. With target_scale in (0, 1] the norm
/// precondition holds, and the error threshold is met once alpha is large
/// enough relative to m; both are measured, not assumed, by the trial.
pub fn orthonormal_escape_instance(
    m: usize,
    dim: usize,
    alpha: f64,
    target_scale: f64,
) -> Result<(OneHiddenNet, OneHiddenNet)> {
    if dim < m || m == 0 {
        return Err(Error::InvalidParameter(format!(
            "need dim >= m >= 1, got m = {m}, dim = {dim}"
        )));
    }
    if alpha.is_nan() || alpha <= 0.0 || !(0.0..=1.0).contains(&target_scale) {
        return Err(Error::InvalidParameter(
            "need alpha > 0 and target_scale in [0, 1]".into(),
        ));
    }
    let basis = |scale: f64| -> Vec<Vec<f64>> {
        (0..m)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i] = scale;
                v
            })
            .collect()
    };
    let g = OneHiddenNet::uniform_link(vec![alpha; m], basis(1.0), LinkKind::Identity)?;
    let f = OneHiddenNet::uniform_link(vec![alpha; m], basis(-target_scale), LinkKind::Identity)?;
    Ok((g, f))
}
