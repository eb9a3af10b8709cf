//! Leave-out stability experiment harness: dataset ingestion, random and
//! adversarial example removal, method comparison across unregularized,
//! L2, stochastic-dropout, and deterministic-dropout training, and CSV
//! emission. Re-running a configuration with the same base seed reproduces
//! the output byte for byte.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::dp_simplex::BinaryDataset;
use crate::error::{Error, Result};
use crate::glm::{Dataset, GlmLoss};
use crate::math::Constraint;
use crate::rng::{derive_seed, SeededRng};
pub use crate::sgd::deterministic_dropout_risk;
use crate::sgd::{dropout_sgd_train, projected_gd, GdOptions, SgdConfig};
use crate::synth;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Svmlight,
}

impl DataFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "svmlight" | "libsvm" => Ok(DataFormat::Svmlight),
            other => Err(Error::InvalidParameter(format!(
                "unknown data format '{other}'"
            ))),
        }
    }
}

/// Read a labelled dataset from disk; the norm bound B is the largest row
/// norm found.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    match format {
        DataFormat::Csv => parse_csv_dataset(&text),
        DataFormat::Svmlight => parse_svmlight_dataset(&text),
    }
}

/// CSV with a header row; the last column is the label, the rest are
/// features.
pub fn parse_csv_dataset(text: &str) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 {
            continue; // header
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                message: "need at least one feature column and a label".into(),
            });
        }
        if let Some(w) = width {
            if fields.len() != w {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {w} columns, found {}", fields.len()),
                });
            }
        } else {
            width = Some(fields.len());
        }
        let mut parsed = Vec::with_capacity(fields.len());
        for f in &fields {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("'{}' is not a number", f.trim()),
            })?;
            parsed.push(v);
        }
        let label = parsed.pop().expect("width >= 2");
        rows.push(parsed);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    Dataset::new(rows, labels)
}

/// `label index:value ...` lines with 1-based indices, densified to the
/// largest index in the file.
pub fn parse_svmlight_dataset(text: &str) -> Result<Dataset> {
    let mut sparse: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut max_index = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label: f64 = tokens
            .next()
            .expect("non-empty line")
            .parse()
            .map_err(|_| Error::Parse {
                line: line_no,
                message: "bad label".into(),
            })?;
        let mut entries = Vec::new();
        for tok in tokens {
            let (i_str, v_str) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("'{tok}' is not index:value"),
            })?;
            let i: usize = i_str.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad feature index '{i_str}'"),
            })?;
            if i == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    message: "feature indices are 1-based".into(),
                });
            }
            let v: f64 = v_str.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad feature value '{v_str}'"),
            })?;
            max_index = max_index.max(i);
            entries.push((i - 1, v));
        }
        sparse.push((label, entries));
    }
    if sparse.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    if max_index == 0 {
        return Err(Error::Data("no feature indices present".into()));
    }
    let mut rows = Vec::with_capacity(sparse.len());
    let mut labels = Vec::with_capacity(sparse.len());
    for (label, entries) in sparse {
        let mut row = vec![0.0; max_index];
        for (i, v) in entries {
            row[i] = v;
        }
        rows.push(row);
        labels.push(label);
    }
    Dataset::new(rows, labels)
}

/// Unlabelled binary rows, comma- or whitespace-separated 0/1 entries.
pub fn parse_binary_dataset(text: &str) -> Result<BinaryDataset> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if trimmed.contains(',') {
            trimmed.split(',').map(str::trim).collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        let mut row = Vec::with_capacity(fields.len());
        for f in fields {
            match f {
                "0" => row.push(0u8),
                "1" => row.push(1u8),
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("'{other}' is not a 0/1 entry"),
                    })
                }
            }
        }
        rows.push(row);
    }
    BinaryDataset::new(rows)
}

pub fn load_binary_dataset(path: &Path) -> Result<BinaryDataset> {
    parse_binary_dataset(&std::fs::read_to_string(path)?)
}

/// Keep a uniformly random ceil((1 - rho) n) subset, in original row order.
pub fn random_removal(d: &Dataset, rho: f64, seed: u64) -> Result<Dataset> {
    check_rho(rho)?;
    let n = d.n();
    let keep_count = ((1.0 - rho) * n as f64).ceil() as usize;
    if keep_count == 0 {
        return Err(Error::Data("removal would empty the dataset".into()));
    }
    if keep_count == n {
        return Ok(d.clone());
    }
    let mut rng = SeededRng::new(seed, 10);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..keep_count {
        let j = i + rng.index(n - i);
        indices.swap(i, j);
    }
    let mut keep: Vec<usize> = indices[..keep_count].to_vec();
    keep.sort_unstable();
    d.subset(&keep)
}

/// Remove the floor(n rho) rows with smallest margin |<x, theta_full>|,
/// ties resolved toward the lowest row index.
pub fn adversarial_removal(d: &Dataset, rho: f64, theta_full: &[f64]) -> Result<Dataset> {
    check_rho(rho)?;
    if theta_full.len() != d.p() {
        return Err(Error::DimensionMismatch {
            expected: d.p(),
            got: theta_full.len(),
        });
    }
    let n = d.n();
    let remove_count = (n as f64 * rho).floor() as usize;
    if remove_count >= n {
        return Err(Error::Data("removal would empty the dataset".into()));
    }
    if remove_count == 0 {
        return Ok(d.clone());
    }
    let mut order: Vec<usize> = (0..n).collect();
    let margin = |i: usize| crate::math::dot(d.row(i), theta_full).abs();
    order.sort_by(|&a, &b| margin(a).partial_cmp(&margin(b)).unwrap().then(a.cmp(&b)));
    let mut keep: Vec<usize> = order[remove_count..].to_vec();
    keep.sort_unstable();
    d.subset(&keep)
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "rho must lie in [0, 1), got {rho}"
        )))
    }
}

/// Risk inflation tolerated after m adversarial corruptions:
/// e^(m eps) base_risk + m B delta.
pub fn adversarial_risk_bound(
    eps: f64,
    delta: f64,
    corrupted: usize,
    value_bound: f64,
    base_risk: f64,
) -> f64 {
    (corrupted as f64 * eps).exp() * base_risk + corrupted as f64 * value_bound * delta
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    None,
    L2,
    Dropout,
    DetDropout,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::None => "none",
            Method::L2 => "l2",
            Method::Dropout => "dropout",
            Method::DetDropout => "det-dropout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "l2" => Ok(Method::L2),
            "dropout" => Ok(Method::Dropout),
            "det-dropout" => Ok(Method::DetDropout),
            other => Err(Error::InvalidParameter(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RemovalMode {
    Random,
    Adversarial,
}

#[derive(Clone, Debug)]
pub enum DataSource {
    File {
        path: PathBuf,
        format: DataFormat,
    },
    SyntheticLogistic {
        n: usize,
        p: usize,
        data_seed: u64,
    },
    SyntheticRegression {
        n: usize,
        p: usize,
        noise_sd: f64,
        data_seed: u64,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::File { path, format } => load_dataset(path, *format),
            DataSource::SyntheticLogistic { n, p, data_seed } => {
                synth::separable_logistic(*n, *p, *data_seed)
            }
            DataSource::SyntheticRegression {
                n,
                p,
                noise_sd,
                data_seed,
            } => synth::gaussian_regression(*n, *p, *noise_sd, *data_seed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub loss: GlmLoss,
    pub train_fraction: f64,
    pub rhos: Vec<f64>,
    pub removal: RemovalMode,
    pub methods: Vec<Method>,
    pub repeats: usize,
    pub seed: u64,
    pub dropout_rate: f64,
    pub iterations: usize,
    pub l2_grid: Vec<f64>,
    pub constraint: Constraint,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        for &rho in &self.rhos {
            check_rho(rho)?;
        }
        if self.repeats == 0 {
            return Err(Error::InvalidParameter("repeats must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter(
                "at least one method required".into(),
            ));
        }
        if !(self.dropout_rate > 0.0 && self.dropout_rate <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate must lie in (0, 1], got {}",
                self.dropout_rate
            )));
        }
        if self.l2_grid.is_empty() || self.l2_grid.iter().any(|&l| l.is_nan() || l <= 0.0) {
            return Err(Error::InvalidParameter("l2 grid must be positive".into()));
        }
        self.constraint.validate()
    }
}

/// Seven log-spaced ridge penalties from 1e-4 to 1e1.
pub fn default_l2_grid() -> Vec<f64> {
    (0..7)
        .map(|k| 10f64.powf(-4.0 + 5.0 * k as f64 / 6.0))
        .collect()
}

/// Parse the flat `key = value` experiment configuration format; `#`
/// starts a comment, the rho list is comma-separated.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut dataset_path: Option<PathBuf> = None;
    let mut format = DataFormat::Csv;
    let mut synthetic: Option<String> = None;
    let mut n = 400usize;
    let mut p = 20usize;
    let mut data_seed = 1u64;
    let mut noise_sd = 0.1f64;
    let mut loss: Option<GlmLoss> = None;
    let mut train_fraction = 0.5f64;
    let mut rhos = vec![0.0, 0.25, 0.5];
    let mut removal = RemovalMode::Random;
    let mut methods = vec![
        Method::None,
        Method::L2,
        Method::Dropout,
        Method::DetDropout,
    ];
    let mut repeats = 20usize;
    let mut seed = 0u64;
    let mut dropout_rate = 0.5f64;
    let mut iterations = 2000usize;
    let mut l2_grid = default_l2_grid();
    let mut constraint = Constraint::L2Ball(10.0);

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected key = value".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |msg: String| Error::Parse {
            line: line_no,
            message: msg,
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| bad(format!("'{v}' is not a number")))
        };
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| bad(format!("'{v}' is not a count")))
        };
        match key {
            "dataset" => dataset_path = Some(PathBuf::from(value)),
            "format" => format = DataFormat::parse(value).map_err(|e| bad(e.to_string()))?,
            "synthetic" => synthetic = Some(value.to_string()),
            "n" => n = parse_usize(value)?,
            "p" => p = parse_usize(value)?,
            "data_seed" => {
                data_seed = value
                    .parse()
                    .map_err(|_| bad(format!("'{value}' is not a seed")))?
            }
            "noise_sd" => noise_sd = parse_f64(value)?,
            "loss" => {
                loss = Some(match value {
                    "squared" => GlmLoss::Squared,
                    "logistic" => GlmLoss::Logistic,
                    other => return Err(bad(format!("unknown loss '{other}'"))),
                })
            }
            "train_fraction" => train_fraction = parse_f64(value)?,
            "rho" => {
                rhos = value
                    .split(',')
                    .map(|v| parse_f64(v.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "removal" => {
                removal = match value {
                    "random" => RemovalMode::Random,
                    "adversarial" => RemovalMode::Adversarial,
                    other => return Err(bad(format!("unknown removal mode '{other}'"))),
                }
            }
            "methods" => {
                methods = value
                    .split(',')
                    .map(|v| Method::parse(v.trim()).map_err(|e| bad(e.to_string())))
                    .collect::<Result<Vec<_>>>()?;
            }
            "repeats" => repeats = parse_usize(value)?,
            "seed" => {
                seed = value
                    .parse()
                    .map_err(|_| bad(format!("'{value}' is not a seed")))?
            }
            "dropout_rate" => dropout_rate = parse_f64(value)?,
            "iterations" => iterations = parse_usize(value)?,
            "l2_grid" => {
                l2_grid = value
                    .split(',')
                    .map(|v| parse_f64(v.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "constraint" => constraint = parse_constraint(value).map_err(|e| bad(e.to_string()))?,
            other => return Err(bad(format!("unknown key '{other}'"))),
        }
    }

    let source = match (dataset_path, synthetic) {
        (Some(_), Some(_)) => {
            return Err(Error::Data("config sets both dataset and synthetic".into()))
        }
        (Some(path), None) => DataSource::File { path, format },
        (None, Some(kind)) => match kind.as_str() {
            "logistic" => DataSource::SyntheticLogistic { n, p, data_seed },
            "regression" => DataSource::SyntheticRegression {
                n,
                p,
                noise_sd,
                data_seed,
            },
            other => return Err(Error::Data(format!("unknown synthetic kind '{other}'"))),
        },
        (None, None) => return Err(Error::Data("config needs dataset= or synthetic=".into())),
    };
    let loss = loss.ok_or_else(|| Error::Data("config needs loss = squared|logistic".into()))?;

    let cfg = ExperimentConfig {
        source,
        loss,
        train_fraction,
        rhos,
        removal,
        methods,
        repeats,
        seed,
        dropout_rate,
        iterations,
        l2_grid,
        constraint,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `l2:R`, `simplex`, or `box:LO:HI`.
pub fn parse_constraint(s: &str) -> Result<Constraint> {
    let parts: Vec<&str> = s.split(':').collect();
    let c = match parts.as_slice() {
        ["simplex"] => Constraint::Simplex,
        ["l2", r] => Constraint::L2Ball(
            r.parse()
                .map_err(|_| Error::InvalidParameter(format!("bad radius '{r}'")))?,
        ),
        ["box", lo, hi] => Constraint::Box {
            lo: lo
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad bound '{lo}'")))?,
            hi: hi
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad bound '{hi}'")))?,
        },
        _ => return Err(Error::InvalidParameter(format!("unknown constraint '{s}'"))),
    };
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct StabilityRow {
    pub method: String,
    pub rho: f64,
    pub test_error: f64,
    pub marginal_error: f64,
    pub std: f64,
}

/// CSV with the fixed header `method,rho,test_error,marginal_error,std`.
pub fn rows_to_csv(rows: &[StabilityRow]) -> String {
    let mut out = String::from("method,rho,test_error,marginal_error,std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.rho, r.test_error, r.marginal_error, r.std
        ));
    }
    out
}

/// Held-out error: misclassification fraction for logistic (threshold at
/// margin 0, sign(0) = +1), mean squared error for regression.
pub fn test_error(loss: GlmLoss, theta: &[f64], d: &Dataset) -> f64 {
    let n = d.n() as f64;
    match loss {
        GlmLoss::Logistic => {
            let wrong = (0..d.n())
                .filter(|&i| {
                    let u = crate::math::dot(d.row(i), theta);
                    let pred = if u >= 0.0 { 1.0 } else { -1.0 };
                    pred != d.label(i)
                })
                .count();
            wrong as f64 / n
        }
        GlmLoss::Squared => {
            (0..d.n())
                .map(|i| {
                    let r = crate::math::dot(d.row(i), theta) - d.label(i);
                    r * r
                })
                .sum::<f64>()
                / n
        }
    }
}

fn train_method(
    method: Method,
    cfg: &ExperimentConfig,
    d: &Dataset,
    seed: u64,
) -> Result<Vec<f64>> {
    match method {
        Method::None | Method::Dropout => {
            let rate = if method == Method::Dropout {
                cfg.dropout_rate
            } else {
                1.0
            };
            let sgd = SgdConfig::new(cfg.iterations, rate, cfg.constraint.clone(), seed);
            Ok(dropout_sgd_train(d, cfg.loss, &sgd)?.theta)
        }
        Method::L2 => l2_cv_train(d, cfg.loss, &cfg.l2_grid, cfg.iterations, seed),
        Method::DetDropout => det_dropout_train(d, cfg.loss, cfg.dropout_rate, cfg.iterations),
    }
}

/// Ridge-regularized ERM trained by full-gradient descent.
fn l2_train(d: &Dataset, loss: GlmLoss, lambda: f64, iterations: usize) -> Result<Vec<f64>> {
    let n = d.n() as f64;
    let mean_sq = d
        .rows()
        .iter()
        .map(|r| crate::math::norm2_sq(r))
        .sum::<f64>()
        / n;
    let smoothness = loss.curvature_max() * mean_sq + 2.0 * lambda;
    let obj_grad = |theta: &[f64]| {
        let mut value = 0.0;
        let mut grad: Vec<f64> = theta.iter().map(|t| 2.0 * lambda * t).collect();
        for i in 0..d.n() {
            let x = d.row(i);
            let e = loss.eval_unchecked(crate::math::dot(x, theta), d.label(i));
            value += e.value;
            for (g, &xj) in grad.iter_mut().zip(x) {
                *g += e.grad * xj / n;
            }
        }
        (value / n + lambda * crate::math::norm2_sq(theta), grad)
    };
    projected_gd(
        obj_grad,
        vec![0.0; d.p()],
        None,
        &GdOptions {
            step: 1.0 / smoothness,
            tol: 1e-9,
            max_iters: iterations,
            strict: false,
        },
    )
}

/// Pick the ridge penalty by 5-fold cross-validation over the grid, then
/// retrain on everything. Ties break toward the earliest grid entry.
fn l2_cv_train(
    d: &Dataset,
    loss: GlmLoss,
    grid: &[f64],
    iterations: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = d.n();
    let folds = 5.min(n);
    if folds < 2 || grid.len() == 1 {
        return l2_train(d, loss, grid[0], iterations);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::new(derive_seed(seed, 11), 0);
    for i in 0..n - 1 {
        let j = i + rng.index(n - i);
        order.swap(i, j);
    }
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in grid {
        let mut score = 0.0;
        for f in 0..folds {
            let held: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
            let train: Vec<usize> = order
                .iter()
                .copied()
                .enumerate()
                .filter(|(k, _)| k % folds != f)
                .map(|(_, v)| v)
                .collect();
            let train_set = d.subset(&train)?;
            let theta = l2_train(&train_set, loss, lambda, iterations)?;
            score += test_error(loss, &theta, &d.subset(&held)?);
        }
        score /= folds as f64;
        if score < best.0 {
            best = (score, lambda);
        }
    }
    l2_train(d, loss, best.1, iterations)
}

/// Full-gradient descent on the deterministic dropout risk.
fn det_dropout_train(
    d: &Dataset,
    loss: GlmLoss,
    alpha: f64,
    iterations: usize,
) -> Result<Vec<f64>> {
    let n = d.n() as f64;
    let kappa = (1.0 - alpha) / alpha;
    let mean_sq = d
        .rows()
        .iter()
        .map(|r| crate::math::norm2_sq(r))
        .sum::<f64>()
        / n;
    let smoothness = 2.0 * loss.curvature_max() * mean_sq * (1.0 + kappa) + 1.0;
    let obj_grad = |theta: &[f64]| {
        let value = deterministic_dropout_risk(theta, d, loss, alpha).expect("validated inputs");
        let grad = det_dropout_gradient(theta, d, loss, alpha);
        (value, grad)
    };
    projected_gd(
        obj_grad,
        vec![0.0; d.p()],
        None,
        &GdOptions {
            step: 1.0 / smoothness,
            tol: 1e-9,
            max_iters: iterations,
            strict: false,
        },
    )
}

/// Gradient of [`deterministic_dropout_risk`] in theta.
pub fn det_dropout_gradient(theta: &[f64], d: &Dataset, loss: GlmLoss, alpha: f64) -> Vec<f64> {
    let n = d.n() as f64;
    let kappa = (1.0 - alpha) / alpha;
    let p = d.p();
    let mut grad = vec![0.0; p];
    match loss {
        GlmLoss::Squared => {
            for i in 0..d.n() {
                let x = d.row(i);
                let r = crate::math::dot(x, theta) - d.label(i);
                for j in 0..p {
                    grad[j] += 2.0 * r * x[j] / n;
                }
            }
            for (j, &s) in d.column_mean_squares().iter().enumerate() {
                grad[j] += 2.0 * kappa * s * theta[j];
            }
        }
        GlmLoss::Logistic => {
            let gh = crate::math::GaussHermite::new(20);
            for i in 0..d.n() {
                let x = d.row(i);
                let y = d.label(i);
                let mean = crate::math::dot(x, theta);
                let var: f64 = kappa * x.iter().zip(theta).map(|(v, t)| v * v * t * t).sum::<f64>();
                if var > 0.0 {
                    let sd = var.sqrt();
                    let d_mean =
                        gh.expect(0.0, 1.0, |z| loss.eval_unchecked(mean + sd * z, y).grad);
                    let d_sd =
                        gh.expect(0.0, 1.0, |z| z * loss.eval_unchecked(mean + sd * z, y).grad);
                    for j in 0..p {
                        let dsd_dtheta = kappa * x[j] * x[j] * theta[j] / sd;
                        grad[j] += (d_mean * x[j] + d_sd * dsd_dtheta) / n;
                    }
                } else {
                    let g = loss.eval_unchecked(mean, y).grad;
                    for j in 0..p {
                        grad[j] += g * x[j] / n;
                    }
                }
            }
        }
    }
    grad
}

fn cell_seed(base: u64, method_index: usize, repeat: usize) -> u64 {
    derive_seed(
        derive_seed(base, 0x7a00 + method_index as u64),
        repeat as u64,
    )
}

fn removal_seed(base: u64, rho_index: usize, repeat: usize) -> u64 {
    derive_seed(derive_seed(base, 0x5e00 + rho_index as u64), repeat as u64)
}

/// Run the full (method x rho x repeat) grid and aggregate.
///
/// Per method and repeat, a baseline model is trained on the full training
/// split; every cell at the same repeat reuses the baseline's training
/// seed, so a rho = 0 row reproduces the baseline exactly and its marginal
/// error is 0. Removal subsets are shared across methods. Adversarial
/// removal ranks rows by the method's own baseline model.
pub fn run_stability_experiment(cfg: &ExperimentConfig) -> Result<Vec<StabilityRow>> {
    cfg.validate()?;
    let data = cfg.source.load()?;
    run_stability_experiment_on(cfg, &data)
}

pub fn run_stability_experiment_on(
    cfg: &ExperimentConfig,
    data: &Dataset,
) -> Result<Vec<StabilityRow>> {
    cfg.validate()?;
    let n = data.n();
    let train_count = (n as f64 * cfg.train_fraction).floor() as usize;
    if train_count == 0 || train_count == n {
        return Err(Error::Data(format!(
            "train fraction {} leaves an empty split on {n} rows",
            cfg.train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::new(derive_seed(cfg.seed, 9), 0);
    for i in 0..n - 1 {
        let j = i + rng.index(n - i);
        order.swap(i, j);
    }
    let mut train_idx: Vec<usize> = order[..train_count].to_vec();
    train_idx.sort_unstable();
    let mut test_idx: Vec<usize> = order[train_count..].to_vec();
    test_idx.sort_unstable();
    let train = data.subset(&train_idx)?;
    let test = data.subset(&test_idx)?;

    // baselines: per (method, repeat)
    let baseline_jobs: Vec<(usize, usize)> = (0..cfg.methods.len())
        .flat_map(|mi| (0..cfg.repeats).map(move |r| (mi, r)))
        .collect();
    let baselines: Vec<(Vec<f64>, f64)> = baseline_jobs
        .par_iter()
        .map(|&(mi, r)| {
            let theta = train_method(cfg.methods[mi], cfg, &train, cell_seed(cfg.seed, mi, r))?;
            let err = test_error(cfg.loss, &theta, &test);
            Ok((theta, err))
        })
        .collect::<Result<_>>()?;
    let baseline = |mi: usize, r: usize| &baselines[mi * cfg.repeats + r];

    // cells: per (method, rho, repeat)
    let cell_jobs: Vec<(usize, usize, usize)> = (0..cfg.methods.len())
        .flat_map(|mi| {
            (0..cfg.rhos.len()).flat_map(move |ri| (0..cfg.repeats).map(move |r| (mi, ri, r)))
        })
        .collect();
    let cells: Vec<(f64, f64)> = cell_jobs
        .par_iter()
        .map(|&(mi, ri, r)| {
            let rho = cfg.rhos[ri];
            let reduced = match cfg.removal {
                RemovalMode::Random => random_removal(&train, rho, removal_seed(cfg.seed, ri, r))?,
                RemovalMode::Adversarial => adversarial_removal(&train, rho, &baseline(mi, r).0)?,
            };
            let theta = train_method(cfg.methods[mi], cfg, &reduced, cell_seed(cfg.seed, mi, r))?;
            let err = test_error(cfg.loss, &theta, &test);
            Ok((err, (err - baseline(mi, r).1).abs()))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(cfg.methods.len() * cfg.rhos.len());
    for mi in 0..cfg.methods.len() {
        for ri in 0..cfg.rhos.len() {
            let start = (mi * cfg.rhos.len() + ri) * cfg.repeats;
            let slice = &cells[start..start + cfg.repeats];
            let k = cfg.repeats as f64;
            let mean_err = slice.iter().map(|c| c.0).sum::<f64>() / k;
            let mean_marginal = slice.iter().map(|c| c.1).sum::<f64>() / k;
            let std = if cfg.repeats > 1 {
                (slice
                    .iter()
                    .map(|c| (c.0 - mean_err) * (c.0 - mean_err))
                    .sum::<f64>()
                    / (k - 1.0))
                    .sqrt()
            } else {
                0.0
            };
            rows.push(StabilityRow {
                method: cfg.methods[mi].name().to_string(),
                rho: cfg.rhos[ri],
                test_error: mean_err,
                marginal_error: mean_marginal,
                std,
            });
        }
    }
    Ok(rows)
}
