//! Vector primitives shared by every other module: Hadamard masking,
//! Euclidean projections, constraint sets, and Gauss-Hermite quadrature.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    norm2_sq(v).sqrt()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Binary inclusion mask with its keep-rate.
///
/// Bit `j` multiplies coordinate `j` (or hidden node `j`); the rate is the
/// probability with which each bit was (or would be) drawn as 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    bits: Vec<u8>,
    rate: f64,
}

impl DropoutMask {
    pub fn new(bits: Vec<u8>, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "mask rate must be in (0, 1], got {rate}"
            )));
        }
        if let Some(&b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidParameter(format!(
                "mask bits must be 0 or 1, got {b}"
            )));
        }
        Ok(Self { bits, rate })
    }

    /// All-ones mask at the given rate.
    pub fn ones(len: usize, rate: f64) -> Result<Self> {
        Self::new(vec![1; len], rate)
    }

    /// Draw each bit independently as 1 with probability `rate`.
    pub fn sample(len: usize, rate: f64, rng: &mut SeededRng) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "mask rate must be in (0, 1], got {rate}"
            )));
        }
        Ok(Self {
            bits: (0..len).map(|_| rng.bit(rate)).collect(),
            rate,
        })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Componentwise product `x[j] * b[j]`.
pub fn hadamard(x: &[f64], mask: &DropoutMask) -> Result<Vec<f64>> {
    if x.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: mask.len(),
        });
    }
    Ok(x.iter()
        .zip(mask.bits())
        .map(|(v, &b)| v * b as f64)
        .collect())
}

/// `sum_j theta[j] * x[j] * bits[j]` without allocating the masked vector.
#[inline]
pub fn masked_dot(theta: &[f64], x: &[f64], bits: &[u8]) -> f64 {
    debug_assert_eq!(theta.len(), x.len());
    debug_assert_eq!(theta.len(), bits.len());
    theta
        .iter()
        .zip(x)
        .zip(bits)
        .map(|((t, v), &b)| t * v * b as f64)
        .sum()
}

/// Euclidean projection onto the probability simplex, by sort-and-threshold.
///
/// Output satisfies sum = 1 and min >= 0 up to rounding; idempotent.
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| {
        b.partial_cmp(a)
            .expect("non-finite entry in projection input")
    });
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &val) in sorted.iter().enumerate() {
        cumsum += val;
        let cand = (cumsum - 1.0) / (k + 1) as f64;
        if val - cand > 0.0 {
            tau = cand;
        }
    }
    Ok(v.iter().map(|&x| (x - tau).max(0.0)).collect())
}

/// Euclidean projection onto the L2 ball of the given radius.
pub fn project_l2_ball(v: &[f64], radius: f64) -> Result<Vec<f64>> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "ball radius must be positive, got {radius}"
        )));
    }
    let n = norm2(v);
    if n <= radius {
        Ok(v.to_vec())
    } else {
        let s = radius / n;
        Ok(v.iter().map(|x| x * s).collect())
    }
}

/// Convex constraint set for model parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Constraint {
    /// {theta : theta_j >= 0, sum theta_j = 1}
    Simplex,
    /// {theta : ||theta||_2 <= radius}; an infinite radius disables projection.
    L2Ball(f64),
    /// Uniform box [lo, hi]^p.
    Box { lo: f64, hi: f64 },
}

impl Constraint {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Constraint::Simplex => Ok(()),
            Constraint::L2Ball(r) if r > 0.0 => Ok(()),
            Constraint::L2Ball(r) => Err(Error::InvalidParameter(format!(
                "ball radius must be positive, got {r}"
            ))),
            Constraint::Box { lo, hi } if lo.is_finite() && hi.is_finite() && lo <= hi => Ok(()),
            Constraint::Box { lo, hi } => Err(Error::InvalidParameter(format!(
                "box bounds [{lo}, {hi}] invalid"
            ))),
        }
    }

    /// Project onto the set. Assumes `validate` passed.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        match *self {
            Constraint::Simplex => project_simplex(v).expect("validated constraint"),
            Constraint::L2Ball(r) => {
                if r.is_infinite() {
                    v.to_vec()
                } else {
                    project_l2_ball(v, r).expect("validated constraint")
                }
            }
            Constraint::Box { lo, hi } => v.iter().map(|&x| x.clamp(lo, hi)).collect(),
        }
    }

    /// Largest L2 norm attainable inside the set, for a p-dimensional model.
    /// Infinite for an unbounded ball.
    pub fn radius(&self, dim: usize) -> f64 {
        match *self {
            Constraint::Simplex => 1.0,
            Constraint::L2Ball(r) => r,
            Constraint::Box { lo, hi } => (dim as f64).sqrt() * lo.abs().max(hi.abs()),
        }
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        match *self {
            Constraint::Simplex => {
                (v.iter().sum::<f64>() - 1.0).abs() <= tol && v.iter().all(|&x| x >= -tol)
            }
            Constraint::L2Ball(r) => norm2(v) <= r + tol,
            Constraint::Box { lo, hi } => v.iter().all(|&x| x >= lo - tol && x <= hi + tol),
        }
    }
}

/// Gauss-Hermite rule recast for expectations against the standard normal:
/// `E[h(Z)] ~ sum_i weights[i] * h(nodes[i])`, with weights summing to 1.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Build an n-point rule via the Golub-Welsch eigendecomposition of the
    /// Hermite Jacobi matrix.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature order must be at least 1");
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j {
                ((j as f64) / 2.0).sqrt()
            } else if j + 1 == i {
                ((i as f64) / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let eig = jacobi.symmetric_eigen();
        let mut rule: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let t = eig.eigenvalues[i];
                let v0 = eig.eigenvectors[(0, i)];
                // physicists' node t -> probabilists' node sqrt(2) t;
                // squared first components already sum to 1
                (std::f64::consts::SQRT_2 * t, v0 * v0)
            })
            .collect();
        rule.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        GaussHermite {
            nodes: rule.iter().map(|r| r.0).collect(),
            weights: rule.iter().map(|r| r.1).collect(),
        }
    }

    /// Expectation of `h` under N(mean, sd^2).
    #[inline]
    pub fn expect(&self, mean: f64, sd: f64, mut h: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * h(mean + sd * z))
            .sum()
    }
}
