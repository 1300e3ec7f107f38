//! Gauss-Hermite evaluation of `E[b^(r)(mu + sigma Z)]`, `Z ~ N(0, 1)`, for the
//! logistic cumulant `b(x) = log(1 + e^x)`.
//!
//! The integrand `b^(r)` has complex poles at `x = ±iπ`, so a fixed rule in the
//! standardized variable loses accuracy as `sigma` grows: with `N` nodes the
//! error behaves like `exp(-2π sqrt(N) / sigma)`. The [`Quadrature`] evaluator
//! keeps the configured order while that bound is below `1e-12` and raises the
//! order (up to [`MAX_ADAPTIVE_ORDER`]) for wider integrands.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{GlmmError, Result};

pub const MAX_RULE_ORDER: usize = 100;
pub const MAX_ADAPTIVE_ORDER: usize = 200;
pub const DEFAULT_ORDER: usize = 20;

/// `-ln(1e-12)`: target log-error used when choosing the refined order.
const TARGET_LOG_ERROR: f64 = 27.631021115928547;

const SQRT_PI: f64 = 1.772_453_850_905_516;

/// Gauss-Hermite rule for the weight `exp(-x^2)` (physicists' convention).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub order: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn hermite_rule(order: usize) -> Result<QuadratureRule> {
    if order == 0 || order > MAX_RULE_ORDER {
        return Err(GlmmError::InvalidConfig(format!(
            "quadrature order must lie in 1..={MAX_RULE_ORDER}, got {order}"
        )));
    }
    Ok(build_rule(order))
}

/// Roots of the Jacobi matrix (Golub-Welsch) polished by Newton iteration on
/// the orthonormal Hermite recurrence; weights from the derivative formula.
fn build_rule(n: usize) -> QuadratureRule {
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut seeds: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    seeds.sort_by(|a, b| a.total_cmp(b));

    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    // Polish the nonnegative half and mirror.
    for i in n / 2..n {
        let mut z = seeds[i];
        let mut pp = 0.0;
        for _ in 0..100 {
            // Hermite functions (polynomials times exp(-z^2/2)) do not overflow.
            let mut p1 = PIM4 * (-0.5 * z * z).exp();
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp) * (-z * z).exp();
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    QuadratureRule {
        order: n,
        nodes: x,
        weights: w,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `b(x) = log(1 + e^x)`.
pub fn b0(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `b''(x) = s(x) s(-x)`.
pub fn b2(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

pub fn b_derivative(r: usize, x: f64) -> f64 {
    match r {
        0 => b0(x),
        1 => sigmoid(x),
        2 => b2(x),
        _ => panic!("b^(r) is only defined here for r in 0..=2"),
    }
}

/// `(1/sqrt(pi)) sum_j w_j b^(r)(mu + sigma sqrt(2) x_j)` with a fixed rule.
pub fn b_integral_fixed(r: usize, mu: f64, sigma: f64, rule: &QuadratureRule) -> f64 {
    if sigma == 0.0 {
        return b_derivative(r, mu);
    }
    let scale = sigma * std::f64::consts::SQRT_2;
    let mut acc = 0.0;
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        acc += w * b_derivative(r, mu + scale * x);
    }
    acc / SQRT_PI
}

/// Gauss-Hermite evaluator with order refinement for wide integrands.
#[derive(Debug)]
pub struct Quadrature {
    base: QuadratureRule,
    sigma_limit: f64,
    refined: Vec<OnceLock<QuadratureRule>>,
}

impl Clone for Quadrature {
    fn clone(&self) -> Self {
        Quadrature::from_rule(self.base.clone())
    }
}

impl Quadrature {
    pub fn new(order: usize) -> Result<Self> {
        Ok(Self::from_rule(hermite_rule(order)?))
    }

    fn from_rule(base: QuadratureRule) -> Self {
        let sigma_limit = 2.0 * PI * (base.order as f64).sqrt() / TARGET_LOG_ERROR;
        let refined = (0..=MAX_ADAPTIVE_ORDER).map(|_| OnceLock::new()).collect();
        Quadrature {
            base,
            sigma_limit,
            refined,
        }
    }

    pub fn order(&self) -> usize {
        self.base.order
    }

    pub fn base_rule(&self) -> &QuadratureRule {
        &self.base
    }

    /// Rule used for a given `sigma`.
    pub fn rule_for(&self, sigma: f64) -> &QuadratureRule {
        if sigma <= self.sigma_limit {
            return &self.base;
        }
        let needed = (sigma * TARGET_LOG_ERROR / (2.0 * PI)).powi(2).ceil();
        let order = if needed.is_finite() {
            (needed as usize).clamp(self.base.order, MAX_ADAPTIVE_ORDER)
        } else {
            MAX_ADAPTIVE_ORDER
        };
        if order == self.base.order {
            return &self.base;
        }
        self.refined[order].get_or_init(|| build_rule(order))
    }

    /// `E[b^(r)(mu + sigma Z)]`.
    pub fn b_integral(&self, r: usize, mu: f64, sigma: f64) -> f64 {
        b_integral_fixed(r, mu, sigma, self.rule_for(sigma))
    }

    /// `(E[b'(mu + sigma Z)], E[b''(mu + sigma Z)])` in one pass.
    pub fn b_first_second(&self, mu: f64, sigma: f64) -> (f64, f64) {
        if sigma == 0.0 {
            return (sigmoid(mu), b2(mu));
        }
        let rule = self.rule_for(sigma);
        let scale = sigma * std::f64::consts::SQRT_2;
        let (mut first, mut second) = (0.0, 0.0);
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            let t = mu + scale * x;
            let s = sigmoid(t);
            let sm = sigmoid(-t);
            first += w * s;
            second += w * s * sm;
        }
        (first / SQRT_PI, second / SQRT_PI)
    }

    pub fn b_integral_vec(&self, r: usize, mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
        if mu.len() != sigma.len() {
            return Err(GlmmError::InvalidData(format!(
                "mean and scale vectors differ in length ({} vs {})",
                mu.len(),
                sigma.len()
            )));
        }
        Ok(mu
            .iter()
            .zip(sigma)
            .map(|(&m, &s)| self.b_integral(r, m, s))
            .collect())
    }
}
