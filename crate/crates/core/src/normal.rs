//! Standard normal density, distribution function and inverse Mills ratio,
//! with tail-safe evaluation for large negative arguments.

use libm::erfc;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Below this argument the asymptotic expansions replace direct evaluation.
const TAIL: f64 = -30.0;

pub fn pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `ln Φ(x)`.
pub fn log_cdf(x: f64) -> f64 {
    if x > TAIL {
        cdf(x).ln()
    } else {
        let x2 = x * x;
        -0.5 * x2 - 0.5 * (2.0 * std::f64::consts::PI).ln() - (-x).ln() + tail_series(x2).ln()
    }
}

/// `φ(x) / Φ(x)`.
pub fn mills(x: f64) -> f64 {
    if x > TAIL {
        pdf(x) / cdf(x)
    } else {
        -x / tail_series(x * x)
    }
}

// Φ(x) ≈ φ(x)/(-x) · (1 - 1/x² + 3/x⁴ - 15/x⁶) as x → -∞.
fn tail_series(x2: f64) -> f64 {
    1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)
}
