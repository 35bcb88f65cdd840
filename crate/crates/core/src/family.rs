use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Canonical-link exponential family for edge values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[serde(alias = "bernoulli")]
    BernoulliLogit,
    #[serde(alias = "gaussian")]
    GaussianIdentity,
    #[serde(alias = "poisson")]
    PoissonLog,
}

impl Family {
    /// Cumulant `ψ(η)`.
    #[inline]
    pub fn cumulant(self, eta: f64) -> f64 {
        match self {
            Family::BernoulliLogit => softplus(eta),
            Family::GaussianIdentity => 0.5 * eta * eta,
            Family::PoissonLog => eta.exp(),
        }
    }

    /// Mean `ψ'(η)`, the inverse link.
    #[inline]
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::BernoulliLogit => sigmoid(eta),
            Family::GaussianIdentity => eta,
            Family::PoissonLog => eta.exp(),
        }
    }

    /// Variance function `ψ''(η)`.
    #[inline]
    pub fn variance(self, eta: f64) -> f64 {
        match self {
            Family::BernoulliLogit => {
                let m = sigmoid(eta);
                m * (1.0 - m)
            }
            Family::GaussianIdentity => 1.0,
            Family::PoissonLog => eta.exp(),
        }
    }

    /// `(ψ, ψ', ψ'')` in one call, sharing the exponential.
    #[inline]
    pub fn eval3(self, eta: f64) -> (f64, f64, f64) {
        match self {
            Family::BernoulliLogit => {
                let e = (-eta.abs()).exp();
                let (psi, mean) = if eta > 0.0 {
                    (eta + e.ln_1p(), 1.0 / (1.0 + e))
                } else {
                    (e.ln_1p(), e / (1.0 + e))
                };
                (psi, mean, mean * (1.0 - mean))
            }
            Family::GaussianIdentity => (0.5 * eta * eta, eta, 1.0),
            Family::PoissonLog => {
                let e = eta.exp();
                (e, e, e)
            }
        }
    }

    /// Canonical link `g(μ)`.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::BernoulliLogit => (mu / (1.0 - mu)).ln(),
            Family::GaussianIdentity => mu,
            Family::PoissonLog => mu.ln(),
        }
    }

    /// `sup |ψ''|` when it is finite.
    pub fn curvature_bound(self) -> Option<f64> {
        match self {
            Family::BernoulliLogit => Some(0.25),
            Family::GaussianIdentity => Some(1.0),
            Family::PoissonLog => None,
        }
    }

    /// Whether `value` is a legal observation.
    pub fn admits(self, value: f64) -> bool {
        match self {
            Family::BernoulliLogit => value == 0.0 || value == 1.0,
            Family::GaussianIdentity => value.is_finite(),
            Family::PoissonLog => value >= 0.0 && value.fract() == 0.0 && value.is_finite(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::BernoulliLogit => "bernoulli-logit",
            Family::GaussianIdentity => "gaussian-identity",
            Family::PoissonLog => "poisson-log",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bernoulli" | "bernoulli-logit" | "binary" | "logit" => Ok(Family::BernoulliLogit),
            "gaussian" | "gaussian-identity" | "normal" => Ok(Family::GaussianIdentity),
            "poisson" | "poisson-log" | "count" => Ok(Family::PoissonLog),
            other => Err(Error::InvalidArgument(format!("unknown family {other:?}"))),
        }
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
