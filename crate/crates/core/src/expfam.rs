//! The four exponential families used for model layers, weight priors and
//! variational factors: gamma, Poisson, Bernoulli and normal.
//!
//! Every density carries its full normalizing constant (base measure
//! included), so log-likelihoods and perplexities are absolute.
//!
//! Parameterizations are explicit. Model gamma layers use (shape, rate) while
//! gamma variational factors use (shape, scale); Poisson model layers use
//! the natural parameter while Poisson variational factors use the mean.
//! Converting between them is always an explicit call.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, Normal as NormalDist, Poisson as PoissonDist};
use serde::{Deserialize, Serialize};

use crate::error::{DefError, Result};
use crate::math::{
    digamma, gamma_floor_log_mass, gamma_floor_log_mass_grad, ln_factorial, ln_gamma, logistic,
    softplus, GAMMA_SAMPLE_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gamma,
    Poisson,
    Bernoulli,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    PositiveReal,
    NonnegInteger,
    Binary,
    Real,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Gamma,
        Family::Poisson,
        Family::Bernoulli,
        Family::Normal,
    ];

    pub fn support(self) -> Support {
        match self {
            Family::Gamma => Support::PositiveReal,
            Family::Poisson => Support::NonnegInteger,
            Family::Bernoulli => Support::Binary,
            Family::Normal => Support::Real,
        }
    }

    /// Dimension of the natural parameter (and sufficient statistic).
    pub fn n_natural(self) -> usize {
        match self {
            Family::Gamma | Family::Normal => 2,
            Family::Poisson | Family::Bernoulli => 1,
        }
    }

    pub fn check_support(self, z: f64) -> Result<()> {
        let ok = match self.support() {
            Support::PositiveReal => z.is_finite() && z > 0.0,
            Support::NonnegInteger => z.is_finite() && z >= 0.0 && z.fract() == 0.0,
            Support::Binary => z == 0.0 || z == 1.0,
            Support::Real => z.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(DefError::Domain(format!(
                "{z} is outside the support of {self}"
            )))
        }
    }

    /// Sufficient statistics T(z). Gamma: (log z, z); normal: (z, z²).
    pub fn sufficient_stats(self, z: f64) -> Vec<f64> {
        match self {
            Family::Gamma => vec![z.ln(), z],
            Family::Poisson | Family::Bernoulli => vec![z],
            Family::Normal => vec![z, z * z],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Family::Gamma => "gamma",
            Family::Poisson => "poisson",
            Family::Bernoulli => "bernoulli",
            Family::Normal => "normal",
        };
        f.write_str(name)
    }
}

/// Raw, unvalidated parameter values with their declared parameterization.
///
/// Wrap in [`FamilyParams`] to use them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "param", rename_all = "snake_case")]
pub enum Params {
    GammaRate { shape: f64, rate: f64 },
    GammaScale { shape: f64, scale: f64 },
    PoissonMean { mean: f64 },
    PoissonNatural { eta: f64 },
    Bernoulli { eta: f64 },
    Normal { mean: f64, variance: f64 },
}

/// Validated distribution parameters. Positivity and finiteness hold for
/// every value of this type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Params", into = "Params")]
pub struct FamilyParams(Params);

impl TryFrom<Params> for FamilyParams {
    type Error = DefError;

    fn try_from(p: Params) -> Result<Self> {
        FamilyParams::new(p)
    }
}

impl From<FamilyParams> for Params {
    fn from(p: FamilyParams) -> Params {
        p.0
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(DefError::Parameter(format!(
            "{name} must be finite and > 0, got {v}"
        )))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DefError::Parameter(format!(
            "{name} must be finite, got {v}"
        )))
    }
}

impl FamilyParams {
    pub fn new(p: Params) -> Result<Self> {
        match p {
            Params::GammaRate { shape, rate } => {
                positive("gamma shape", shape)?;
                positive("gamma rate", rate)?;
            }
            Params::GammaScale { shape, scale } => {
                positive("gamma shape", shape)?;
                positive("gamma scale", scale)?;
            }
            Params::PoissonMean { mean } => positive("poisson mean", mean)?,
            Params::PoissonNatural { eta } => {
                finite("poisson natural parameter", eta)?;
                if !eta.exp().is_finite() {
                    return Err(DefError::Parameter(format!(
                        "poisson natural parameter {eta} overflows the mean"
                    )));
                }
            }
            Params::Bernoulli { eta } => finite("bernoulli natural parameter", eta)?,
            Params::Normal { mean, variance } => {
                finite("normal mean", mean)?;
                positive("normal variance", variance)?;
            }
        }
        Ok(FamilyParams(p))
    }

    pub fn gamma_rate(shape: f64, rate: f64) -> Result<Self> {
        Self::new(Params::GammaRate { shape, rate })
    }

    pub fn gamma_scale(shape: f64, scale: f64) -> Result<Self> {
        Self::new(Params::GammaScale { shape, scale })
    }

    pub fn poisson_mean(mean: f64) -> Result<Self> {
        Self::new(Params::PoissonMean { mean })
    }

    pub fn poisson_natural(eta: f64) -> Result<Self> {
        Self::new(Params::PoissonNatural { eta })
    }

    pub fn bernoulli(eta: f64) -> Result<Self> {
        Self::new(Params::Bernoulli { eta })
    }

    pub fn normal(mean: f64, variance: f64) -> Result<Self> {
        Self::new(Params::Normal { mean, variance })
    }

    pub fn params(&self) -> Params {
        self.0
    }

    pub fn family(&self) -> Family {
        match self.0 {
            Params::GammaRate { .. } | Params::GammaScale { .. } => Family::Gamma,
            Params::PoissonMean { .. } | Params::PoissonNatural { .. } => Family::Poisson,
            Params::Bernoulli { .. } => Family::Bernoulli,
            Params::Normal { .. } => Family::Normal,
        }
    }

    /// Parameter values in declaration order.
    pub fn values(&self) -> Vec<f64> {
        match self.0 {
            Params::GammaRate { shape, rate } => vec![shape, rate],
            Params::GammaScale { shape, scale } => vec![shape, scale],
            Params::PoissonMean { mean } => vec![mean],
            Params::PoissonNatural { eta } | Params::Bernoulli { eta } => vec![eta],
            Params::Normal { mean, variance } => vec![mean, variance],
        }
    }

    /// Rebuild the same parameterization from a new value vector.
    pub fn with_values(&self, v: &[f64]) -> Result<Self> {
        let need = self.values().len();
        if v.len() != need {
            return Err(DefError::Parameter(format!(
                "expected {need} parameter values, got {}",
                v.len()
            )));
        }
        let p = match self.0 {
            Params::GammaRate { .. } => Params::GammaRate {
                shape: v[0],
                rate: v[1],
            },
            Params::GammaScale { .. } => Params::GammaScale {
                shape: v[0],
                scale: v[1],
            },
            Params::PoissonMean { .. } => Params::PoissonMean { mean: v[0] },
            Params::PoissonNatural { .. } => Params::PoissonNatural { eta: v[0] },
            Params::Bernoulli { .. } => Params::Bernoulli { eta: v[0] },
            Params::Normal { .. } => Params::Normal {
                mean: v[0],
                variance: v[1],
            },
        };
        Self::new(p)
    }

    /// Gamma in (shape, scale) form. Errors for non-gamma families.
    pub fn to_gamma_scale(&self) -> Result<Self> {
        match self.0 {
            Params::GammaRate { shape, rate } => Self::gamma_scale(shape, 1.0 / rate),
            Params::GammaScale { .. } => Ok(*self),
            _ => Err(self.wrong_family("gamma")),
        }
    }

    pub fn to_gamma_rate(&self) -> Result<Self> {
        match self.0 {
            Params::GammaScale { shape, scale } => Self::gamma_rate(shape, 1.0 / scale),
            Params::GammaRate { .. } => Ok(*self),
            _ => Err(self.wrong_family("gamma")),
        }
    }

    pub fn to_poisson_mean(&self) -> Result<Self> {
        match self.0 {
            Params::PoissonNatural { eta } => Self::poisson_mean(eta.exp()),
            Params::PoissonMean { .. } => Ok(*self),
            _ => Err(self.wrong_family("poisson")),
        }
    }

    pub fn to_poisson_natural(&self) -> Result<Self> {
        match self.0 {
            Params::PoissonMean { mean } => Self::poisson_natural(mean.ln()),
            Params::PoissonNatural { .. } => Ok(*self),
            _ => Err(self.wrong_family("poisson")),
        }
    }

    fn wrong_family(&self, want: &str) -> DefError {
        DefError::Parameter(format!("expected {want} parameters, got {}", self.family()))
    }

    /// Natural parameters: gamma (α, −β) for T = (log z, z); Poisson log λ;
    /// Bernoulli η; normal (μ/σ², −1/(2σ²)) for T = (z, z²).
    pub fn natural(&self) -> Vec<f64> {
        match self.0 {
            Params::GammaRate { shape, rate } => vec![shape, -rate],
            Params::GammaScale { shape, scale } => vec![shape, -1.0 / scale],
            Params::PoissonMean { mean } => vec![mean.ln()],
            Params::PoissonNatural { eta } | Params::Bernoulli { eta } => vec![eta],
            Params::Normal { mean, variance } => vec![mean / variance, -0.5 / variance],
        }
    }

    pub fn mean(&self) -> f64 {
        match self.0 {
            Params::GammaRate { shape, rate } => shape / rate,
            Params::GammaScale { shape, scale } => shape * scale,
            Params::PoissonMean { mean } => mean,
            Params::PoissonNatural { eta } => eta.exp(),
            Params::Bernoulli { eta } => logistic(eta),
            Params::Normal { mean, .. } => mean,
        }
    }

    pub fn variance(&self) -> f64 {
        match self.0 {
            Params::GammaRate { shape, rate } => shape / (rate * rate),
            Params::GammaScale { shape, scale } => shape * scale * scale,
            Params::PoissonMean { mean } => mean,
            Params::PoissonNatural { eta } => eta.exp(),
            Params::Bernoulli { eta } => {
                let p = logistic(eta);
                p * (1.0 - p)
            }
            Params::Normal { variance, .. } => variance,
        }
    }
}

/// Gradient with respect to a parameter vector of length 1 or 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGrad {
    len: usize,
    vals: [f64; 2],
}

impl ParamGrad {
    pub fn one(a: f64) -> Self {
        ParamGrad {
            len: 1,
            vals: [a, 0.0],
        }
    }

    pub fn two(a: f64, b: f64) -> Self {
        ParamGrad {
            len: 2,
            vals: [a, b],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vals[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl std::ops::Index<usize> for ParamGrad {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.as_slice()[i]
    }
}

/// log p(z) including all normalizing constants.
pub fn log_density(params: &FamilyParams, z: f64) -> Result<f64> {
    params.family().check_support(z)?;
    Ok(match params.0 {
        Params::GammaRate { shape, rate } if z <= GAMMA_SAMPLE_FLOOR => {
            gamma_floor_log_mass(shape, rate.ln())
        }
        Params::GammaScale { shape, scale } if z <= GAMMA_SAMPLE_FLOOR => {
            gamma_floor_log_mass(shape, -scale.ln())
        }
        Params::GammaRate { shape, rate } => {
            shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * z.ln() - rate * z
        }
        Params::GammaScale { shape, scale } => {
            -shape * scale.ln() - ln_gamma(shape) + (shape - 1.0) * z.ln() - z / scale
        }
        Params::PoissonMean { mean } => z * mean.ln() - mean - ln_factorial(z),
        Params::PoissonNatural { eta } => eta * z - eta.exp() - ln_factorial(z),
        Params::Bernoulli { eta } => -softplus(-(2.0 * z - 1.0) * eta),
        Params::Normal { mean, variance } => {
            let d = z - mean;
            -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - d * d / (2.0 * variance)
        }
    })
}

/// Gradient of [`log_density`] with respect to the declared parameters.
pub fn score(params: &FamilyParams, z: f64) -> Result<ParamGrad> {
    params.family().check_support(z)?;
    Ok(match params.0 {
        Params::GammaRate { shape, rate } if z <= GAMMA_SAMPLE_FLOOR => {
            let (ds, dl) = gamma_floor_log_mass_grad(shape, rate.ln());
            ParamGrad::two(ds, dl / rate)
        }
        Params::GammaScale { shape, scale } if z <= GAMMA_SAMPLE_FLOOR => {
            let (ds, dl) = gamma_floor_log_mass_grad(shape, -scale.ln());
            ParamGrad::two(ds, -dl / scale)
        }
        Params::GammaRate { shape, rate } => {
            ParamGrad::two(rate.ln() - digamma(shape) + z.ln(), shape / rate - z)
        }
        Params::GammaScale { shape, scale } => ParamGrad::two(
            -digamma(shape) - scale.ln() + z.ln(),
            -shape / scale + z / (scale * scale),
        ),
        Params::PoissonMean { mean } => ParamGrad::one(-1.0 + z / mean),
        Params::PoissonNatural { eta } => ParamGrad::one(z - eta.exp()),
        Params::Bernoulli { eta } => {
            let s = 2.0 * z - 1.0;
            ParamGrad::one(s * logistic(-s * eta))
        }
        Params::Normal { mean, variance } => {
            let d = z - mean;
            ParamGrad::two(
                d / variance,
                -0.5 / variance + d * d / (2.0 * variance * variance),
            )
        }
    })
}

/// Draw one value. Gamma draws are floored at [`GAMMA_SAMPLE_FLOOR`] so their
/// logarithm stays finite; [`log_density`] gives the floor the lower tail mass.
pub fn sample<R: Rng + ?Sized>(params: &FamilyParams, rng: &mut R) -> Result<f64> {
    Ok(match params.0 {
        Params::GammaRate { shape, rate } => sample_gamma(shape, 1.0 / rate, rng)?,
        Params::GammaScale { shape, scale } => sample_gamma(shape, scale, rng)?,
        Params::PoissonMean { mean } => sample_poisson(mean, rng)?,
        Params::PoissonNatural { eta } => sample_poisson(eta.exp(), rng)?,
        Params::Bernoulli { eta } => {
            if rng.random::<f64>() < logistic(eta) {
                1.0
            } else {
                0.0
            }
        }
        Params::Normal { mean, variance } => NormalDist::new(mean, variance.sqrt())
            .map_err(|e| DefError::Parameter(e.to_string()))?
            .sample(rng),
    })
}

/// Gamma(shape, scale). Below shape 1 we draw at shape + 1 and apply the
/// power correction `u^(1/shape)` in log space.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    Ok(GammaSampler::new(shape, scale)?.sample(rng))
}

/// Reusable gamma sampler; see [`sample_gamma`].
#[derive(Debug, Clone, Copy)]
pub struct GammaSampler {
    base: GammaDist<f64>,
    inv_shape: Option<f64>,
    ln_scale: f64,
}

impl GammaSampler {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        positive("gamma shape", shape)?;
        positive("gamma scale", scale)?;
        let boosted = shape < 1.0;
        let base = GammaDist::new(if boosted { shape + 1.0 } else { shape }, 1.0)
            .map_err(|e| DefError::Parameter(e.to_string()))?;
        Ok(GammaSampler {
            base,
            inv_shape: boosted.then(|| 1.0 / shape),
            ln_scale: scale.ln(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = self.base.sample(rng);
        let mut ln_z = g.ln() + self.ln_scale;
        if let Some(inv) = self.inv_shape {
            // open interval (0, 1]
            let u = 1.0 - rng.random::<f64>();
            ln_z += u.ln() * inv;
        }
        ln_z.exp().max(GAMMA_SAMPLE_FLOOR)
    }
}

fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<f64> {
    let d = PoissonDist::new(mean).map_err(|e| DefError::Parameter(e.to_string()))?;
    Ok(d.sample(rng))
}

/// E[T(z)] = ∇a(η), the gradient of the log-normalizer at natural
/// parameters `natural` (layout as in [`FamilyParams::natural`]).
pub fn mean_sufficient_stats(family: Family, natural: &[f64]) -> Result<Vec<f64>> {
    if natural.len() != family.n_natural() {
        return Err(DefError::Domain(format!(
            "{family} takes {} natural parameters, got {}",
            family.n_natural(),
            natural.len()
        )));
    }
    if natural.iter().any(|v| !v.is_finite()) {
        return Err(DefError::Domain(format!(
            "natural parameters {natural:?} outside the domain of {family}"
        )));
    }
    match family {
        Family::Gamma => {
            let (alpha, neg_beta) = (natural[0], natural[1]);
            if alpha <= 0.0 || neg_beta >= 0.0 {
                return Err(DefError::Domain(format!(
                    "gamma natural parameters need shape > 0 and -rate < 0, got {natural:?}"
                )));
            }
            let beta = -neg_beta;
            Ok(vec![digamma(alpha) - beta.ln(), alpha / beta])
        }
        Family::Poisson => {
            let m = natural[0].exp();
            if !m.is_finite() {
                return Err(DefError::Domain(format!(
                    "poisson natural parameter {} overflows",
                    natural[0]
                )));
            }
            Ok(vec![m])
        }
        Family::Bernoulli => Ok(vec![logistic(natural[0])]),
        Family::Normal => {
            let (e1, e2) = (natural[0], natural[1]);
            if e2 >= 0.0 {
                return Err(DefError::Domain(format!(
                    "normal second natural parameter must be < 0, got {e2}"
                )));
            }
            let variance = -0.5 / e2;
            let mean = e1 * variance;
            Ok(vec![mean, mean * mean + variance])
        }
    }
}
