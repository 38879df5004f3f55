//! Mean-field variational family.
//!
//! Every latent scalar gets its own factor in the same family as the model
//! variable it approximates. Parameters are stored unconstrained; positive
//! ones go through [`transform`]:
//!
//! | family    | unconstrained `u`      | constrained                         |
//! |-----------|------------------------|-------------------------------------|
//! | gamma     | `(u_a, u_s)`           | shape `t(u_a)`, scale `t(u_s)`      |
//! | Poisson   | `u`                    | mean `t(u)`                         |
//! | Bernoulli | `u`                    | natural parameter `u`               |
//! | normal    | `(u_m, u_v)`           | mean `u_m`, variance `t(u_v)`       |

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal as NormalDist, Poisson as PoissonDist};
use serde::{Deserialize, Serialize};

use crate::error::{DefError, Result};
use crate::expfam::{Family, FamilyParams, GammaSampler, Params};
use crate::math::{
    digamma, gamma_floor_log_mass, gamma_floor_log_mass_grad, ln_factorial, ln_gamma, logistic,
    softplus, softplus_inv, GAMMA_SAMPLE_FLOOR, POSITIVE_FLOOR,
};
use crate::model::{
    DefArchitecture, DefStack, LatentState, LatentVar, StackWeights, WeightBlock, WeightMatrix,
};
use crate::rng;

/// Initial shape of gamma factors.
pub const INIT_GAMMA_SHAPE: f64 = 5.0;
/// Initial variance of normal factors.
pub const INIT_NORMAL_VARIANCE: f64 = 0.01;
/// Relative (positive values) or absolute (real values) init jitter.
pub const INIT_JITTER: f64 = 0.1;

/// `log(1 + exp(u))`, floored at [`POSITIVE_FLOOR`].
pub fn transform(u: f64) -> f64 {
    softplus(u).max(POSITIVE_FLOOR)
}

/// Derivative of the softplus, `1 / (1 + exp(-u))`.
pub fn transform_grad(u: f64) -> f64 {
    logistic(u)
}

/// Number of unconstrained parameters of a factor.
pub fn n_unconstrained(family: Family) -> usize {
    match family {
        Family::Gamma | Family::Normal => 2,
        Family::Poisson | Family::Bernoulli => 1,
    }
}

/// Constrained factor parameters from unconstrained values.
pub fn factor_params(family: Family, u: &[f64]) -> Result<FamilyParams> {
    if u.len() != n_unconstrained(family) || u.iter().any(|v| !v.is_finite()) {
        return Err(DefError::Parameter(format!(
            "unconstrained parameters {u:?} for a {family} factor"
        )));
    }
    match family {
        Family::Gamma => FamilyParams::gamma_scale(transform(u[0]), transform(u[1])),
        Family::Poisson => FamilyParams::poisson_mean(transform(u[0])),
        Family::Bernoulli => FamilyParams::bernoulli(u[0]),
        Family::Normal => FamilyParams::normal(u[0], transform(u[1])),
    }
}

/// Unconstrained values reproducing `p` (in any parameterization).
pub fn to_unconstrained(p: &FamilyParams) -> Result<Vec<f64>> {
    Ok(match p.family() {
        Family::Gamma => {
            let v = p.to_gamma_scale()?.values();
            vec![softplus_inv(v[0]), softplus_inv(v[1])]
        }
        Family::Poisson => vec![softplus_inv(p.to_poisson_mean()?.values()[0])],
        Family::Bernoulli => vec![p.values()[0]],
        Family::Normal => {
            let v = p.values();
            vec![v[0], softplus_inv(v[1])]
        }
    })
}

/// A factor (or fixed prior) with its constants precomputed, for fast
/// repeated sampling and evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PreparedFactor {
    kind: Prepared,
    /// d(constrained)/d(unconstrained) per coordinate.
    jac: [f64; 2],
}

#[derive(Debug, Clone, Copy)]
enum Prepared {
    Gamma {
        shape: f64,
        scale: f64,
        /// `-ln Γ(a) - a ln θ`
        norm: f64,
        /// `-ψ(a) - ln θ`
        psi: f64,
        sampler: GammaSampler,
    },
    Poisson {
        mean: f64,
        ln_mean: f64,
        sampler: PoissonDist<f64>,
    },
    Bernoulli {
        eta: f64,
        p: f64,
    },
    Normal {
        mean: f64,
        variance: f64,
        norm: f64,
        sampler: NormalDist<f64>,
    },
}

impl PreparedFactor {
    /// Prepare a density; the Jacobian is the identity.
    pub fn from_params(p: &FamilyParams) -> Result<Self> {
        let kind = match p.params() {
            Params::GammaRate { .. } | Params::GammaScale { .. } => {
                let v = p.to_gamma_scale()?.values();
                let (shape, scale) = (v[0], v[1]);
                let ln_scale = scale.ln();
                Prepared::Gamma {
                    shape,
                    scale,
                    norm: -ln_gamma(shape) - shape * ln_scale,
                    psi: -digamma(shape) - ln_scale,
                    sampler: GammaSampler::new(shape, scale)?,
                }
            }
            Params::PoissonMean { .. } | Params::PoissonNatural { .. } => {
                let mean = p.to_poisson_mean()?.values()[0];
                Prepared::Poisson {
                    mean,
                    ln_mean: mean.ln(),
                    sampler: PoissonDist::new(mean)
                        .map_err(|e| DefError::Parameter(format!("Poisson mean {mean}: {e}")))?,
                }
            }
            Params::Bernoulli { eta } => Prepared::Bernoulli {
                eta,
                p: logistic(eta),
            },
            Params::Normal { mean, variance } => Prepared::Normal {
                mean,
                variance,
                norm: -0.5 * (2.0 * std::f64::consts::PI * variance).ln(),
                sampler: NormalDist::new(mean, variance.sqrt())
                    .map_err(|e| DefError::Parameter(e.to_string()))?,
            },
        };
        Ok(PreparedFactor {
            kind,
            jac: [1.0, 1.0],
        })
    }

    /// Prepare a variational factor from unconstrained values.
    pub fn from_unconstrained(family: Family, u: &[f64]) -> Result<Self> {
        let mut f = PreparedFactor::from_params(&factor_params(family, u)?)?;
        f.jac = match family {
            Family::Gamma => [transform_grad(u[0]), transform_grad(u[1])],
            Family::Poisson => [transform_grad(u[0]), 1.0],
            Family::Bernoulli => [1.0, 1.0],
            Family::Normal => [1.0, transform_grad(u[1])],
        };
        Ok(f)
    }

    pub fn family(&self) -> Family {
        match self.kind {
            Prepared::Gamma { .. } => Family::Gamma,
            Prepared::Poisson { .. } => Family::Poisson,
            Prepared::Bernoulli { .. } => Family::Bernoulli,
            Prepared::Normal { .. } => Family::Normal,
        }
    }

    pub fn mean(&self) -> f64 {
        match self.kind {
            Prepared::Gamma { shape, scale, .. } => shape * scale,
            Prepared::Poisson { mean, .. } | Prepared::Normal { mean, .. } => mean,
            Prepared::Bernoulli { p, .. } => p,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.kind {
            Prepared::Gamma { sampler, .. } => sampler.sample(rng),
            Prepared::Poisson { sampler, .. } => sampler.sample(rng),
            Prepared::Bernoulli { p, .. } => {
                if rng.random::<f64>() < *p {
                    1.0
                } else {
                    0.0
                }
            }
            Prepared::Normal { sampler, .. } => sampler.sample(rng),
        }
    }

    /// Log density at `z`, which must lie in the support.
    #[inline]
    pub fn log_density(&self, z: f64) -> f64 {
        match self.kind {
            Prepared::Gamma { shape, scale, .. } if z <= GAMMA_SAMPLE_FLOOR => {
                gamma_floor_log_mass(shape, -scale.ln())
            }
            Prepared::Gamma {
                shape, scale, norm, ..
            } => norm + (shape - 1.0) * z.ln() - z / scale,
            Prepared::Poisson { mean, ln_mean, .. } => z * ln_mean - mean - ln_factorial(z),
            Prepared::Bernoulli { eta, .. } => -softplus(if z > 0.5 { -eta } else { eta }),
            Prepared::Normal {
                mean,
                variance,
                norm,
                ..
            } => {
                let d = z - mean;
                norm - d * d / (2.0 * variance)
            }
        }
    }

    /// Score with respect to the unconstrained parameters (the constrained
    /// score times the Jacobian). Writes `n_unconstrained` values.
    #[inline]
    pub fn score_u(&self, z: f64, out: &mut [f64]) {
        match self.kind {
            Prepared::Gamma { shape, scale, .. } if z <= GAMMA_SAMPLE_FLOOR => {
                let (ds, dl) = gamma_floor_log_mass_grad(shape, -scale.ln());
                out[0] = ds * self.jac[0];
                out[1] = -dl / scale * self.jac[1];
            }
            Prepared::Gamma {
                shape, scale, psi, ..
            } => {
                out[0] = (psi + z.ln()) * self.jac[0];
                out[1] = (-shape / scale + z / (scale * scale)) * self.jac[1];
            }
            Prepared::Poisson { mean, .. } => out[0] = (-1.0 + z / mean) * self.jac[0],
            Prepared::Bernoulli { p, .. } => out[0] = z - p,
            Prepared::Normal { mean, variance, .. } => {
                let d = z - mean;
                out[0] = d / variance;
                out[1] = (-0.5 / variance + d * d / (2.0 * variance * variance)) * self.jac[1];
            }
        }
    }
}

/// Shared-variable blocks of the variational state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalKind {
    /// Row-stack weight matrix `j`; scalar `k * n_inputs + a`.
    Weights(usize),
    Intercept(usize),
    /// Layer `j` of every item cascade; scalar `i * size_j + k`. For
    /// bag-of-words models `Items(0)` holds W0.
    Items(usize),
    ItemWeights(usize),
    ItemIntercept(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBlock {
    pub kind: GlobalKind,
    pub family: Family,
    /// Number of scalars.
    pub len: usize,
    /// Offset of the first parameter in the global vector.
    pub offset: usize,
}

impl GlobalBlock {
    pub fn n_params(&self) -> usize {
        self.len * n_unconstrained(self.family)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalLayer {
    pub family: Family,
    pub size: usize,
    /// Offset inside one row's parameter vector.
    pub offset: usize,
}

/// Where every factor's parameters live.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub local: Vec<LocalLayer>,
    /// Parameters per data row.
    pub local_params: usize,
    pub global: Vec<GlobalBlock>,
    pub global_params: usize,
}

impl Layout {
    pub fn new(arch: &DefArchitecture) -> Self {
        let mut local = Vec::new();
        let mut off = 0;
        for l in arch.stack().layers() {
            local.push(LocalLayer {
                family: l.family,
                size: l.size,
                offset: off,
            });
            off += l.size * n_unconstrained(l.family);
        }
        let local_params = off;
        let mut global = Vec::new();
        let mut off = 0;
        let mut push = |kind, family, len| {
            global.push(GlobalBlock {
                kind,
                family,
                len,
                offset: off,
            });
            off += len * n_unconstrained(family);
        };
        for (stack, is_items) in [(arch.stack(), false), (arch.item_stack(), true)] {
            if is_items {
                for j in 0..stack.depth() {
                    push(
                        GlobalKind::Items(j),
                        stack.layer(j).family,
                        arch.n_items() * stack.layer(j).size,
                    );
                }
            }
            for j in 0..stack.n_weight_layers() {
                let l = stack.layer(j);
                let prior = l.weight_prior.expect("validated stack");
                let (w, b) = if is_items {
                    (GlobalKind::ItemWeights(j), GlobalKind::ItemIntercept(j))
                } else {
                    (GlobalKind::Weights(j), GlobalKind::Intercept(j))
                };
                push(w, prior.family(), l.size * stack.layer(j + 1).size);
                if let Some(p) = l.intercept_prior() {
                    push(b, p.family(), l.size);
                }
            }
        }
        Layout {
            local,
            local_params,
            global,
            global_params: off,
        }
    }

    pub fn block(&self, kind: GlobalKind) -> Option<&GlobalBlock> {
        self.global.iter().find(|b| b.kind == kind)
    }

    pub fn block_index(&self, kind: GlobalKind) -> Option<usize> {
        self.global.iter().position(|b| b.kind == kind)
    }
}

/// One variational factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorRef {
    Row { n: usize, layer: usize, unit: usize },
    Global { kind: GlobalKind, index: usize },
}

impl FactorRef {
    /// The factor of a latent scalar of the model.
    pub fn latent(arch: &DefArchitecture, var: LatentVar) -> Self {
        match var {
            LatentVar::Row { n, layer, unit } => FactorRef::Row { n, layer, unit },
            LatentVar::Item { i, layer, unit } => FactorRef::Global {
                kind: GlobalKind::Items(layer),
                index: i * arch.item_stack().layer(layer).size + unit,
            },
        }
    }

    /// Entry `index` of a model weight block (`Observation` entry `(k, i)`
    /// is index `i * K + k`).
    pub fn weight(block: WeightBlock, index: usize) -> Self {
        let kind = match block {
            WeightBlock::Observation => GlobalKind::Items(0),
            WeightBlock::Weights(j) => GlobalKind::Weights(j),
            WeightBlock::Intercept(j) => GlobalKind::Intercept(j),
            WeightBlock::ItemWeights(j) => GlobalKind::ItemWeights(j),
            WeightBlock::ItemIntercept(j) => GlobalKind::ItemIntercept(j),
        };
        FactorRef::Global { kind, index }
    }
}

/// All variational parameters: per-row local factors and shared global
/// factors, unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    layout: Layout,
    n_rows: usize,
    /// `n_rows * layout.local_params` values, row-major.
    pub local: Vec<f64>,
    pub global: Vec<f64>,
}

fn jittered_positive<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    (mean * (1.0 + rng.random_range(-INIT_JITTER..=INIT_JITTER))).max(POSITIVE_FLOOR)
}

fn init_factor<R: Rng + ?Sized>(family: Family, mean: f64, rng: &mut R, out: &mut [f64]) {
    match family {
        Family::Gamma => {
            let m = jittered_positive(mean, rng);
            out[0] = softplus_inv(INIT_GAMMA_SHAPE);
            out[1] = softplus_inv(m / INIT_GAMMA_SHAPE);
        }
        Family::Poisson => out[0] = softplus_inv(jittered_positive(mean, rng)),
        Family::Bernoulli => {
            let p = jittered_positive(mean, rng).clamp(1e-6, 1.0 - 1e-6);
            out[0] = (p / (1.0 - p)).ln();
        }
        Family::Normal => {
            out[0] = mean + rng.random_range(-INIT_JITTER..=INIT_JITTER);
            out[1] = softplus_inv(INIT_NORMAL_VARIANCE);
        }
    }
}

fn init_rows<R: Rng + ?Sized>(
    layout: &Layout,
    stack: &DefStack,
    n_rows: usize,
    rng: &mut R,
) -> Vec<f64> {
    let means = stack.prior_layer_means();
    let mut local = vec![0.0; n_rows * layout.local_params];
    for row in local.chunks_mut(layout.local_params.max(1)) {
        for (l, &m) in layout.local.iter().zip(&means) {
            let np = n_unconstrained(l.family);
            for k in 0..l.size {
                let o = l.offset + k * np;
                init_factor(l.family, m, rng, &mut row[o..o + np]);
            }
        }
    }
    local
}

impl VariationalState {
    /// Factors centred on the prior means propagated down each stack,
    /// with seeded jitter.
    pub fn init(arch: &DefArchitecture, n_rows: usize, seed: u64) -> Result<Self> {
        let layout = Layout::new(arch);
        let mut r = rng::substream(seed, &[0]);
        let mut global = vec![0.0; layout.global_params];
        let item_means = arch.item_stack().prior_layer_means();
        for b in &layout.global {
            let mean = match b.kind {
                GlobalKind::Items(j) => item_means[j],
                GlobalKind::Weights(j) => arch
                    .stack()
                    .layer(j)
                    .weight_prior
                    .expect("validated")
                    .mean(),
                GlobalKind::Intercept(j) => arch
                    .stack()
                    .layer(j)
                    .intercept_prior()
                    .expect("validated")
                    .mean(),
                GlobalKind::ItemWeights(j) => arch
                    .item_stack()
                    .layer(j)
                    .weight_prior
                    .expect("validated")
                    .mean(),
                GlobalKind::ItemIntercept(j) => arch
                    .item_stack()
                    .layer(j)
                    .intercept_prior()
                    .expect("validated")
                    .mean(),
            };
            let np = n_unconstrained(b.family);
            for s in 0..b.len {
                let o = b.offset + s * np;
                init_factor(b.family, mean, &mut r, &mut global[o..o + np]);
            }
        }
        let mut r = rng::substream(seed, &[1]);
        let local = init_rows(&layout, arch.stack(), n_rows, &mut r);
        Ok(VariationalState {
            layout,
            n_rows,
            local,
            global,
        })
    }

    /// Same global factors with freshly initialized local factors for
    /// `n_rows` new rows.
    pub fn with_new_rows(&self, arch: &DefArchitecture, n_rows: usize, seed: u64) -> Self {
        let mut r = rng::substream(seed, &[1]);
        VariationalState {
            layout: self.layout.clone(),
            n_rows,
            local: init_rows(&self.layout, arch.stack(), n_rows, &mut r),
            global: self.global.clone(),
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn row_params(&self, n: usize) -> &[f64] {
        let p = self.layout.local_params;
        &self.local[n * p..(n + 1) * p]
    }

    fn locate(&self, f: FactorRef) -> Result<(Family, bool, usize)> {
        match f {
            FactorRef::Row { n, layer, unit } => {
                let l = self
                    .layout
                    .local
                    .get(layer)
                    .filter(|l| n < self.n_rows && unit < l.size)
                    .ok_or_else(|| DefError::Index(format!("row factor ({n}, {layer}, {unit})")))?;
                let off =
                    n * self.layout.local_params + l.offset + unit * n_unconstrained(l.family);
                Ok((l.family, true, off))
            }
            FactorRef::Global { kind, index } => {
                let b = self
                    .layout
                    .block(kind)
                    .filter(|b| index < b.len)
                    .ok_or_else(|| DefError::Index(format!("global factor {kind:?}[{index}]")))?;
                Ok((
                    b.family,
                    false,
                    b.offset + index * n_unconstrained(b.family),
                ))
            }
        }
    }

    pub fn family(&self, f: FactorRef) -> Result<Family> {
        Ok(self.locate(f)?.0)
    }

    pub fn unconstrained(&self, f: FactorRef) -> Result<&[f64]> {
        let (fam, local, off) = self.locate(f)?;
        let v = if local { &self.local } else { &self.global };
        Ok(&v[off..off + n_unconstrained(fam)])
    }

    pub fn unconstrained_mut(&mut self, f: FactorRef) -> Result<&mut [f64]> {
        let (fam, local, off) = self.locate(f)?;
        let v = if local {
            &mut self.local
        } else {
            &mut self.global
        };
        Ok(&mut v[off..off + n_unconstrained(fam)])
    }

    /// Constrained parameters of one factor.
    pub fn factor(&self, f: FactorRef) -> Result<FamilyParams> {
        factor_params(self.family(f)?, self.unconstrained(f)?)
    }

    pub fn prepare(&self, f: FactorRef) -> Result<PreparedFactor> {
        PreparedFactor::from_unconstrained(self.family(f)?, self.unconstrained(f)?)
    }

    pub fn log_q_factor(&self, f: FactorRef, z: f64) -> Result<f64> {
        let p = self.prepare(f)?;
        p.family().check_support(z)?;
        Ok(p.log_density(z))
    }

    /// ∇_u log q(z) of one factor.
    pub fn score_unconstrained(&self, f: FactorRef, z: f64) -> Result<Vec<f64>> {
        let p = self.prepare(f)?;
        p.family().check_support(z)?;
        let mut out = vec![0.0; n_unconstrained(p.family())];
        p.score_u(z, &mut out);
        Ok(out)
    }

    /// Prepared global factors in layout order.
    pub fn prepare_globals(&self) -> Result<Vec<Vec<PreparedFactor>>> {
        self.layout
            .global
            .iter()
            .map(|b| {
                let np = n_unconstrained(b.family);
                (0..b.len)
                    .map(|s| {
                        let o = b.offset + s * np;
                        PreparedFactor::from_unconstrained(b.family, &self.global[o..o + np])
                    })
                    .collect()
            })
            .collect()
    }

    /// Prepared factors of row `n`, one vector per layer.
    pub fn prepare_row(&self, n: usize) -> Result<Vec<Vec<PreparedFactor>>> {
        let row = self.row_params(n);
        self.layout
            .local
            .iter()
            .map(|l| {
                let np = n_unconstrained(l.family);
                (0..l.size)
                    .map(|k| {
                        let o = l.offset + k * np;
                        PreparedFactor::from_unconstrained(l.family, &row[o..o + np])
                    })
                    .collect()
            })
            .collect()
    }

    /// Assemble a latent state from per-block values (`globals`, layout
    /// order) and per-row cascades.
    pub fn assemble(
        &self,
        arch: &DefArchitecture,
        globals: Vec<Vec<f64>>,
        rows: Vec<Vec<f64>>,
    ) -> Result<LatentState> {
        let mut weights = empty_weights(arch.stack());
        let mut item_weights = empty_weights(arch.item_stack());
        let is = arch.item_stack();
        let mut items = vec![vec![0.0; is.total_units()]; arch.n_items()];
        for (b, vals) in self.layout.global.iter().zip(globals) {
            match b.kind {
                GlobalKind::Items(j) => {
                    let (off, size) = (is.layer_offset(j), is.layer(j).size);
                    for (i, item) in items.iter_mut().enumerate() {
                        item[off..off + size].copy_from_slice(&vals[i * size..(i + 1) * size]);
                    }
                }
                GlobalKind::Weights(j) => {
                    let s = arch.stack();
                    weights.weights[j] =
                        WeightMatrix::new(s.layer(j).size, s.layer(j + 1).size, vals)?;
                }
                GlobalKind::Intercept(j) => weights.intercepts[j] = Some(vals),
                GlobalKind::ItemWeights(j) => {
                    item_weights.weights[j] =
                        WeightMatrix::new(is.layer(j).size, is.layer(j + 1).size, vals)?;
                }
                GlobalKind::ItemIntercept(j) => item_weights.intercepts[j] = Some(vals),
            }
        }
        Ok(LatentState {
            rows,
            weights,
            items,
            item_weights,
        })
    }

    /// Draw every latent variable once from q: global blocks in layout
    /// order, then rows.
    pub fn sample_q<R: Rng + ?Sized>(
        &self,
        arch: &DefArchitecture,
        rng: &mut R,
    ) -> Result<LatentState> {
        let globals: Vec<Vec<f64>> = self
            .prepare_globals()?
            .iter()
            .map(|b| b.iter().map(|f| f.sample(rng)).collect())
            .collect();
        let mut rows = Vec::with_capacity(self.n_rows);
        for n in 0..self.n_rows {
            rows.push(
                self.prepare_row(n)?
                    .iter()
                    .flat_map(|l| l.iter().map(|f| f.sample(rng)).collect::<Vec<_>>())
                    .collect(),
            );
        }
        self.assemble(arch, globals, rows)
    }

    /// Σ log q over every factor of a full latent state.
    pub fn log_q(&self, arch: &DefArchitecture, state: &LatentState) -> Result<f64> {
        state.check(arch)?;
        if state.rows.len() != self.n_rows {
            return Err(DefError::Data(format!(
                "state has {} rows, q has {}",
                state.rows.len(),
                self.n_rows
            )));
        }
        let mut total = self.log_q_global(arch, state)?;
        for n in 0..self.n_rows {
            total += self.log_q_row(n, &state.rows[n])?;
        }
        Ok(total)
    }

    /// Σ log q over the factors of row `n` at cascade `z`.
    pub fn log_q_row(&self, n: usize, z: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        let mut idx = 0;
        for layer in self.prepare_row(n)? {
            for f in layer {
                f.family().check_support(z[idx])?;
                total += f.log_density(z[idx]);
                idx += 1;
            }
        }
        Ok(total)
    }

    pub fn log_q_global(&self, arch: &DefArchitecture, state: &LatentState) -> Result<f64> {
        let mut total = 0.0;
        for (b, fs) in self.layout.global.iter().zip(self.prepare_globals()?) {
            let vals = global_values(arch, state, b.kind);
            for (f, z) in fs.iter().zip(vals) {
                f.family().check_support(z)?;
                total += f.log_density(z);
            }
        }
        Ok(total)
    }

    /// Latent state holding every factor's mean.
    pub fn mean_state(&self, arch: &DefArchitecture) -> Result<LatentState> {
        let globals = self
            .prepare_globals()?
            .iter()
            .map(|b| b.iter().map(PreparedFactor::mean).collect())
            .collect();
        let rows = (0..self.n_rows)
            .map(|n| {
                Ok(self
                    .prepare_row(n)?
                    .iter()
                    .flat_map(|l| l.iter().map(PreparedFactor::mean).collect::<Vec<_>>())
                    .collect())
            })
            .collect::<Result<_>>()?;
        self.assemble(arch, globals, rows)
    }

    /// E_q of the bottom item layer: `out[i][k]`.
    pub fn item_bottom_means(&self, arch: &DefArchitecture) -> Result<Vec<Vec<f64>>> {
        let k = arch.item_stack().bottom_size();
        let block = self
            .layout
            .block_index(GlobalKind::Items(0))
            .expect("items block");
        let b = &self.layout.global[block];
        let np = n_unconstrained(b.family);
        (0..arch.n_items())
            .map(|i| {
                (0..k)
                    .map(|u| {
                        let o = b.offset + (i * k + u) * np;
                        Ok(
                            PreparedFactor::from_unconstrained(b.family, &self.global[o..o + np])?
                                .mean(),
                        )
                    })
                    .collect()
            })
            .collect()
    }

    /// E_q of the bottom row layer of row `n`.
    pub fn row_bottom_means(&self, n: usize) -> Result<Vec<f64>> {
        Ok(self.prepare_row(n)?[0]
            .iter()
            .map(PreparedFactor::mean)
            .collect())
    }

    pub fn to_checkpoint(&self, arch: &DefArchitecture) -> Checkpoint {
        Checkpoint {
            architecture_hash: arch.hash(),
            architecture: arch.clone(),
            n_rows: self.n_rows,
            local: self.local.clone(),
            global: self.global.clone(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.architecture.hash() != c.architecture_hash {
            return Err(DefError::Checkpoint(format!(
                "architecture hash {} does not match the stored architecture ({})",
                c.architecture_hash,
                c.architecture.hash()
            )));
        }
        let layout = Layout::new(&c.architecture);
        if c.global.len() != layout.global_params || c.local.len() != c.n_rows * layout.local_params
        {
            return Err(DefError::Checkpoint(format!(
                "parameter arrays have lengths {} / {}, the architecture needs {} / {}",
                c.global.len(),
                c.local.len(),
                layout.global_params,
                c.n_rows * layout.local_params
            )));
        }
        if c.global.iter().chain(&c.local).any(|v| !v.is_finite()) {
            return Err(DefError::Checkpoint("non-finite parameter".into()));
        }
        Ok(VariationalState {
            layout,
            n_rows: c.n_rows,
            local: c.local.clone(),
            global: c.global.clone(),
        })
    }
}

fn empty_weights(stack: &DefStack) -> StackWeights {
    let n = stack.n_weight_layers();
    StackWeights {
        weights: (0..n)
            .map(|j| WeightMatrix::filled(stack.layer(j).size, stack.layer(j + 1).size, 0.0))
            .collect(),
        intercepts: vec![None; n],
    }
}

/// Values of one global block read out of a latent state, in scalar order.
pub fn global_values(arch: &DefArchitecture, state: &LatentState, kind: GlobalKind) -> Vec<f64> {
    match kind {
        GlobalKind::Items(j) => {
            let is = arch.item_stack();
            let (off, size) = (is.layer_offset(j), is.layer(j).size);
            state
                .items
                .iter()
                .flat_map(|c| c[off..off + size].iter().copied())
                .collect()
        }
        GlobalKind::Weights(j) => state.weights.weights[j].as_slice().to_vec(),
        GlobalKind::Intercept(j) => state.weights.intercepts[j].clone().unwrap_or_default(),
        GlobalKind::ItemWeights(j) => state.item_weights.weights[j].as_slice().to_vec(),
        GlobalKind::ItemIntercept(j) => {
            state.item_weights.intercepts[j].clone().unwrap_or_default()
        }
    }
}

/// Unconstrained parameters plus the architecture they belong to. Loading
/// verifies the architecture hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture_hash: String,
    pub architecture: DefArchitecture,
    pub n_rows: usize,
    pub local: Vec<f64>,
    pub global: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| DefError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DefError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Load and check that the checkpoint belongs to `arch`.
    pub fn load_for(path: &Path, arch: &DefArchitecture) -> Result<Self> {
        let c = Checkpoint::load(path)?;
        if c.architecture_hash != arch.hash() {
            return Err(DefError::Checkpoint(format!(
                "{} was written for architecture {}, expected {}",
                path.display(),
                c.architecture_hash,
                arch.hash()
            )));
        }
        Ok(c)
    }
}
