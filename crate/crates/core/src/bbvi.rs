//! Black-box variational inference.
//!
//! Gradients are score-function Monte Carlo estimates in which each factor
//! is weighted by the log-joint terms of its own Markov blanket. Samples are
//! drawn in parallel from per-sample seeded substreams and reduced in sample
//! order, so results do not depend on the number of worker threads.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SparseCounts;
use crate::error::{DefError, Result};
use crate::math::{
    dot, gamma_floor_log_mass, ln_factorial, ln_gamma, softplus, GAMMA_SAMPLE_FLOOR, POSITIVE_FLOOR,
};
use crate::model::joint::{log_joint, markov_blanket_w, markov_blanket_w_entry, markov_blanket_z};
use crate::model::state::layer_values;
use crate::model::{
    DefArchitecture, DefStack, LatentState, LatentVar, LinkFunction, StackWeights, WeightBlock,
};
use crate::rng;
use crate::variational::{
    global_values, n_unconstrained, FactorRef, GlobalKind, PreparedFactor, VariationalState,
};

/// Samples evaluated per parallel round; fixed so the reduction order is
/// independent of the thread count.
const SAMPLE_GROUP: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// ρ, the fixed step scale.
    pub step_size: f64,
    pub rmsprop_window: usize,
    /// S, Monte Carlo samples per gradient.
    pub n_samples: usize,
    /// Damping added to the RMSProp denominator.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop when the validation score changes by less than this fraction
    /// between checks. 0 disables the test.
    pub convergence_threshold: f64,
    pub validation_interval: usize,
    /// Local-only iterations run on the validation rows before each check.
    pub validation_local_steps: usize,
    pub validation_fraction: f64,
    /// Rows per iteration; global gradients are scaled by N / batch.
    pub batch_size: usize,
    /// Checkpoint every this many iterations; 0 disables.
    pub checkpoint_interval: usize,
    /// Abort after this many consecutive iterations with a non-finite
    /// gradient.
    pub max_skipped: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 0.2,
            rmsprop_window: 10,
            n_samples: 32,
            epsilon: 1e-6,
            max_iterations: 1000,
            convergence_threshold: 0.01,
            validation_interval: 100,
            validation_local_steps: 20,
            validation_fraction: 0.1,
            batch_size: 1,
            checkpoint_interval: 0,
            max_skipped: 100,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DefError::Config(m.into()));
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if self.rmsprop_window == 0 {
            return bad("rmsprop_window must be at least 1");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.convergence_threshold >= 0.0) {
            return bad("convergence_threshold must be nonnegative");
        }
        if self.validation_interval == 0 {
            return bad("validation_interval must be at least 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Diagonal RMSProp over a fixed set of coordinates: each coordinate keeps
/// its last `window` squared gradients.
#[derive(Debug, Clone)]
pub struct RmsProp {
    window: usize,
    squares: Vec<f64>,
    seen: Vec<u64>,
}

impl RmsProp {
    pub fn new(n_coords: usize, window: usize) -> Self {
        RmsProp {
            window,
            squares: vec![0.0; n_coords * window],
            seen: vec![0; n_coords],
        }
    }

    pub fn n_coords(&self) -> usize {
        self.seen.len()
    }

    /// Record `g` for coordinate `c` and return `ρ g / (sqrt(mean g²) + ε)`,
    /// the mean running over the last `window` gradients including `g`.
    pub fn delta(&mut self, c: usize, g: f64, step_size: f64, epsilon: f64) -> f64 {
        let w = self.window;
        let slot = (self.seen[c] % w as u64) as usize;
        self.squares[c * w + slot] = g * g;
        self.seen[c] += 1;
        let filled = (self.seen[c] as usize).min(w);
        let mean = self.squares[c * w..c * w + filled].iter().sum::<f64>() / filled as f64;
        step_size * g / (mean.sqrt() + epsilon)
    }

    /// Deltas for every coordinate.
    pub fn step(&mut self, grad: &[f64], cfg: &OptimizerConfig) -> Vec<f64> {
        assert_eq!(grad.len(), self.n_coords(), "gradient length");
        grad.iter()
            .enumerate()
            .map(|(c, &g)| self.delta(c, g, cfg.step_size, cfg.epsilon))
            .collect()
    }
}

/// A Monte Carlo gradient for one factor (or block).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mean: Vec<f64>,
    /// One gradient per sample.
    pub summands: Vec<Vec<f64>>,
    pub n_samples: usize,
}

impl GradientEstimate {
    fn from_summands(summands: Vec<Vec<f64>>) -> Self {
        let n = summands.len();
        let dim = summands.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; dim];
        for s in &summands {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        GradientEstimate {
            mean,
            summands,
            n_samples: n,
        }
    }

    /// Sample variance of the summands per coordinate.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.n_samples as f64;
        (0..self.mean.len())
            .map(|c| {
                self.summands
                    .iter()
                    .map(|s| (s[c] - self.mean[c]).powi(2))
                    .sum::<f64>()
                    / (n - 1.0).max(1.0)
            })
            .collect()
    }

    pub fn std_error(&self) -> Vec<f64> {
        self.variance()
            .iter()
            .map(|v| (v / self.n_samples as f64).sqrt())
            .collect()
    }
}

/// What a weight gradient is weighted by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blanket {
    /// Terms that contain the entry itself, minus its own log q.
    Entry,
    /// The whole block's blanket minus the block's log q, as in the
    /// per-layer update of the original algorithm.
    Block,
    /// The full log-joint minus the full log q; no Rao-Blackwellization.
    Full,
}

fn run_samples<T, F>(n_samples: usize, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut rng::Stream) -> Result<T> + Sync,
{
    let mut out = Vec::with_capacity(n_samples);
    for start in (0..n_samples).step_by(SAMPLE_GROUP) {
        let end = (start + SAMPLE_GROUP).min(n_samples);
        let group: Vec<Result<T>> = (start..end)
            .into_par_iter()
            .map(|s| f(&mut rng::substream(seed, &[s as u64])))
            .collect();
        for (i, r) in group.into_iter().enumerate() {
            out.push(r.map_err(|e| match e {
                DefError::Evaluation(m) => {
                    DefError::Evaluation(format!("sample {}: {m}", start + i))
                }
                other => other,
            })?);
        }
    }
    Ok(out)
}

/// Score-function gradient for one latent scalar, weighted by its Markov
/// blanket minus its own log q. Reference implementation built on the
/// model's blanket functions.
pub fn estimate_gradient_z<R: Rng + ?Sized>(
    arch: &DefArchitecture,
    vs: &VariationalState,
    data: &SparseCounts,
    var: LatentVar,
    n_samples: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    let f = FactorRef::latent(arch, var);
    vs.family(f)?;
    let seed = rng.random();
    let summands = run_samples(n_samples.max(1), seed, |r| {
        let state = vs.sample_q(arch, r)?;
        let z = latent_value(arch, &state, var);
        let w = markov_blanket_z(arch, data, &state, var)? - vs.log_q_factor(f, z)?;
        Ok(vs
            .score_unconstrained(f, z)?
            .iter()
            .map(|g| g * w)
            .collect())
    })?;
    Ok(GradientEstimate::from_summands(summands))
}

fn latent_value(arch: &DefArchitecture, state: &LatentState, var: LatentVar) -> f64 {
    match var {
        LatentVar::Row { n, layer, unit } => {
            layer_values(arch.stack(), &state.rows[n], layer)[unit]
        }
        LatentVar::Item { i, layer, unit } => {
            layer_values(arch.item_stack(), &state.items[i], layer)[unit]
        }
    }
}

/// Score-function gradient for entry `index` of a weight block; see
/// [`Blanket`] for the weighting.
pub fn estimate_gradient_w<R: Rng + ?Sized>(
    arch: &DefArchitecture,
    vs: &VariationalState,
    data: &SparseCounts,
    block: WeightBlock,
    index: usize,
    blanket: Blanket,
    n_samples: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    let f = FactorRef::weight(block, index);
    let kind = match f {
        FactorRef::Global { kind, .. } => kind,
        FactorRef::Row { .. } => unreachable!(),
    };
    vs.family(f)?;
    let seed = rng.random();
    let summands = run_samples(n_samples.max(1), seed, |r| {
        let state = vs.sample_q(arch, r)?;
        let vals = global_values(arch, &state, kind);
        let z = vals[index];
        let w = match blanket {
            Blanket::Entry => {
                markov_blanket_w_entry(arch, data, &state, block, index)? - vs.log_q_factor(f, z)?
            }
            Blanket::Block => {
                let mut lq = 0.0;
                for (i, &v) in vals.iter().enumerate() {
                    lq += vs.log_q_factor(FactorRef::Global { kind, index: i }, v)?;
                }
                markov_blanket_w(arch, data, &state, block)? - lq
            }
            Blanket::Full => log_joint(arch, data, &state)? - vs.log_q(arch, &state)?,
        };
        Ok(vs
            .score_unconstrained(f, z)?
            .iter()
            .map(|g| g * w)
            .collect())
    })?;
    Ok(GradientEstimate::from_summands(summands))
}

/// Log density of a conditional unit given its inner product, equal to
/// `log_density(&layer.link_params(ip)?, z)` without allocation.
#[inline]
fn conditional_log_density(link: LinkFunction, ln_gamma_shape: f64, ip: f64, z: f64) -> f64 {
    match link {
        LinkFunction::SparseGamma { shape } => {
            let rate = shape / ip.max(POSITIVE_FLOOR);
            if z <= GAMMA_SAMPLE_FLOOR {
                return gamma_floor_log_mass(shape, rate.ln());
            }
            shape * rate.ln() - ln_gamma_shape + (shape - 1.0) * z.ln() - rate * z
        }
        LinkFunction::Identity => -softplus(if z > 0.5 { -ip } else { ip }),
        LinkFunction::Log => {
            let mean = ip.max(POSITIVE_FLOOR);
            z * mean.ln() - mean - ln_factorial(z)
        }
        LinkFunction::LogSoftplus => {
            let mean = softplus(ip).max(POSITIVE_FLOOR);
            z * mean.ln() - mean - ln_factorial(z)
        }
    }
}

#[derive(Debug, Clone)]
struct LayerEval {
    link: Option<LinkFunction>,
    ln_gamma_shape: f64,
    size: usize,
    offset: usize,
}

/// Precomputed per-stack constants for fast term evaluation.
#[derive(Debug, Clone)]
struct StackEval {
    layers: Vec<LayerEval>,
    top: PreparedFactor,
    total: usize,
}

impl StackEval {
    fn new(stack: &DefStack) -> Result<Self> {
        let layers = (0..stack.depth())
            .map(|j| {
                let l = stack.layer(j);
                LayerEval {
                    link: l.link,
                    ln_gamma_shape: match l.link {
                        Some(LinkFunction::SparseGamma { shape }) => ln_gamma(shape),
                        _ => 0.0,
                    },
                    size: l.size,
                    offset: stack.layer_offset(j),
                }
            })
            .collect();
        Ok(StackEval {
            layers,
            top: PreparedFactor::from_params(stack.top_prior())?,
            total: stack.total_units(),
        })
    }

    fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Per-unit conditional log densities of a cascade into `own` and
    /// per-layer sums into `totals`.
    fn cascade_terms(&self, c: &[f64], w: &StackWeights, own: &mut [f64], totals: &mut [f64]) {
        let top = self.depth() - 1;
        for (j, l) in self.layers.iter().enumerate() {
            let mut sum = 0.0;
            for k in 0..l.size {
                let z = c[l.offset + k];
                let v = if j == top {
                    self.top.log_density(z)
                } else {
                    let a = &self.layers[j + 1];
                    let above = &c[a.offset..a.offset + a.size];
                    let b = w.intercepts[j].as_ref().map_or(0.0, |b| b[k]);
                    let ip = dot(above, w.weights[j].unit(k)) + b;
                    conditional_log_density(l.link.expect("validated"), l.ln_gamma_shape, ip, z)
                };
                own[l.offset + k] = v;
                sum += v;
            }
            totals[j] = sum;
        }
    }
}

/// Prepared priors of the weight and intercept blocks, aligned with the
/// global layout (`None` for item blocks).
fn block_priors(
    arch: &DefArchitecture,
    vs: &VariationalState,
) -> Result<Vec<Option<PreparedFactor>>> {
    vs.layout()
        .global
        .iter()
        .map(|b| {
            let p = match b.kind {
                GlobalKind::Items(_) => None,
                GlobalKind::Weights(j) => arch.stack().layer(j).weight_prior,
                GlobalKind::Intercept(j) => arch.stack().layer(j).intercept_prior(),
                GlobalKind::ItemWeights(j) => arch.item_stack().layer(j).weight_prior,
                GlobalKind::ItemIntercept(j) => arch.item_stack().layer(j).intercept_prior(),
            };
            p.map(|p| PreparedFactor::from_params(&p)).transpose()
        })
        .collect()
}

/// Fixed model-side constants shared by every sample.
#[derive(Debug, Clone)]
pub struct TermContext {
    rows: StackEval,
    items: StackEval,
    priors: Vec<Option<PreparedFactor>>,
    kinds: Vec<GlobalKind>,
}

impl TermContext {
    pub fn new(arch: &DefArchitecture, vs: &VariationalState) -> Result<Self> {
        Ok(TermContext {
            rows: StackEval::new(arch.stack())?,
            items: StackEval::new(arch.item_stack())?,
            priors: block_priors(arch, vs)?,
            kinds: vs.layout().global.iter().map(|b| b.kind).collect(),
        })
    }
}

/// Every log-joint term of one joint sample, organized for blanket
/// lookups. `state.rows[b]` is the cascade of data row `batch[b]`.
#[derive(Debug, Clone)]
pub struct SampleTerms {
    scale: f64,
    row_own: Vec<f64>,
    row_tot: Vec<f64>,
    item_own: Vec<f64>,
    item_tot: Vec<f64>,
    obs_row: Vec<f64>,
    obs_col: Vec<f64>,
    /// Prior terms per global scalar (empty for item blocks).
    priors: Vec<Vec<f64>>,
    /// Σ over cascades of each unit's conditional, per weight layer.
    unit_rows: Vec<Vec<f64>>,
    unit_items: Vec<Vec<f64>>,
}

impl SampleTerms {
    /// `scale` multiplies every row-dependent term when the terms enter a
    /// global blanket or the log-joint (N / batch size).
    pub fn compute(
        ctx: &TermContext,
        data: &SparseCounts,
        batch: &[usize],
        state: &LatentState,
        scale: f64,
    ) -> SampleTerms {
        let (rs, is) = (&ctx.rows, &ctx.items);
        let (nb, ni) = (batch.len(), state.items.len());
        let mut t = SampleTerms {
            scale,
            row_own: vec![0.0; nb * rs.total],
            row_tot: vec![0.0; nb * rs.depth()],
            item_own: vec![0.0; ni * is.total],
            item_tot: vec![0.0; ni * is.depth()],
            obs_row: vec![0.0; nb],
            obs_col: vec![0.0; ni],
            priors: Vec::with_capacity(ctx.kinds.len()),
            unit_rows: Vec::new(),
            unit_items: Vec::new(),
        };
        for (b, c) in state.rows.iter().enumerate() {
            rs.cascade_terms(
                c,
                &state.weights,
                &mut t.row_own[b * rs.total..(b + 1) * rs.total],
                &mut t.row_tot[b * rs.depth()..(b + 1) * rs.depth()],
            );
        }
        for (i, c) in state.items.iter().enumerate() {
            is.cascade_terms(
                c,
                &state.item_weights,
                &mut t.item_own[i * is.total..(i + 1) * is.total],
                &mut t.item_tot[i * is.depth()..(i + 1) * is.depth()],
            );
        }
        let k_row = rs.layers[0].size;
        let k_item = is.layers[0].size;
        for (b, &n) in batch.iter().enumerate() {
            let z = &state.rows[b][..k_row];
            let (cols, counts) = data.row(n);
            let mut next = 0;
            let mut sum = 0.0;
            for (i, item) in state.items.iter().enumerate() {
                let rate = dot(z, &item[..k_item]).max(POSITIVE_FLOOR);
                let v = if next < cols.len() && cols[next] as usize == i {
                    let x = counts[next] as f64;
                    next += 1;
                    x * rate.ln() - ln_factorial(x) - rate
                } else {
                    -rate
                };
                sum += v;
                t.obs_col[i] += v;
            }
            t.obs_row[b] = sum;
        }
        for (kind, prior) in ctx.kinds.iter().zip(&ctx.priors) {
            let vals = match (kind, prior) {
                (GlobalKind::Items(_), _) | (_, None) => Vec::new(),
                (GlobalKind::Weights(j), Some(p)) => state.weights.weights[*j]
                    .as_slice()
                    .iter()
                    .map(|&w| p.log_density(w))
                    .collect(),
                (GlobalKind::Intercept(j), Some(p)) => state.weights.intercepts[*j]
                    .as_ref()
                    .map_or(Vec::new(), |b| {
                        b.iter().map(|&w| p.log_density(w)).collect()
                    }),
                (GlobalKind::ItemWeights(j), Some(p)) => state.item_weights.weights[*j]
                    .as_slice()
                    .iter()
                    .map(|&w| p.log_density(w))
                    .collect(),
                (GlobalKind::ItemIntercept(j), Some(p)) => state.item_weights.intercepts[*j]
                    .as_ref()
                    .map_or(Vec::new(), |b| {
                        b.iter().map(|&w| p.log_density(w)).collect()
                    }),
            };
            t.priors.push(vals);
        }
        let unit_sums = |se: &StackEval, own: &[f64], n: usize| -> Vec<Vec<f64>> {
            (0..se.depth() - 1)
                .map(|j| {
                    let l = &se.layers[j];
                    let mut s = vec![0.0; l.size];
                    for c in 0..n {
                        let base = c * se.total + l.offset;
                        for (k, v) in s.iter_mut().enumerate() {
                            *v += own[base + k];
                        }
                    }
                    s
                })
                .collect()
        };
        t.unit_rows = unit_sums(rs, &t.row_own, nb);
        t.unit_items = unit_sums(is, &t.item_own, ni);
        t
    }

    /// Blanket of unit `k` of layer `j` in batch row `b`.
    pub fn blanket_row(&self, ctx: &TermContext, b: usize, j: usize, k: usize) -> f64 {
        let rs = &ctx.rows;
        let own = self.row_own[b * rs.total + rs.layers[j].offset + k];
        own + if j == 0 {
            self.obs_row[b]
        } else {
            self.row_tot[b * rs.depth() + j - 1]
        }
    }

    /// Blanket of scalar `index` of global block `block` (layout position).
    pub fn blanket_global(&self, ctx: &TermContext, block: usize, index: usize) -> f64 {
        match ctx.kinds[block] {
            GlobalKind::Items(j) => {
                let is = &ctx.items;
                let size = is.layers[j].size;
                let (i, k) = (index / size, index % size);
                let own = self.item_own[i * is.total + is.layers[j].offset + k];
                own + if j == 0 {
                    self.scale * self.obs_col[i]
                } else {
                    self.item_tot[i * is.depth() + j - 1]
                }
            }
            GlobalKind::Weights(j) => {
                let n_in = ctx.rows.layers[j + 1].size;
                self.priors[block][index] + self.scale * self.unit_rows[j][index / n_in]
            }
            GlobalKind::Intercept(j) => {
                self.priors[block][index] + self.scale * self.unit_rows[j][index]
            }
            GlobalKind::ItemWeights(j) => {
                let n_in = ctx.items.layers[j + 1].size;
                self.priors[block][index] + self.unit_items[j][index / n_in]
            }
            GlobalKind::ItemIntercept(j) => self.priors[block][index] + self.unit_items[j][index],
        }
    }

    /// Row-dependent part of the log-joint (unscaled): row cascades plus
    /// observations.
    pub fn local_log_joint(&self) -> f64 {
        self.row_tot.iter().sum::<f64>() + self.obs_row.iter().sum::<f64>()
    }

    /// log p(x, z, W) with row terms scaled.
    pub fn log_joint(&self) -> f64 {
        self.scale * self.local_log_joint()
            + self.item_tot.iter().sum::<f64>()
            + self.priors.iter().flatten().sum::<f64>()
    }
}

/// Which parameters an engine round produces gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    All,
    LocalOnly,
}

struct SampleOut {
    local: Vec<f64>,
    global: Vec<f64>,
    elbo: f64,
    local_elbo: f64,
}

/// Prepared factors and model constants for one round of samples.
struct Round<'a> {
    arch: &'a DefArchitecture,
    vs: &'a VariationalState,
    data: &'a SparseCounts,
    batch: &'a [usize],
    scale: f64,
    ctx: &'a TermContext,
    globals: Vec<Vec<PreparedFactor>>,
    rows: Vec<Vec<Vec<PreparedFactor>>>,
    target: Target,
}

impl<'a> Round<'a> {
    fn new(
        arch: &'a DefArchitecture,
        vs: &'a VariationalState,
        data: &'a SparseCounts,
        batch: &'a [usize],
        ctx: &'a TermContext,
        target: Target,
    ) -> Result<Self> {
        Ok(Round {
            arch,
            vs,
            data,
            batch,
            scale: vs.n_rows() as f64 / batch.len() as f64,
            ctx,
            globals: vs.prepare_globals()?,
            rows: batch
                .iter()
                .map(|&n| vs.prepare_row(n))
                .collect::<Result<_>>()?,
            target,
        })
    }

    fn sample(&self, r: &mut rng::Stream, with_grad: bool) -> Result<SampleOut> {
        let gvals: Vec<Vec<f64>> = self
            .globals
            .iter()
            .map(|b| b.iter().map(|f| f.sample(r)).collect())
            .collect();
        let rvals: Vec<Vec<f64>> = self
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .flat_map(|l| l.iter().map(|f| f.sample(&mut *r)).collect::<Vec<_>>())
                    .collect()
            })
            .collect();
        let state = self.vs.assemble(self.arch, gvals, rvals)?;
        let t = SampleTerms::compute(self.ctx, self.data, self.batch, &state, self.scale);
        let layout = self.vs.layout();
        let lp = layout.local_params;
        let mut local = vec![0.0; if with_grad { self.batch.len() * lp } else { 0 }];
        let mut lq_local = 0.0;
        let mut s = [0.0; 2];
        for (b, row) in self.rows.iter().enumerate() {
            let mut idx = 0;
            for (j, layer) in row.iter().enumerate() {
                let ll = &layout.local[j];
                let np = n_unconstrained(ll.family);
                for (k, f) in layer.iter().enumerate() {
                    let z = state.rows[b][idx];
                    idx += 1;
                    let lq = f.log_density(z);
                    lq_local += lq;
                    if with_grad {
                        let w = t.blanket_row(self.ctx, b, j, k) - lq;
                        f.score_u(z, &mut s);
                        let o = b * lp + ll.offset + k * np;
                        for c in 0..np {
                            local[o + c] = s[c] * w;
                        }
                    }
                }
            }
        }
        let grad_globals = with_grad && self.target == Target::All;
        let mut global = vec![
            0.0;
            if grad_globals {
                layout.global_params
            } else {
                0
            }
        ];
        let mut lq_global = 0.0;
        for (bi, (blk, fs)) in layout.global.iter().zip(&self.globals).enumerate() {
            let vals = global_values(self.arch, &state, blk.kind);
            let np = n_unconstrained(blk.family);
            for (i, (f, &z)) in fs.iter().zip(&vals).enumerate() {
                let lq = f.log_density(z);
                lq_global += lq;
                if grad_globals {
                    let w = t.blanket_global(self.ctx, bi, i) - lq;
                    f.score_u(z, &mut s);
                    let o = blk.offset + i * np;
                    for c in 0..np {
                        global[o + c] = s[c] * w;
                    }
                }
            }
        }
        Ok(SampleOut {
            local,
            global,
            elbo: t.log_joint() - self.scale * lq_local - lq_global,
            local_elbo: self.scale * (t.local_log_joint() - lq_local),
        })
    }

    fn run(&self, n_samples: usize, seed: u64, with_grad: bool) -> Result<Vec<SampleOut>> {
        run_samples(n_samples, seed, |r| self.sample(r, with_grad))
    }
}

/// A Monte Carlo ELBO value with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl ElboEstimate {
    fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        ElboEstimate {
            mean,
            std_error: (var / n).sqrt(),
            n_samples: v.len(),
        }
    }
}

fn check_rows(vs: &VariationalState, data: &SparseCounts, arch: &DefArchitecture) -> Result<()> {
    if vs.n_rows() != data.n_rows() || data.n_cols() != arch.n_items() {
        return Err(DefError::Data(format!(
            "data is {} x {}; variational state has {} rows and the model {} items",
            data.n_rows(),
            data.n_cols(),
            vs.n_rows(),
            arch.n_items()
        )));
    }
    Ok(())
}

/// E_q[log p(x, z, W) - log q(z, W)] over every row of `data`.
pub fn elbo_estimate<R: Rng + ?Sized>(
    arch: &DefArchitecture,
    vs: &VariationalState,
    data: &SparseCounts,
    n_samples: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    check_rows(vs, data, arch)?;
    let batch: Vec<usize> = (0..data.n_rows()).collect();
    let ctx = TermContext::new(arch, vs)?;
    let round = Round::new(arch, vs, data, &batch, &ctx, Target::All)?;
    let out = round.run(n_samples.max(1), rng.random(), false)?;
    Ok(ElboEstimate::from_samples(
        &out.iter().map(|o| o.elbo).collect::<Vec<_>>(),
    ))
}

/// Σ_n E_q[log p(x_n, z_n | W) - log q(z_n)] with W drawn from q: the row
/// part of the ELBO.
pub fn local_elbo<R: Rng + ?Sized>(
    arch: &DefArchitecture,
    vs: &VariationalState,
    data: &SparseCounts,
    n_samples: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    check_rows(vs, data, arch)?;
    let batch: Vec<usize> = (0..data.n_rows()).collect();
    let ctx = TermContext::new(arch, vs)?;
    let round = Round::new(arch, vs, data, &batch, &ctx, Target::LocalOnly)?;
    let out = round.run(n_samples.max(1), rng.random(), false)?;
    Ok(ElboEstimate::from_samples(
        &out.iter().map(|o| o.local_elbo).collect::<Vec<_>>(),
    ))
}

/// One line of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub elbo_estimate: f64,
    pub validation_score: Option<f64>,
    /// Seconds since the start of the run.
    pub wall_time: f64,
}

/// Hooks called during [`fit`].
pub trait FitObserver {
    fn on_record(&mut self, _record: &TraceRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _iteration: usize, _state: &VariationalState) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl FitObserver for NoObserver {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Converged,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: VariationalState,
    pub trace: Vec<TraceRecord>,
    pub stop: StopReason,
    pub skipped_iterations: usize,
}

/// Optimizer state carried across iterations.
struct Optimizer {
    local: RmsProp,
    global: RmsProp,
    skipped_in_row: usize,
    skipped: usize,
}

impl Optimizer {
    fn new(vs: &VariationalState, cfg: &OptimizerConfig) -> Self {
        Optimizer {
            local: RmsProp::new(vs.local.len(), cfg.rmsprop_window),
            global: RmsProp::new(vs.global.len(), cfg.rmsprop_window),
            skipped_in_row: 0,
            skipped: 0,
        }
    }

    /// One iteration on `batch`; returns the mean ELBO (or local ELBO)
    /// of the round's samples.
    #[allow(clippy::too_many_arguments)]
    fn iterate(
        &mut self,
        arch: &DefArchitecture,
        vs: &mut VariationalState,
        data: &SparseCounts,
        batch: &[usize],
        ctx: &TermContext,
        target: Target,
        cfg: &OptimizerConfig,
        seed: u64,
        iteration: usize,
    ) -> Result<f64> {
        let round = Round::new(arch, vs, data, batch, ctx, target)?;
        let out = round.run(cfg.n_samples, seed, true)?;
        drop(round);
        let s = cfg.n_samples as f64;
        let lp = vs.layout().local_params;
        let mut local = vec![0.0; batch.len() * lp];
        let mut global = vec![
            0.0;
            if target == Target::All {
                vs.global.len()
            } else {
                0
            }
        ];
        let mut elbo = 0.0;
        for o in &out {
            for (a, b) in local.iter_mut().zip(&o.local) {
                *a += b;
            }
            for (a, b) in global.iter_mut().zip(&o.global) {
                *a += b;
            }
            elbo += if target == Target::All {
                o.elbo
            } else {
                o.local_elbo
            };
        }
        elbo /= s;
        let finite = local.iter().chain(&global).all(|v| v.is_finite());
        if !finite {
            self.skipped += 1;
            self.skipped_in_row += 1;
            log::warn!("iteration {iteration}: non-finite gradient, skipped");
            if self.skipped_in_row > cfg.max_skipped {
                return Err(DefError::Diverged(format!(
                    "{} consecutive iterations with non-finite gradients (last at iteration {iteration})",
                    self.skipped_in_row
                )));
            }
            return Ok(f64::NAN);
        }
        self.skipped_in_row = 0;
        for (b, &n) in batch.iter().enumerate() {
            for c in 0..lp {
                let g = local[b * lp + c] / s;
                let idx = n * lp + c;
                vs.local[idx] += self.local.delta(idx, g, cfg.step_size, cfg.epsilon);
            }
        }
        for (idx, g) in global.iter().enumerate() {
            vs.global[idx] += self.global.delta(idx, g / s, cfg.step_size, cfg.epsilon);
        }
        Ok(elbo)
    }
}

fn choose_batch<R: Rng + ?Sized>(n_rows: usize, batch_size: usize, rng: &mut R) -> Vec<usize> {
    if batch_size >= n_rows {
        return (0..n_rows).collect();
    }
    let mut b = rand::seq::index::sample(rng, n_rows, batch_size).into_vec();
    b.sort_unstable();
    b
}

/// Fit a fresh variational state to `data`.
pub fn fit<R: Rng + ?Sized>(
    arch: &DefArchitecture,
    data: &SparseCounts,
    validation: Option<&SparseCounts>,
    cfg: &OptimizerConfig,
    rng: &mut R,
    observer: &mut dyn FitObserver,
) -> Result<FitResult> {
    let init = VariationalState::init(arch, data.n_rows(), rng.random())?;
    fit_from(arch, data, validation, cfg, init, rng, observer)
}

/// Continue fitting from `state`.
pub fn fit_from<R: Rng + ?Sized>(
    arch: &DefArchitecture,
    data: &SparseCounts,
    validation: Option<&SparseCounts>,
    cfg: &OptimizerConfig,
    mut state: VariationalState,
    rng: &mut R,
    observer: &mut dyn FitObserver,
) -> Result<FitResult> {
    cfg.validate()?;
    check_rows(&state, data, arch)?;
    if data.n_rows() == 0 {
        return Err(DefError::Data("no training rows".into()));
    }
    let start = Instant::now();
    let ctx = TermContext::new(arch, &state)?;
    let mut opt = Optimizer::new(&state, cfg);
    let mut trace = Vec::with_capacity(cfg.max_iterations);
    let mut val_state: Option<VariationalState> = None;
    let mut last_score: Option<f64> = None;
    let mut stop = StopReason::MaxIterations;
    let val_seed: u64 = rng.random();
    for it in 1..=cfg.max_iterations {
        let seed: u64 = rng.random();
        let batch = choose_batch(data.n_rows(), cfg.batch_size, rng);
        let elbo = opt.iterate(
            arch,
            &mut state,
            data,
            &batch,
            &ctx,
            Target::All,
            cfg,
            seed,
            it,
        )?;
        let mut validation_score = None;
        if let Some(v) = validation.filter(|v| v.n_rows() > 0) {
            if it % cfg.validation_interval == 0 {
                let vs = match val_state.take() {
                    Some(mut old) => {
                        old.global.copy_from_slice(&state.global);
                        old
                    }
                    None => state.with_new_rows(arch, v.n_rows(), val_seed),
                };
                let mut vr = rng::substream(val_seed, &[it as u64]);
                let local_cfg = OptimizerConfig {
                    max_iterations: cfg.validation_local_steps,
                    ..cfg.clone()
                };
                let vs = infer_local(arch, &vs, v, &local_cfg, &mut vr)?;
                let est = local_elbo(arch, &vs, v, cfg.n_samples, &mut vr)?;
                let score = est.mean / (v.total().max(1) as f64);
                validation_score = Some(score);
                val_state = Some(vs);
                if let Some(prev) = last_score {
                    let change = ((score - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs();
                    if change < cfg.convergence_threshold {
                        stop = StopReason::Converged;
                    }
                }
                last_score = Some(score);
            }
        }
        let rec = TraceRecord {
            iteration: it,
            elbo_estimate: elbo,
            validation_score,
            wall_time: start.elapsed().as_secs_f64(),
        };
        observer.on_record(&rec)?;
        trace.push(rec);
        if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 {
            observer.on_checkpoint(it, &state)?;
        }
        if stop == StopReason::Converged {
            log::info!("validation score converged at iteration {it}");
            break;
        }
    }
    Ok(FitResult {
        state,
        trace,
        stop,
        skipped_iterations: opt.skipped,
    })
}

/// Fit only the local factors of `observed` with the global factors of
/// `vs` frozen. Every row is updated on every iteration; the returned state
/// carries `vs`'s global parameters unchanged.
pub fn infer_local<R: Rng + ?Sized>(
    arch: &DefArchitecture,
    vs: &VariationalState,
    observed: &SparseCounts,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<VariationalState> {
    let (state, _) = infer_local_traced(arch, vs, observed, cfg, rng)?;
    Ok(state)
}

/// [`infer_local`] returning the per-iteration local ELBO trace as well.
/// If `vs` already has one local factor per row of `observed` it is used
/// as the starting point; otherwise the rows are freshly initialized.
pub fn infer_local_traced<R: Rng + ?Sized>(
    arch: &DefArchitecture,
    vs: &VariationalState,
    observed: &SparseCounts,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<(VariationalState, Vec<f64>)> {
    cfg.validate()?;
    let mut state = if vs.n_rows() == observed.n_rows() {
        vs.clone()
    } else {
        vs.with_new_rows(arch, observed.n_rows(), rng.random())
    };
    check_rows(&state, observed, arch)?;
    let mut trace = Vec::with_capacity(cfg.max_iterations);
    if observed.n_rows() == 0 {
        return Ok((state, trace));
    }
    let ctx = TermContext::new(arch, &state)?;
    let mut opt = Optimizer::new(&state, cfg);
    let batch: Vec<usize> = (0..observed.n_rows()).collect();
    for it in 1..=cfg.max_iterations {
        let seed: u64 = rng.random();
        let e = opt.iterate(
            arch,
            &mut state,
            observed,
            &batch,
            &ctx,
            Target::LocalOnly,
            cfg,
            seed,
            it,
        )?;
        trace.push(e);
    }
    Ok((state, trace))
}
