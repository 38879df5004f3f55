//! Log-joint and Markov-blanket evaluation.
//!
//! These are the reference implementations: straightforward sums over the
//! model's terms. The inference engine evaluates the same terms from
//! per-sample caches and is tested against these functions.

use crate::data::SparseCounts;
use crate::error::{DefError, Result};
use crate::expfam::{log_density, mean_sufficient_stats, FamilyParams};
use crate::math::{dot, ln_factorial, POSITIVE_FLOOR};
use crate::model::arch::{DefArchitecture, DefStack};
use crate::model::state::{layer_values, LatentState, StackWeights};

/// Parameters of unit `k` of layer `j` (bottom first, `j` below the top)
/// given the values `z_above` of layer `j + 1`.
pub fn natural_params_for_layer(
    stack: &DefStack,
    j: usize,
    z_above: &[f64],
    weights: &StackWeights,
    k: usize,
) -> Result<FamilyParams> {
    if j + 1 >= stack.depth() {
        return Err(DefError::Index(format!(
            "layer {j} has no layer above in a depth-{} stack",
            stack.depth()
        )));
    }
    let w = &weights.weights[j];
    if k >= w.n_units() || z_above.len() != w.n_inputs() {
        return Err(DefError::Index(format!(
            "unit {k} / input length {} for a {} x {} weight matrix",
            z_above.len(),
            w.n_units(),
            w.n_inputs()
        )));
    }
    let b = weights.intercepts[j].as_ref().map_or(0.0, |b| b[k]);
    stack.layer(j).link_params(dot(z_above, w.unit(k)) + b)
}

/// E[T(z)] of unit `k` of layer `j` under its conditional.
pub fn expected_activation(
    stack: &DefStack,
    j: usize,
    z_above: &[f64],
    weights: &StackWeights,
    k: usize,
) -> Result<Vec<f64>> {
    let p = natural_params_for_layer(stack, j, z_above, weights, k)?;
    mean_sufficient_stats(p.family(), &p.natural())
}

/// log p(z_{j,k} | parent layer), or the top prior for the top layer.
pub fn unit_log_density(
    stack: &DefStack,
    cascade: &[f64],
    weights: &StackWeights,
    j: usize,
    k: usize,
) -> Result<f64> {
    let z = layer_values(stack, cascade, j)[k];
    if j + 1 == stack.depth() {
        return log_density(stack.top_prior(), z);
    }
    let above = layer_values(stack, cascade, j + 1);
    let p = natural_params_for_layer(stack, j, above, weights, k)?;
    log_density(&p, z)
}

pub fn layer_log_density(
    stack: &DefStack,
    cascade: &[f64],
    weights: &StackWeights,
    j: usize,
) -> Result<f64> {
    (0..stack.layer(j).size)
        .map(|k| unit_log_density(stack, cascade, weights, j, k))
        .sum()
}

pub fn cascade_log_density(
    stack: &DefStack,
    cascade: &[f64],
    weights: &StackWeights,
) -> Result<f64> {
    (0..stack.depth())
        .map(|j| layer_log_density(stack, cascade, weights, j))
        .sum()
}

/// Prior log density of weight matrix `j`.
pub fn weights_log_prior(stack: &DefStack, weights: &StackWeights, j: usize) -> Result<f64> {
    let prior = stack.layer(j).weight_prior.expect("validated stack");
    weights.weights[j]
        .as_slice()
        .iter()
        .map(|&w| log_density(&prior, w))
        .sum()
}

pub fn intercept_log_prior(stack: &DefStack, weights: &StackWeights, j: usize) -> Result<f64> {
    match (&weights.intercepts[j], stack.layer(j).intercept_prior()) {
        (Some(b), Some(p)) => b.iter().map(|&v| log_density(&p, v)).sum(),
        _ => Ok(0.0),
    }
}

/// Poisson log-pmf of one cell; the rate is floored at [`POSITIVE_FLOOR`].
#[inline]
pub fn observation_cell(x: f64, rate: f64) -> f64 {
    let r = rate.max(POSITIVE_FLOOR);
    if x == 0.0 {
        -r
    } else {
        x * r.ln() - ln_factorial(x) - r
    }
}

/// log p(x_n | z_{n,1}, items) summed over every item, zeros included.
pub fn observation_log_lik(
    arch: &DefArchitecture,
    data: &SparseCounts,
    state: &LatentState,
    n: usize,
) -> f64 {
    let z = state.row_bottom(arch, n);
    let (cols, counts) = data.row(n);
    let mut next = 0;
    let mut total = 0.0;
    for i in 0..arch.n_items() {
        let x = if next < cols.len() && cols[next] as usize == i {
            next += 1;
            counts[next - 1] as f64
        } else {
            0.0
        };
        total += observation_cell(x, dot(z, state.item_bottom(arch, i)));
    }
    total
}

/// log p(x_{·,i} | z_{·,1}, item i) summed over rows.
pub fn observation_log_lik_item(
    arch: &DefArchitecture,
    data: &SparseCounts,
    state: &LatentState,
    i: usize,
) -> f64 {
    let w = state.item_bottom(arch, i);
    (0..data.n_rows())
        .map(|n| observation_cell(data.get(n, i) as f64, dot(state.row_bottom(arch, n), w)))
        .sum()
}

fn check_shapes(arch: &DefArchitecture, data: &SparseCounts, state: &LatentState) -> Result<()> {
    if data.n_rows() != state.rows.len() || data.n_cols() != arch.n_items() {
        return Err(DefError::Data(format!(
            "data is {} x {}, state has {} rows and the model {} items",
            data.n_rows(),
            data.n_cols(),
            state.rows.len(),
            arch.n_items()
        )));
    }
    Ok(())
}

/// log p(x, z, W): every prior, conditional and observation term once.
pub fn log_joint(arch: &DefArchitecture, data: &SparseCounts, state: &LatentState) -> Result<f64> {
    check_shapes(arch, data, state)?;
    state.check(arch)?;
    let mut total = 0.0;
    for (stack, weights, cascades) in [
        (arch.stack(), &state.weights, &state.rows),
        (arch.item_stack(), &state.item_weights, &state.items),
    ] {
        for c in cascades {
            total += cascade_log_density(stack, c, weights)?;
        }
        for j in 0..stack.n_weight_layers() {
            total +=
                weights_log_prior(stack, weights, j)? + intercept_log_prior(stack, weights, j)?;
        }
    }
    for n in 0..data.n_rows() {
        total += observation_log_lik(arch, data, state, n);
    }
    Ok(total)
}

/// A single latent scalar: unit `unit` of layer `layer` (bottom = 0) in the
/// cascade of data row `n` or of item `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentVar {
    Row { n: usize, layer: usize, unit: usize },
    Item { i: usize, layer: usize, unit: usize },
}

/// Blocks of shared variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightBlock {
    /// Observation weights: the bottom layer of every item cascade.
    Observation,
    /// Weight matrix feeding row-stack layer `j`.
    Weights(usize),
    Intercept(usize),
    /// Weight matrix feeding item-stack layer `j`.
    ItemWeights(usize),
    ItemIntercept(usize),
}

/// The log-joint terms that contain one latent scalar: its own conditional
/// (or top prior) plus the layer below it, or the observations for a bottom
/// layer.
pub fn markov_blanket_z(
    arch: &DefArchitecture,
    data: &SparseCounts,
    state: &LatentState,
    var: LatentVar,
) -> Result<f64> {
    check_shapes(arch, data, state)?;
    let (stack, weights, cascade, layer, unit) = match var {
        LatentVar::Row { n, layer, unit } => {
            let c = state
                .rows
                .get(n)
                .ok_or_else(|| DefError::Index(format!("row {n}")))?;
            (arch.stack(), &state.weights, c, layer, unit)
        }
        LatentVar::Item { i, layer, unit } => {
            let c = state
                .items
                .get(i)
                .ok_or_else(|| DefError::Index(format!("item {i}")))?;
            (arch.item_stack(), &state.item_weights, c, layer, unit)
        }
    };
    if layer >= stack.depth() || unit >= stack.layer(layer).size {
        return Err(DefError::Index(format!("layer {layer} unit {unit}")));
    }
    let own = unit_log_density(stack, cascade, weights, layer, unit)?;
    let below = if layer > 0 {
        layer_log_density(stack, cascade, weights, layer - 1)?
    } else {
        match var {
            LatentVar::Row { n, .. } => observation_log_lik(arch, data, state, n),
            LatentVar::Item { i, .. } => observation_log_lik_item(arch, data, state, i),
        }
    };
    Ok(own + below)
}

/// The log-joint terms that contain a block of shared variables: its prior
/// plus every term conditioned on it.
pub fn markov_blanket_w(
    arch: &DefArchitecture,
    data: &SparseCounts,
    state: &LatentState,
    block: WeightBlock,
) -> Result<f64> {
    check_shapes(arch, data, state)?;
    let sum_layer = |stack: &DefStack, weights: &StackWeights, cascades: &[Vec<f64>], j: usize| {
        cascades
            .iter()
            .map(|c| layer_log_density(stack, c, weights, j))
            .sum::<Result<f64>>()
    };
    let check_j = |stack: &DefStack, j: usize| {
        if j < stack.n_weight_layers() {
            Ok(())
        } else {
            Err(DefError::Index(format!("weight layer {j}")))
        }
    };
    match block {
        WeightBlock::Observation => {
            let stack = arch.item_stack();
            let prior = sum_layer(stack, &state.item_weights, &state.items, 0)?;
            let obs: f64 = (0..data.n_rows())
                .map(|n| observation_log_lik(arch, data, state, n))
                .sum();
            Ok(prior + obs)
        }
        WeightBlock::Weights(j) | WeightBlock::Intercept(j) => {
            let stack = arch.stack();
            check_j(stack, j)?;
            let prior = if matches!(block, WeightBlock::Weights(_)) {
                weights_log_prior(stack, &state.weights, j)?
            } else {
                intercept_log_prior(stack, &state.weights, j)?
            };
            Ok(prior + sum_layer(stack, &state.weights, &state.rows, j)?)
        }
        WeightBlock::ItemWeights(j) | WeightBlock::ItemIntercept(j) => {
            let stack = arch.item_stack();
            check_j(stack, j)?;
            let prior = if matches!(block, WeightBlock::ItemWeights(_)) {
                weights_log_prior(stack, &state.item_weights, j)?
            } else {
                intercept_log_prior(stack, &state.item_weights, j)?
            };
            Ok(prior + sum_layer(stack, &state.item_weights, &state.items, j)?)
        }
    }
}

/// The log-joint terms that contain one entry of a weight block: its prior
/// plus the conditionals of the unit it feeds. For `Observation`, entry
/// `i * K + k` is weight (k, i) and its terms are its prior plus the
/// observations of item `i`.
pub fn markov_blanket_w_entry(
    arch: &DefArchitecture,
    data: &SparseCounts,
    state: &LatentState,
    block: WeightBlock,
    index: usize,
) -> Result<f64> {
    check_shapes(arch, data, state)?;
    let entry = |stack: &DefStack,
                 weights: &StackWeights,
                 cascades: &[Vec<f64>],
                 j: usize,
                 intercept: bool| {
        if j >= stack.n_weight_layers() {
            return Err(DefError::Index(format!("weight layer {j}")));
        }
        let w = &weights.weights[j];
        let (k, prior, v) = if intercept {
            let b = weights.intercepts[j]
                .as_ref()
                .ok_or_else(|| DefError::Index(format!("layer {j} has no intercepts")))?;
            let p = stack.layer(j).intercept_prior().expect("validated stack");
            (
                index,
                p,
                *b.get(index)
                    .ok_or_else(|| DefError::Index(format!("intercept {index}")))?,
            )
        } else {
            if index >= w.as_slice().len() {
                return Err(DefError::Index(format!("weight entry {index}")));
            }
            let p = stack.layer(j).weight_prior.expect("validated stack");
            (index / w.n_inputs(), p, w.as_slice()[index])
        };
        let mut total = log_density(&prior, v)?;
        for c in cascades {
            total += unit_log_density(stack, c, weights, j, k)?;
        }
        Ok(total)
    };
    match block {
        WeightBlock::Observation => {
            let kk = arch.item_stack().bottom_size();
            markov_blanket_z(
                arch,
                data,
                state,
                LatentVar::Item {
                    i: index / kk,
                    layer: 0,
                    unit: index % kk,
                },
            )
        }
        WeightBlock::Weights(j) => entry(arch.stack(), &state.weights, &state.rows, j, false),
        WeightBlock::Intercept(j) => entry(arch.stack(), &state.weights, &state.rows, j, true),
        WeightBlock::ItemWeights(j) => entry(
            arch.item_stack(),
            &state.item_weights,
            &state.items,
            j,
            false,
        ),
        WeightBlock::ItemIntercept(j) => entry(
            arch.item_stack(),
            &state.item_weights,
            &state.items,
            j,
            true,
        ),
    }
}

/// Σ over `cells` of log Poisson(count; z_col[n] · z_row[i]). A zero rate
/// with a positive count yields `-inf`; rates are not floored here.
pub fn double_def_log_likelihood(
    col_bottom: &[Vec<f64>],
    row_bottom: &[Vec<f64>],
    cells: &[(usize, usize, u32)],
) -> Result<f64> {
    let mut total = 0.0;
    for &(n, i, count) in cells {
        let zc = col_bottom
            .get(n)
            .ok_or_else(|| DefError::Index(format!("column-side row {n}")))?;
        let zr = row_bottom
            .get(i)
            .ok_or_else(|| DefError::Index(format!("item {i}")))?;
        if zc.len() != zr.len() {
            return Err(DefError::Data(format!(
                "bottom layers differ in size: {} vs {}",
                zc.len(),
                zr.len()
            )));
        }
        let rate = dot(zc, zr);
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(DefError::Evaluation(format!("invalid Poisson rate {rate}")));
        }
        let x = count as f64;
        total += if rate == 0.0 {
            if count == 0 {
                0.0
            } else {
                return Ok(f64::NEG_INFINITY);
            }
        } else {
            x * rate.ln() - ln_factorial(x) - rate
        };
    }
    Ok(total)
}
