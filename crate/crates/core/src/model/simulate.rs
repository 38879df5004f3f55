use rand::Rng;

use crate::data::SparseCounts;
use crate::error::Result;
use crate::expfam::{sample, FamilyParams};
use crate::math::{dot, POSITIVE_FLOOR};
use crate::model::arch::{DefArchitecture, DefStack};
use crate::model::joint::natural_params_for_layer;
use crate::model::state::{layer_values, LatentState, StackWeights, WeightMatrix};

/// Draw weights and intercepts of a stack from their priors.
pub fn sample_weights<R: Rng + ?Sized>(stack: &DefStack, rng: &mut R) -> Result<StackWeights> {
    let mut out = StackWeights::empty();
    for j in 0..stack.n_weight_layers() {
        let layer = stack.layer(j);
        let (units, inputs) = (layer.size, stack.layer(j + 1).size);
        let prior = layer.weight_prior.expect("validated stack");
        let data = (0..units * inputs)
            .map(|_| sample(&prior, rng))
            .collect::<Result<Vec<_>>>()?;
        out.weights.push(WeightMatrix::new(units, inputs, data)?);
        out.intercepts.push(match layer.intercept_prior() {
            Some(p) => Some((0..units).map(|_| sample(&p, rng)).collect::<Result<_>>()?),
            None => None,
        });
    }
    Ok(out)
}

/// One cascade drawn top-down given the stack's weights.
pub fn sample_cascade<R: Rng + ?Sized>(
    stack: &DefStack,
    weights: &StackWeights,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut c = vec![0.0; stack.total_units()];
    let top = stack.depth() - 1;
    for j in (0..=top).rev() {
        let off = stack.layer_offset(j);
        for k in 0..stack.layer(j).size {
            let v = if j == top {
                sample(stack.top_prior(), rng)?
            } else {
                let p =
                    natural_params_for_layer(stack, j, layer_values(stack, &c, j + 1), weights, k)?;
                sample(&p, rng)?
            };
            c[off + k] = v;
        }
    }
    Ok(c)
}

/// Simulate the generative process: weights once, then one cascade per
/// item and per data row, then Poisson counts for every cell.
pub fn ancestral_sample<R: Rng + ?Sized>(
    arch: &DefArchitecture,
    n_points: usize,
    rng: &mut R,
) -> Result<(LatentState, SparseCounts)> {
    let weights = sample_weights(arch.stack(), rng)?;
    let item_weights = sample_weights(arch.item_stack(), rng)?;
    let items = (0..arch.n_items())
        .map(|_| sample_cascade(arch.item_stack(), &item_weights, rng))
        .collect::<Result<Vec<_>>>()?;
    let rows = (0..n_points)
        .map(|_| sample_cascade(arch.stack(), &weights, rng))
        .collect::<Result<Vec<_>>>()?;
    let state = LatentState {
        rows,
        weights,
        items,
        item_weights,
    };
    let mut trip = Vec::new();
    for n in 0..n_points {
        let z = state.row_bottom(arch, n);
        for i in 0..arch.n_items() {
            let rate = dot(z, state.item_bottom(arch, i)).max(POSITIVE_FLOOR);
            let x = sample(&FamilyParams::poisson_mean(rate)?, rng)?;
            if x > 0.0 {
                trip.push((n, i, x.min(u32::MAX as f64) as u32));
            }
        }
    }
    let data = SparseCounts::from_triplets(n_points, arch.n_items(), trip)?;
    Ok((state, data))
}
