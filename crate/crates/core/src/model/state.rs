use serde::{Deserialize, Serialize};

use crate::error::{DefError, Result};
use crate::model::arch::{DefArchitecture, DefStack};

/// Weights feeding one layer: `n_units` vectors of length `n_inputs`, the
/// vector for unit `k` being the column `w_{ℓ,k}` of the K_{ℓ+1} × K_ℓ
/// weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    n_units: usize,
    n_inputs: usize,
    data: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(n_units: usize, n_inputs: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_units * n_inputs {
            return Err(DefError::Data(format!(
                "{} values for a {n_units} x {n_inputs} weight matrix",
                data.len()
            )));
        }
        Ok(WeightMatrix {
            n_units,
            n_inputs,
            data,
        })
    }

    pub fn filled(n_units: usize, n_inputs: usize, v: f64) -> Self {
        WeightMatrix {
            n_units,
            n_inputs,
            data: vec![v; n_units * n_inputs],
        }
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn unit(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_inputs..(k + 1) * self.n_inputs]
    }

    /// Weight from input (upper-layer unit) `a` to unit `k`.
    pub fn get(&self, a: usize, k: usize) -> f64 {
        self.data[k * self.n_inputs + a]
    }

    pub fn set(&mut self, a: usize, k: usize, v: f64) {
        self.data[k * self.n_inputs + a] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Weights and intercepts of one stack; entry `j` feeds layer `j` (bottom
/// first) from layer `j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackWeights {
    pub weights: Vec<WeightMatrix>,
    pub intercepts: Vec<Option<Vec<f64>>>,
}

impl StackWeights {
    pub fn empty() -> Self {
        StackWeights {
            weights: Vec::new(),
            intercepts: Vec::new(),
        }
    }

    pub fn check(&self, stack: &DefStack) -> Result<()> {
        let n = stack.n_weight_layers();
        if self.weights.len() != n || self.intercepts.len() != n {
            return Err(DefError::Data(format!(
                "expected {n} weight layers, got {} / {}",
                self.weights.len(),
                self.intercepts.len()
            )));
        }
        for j in 0..n {
            let w = &self.weights[j];
            let (units, inputs) = (stack.layer(j).size, stack.layer(j + 1).size);
            if w.n_units != units || w.n_inputs != inputs {
                return Err(DefError::Data(format!(
                    "weights {j}: {} x {}, expected {units} x {inputs}",
                    w.n_units, w.n_inputs
                )));
            }
            let prior = stack.layer(j).weight_prior.expect("validated stack");
            for &v in &w.data {
                prior.family().check_support(v)?;
            }
            match (&self.intercepts[j], stack.layer(j).intercept_prior()) {
                (Some(b), Some(p)) if b.len() == units => {
                    for &v in b {
                        p.family().check_support(v)?;
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(DefError::Data(format!(
                        "intercepts of layer {j} do not match"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// One draw of every latent variable of a model.
///
/// Each cascade is a flat vector over a stack's layers, bottom layer first,
/// with layer `j` starting at [`DefStack::layer_offset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// One cascade per data row.
    pub rows: Vec<Vec<f64>>,
    pub weights: StackWeights,
    /// One cascade per item (column). For bag-of-words models this holds
    /// the observation weights: `items[i][k]` is entry (k, i) of W0.
    pub items: Vec<Vec<f64>>,
    pub item_weights: StackWeights,
}

impl LatentState {
    pub fn check(&self, arch: &DefArchitecture) -> Result<()> {
        check_cascades(arch.stack(), &self.rows)?;
        check_cascades(arch.item_stack(), &self.items)?;
        if self.items.len() != arch.n_items() {
            return Err(DefError::Data(format!(
                "{} item cascades for {} items",
                self.items.len(),
                arch.n_items()
            )));
        }
        self.weights.check(arch.stack())?;
        self.item_weights.check(arch.item_stack())
    }

    /// Observation weight vector (bottom item layer) of item `i`.
    pub fn item_bottom<'a>(&'a self, arch: &DefArchitecture, i: usize) -> &'a [f64] {
        &self.items[i][..arch.item_stack().bottom_size()]
    }

    pub fn row_bottom<'a>(&'a self, arch: &DefArchitecture, n: usize) -> &'a [f64] {
        &self.rows[n][..arch.stack().bottom_size()]
    }
}

pub fn layer_values<'a>(stack: &DefStack, cascade: &'a [f64], j: usize) -> &'a [f64] {
    let off = stack.layer_offset(j);
    &cascade[off..off + stack.layer(j).size]
}

fn check_cascades(stack: &DefStack, cascades: &[Vec<f64>]) -> Result<()> {
    for c in cascades {
        if c.len() != stack.total_units() {
            return Err(DefError::Data(format!(
                "cascade of length {}, expected {}",
                c.len(),
                stack.total_units()
            )));
        }
        for j in 0..stack.depth() {
            let fam = stack.layer(j).family;
            for &v in layer_values(stack, c, j) {
                fam.check_support(v)?;
            }
        }
    }
    Ok(())
}
