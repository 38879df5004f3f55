//! Export of learned factors as a hierarchy: each unit's strongest children
//! in the layer below (by expected weight) and, where weights are positive,
//! its strongest items.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::expfam::Family;
use crate::model::DefArchitecture;
use crate::variational::VariationalState;

pub const DEFAULT_TOP_M: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Child {
    pub unit: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub item: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub unit: usize,
    pub children: Vec<Child>,
    pub terms: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// 1 for the bottom layer.
    pub layer: usize,
    pub units: Vec<Unit>,
}

/// Layers listed top first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub layers: Vec<Layer>,
}

fn top_m(values: &[f64], m: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx.into_iter().map(|i| (i, values[i])).collect()
}

/// Build the hierarchy from expected values under q. `m` is truncated to
/// the size of each ranked list. Item terms are listed for the bottom layer
/// and, when every weight matrix has a positive (gamma) prior, for upper
/// layers through the products of expected weights.
pub fn export(
    arch: &DefArchitecture,
    vs: &VariationalState,
    m: usize,
    item_names: Option<&[String]>,
) -> Result<Hierarchy> {
    let stack = arch.stack();
    let means = vs.mean_state(arch)?;
    let items = vs.item_bottom_means(arch)?;
    let positive = (0..stack.n_weight_layers())
        .all(|j| stack.layer(j).weight_prior.map(|p| p.family()) == Some(Family::Gamma));
    // loadings[j][k][i]: expected weight of item i under unit k of layer j
    let mut loadings: Vec<Vec<Vec<f64>>> = Vec::with_capacity(stack.depth());
    loadings.push(
        (0..stack.bottom_size())
            .map(|k| items.iter().map(|w| w[k]).collect())
            .collect(),
    );
    for j in 1..stack.depth() {
        let w = &means.weights.weights[j - 1];
        let below = &loadings[j - 1];
        let layer: Vec<Vec<f64>> = (0..stack.layer(j).size)
            .map(|a| {
                let mut acc = vec![0.0; arch.n_items()];
                for (c, row) in below.iter().enumerate() {
                    let wt = w.get(a, c);
                    for (x, v) in acc.iter_mut().zip(row) {
                        *x += wt * v;
                    }
                }
                acc
            })
            .collect();
        loadings.push(layer);
    }
    let mut layers = Vec::with_capacity(stack.depth());
    for j in (0..stack.depth()).rev() {
        let units = (0..stack.layer(j).size)
            .map(|k| {
                let children = if j > 0 {
                    let w = &means.weights.weights[j - 1];
                    let row: Vec<f64> = (0..stack.layer(j - 1).size).map(|c| w.get(k, c)).collect();
                    top_m(&row, m)
                        .into_iter()
                        .map(|(unit, weight)| Child { unit, weight })
                        .collect()
                } else {
                    Vec::new()
                };
                let terms = if j == 0 || positive {
                    top_m(&loadings[j][k], m)
                        .into_iter()
                        .map(|(item, weight)| Term {
                            item,
                            name: item_names.and_then(|n| n.get(item).cloned()),
                            weight,
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                Unit {
                    unit: k,
                    children,
                    terms,
                }
            })
            .collect();
        layers.push(Layer {
            layer: j + 1,
            units,
        });
    }
    Ok(Hierarchy { layers })
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

impl Hierarchy {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hierarchy serializes")
    }

    /// Graphviz digraph: one node per unit labelled with its top terms, one
    /// edge per listed child.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph hierarchy {\n  node [shape=box];\n");
        for l in &self.layers {
            for u in &l.units {
                let terms: Vec<String> = u
                    .terms
                    .iter()
                    .map(|t| t.name.clone().unwrap_or_else(|| t.item.to_string()))
                    .collect();
                let label = format!(
                    "L{} #{}\\n{}",
                    l.layer,
                    u.unit,
                    dot_escape(&terms.join(" "))
                );
                let _ = writeln!(s, "  \"l{}_u{}\" [label=\"{}\"];", l.layer, u.unit, label);
            }
        }
        for l in &self.layers {
            for u in &l.units {
                for c in &u.children {
                    let _ = writeln!(
                        s,
                        "  \"l{}_u{}\" -> \"l{}_u{}\" [label=\"{:.4}\"];",
                        l.layer,
                        u.unit,
                        l.layer - 1,
                        c.unit,
                        c.weight
                    );
                }
            }
        }
        s.push_str("}\n");
        s
    }
}
