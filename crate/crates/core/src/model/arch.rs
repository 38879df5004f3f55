//! Architecture descriptions and their validation.
//!
//! JSON layout (field names are stable):
//!
//! ```json
//! {
//!   "layers": [
//!     {"size": 2, "family": "gamma"},
//!     {"size": 5, "family": "gamma",
//!      "link": {"kind": "sparse_gamma", "shape": 0.3},
//!      "weight_prior": {"param": "gamma_rate", "shape": 0.1, "rate": 0.3}}
//!   ],
//!   "top_prior": {"param": "gamma_rate", "shape": 0.3, "rate": 0.3},
//!   "observation": {"kind": "poisson_counts", "vocab_size": 50,
//!                   "weight_prior": {"param": "gamma_rate", "shape": 0.1, "rate": 0.3}}
//! }
//! ```
//!
//! `layers` lists the top layer first. Every layer but the top carries the
//! link and weight prior of the weights feeding it from the layer above,
//! plus an optional `intercept` flag. A double DEF replaces the observation
//! with `{"kind": "double_def", "n_items": I, "rows": {"layers": [...],
//! "top_prior": {...}}}`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DefError, Result};
use crate::expfam::{Family, FamilyParams};
use crate::math::{logistic, softplus, POSITIVE_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinkFunction {
    /// Natural parameter equals the inner product.
    Identity,
    /// Natural parameter is `log(ip)`; Poisson mean equals the inner product.
    Log,
    /// Natural parameter is `log(softplus(ip))`.
    LogSoftplus,
    /// Gamma with fixed shape and rate `shape / ip`, so the mean is `ip`.
    SparseGamma { shape: f64 },
}

/// The four supported (latent family, link, weight prior) combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Gamma layers, sparse-gamma link, gamma weights.
    SparseGamma,
    /// Bernoulli layers, identity link, normal weights.
    Sigmoid,
    /// Poisson layers, log link, gamma weights.
    PoissonLog,
    /// Poisson layers, log-softplus link, normal weights.
    PoissonSoftplus,
}

impl LayerKind {
    /// Family the layer above must have.
    pub fn input_family(self) -> Family {
        match self {
            LayerKind::SparseGamma => Family::Gamma,
            LayerKind::Sigmoid => Family::Bernoulli,
            LayerKind::PoissonLog | LayerKind::PoissonSoftplus => Family::Poisson,
        }
    }

    pub fn allows_intercept(self) -> bool {
        !matches!(self, LayerKind::SparseGamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub size: usize,
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkFunction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_prior: Option<FamilyParams>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub intercept: bool,
}

impl LayerSpec {
    pub fn top(size: usize, family: Family) -> Self {
        LayerSpec {
            size,
            family,
            link: None,
            weight_prior: None,
            intercept: false,
        }
    }

    pub fn conditional(
        size: usize,
        family: Family,
        link: LinkFunction,
        weight_prior: FamilyParams,
        intercept: bool,
    ) -> Self {
        LayerSpec {
            size,
            family,
            link: Some(link),
            weight_prior: Some(weight_prior),
            intercept,
        }
    }

    /// Classify against the supported combinations; `None` when the layer
    /// has no link (top layer) or the combination is unsupported.
    pub fn kind(&self) -> Option<LayerKind> {
        let prior = self.weight_prior?.family();
        match (self.family, self.link?, prior) {
            (Family::Gamma, LinkFunction::SparseGamma { .. }, Family::Gamma) => {
                Some(LayerKind::SparseGamma)
            }
            (Family::Bernoulli, LinkFunction::Identity, Family::Normal) => Some(LayerKind::Sigmoid),
            (Family::Poisson, LinkFunction::Log, Family::Gamma) => Some(LayerKind::PoissonLog),
            (Family::Poisson, LinkFunction::LogSoftplus, Family::Normal) => {
                Some(LayerKind::PoissonSoftplus)
            }
            _ => None,
        }
    }

    /// Prior on intercepts: the (gamma) weight prior under the log link,
    /// standard normal otherwise.
    pub fn intercept_prior(&self) -> Option<FamilyParams> {
        if !self.intercept {
            return None;
        }
        match self.kind()? {
            LayerKind::PoissonLog => self.weight_prior,
            LayerKind::Sigmoid | LayerKind::PoissonSoftplus => {
                Some(FamilyParams::normal(0.0, 1.0).expect("valid constant"))
            }
            LayerKind::SparseGamma => None,
        }
    }

    /// Model parameters of a unit given its inner product `ip` (intercept
    /// already added). Gamma comes back as (shape, rate), Poisson and
    /// Bernoulli in natural form. Log and inverse links floor `ip` at
    /// [`POSITIVE_FLOOR`].
    pub fn link_params(&self, ip: f64) -> Result<FamilyParams> {
        let link = self
            .link
            .ok_or_else(|| DefError::Evaluation("top layer has no link function".into()))?;
        if !ip.is_finite() {
            return Err(DefError::Evaluation(format!(
                "non-finite inner product {ip}"
            )));
        }
        match link {
            LinkFunction::SparseGamma { shape } => {
                FamilyParams::gamma_rate(shape, shape / ip.max(POSITIVE_FLOOR))
            }
            LinkFunction::Identity => FamilyParams::bernoulli(ip),
            LinkFunction::Log => FamilyParams::poisson_natural(ip.max(POSITIVE_FLOOR).ln()),
            LinkFunction::LogSoftplus => {
                FamilyParams::poisson_natural(softplus(ip).max(POSITIVE_FLOOR).ln())
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StackRepr {
    layers: Vec<LayerSpec>,
    top_prior: FamilyParams,
}

/// A validated stack of latent layers. Internally `layers[0]` is the bottom
/// layer (the one touching the observations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StackRepr", into = "StackRepr")]
pub struct DefStack {
    layers: Vec<LayerSpec>,
    top_prior: FamilyParams,
}

impl TryFrom<StackRepr> for DefStack {
    type Error = DefError;

    fn try_from(r: StackRepr) -> Result<Self> {
        let mut layers = r.layers;
        layers.reverse();
        DefStack::new(layers, r.top_prior)
    }
}

impl From<DefStack> for StackRepr {
    fn from(s: DefStack) -> Self {
        let mut layers = s.layers;
        layers.reverse();
        StackRepr {
            layers,
            top_prior: s.top_prior,
        }
    }
}

impl DefStack {
    /// `layers` ordered bottom first.
    pub fn new(layers: Vec<LayerSpec>, top_prior: FamilyParams) -> Result<Self> {
        let arch_err = |m: String| Err(DefError::Architecture(m));
        if layers.is_empty() {
            return arch_err("at least one latent layer is required".into());
        }
        let top = layers.len() - 1;
        for (j, layer) in layers.iter().enumerate() {
            if layer.size == 0 {
                return arch_err(format!("layer {} has size 0", j + 1));
            }
            if layer.family == Family::Normal {
                return arch_err("normal latent layers are not supported".into());
            }
            if j == top {
                if layer.link.is_some() || layer.weight_prior.is_some() || layer.intercept {
                    return arch_err(
                        "the top layer takes no link, weight prior or intercept".into(),
                    );
                }
                continue;
            }
            let kind = match layer.kind() {
                Some(k) => k,
                None => {
                    return arch_err(format!(
                        "layer {}: ({}, {:?}, {:?}) is not a supported layer type",
                        j + 1,
                        layer.family,
                        layer.link,
                        layer.weight_prior.map(|p| p.family())
                    ))
                }
            };
            if let Some(LinkFunction::SparseGamma { shape }) = layer.link {
                if !(shape.is_finite() && shape > 0.0) {
                    return arch_err(format!("layer {}: sparse gamma shape {shape}", j + 1));
                }
            }
            if layers[j + 1].family != kind.input_family() {
                return arch_err(format!(
                    "layer {}: {:?} layers need {} inputs, layer above is {}",
                    j + 1,
                    kind,
                    kind.input_family(),
                    layers[j + 1].family
                ));
            }
            if layer.intercept && !kind.allows_intercept() {
                return arch_err(format!("layer {}: gamma layers take no intercept", j + 1));
            }
        }
        if top_prior.family() != layers[top].family {
            return arch_err(format!(
                "top prior is {} but the top layer is {}",
                top_prior.family(),
                layers[top].family
            ));
        }
        Ok(DefStack { layers, top_prior })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layer `j`, counted from the bottom starting at 0.
    pub fn layer(&self, j: usize) -> &LayerSpec {
        &self.layers[j]
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.size).collect()
    }

    pub fn top_prior(&self) -> &FamilyParams {
        &self.top_prior
    }

    pub fn bottom_size(&self) -> usize {
        self.layers[0].size
    }

    /// Units summed over layers.
    pub fn total_units(&self) -> usize {
        self.layers.iter().map(|l| l.size).sum()
    }

    /// Offset of layer `j` inside a flat per-cascade vector.
    pub fn layer_offset(&self, j: usize) -> usize {
        self.layers[..j].iter().map(|l| l.size).sum()
    }

    /// Number of weight matrices (one per non-top layer).
    pub fn n_weight_layers(&self) -> usize {
        self.layers.len() - 1
    }

    /// Rough prior mean of each layer, propagated top-down through the
    /// links at prior-mean weights. Used for initialization only.
    pub fn prior_layer_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.depth()];
        let top = self.depth() - 1;
        means[top] = self.top_prior.mean();
        for j in (0..top).rev() {
            let layer = &self.layers[j];
            let w = layer.weight_prior.map_or(0.0, |p| p.mean());
            let b = layer.intercept_prior().map_or(0.0, |p| p.mean());
            let ip = self.layers[j + 1].size as f64 * means[j + 1] * w + b;
            means[j] = match layer.link_params(ip) {
                Ok(p) => p.mean(),
                Err(_) => logistic(0.0),
            };
        }
        means
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationSpec {
    /// `x[n][i] ~ Poisson(z[n,1] . w0[i])` with iid gamma entries in W0.
    PoissonCounts {
        vocab_size: usize,
        weight_prior: FamilyParams,
    },
    /// `x[n][i] ~ Poisson(z[n,1] . zr[i,1])` where `zr` comes from a second
    /// DEF over the columns.
    DoubleDef { n_items: usize, rows: DefStack },
}

#[derive(Serialize, Deserialize)]
struct ArchRepr {
    layers: Vec<LayerSpec>,
    top_prior: FamilyParams,
    observation: ObservationSpec,
}

/// A full model: a DEF over data rows plus the observation model.
///
/// Both observation kinds are handled as a factorization: the rows of the
/// data get a per-row cascade from [`DefArchitecture::stack`], the columns
/// (items) get a per-item cascade from [`DefArchitecture::item_stack`], and
/// counts are Poisson in the inner product of the two bottom layers. For
/// `PoissonCounts` the item stack is a single gamma layer whose prior is
/// the W0 prior, so its values are exactly the entries of W0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArchRepr", into = "ArchRepr")]
pub struct DefArchitecture {
    stack: DefStack,
    observation: ObservationSpec,
    item_stack: DefStack,
}

impl TryFrom<ArchRepr> for DefArchitecture {
    type Error = DefError;

    fn try_from(r: ArchRepr) -> Result<Self> {
        let stack = DefStack::try_from(StackRepr {
            layers: r.layers,
            top_prior: r.top_prior,
        })?;
        DefArchitecture::new(stack, r.observation)
    }
}

impl From<DefArchitecture> for ArchRepr {
    fn from(a: DefArchitecture) -> Self {
        let s = StackRepr::from(a.stack);
        ArchRepr {
            layers: s.layers,
            top_prior: s.top_prior,
            observation: a.observation,
        }
    }
}

impl DefArchitecture {
    pub fn new(stack: DefStack, observation: ObservationSpec) -> Result<Self> {
        let item_stack = match &observation {
            ObservationSpec::PoissonCounts {
                vocab_size,
                weight_prior,
            } => {
                if *vocab_size == 0 {
                    return Err(DefError::Architecture("vocabulary size is 0".into()));
                }
                if weight_prior.family() != Family::Gamma {
                    return Err(DefError::Architecture(
                        "observation weights need a gamma prior".into(),
                    ));
                }
                DefStack::new(
                    vec![LayerSpec::top(stack.bottom_size(), Family::Gamma)],
                    *weight_prior,
                )?
            }
            ObservationSpec::DoubleDef { n_items, rows } => {
                if *n_items == 0 {
                    return Err(DefError::Architecture("double DEF with 0 items".into()));
                }
                if rows.bottom_size() != stack.bottom_size() {
                    return Err(DefError::Architecture(format!(
                        "bottom layers differ: rows {} vs columns {}",
                        rows.bottom_size(),
                        stack.bottom_size()
                    )));
                }
                rows.clone()
            }
        };
        Ok(DefArchitecture {
            stack,
            observation,
            item_stack,
        })
    }

    /// Per-datapoint (row) DEF.
    pub fn stack(&self) -> &DefStack {
        &self.stack
    }

    /// Per-item (column) stack; see the type-level docs.
    pub fn item_stack(&self) -> &DefStack {
        &self.item_stack
    }

    pub fn observation(&self) -> &ObservationSpec {
        &self.observation
    }

    pub fn n_items(&self) -> usize {
        match &self.observation {
            ObservationSpec::PoissonCounts { vocab_size, .. } => *vocab_size,
            ObservationSpec::DoubleDef { n_items, .. } => *n_items,
        }
    }

    pub fn is_double_def(&self) -> bool {
        matches!(self.observation, ObservationSpec::DoubleDef { .. })
    }

    /// Same model with a different number of items (vocabulary size).
    pub fn with_n_items(&self, n: usize) -> Result<Self> {
        let observation = match &self.observation {
            ObservationSpec::PoissonCounts { weight_prior, .. } => ObservationSpec::PoissonCounts {
                vocab_size: n,
                weight_prior: *weight_prior,
            },
            ObservationSpec::DoubleDef { rows, .. } => ObservationSpec::DoubleDef {
                n_items: n,
                rows: rows.clone(),
            },
        };
        DefArchitecture::new(self.stack.clone(), observation)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    /// Hex SHA-256 of the canonical compact JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("architecture serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Built-in architectures, named `<kind>-<sizes>` with sizes listed
    /// bottom first: `sparse-gamma`, `sigmoid`, `poisson` (log-softplus link,
    /// normal weights), `poisson-log` (log link, gamma weights) and
    /// `double-def`. Example: `sparse-gamma-100-30-15`.
    pub fn named(name: &str, n_items: usize) -> Result<Self> {
        let kinds = [
            "sparse-gamma",
            "sigmoid",
            "poisson-log",
            "poisson",
            "double-def",
        ];
        let (kind, rest) = kinds
            .iter()
            .find_map(|k| name.strip_prefix(k).map(|r| (*k, r)))
            .ok_or_else(|| DefError::Config(format!("unknown architecture name {name:?}")))?;
        let sizes: Vec<usize> = rest
            .strip_prefix('-')
            .unwrap_or("")
            .split('-')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| DefError::Config(format!("bad layer sizes in {name:?}")))?;
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(DefError::Config(format!("bad layer sizes in {name:?}")));
        }
        let hp = Hyperparameters::default();
        let w0 = hp.gamma_weights()?;
        match kind {
            "double-def" => {
                let cols = hp.stack(LayerKind::SparseGamma, &sizes, hp.double_def_shape)?;
                let rows = cols.clone();
                DefArchitecture::new(cols, ObservationSpec::DoubleDef { n_items, rows })
            }
            _ => {
                let lk = match kind {
                    "sparse-gamma" => LayerKind::SparseGamma,
                    "sigmoid" => LayerKind::Sigmoid,
                    "poisson-log" => LayerKind::PoissonLog,
                    _ => LayerKind::PoissonSoftplus,
                };
                let stack = hp.stack(lk, &sizes, hp.gamma_layer_shape)?;
                DefArchitecture::new(
                    stack,
                    ObservationSpec::PoissonCounts {
                        vocab_size: n_items,
                        weight_prior: w0,
                    },
                )
            }
        }
    }

    /// Names accepted by [`DefArchitecture::named`] for the standard
    /// 100-30-15 layer sizes.
    pub fn registry_names() -> Vec<String> {
        let mut out = Vec::new();
        for kind in ["sparse-gamma", "sigmoid", "poisson"] {
            for sizes in ["100", "100-30", "100-30-15"] {
                out.push(format!("{kind}-{sizes}"));
            }
        }
        out.push("poisson-log-100-30".into());
        out.push("poisson-log-100-30-15".into());
        for sizes in ["100", "100-30", "100-30-15"] {
            out.push(format!("double-def-{sizes}"));
        }
        out
    }
}

/// Default prior settings of the built-in architectures.
#[derive(Debug, Clone, Copy)]
pub struct Hyperparameters {
    /// Shape and rate of gamma latent layers (top prior and link shape).
    pub gamma_layer_shape: f64,
    pub gamma_layer_rate: f64,
    pub gamma_weight_shape: f64,
    pub gamma_weight_rate: f64,
    pub normal_weight_mean: f64,
    pub normal_weight_variance: f64,
    /// Top-layer activation probability of sigmoid belief networks.
    pub bernoulli_prior: f64,
    pub poisson_prior_rate: f64,
    /// Shape of every gamma in a double DEF (rates use `gamma_weight_rate`).
    pub double_def_shape: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            gamma_layer_shape: 0.3,
            gamma_layer_rate: 0.3,
            gamma_weight_shape: 0.1,
            gamma_weight_rate: 0.3,
            normal_weight_mean: 0.0,
            normal_weight_variance: 1.0,
            bernoulli_prior: 0.1,
            poisson_prior_rate: 0.1,
            double_def_shape: 0.1,
        }
    }
}

impl Hyperparameters {
    pub fn gamma_weights(&self) -> Result<FamilyParams> {
        FamilyParams::gamma_rate(self.gamma_weight_shape, self.gamma_weight_rate)
    }

    /// Homogeneous stack of `kind` layers; `sizes` bottom first.
    pub fn stack(&self, kind: LayerKind, sizes: &[usize], gamma_shape: f64) -> Result<DefStack> {
        let family = match kind {
            LayerKind::SparseGamma => Family::Gamma,
            LayerKind::Sigmoid => Family::Bernoulli,
            LayerKind::PoissonLog | LayerKind::PoissonSoftplus => Family::Poisson,
        };
        let normal_w = FamilyParams::normal(self.normal_weight_mean, self.normal_weight_variance)?;
        let (link, prior, intercept) = match kind {
            LayerKind::SparseGamma => (
                LinkFunction::SparseGamma { shape: gamma_shape },
                self.gamma_weights()?,
                false,
            ),
            LayerKind::Sigmoid => (LinkFunction::Identity, normal_w, true),
            LayerKind::PoissonLog => (LinkFunction::Log, self.gamma_weights()?, true),
            LayerKind::PoissonSoftplus => (LinkFunction::LogSoftplus, normal_w, true),
        };
        let top_prior = match kind {
            LayerKind::SparseGamma => FamilyParams::gamma_rate(gamma_shape, self.gamma_layer_rate)?,
            LayerKind::Sigmoid => {
                let p = self.bernoulli_prior;
                FamilyParams::bernoulli((p / (1.0 - p)).ln())?
            }
            LayerKind::PoissonLog | LayerKind::PoissonSoftplus => {
                FamilyParams::poisson_natural(self.poisson_prior_rate.ln())?
            }
        };
        let top = sizes.len() - 1;
        let layers = sizes
            .iter()
            .enumerate()
            .map(|(j, &size)| {
                if j == top {
                    LayerSpec::top(size, family)
                } else {
                    LayerSpec::conditional(size, family, link, prior, intercept)
                }
            })
            .collect();
        DefStack::new(layers, top_prior)
    }
}
