//! Held-out evaluation: document completion perplexity and NDCG.
//!
//! Each held-out row is thinned token by token into a small observed part
//! and a target part. Local factors are fit to the observed part with the
//! global factors frozen; the target tokens are then scored under the
//! normalized expected Poisson rates.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::bbvi::{infer_local, OptimizerConfig};
use crate::data::SparseCounts;
use crate::error::{DefError, Result};
use crate::math::dot;
use crate::model::DefArchitecture;
use crate::variational::VariationalState;

/// Smallest predictive probability used in the perplexity.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutSplit {
    pub observed: SparseCounts,
    pub target: SparseCounts,
}

impl HeldoutSplit {
    /// Send each token to `observed` independently with probability
    /// `fraction`; the rest go to `target`.
    pub fn thin<R: Rng + ?Sized>(data: &SparseCounts, fraction: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(DefError::Config(format!(
                "observed fraction {fraction} outside [0, 1]"
            )));
        }
        let mut obs = Vec::new();
        let mut tgt = Vec::new();
        for (r, c, x) in data.triplets() {
            let k = Binomial::new(x as u64, fraction)
                .map_err(|e| DefError::Parameter(e.to_string()))?
                .sample(rng) as u32;
            obs.push((r, c, k));
            tgt.push((r, c, x - k));
        }
        let wrap = |t| {
            let s = SparseCounts::from_triplets(data.n_rows(), data.n_cols(), t)?;
            match data.col_names() {
                Some(names) => s.with_col_names(names.to_vec()),
                None => Ok(s),
            }
        };
        Ok(HeldoutSplit {
            observed: wrap(obs)?,
            target: wrap(tgt)?,
        })
    }
}

/// Normalized expected rates `E[z] . E[w_i] / Σ_j E[z] . E[w_j]`.
pub fn predictive_distribution(row_mean: &[f64], item_means: &[Vec<f64>]) -> Result<Vec<f64>> {
    let rates: Vec<f64> = item_means.iter().map(|w| dot(row_mean, w)).collect();
    let total: f64 = rates.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(DefError::Evaluation(format!(
            "expected rates sum to {total}"
        )));
    }
    Ok(rates.iter().map(|r| r / total).collect())
}

/// Predictive distribution over items for row `n` of `vs`.
pub fn predictive_word_distribution(
    arch: &DefArchitecture,
    vs: &VariationalState,
    n: usize,
) -> Result<Vec<f64>> {
    predictive_distribution(&vs.row_bottom_means(n)?, &vs.item_bottom_means(arch)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub perplexity: f64,
    pub n_tokens: u64,
    /// Target tokens whose probability was raised to the floor.
    pub n_floored: u64,
    /// Σ log p over target tokens.
    pub log_likelihood: f64,
}

/// `exp(-Σ log p(token) / N)` pooled over every target token.
pub fn heldout_perplexity(predictions: &[Vec<f64>], target: &SparseCounts) -> Result<Perplexity> {
    if predictions.len() != target.n_rows() {
        return Err(DefError::Evaluation(format!(
            "{} predictive distributions for {} rows",
            predictions.len(),
            target.n_rows()
        )));
    }
    // log-likelihood is accumulated relative to the first token's
    // probability, so a constant predictor gives exactly 1 / p
    let mut rel = 0.0;
    let mut reference: Option<f64> = None;
    let mut n_tokens = 0u64;
    let mut n_floored = 0u64;
    for (r, c, x) in target.triplets() {
        let p = *predictions[r]
            .get(c)
            .ok_or_else(|| DefError::Evaluation(format!("no prediction for column {c}")))?;
        let p = if p < PROBABILITY_FLOOR || !p.is_finite() {
            n_floored += x as u64;
            PROBABILITY_FLOOR
        } else {
            p
        };
        let p_ref = *reference.get_or_insert(p);
        rel += x as f64 * (p.ln() - p_ref.ln());
        n_tokens += x as u64;
    }
    let p_ref = match reference {
        Some(p) if n_tokens > 0 => p,
        _ => return Err(DefError::Evaluation("no held-out target tokens".into())),
    };
    if n_floored > 0 {
        log::warn!(
            "{n_floored} target tokens had predictive probability below {PROBABILITY_FLOOR}"
        );
    }
    Ok(Perplexity {
        perplexity: (-rel / n_tokens as f64).exp() / p_ref,
        n_tokens,
        n_floored,
        log_likelihood: rel + n_tokens as f64 * p_ref.ln(),
    })
}

/// Untruncated NDCG with gain `2^rel - 1` and discount `log2(rank + 1)`.
/// Equal scores are ranked by item index.
pub fn ndcg(scores: &[f64], relevance: &[u32]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(DefError::Evaluation(format!(
            "{} scores for {} relevance values",
            scores.len(),
            relevance.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DefError::Evaluation("NaN score".into()));
    }
    if relevance.iter().all(|&r| r == 0) {
        return Err(DefError::Evaluation(
            "NDCG is undefined without a relevant item".into(),
        ));
    }
    let gain = |r: u32| 2f64.powi(r as i32) - 1.0;
    let dcg = |order: &[usize]| -> f64 {
        order
            .iter()
            .enumerate()
            .map(|(rank, &i)| gain(relevance[i]) / ((rank + 2) as f64).log2())
            .sum()
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ideal: Vec<usize> = (0..scores.len()).collect();
    ideal.sort_by(|&a, &b| relevance[b].cmp(&relevance[a]).then(a.cmp(&b)));
    Ok(dcg(&order) / dcg(&ideal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fraction of each held-out row's tokens shown to local inference.
    pub observed_fraction: f64,
    /// Optimizer settings of the local inference; `max_iterations` is the
    /// number of local steps.
    pub local: OptimizerConfig,
    pub ndcg: bool,
    /// Rows with fewer nonzero cells than this form the low-activity
    /// NDCG slice.
    pub low_activity_threshold: usize,
    pub per_row: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            observed_fraction: 0.1,
            local: OptimizerConfig {
                max_iterations: 200,
                ..OptimizerConfig::default()
            },
            ndcg: false,
            low_activity_threshold: 10,
            per_row: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub row: usize,
    pub n_observed: u64,
    pub n_target: u64,
    pub log_likelihood: f64,
    pub ndcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub n_heldout_tokens: u64,
    pub n_floored: u64,
    pub ndcg_all: Option<f64>,
    pub ndcg_low_activity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_row: Option<Vec<RowReport>>,
}

/// NDCG of one row: items seen in the observed part are excluded, the
/// rest are ranked by predicted rate against their target counts. `None`
/// when no remaining item is relevant.
fn row_ndcg(
    pred: &[f64],
    observed: &SparseCounts,
    target: &SparseCounts,
    r: usize,
) -> Result<Option<f64>> {
    let (seen, _) = observed.row(r);
    let mut scores = Vec::new();
    let mut rel = Vec::new();
    let mut next = 0;
    for (i, &p) in pred.iter().enumerate() {
        if next < seen.len() && seen[next] as usize == i {
            next += 1;
            continue;
        }
        scores.push(p);
        rel.push(target.get(r, i));
    }
    if rel.iter().all(|&x| x == 0) {
        return Ok(None);
    }
    ndcg(&scores, &rel).map(Some)
}

/// Score a split that has already been made.
pub fn evaluate_split<R: Rng + ?Sized>(
    arch: &DefArchitecture,
    vs: &VariationalState,
    split: &HeldoutSplit,
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<EvalReport> {
    let local = infer_local(arch, vs, &split.observed, &cfg.local, rng)?;
    let items = local.item_bottom_means(arch)?;
    let preds = (0..local.n_rows())
        .map(|n| predictive_distribution(&local.row_bottom_means(n)?, &items))
        .collect::<Result<Vec<_>>>()?;
    let px = heldout_perplexity(&preds, &split.target)?;
    let mut all = Vec::new();
    let mut low = Vec::new();
    let mut rows = Vec::new();
    for (r, pred) in preds.iter().enumerate() {
        let score = if cfg.ndcg {
            row_ndcg(pred, &split.observed, &split.target, r)?
        } else {
            None
        };
        if let Some(s) = score {
            all.push(s);
            let activity = split.observed.row(r).0.len() + split.target.row(r).0.len();
            if activity < cfg.low_activity_threshold {
                low.push(s);
            }
        }
        if cfg.per_row {
            let (cols, counts) = split.target.row(r);
            let ll = cols
                .iter()
                .zip(counts)
                .map(|(&c, &x)| x as f64 * pred[c as usize].max(PROBABILITY_FLOOR).ln())
                .sum();
            rows.push(RowReport {
                row: r,
                n_observed: split.observed.row_total(r),
                n_target: split.target.row_total(r),
                log_likelihood: ll,
                ndcg: score,
            });
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(EvalReport {
        perplexity: px.perplexity,
        n_heldout_tokens: px.n_tokens,
        n_floored: px.n_floored,
        ndcg_all: mean(&all),
        ndcg_low_activity: mean(&low),
        per_row: cfg.per_row.then_some(rows),
    })
}

/// Thin `heldout`, fit local factors to the observed part with `vs`'s
/// global factors frozen, and score the target part.
pub fn evaluate<R: Rng + ?Sized>(
    arch: &DefArchitecture,
    vs: &VariationalState,
    heldout: &SparseCounts,
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<EvalReport> {
    let split = HeldoutSplit::thin(heldout, cfg.observed_fraction, rng)?;
    evaluate_split(arch, vs, &split, cfg, rng)
}
