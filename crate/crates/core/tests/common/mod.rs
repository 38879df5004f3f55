#![allow(dead_code)]

use deepexp::data::SparseCounts;
use deepexp::expfam::{Family, FamilyParams};
use deepexp::model::{
    DefArchitecture, DefStack, Hyperparameters, LatentVar, LayerKind, LayerSpec, ObservationSpec,
    WeightBlock,
};
use deepexp::variational::{to_unconstrained, FactorRef, VariationalState};
use rand::Rng;
use statrs::function::gamma::ln_gamma;

pub fn ln_fact(x: u32) -> f64 {
    (1..=x).map(|k| (k as f64).ln()).sum()
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// log(1 + e^x) written out directly; fine for the moderate arguments used
/// in the oracles.
pub fn log1pexp(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn bern_lp(z: u8, eta: f64) -> f64 {
    z as f64 * eta - log1pexp(eta)
}

pub fn pois_lp(x: u32, rate: f64) -> f64 {
    x as f64 * rate.ln() - rate - ln_fact(x)
}

pub fn gamma_rate_lp(z: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * z.ln() - rate * z
}

/// Random small architecture: depth 1 to 3, layers of 1 to 4 units, 1 to 5
/// items, any of the four layer kinds, sometimes a double DEF.
pub fn random_arch<R: Rng>(rng: &mut R) -> DefArchitecture {
    let hp = Hyperparameters::default();
    let kinds = [
        LayerKind::SparseGamma,
        LayerKind::Sigmoid,
        LayerKind::PoissonLog,
        LayerKind::PoissonSoftplus,
    ];
    let depth = rng.random_range(1..=3);
    let sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=4)).collect();
    let kind = kinds[rng.random_range(0..4)];
    let stack = hp.stack(kind, &sizes, 0.3).unwrap();
    let n_items = rng.random_range(1..=5);
    if rng.random_bool(0.25) {
        let rdepth = rng.random_range(1..=2);
        let mut rsizes = vec![sizes[0]];
        rsizes.extend((1..rdepth).map(|_| rng.random_range(1..=3)));
        let rows = hp.stack(LayerKind::SparseGamma, &rsizes, 0.1).unwrap();
        DefArchitecture::new(stack, ObservationSpec::DoubleDef { n_items, rows }).unwrap()
    } else {
        DefArchitecture::new(
            stack,
            ObservationSpec::PoissonCounts {
                vocab_size: n_items,
                weight_prior: hp.gamma_weights().unwrap(),
            },
        )
        .unwrap()
    }
}

/// A 2-layer sigmoid belief network with two units per layer over two
/// items. Shared factors are pinned to near point masses at `w1`, `b1`
/// and `w0`, so for fixed local factors everything is enumerable.
pub struct Enumerable {
    pub arch: DefArchitecture,
    pub data: SparseCounts,
    pub vs: VariationalState,
    /// w1[a][k]: weight from top unit a to bottom unit k.
    pub w1: [[f64; 2]; 2],
    pub b1: [f64; 2],
    /// w0[i][k]: observation weight of item i on bottom unit k.
    pub w0: [[f64; 2]; 2],
    pub top_eta: f64,
    pub x: [u32; 2],
}

pub const PIN_VARIANCE: f64 = 1e-10;
// scales w / PIN_SHAPE must stay above the softplus floor of 1e-10
pub const PIN_SHAPE: f64 = 1e8;

fn set(vs: &mut VariationalState, f: FactorRef, p: FamilyParams) {
    let u = to_unconstrained(&p).unwrap();
    vs.unconstrained_mut(f).unwrap().copy_from_slice(&u);
}

impl Enumerable {
    pub fn new<R: Rng>(rng: &mut R, x: [u32; 2]) -> Self {
        let arch = DefArchitecture::named("sigmoid-2-2", 2).unwrap();
        let data = SparseCounts::from_dense(&[x.to_vec()]).unwrap();
        let mut vs = VariationalState::init(&arch, 1, rng.random()).unwrap();
        let mut w1 = [[0.0; 2]; 2];
        let mut b1 = [0.0; 2];
        let mut w0 = [[0.0; 2]; 2];
        for a in 0..2 {
            for k in 0..2 {
                w1[a][k] = rng.random_range(-2.0..2.0);
                set(
                    &mut vs,
                    FactorRef::weight(WeightBlock::Weights(0), k * 2 + a),
                    FamilyParams::normal(w1[a][k], PIN_VARIANCE).unwrap(),
                );
            }
        }
        for k in 0..2 {
            b1[k] = rng.random_range(-1.0..1.0);
            set(
                &mut vs,
                FactorRef::weight(WeightBlock::Intercept(0), k),
                FamilyParams::normal(b1[k], PIN_VARIANCE).unwrap(),
            );
        }
        for i in 0..2 {
            for k in 0..2 {
                w0[i][k] = rng.random_range(0.3..3.0);
                set(
                    &mut vs,
                    FactorRef::weight(WeightBlock::Observation, i * 2 + k),
                    FamilyParams::gamma_scale(PIN_SHAPE, w0[i][k] / PIN_SHAPE).unwrap(),
                );
            }
        }
        let mut e = Enumerable {
            arch,
            data,
            vs,
            w1,
            b1,
            w0,
            top_eta: (0.1f64 / 0.9).ln(),
            x,
        };
        let etas: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        e.set_local(&etas);
        e
    }

    /// Local factors in the order (layer 0 unit 0, layer 0 unit 1, layer 1
    /// unit 0, layer 1 unit 1).
    pub fn local_factors(&self) -> [FactorRef; 4] {
        let f = |layer, unit| FactorRef::latent(&self.arch, LatentVar::Row { n: 0, layer, unit });
        [f(0, 0), f(0, 1), f(1, 0), f(1, 1)]
    }

    pub fn local_vars(&self) -> [LatentVar; 4] {
        let v = |layer, unit| LatentVar::Row { n: 0, layer, unit };
        [v(0, 0), v(0, 1), v(1, 0), v(1, 1)]
    }

    pub fn set_local(&mut self, etas: &[f64]) {
        for (f, &eta) in self.local_factors().iter().zip(etas) {
            assert_eq!(self.vs.family(*f).unwrap(), Family::Bernoulli);
            self.vs.unconstrained_mut(*f).unwrap()[0] = eta;
        }
    }

    pub fn local_etas(&self) -> Vec<f64> {
        self.local_factors()
            .iter()
            .map(|f| self.vs.unconstrained(*f).unwrap()[0])
            .collect()
    }

    /// log p(x, z1, z2 | W) written from the model definition.
    pub fn log_joint(&self, z1: [u8; 2], z2: [u8; 2]) -> f64 {
        let mut lp = 0.0;
        for k in 0..2 {
            lp += bern_lp(z2[k], self.top_eta);
        }
        for k in 0..2 {
            let a = z2[0] as f64 * self.w1[0][k] + z2[1] as f64 * self.w1[1][k] + self.b1[k];
            lp += bern_lp(z1[k], a);
        }
        for i in 0..2 {
            let rate = (z1[0] as f64 * self.w0[i][0] + z1[1] as f64 * self.w0[i][1]).max(1e-10);
            lp += pois_lp(self.x[i], rate);
        }
        lp
    }

    fn states() -> impl Iterator<Item = ([u8; 2], [u8; 2])> {
        (0..16u8).map(|s| ([s & 1, (s >> 1) & 1], [(s >> 2) & 1, (s >> 3) & 1]))
    }

    /// log p(x | W) by summing over all 16 latent configurations.
    pub fn log_evidence(&self) -> f64 {
        let terms: Vec<f64> = Self::states()
            .map(|(z1, z2)| self.log_joint(z1, z2))
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    /// E_q[log p(x, z | W) - log q(z)] for local natural parameters `etas`.
    pub fn local_elbo(&self, etas: &[f64]) -> f64 {
        Self::states()
            .map(|(z1, z2)| {
                let zs = [z1[0], z1[1], z2[0], z2[1]];
                let lq: f64 = zs.iter().zip(etas).map(|(&z, &e)| bern_lp(z, e)).sum();
                lq.exp() * (self.log_joint(z1, z2) - lq)
            })
            .sum()
    }

    /// Central finite-difference gradient of [`Self::local_elbo`] with one
    /// Richardson step.
    pub fn local_elbo_grad(&self) -> Vec<f64> {
        let eta = self.local_etas();
        (0..4)
            .map(|c| {
                let d = |h: f64| {
                    let mut p = eta.clone();
                    let mut m = eta.clone();
                    p[c] += h;
                    m[c] -= h;
                    (self.local_elbo(&p) - self.local_elbo(&m)) / (2.0 * h)
                };
                let h = 1e-3;
                (4.0 * d(h / 2.0) - d(h)) / 3.0
            })
            .collect()
    }
}

/// One gamma layer with prior `prior`: the item side of a bag-of-words
/// model, written out as a stack.
pub fn single_gamma_stack(size: usize, prior: FamilyParams) -> DefStack {
    DefStack::new(vec![LayerSpec::top(size, Family::Gamma)], prior).unwrap()
}
