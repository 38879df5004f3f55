mod common;

use std::time::Instant;

use deepexp::bbvi::{
    estimate_gradient_w, fit, infer_local, Blanket, FitObserver, NoObserver, OptimizerConfig,
    RmsProp, TraceRecord,
};
use deepexp::data::SparseCounts;
use deepexp::expfam::FamilyParams;
use deepexp::model::{ancestral_sample, DefArchitecture, WeightBlock};
use deepexp::rng;
use deepexp::variational::{to_unconstrained, FactorRef, GlobalKind, VariationalState};

/// ρ g / (sqrt(mean of the last w squared gradients) + ε), written out.
fn rmsprop_oracle(grads: &[f64], w: usize, rho: f64, eps: f64) -> Vec<f64> {
    (0..grads.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(w);
            let win = &grads[lo..=t];
            let ms = win.iter().map(|g| g * g).sum::<f64>() / win.len() as f64;
            rho * grads[t] / (ms.sqrt() + eps)
        })
        .collect()
}

#[test]
fn rmsprop_matches_hand_window() {
    let grads: Vec<f64> = (0..25)
        .map(|t| ((t * 7 % 11) as f64 - 5.0) * 0.3 + 0.01)
        .collect();
    for w in [1, 3, 10] {
        let mut r = RmsProp::new(1, w);
        let expect = rmsprop_oracle(&grads, w, 0.2, 1e-6);
        for (g, e) in grads.iter().zip(expect) {
            let d = r.delta(0, *g, 0.2, 1e-6);
            assert!((d - e).abs() < 1e-14, "window {w}: {d} vs {e}");
        }
    }
}

#[test]
fn rmsprop_is_scale_free() {
    let grads: Vec<f64> = (0..30).map(|t| (t as f64 * 0.7).sin() + 0.2).collect();
    let mut a = RmsProp::new(1, 10);
    let mut b = RmsProp::new(1, 10);
    for g in grads {
        let da = a.delta(0, g, 0.2, 0.0);
        let db = b.delta(0, 1e6 * g, 0.2, 0.0);
        assert!((da - db).abs() < 1e-12 * da.abs().max(1e-3));
    }
}

#[test]
fn rmsprop_coordinates_are_independent() {
    let cfg = OptimizerConfig::default();
    let mut joint = RmsProp::new(2, 10);
    let mut solo = RmsProp::new(1, 10);
    for t in 0..15 {
        let g = [t as f64 - 7.0, 100.0 * (t as f64).cos()];
        let d = joint.step(&g, &cfg);
        let s = solo.delta(0, g[0], cfg.step_size, cfg.epsilon);
        assert_eq!(d[0], s);
    }
}

fn small_problem() -> (DefArchitecture, SparseCounts) {
    let arch = DefArchitecture::named("sparse-gamma-3-2", 12).unwrap();
    let (_, data) = ancestral_sample(&arch, 20, &mut rng::stream(4)).unwrap();
    (arch, data)
}

struct Counter {
    records: usize,
    checkpoints: Vec<usize>,
}

impl FitObserver for Counter {
    fn on_record(&mut self, _r: &TraceRecord) -> deepexp::Result<()> {
        self.records += 1;
        Ok(())
    }
    fn on_checkpoint(&mut self, it: usize, _s: &VariationalState) -> deepexp::Result<()> {
        self.checkpoints.push(it);
        Ok(())
    }
}

#[test]
fn fit_reports_every_iteration_and_checkpoint() {
    let (arch, data) = small_problem();
    let cfg = OptimizerConfig {
        max_iterations: 50,
        checkpoint_interval: 20,
        n_samples: 4,
        ..OptimizerConfig::default()
    };
    let mut obs = Counter {
        records: 0,
        checkpoints: Vec::new(),
    };
    let res = fit(&arch, &data, None, &cfg, &mut rng::stream(1), &mut obs).unwrap();
    assert_eq!(res.trace.len(), 50);
    assert_eq!(obs.records, 50);
    assert_eq!(obs.checkpoints, vec![20, 40]);
    assert!(res
        .trace
        .iter()
        .enumerate()
        .all(|(i, r)| r.iteration == i + 1));
    assert!(res.trace.iter().all(|r| r.elbo_estimate.is_finite()));
}

#[test]
fn fit_is_deterministic_per_seed() {
    let (arch, data) = small_problem();
    let cfg = OptimizerConfig {
        max_iterations: 30,
        batch_size: 5,
        n_samples: 8,
        ..OptimizerConfig::default()
    };
    let a = fit(
        &arch,
        &data,
        None,
        &cfg,
        &mut rng::stream(3),
        &mut NoObserver,
    )
    .unwrap();
    let b = fit(
        &arch,
        &data,
        None,
        &cfg,
        &mut rng::stream(3),
        &mut NoObserver,
    )
    .unwrap();
    let c = fit(
        &arch,
        &data,
        None,
        &cfg,
        &mut rng::stream(4),
        &mut NoObserver,
    )
    .unwrap();
    assert_eq!(a.state, b.state);
    assert_ne!(a.state, c.state);
    let elbos = |r: &deepexp::bbvi::FitResult| {
        r.trace
            .iter()
            .map(|t| t.elbo_estimate.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(elbos(&a), elbos(&b));
}

#[test]
fn validation_scores_appear_on_the_interval() {
    let (arch, data) = small_problem();
    let val = data.select_rows(&[0, 1, 2]).unwrap();
    let cfg = OptimizerConfig {
        max_iterations: 40,
        validation_interval: 10,
        validation_local_steps: 3,
        convergence_threshold: 0.0,
        n_samples: 4,
        ..OptimizerConfig::default()
    };
    let res = fit(
        &arch,
        &data,
        Some(&val),
        &cfg,
        &mut rng::stream(2),
        &mut NoObserver,
    )
    .unwrap();
    for r in &res.trace {
        assert_eq!(r.validation_score.is_some(), r.iteration % 10 == 0, "{r:?}");
    }
}

#[test]
fn invalid_config_is_rejected() {
    let (arch, data) = small_problem();
    for cfg in [
        OptimizerConfig {
            step_size: 0.0,
            ..Default::default()
        },
        OptimizerConfig {
            n_samples: 0,
            ..Default::default()
        },
        OptimizerConfig {
            rmsprop_window: 0,
            ..Default::default()
        },
        OptimizerConfig {
            batch_size: 0,
            ..Default::default()
        },
        OptimizerConfig {
            convergence_threshold: -1.0,
            ..Default::default()
        },
    ] {
        assert!(fit(
            &arch,
            &data,
            None,
            &cfg,
            &mut rng::stream(1),
            &mut NoObserver
        )
        .is_err());
    }
}

#[test]
fn local_inference_freezes_globals_bit_exactly() {
    let (arch, data) = small_problem();
    let cfg = OptimizerConfig {
        max_iterations: 20,
        n_samples: 4,
        ..OptimizerConfig::default()
    };
    let trained = fit(
        &arch,
        &data,
        None,
        &cfg,
        &mut rng::stream(1),
        &mut NoObserver,
    )
    .unwrap()
    .state;
    let new = data.select_rows(&[3, 4, 5, 6]).unwrap();
    let out = infer_local(&arch, &trained, &new, &cfg, &mut rng::stream(2)).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&out.global), bits(&trained.global));
    assert_eq!(out.n_rows(), 4);
}

/// Observing nothing is evidence of small activity: bottom-layer means
/// fall below their starting values.
#[test]
fn rows_without_tokens_shrink_toward_zero() {
    let (arch, data) = small_problem();
    let cfg = OptimizerConfig {
        max_iterations: 30,
        n_samples: 8,
        ..OptimizerConfig::default()
    };
    let trained = fit(
        &arch,
        &data,
        None,
        &cfg,
        &mut rng::stream(1),
        &mut NoObserver,
    )
    .unwrap()
    .state;
    let empty = SparseCounts::empty(3, 12);
    let init = trained.with_new_rows(&arch, 3, 5);
    let zero = OptimizerConfig {
        max_iterations: 0,
        ..cfg.clone()
    };
    assert_eq!(
        infer_local(&arch, &init, &empty, &zero, &mut rng::stream(2)).unwrap(),
        init
    );
    let out = infer_local(
        &arch,
        &init,
        &empty,
        &OptimizerConfig {
            max_iterations: 200,
            ..cfg
        },
        &mut rng::stream(2),
    )
    .unwrap();
    for n in 0..3 {
        let before: f64 = init.row_bottom_means(n).unwrap().iter().sum();
        let after: f64 = out.row_bottom_means(n).unwrap().iter().sum();
        assert!(
            after.is_finite() && after < before,
            "row {n}: {before} -> {after}"
        );
    }
}

/// With q(W0) equal to its prior and no data rows, the W0 entry blanket
/// minus log q is zero, so the gradient vanishes.
#[test]
fn gradient_vanishes_when_q_is_the_prior_and_data_is_empty() {
    let arch = DefArchitecture::named("sparse-gamma-2", 3).unwrap();
    let prior = FamilyParams::gamma_rate(0.1, 0.3).unwrap();
    let mut vs = VariationalState::init(&arch, 0, 1).unwrap();
    let u = to_unconstrained(&prior).unwrap();
    for idx in 0..6 {
        vs.unconstrained_mut(FactorRef::weight(WeightBlock::Observation, idx))
            .unwrap()
            .copy_from_slice(&u);
    }
    let data = SparseCounts::empty(0, 3);
    let g = estimate_gradient_w(
        &arch,
        &vs,
        &data,
        WeightBlock::Observation,
        4,
        Blanket::Entry,
        200,
        &mut rng::stream(3),
    )
    .unwrap();
    let scale = g
        .summands
        .iter()
        .flat_map(|s| s.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    for m in &g.mean {
        assert!(m.abs() < 1e-9, "{m} (largest summand {scale})");
    }
}

#[test]
fn entry_blanket_reduces_variance() {
    let arch = DefArchitecture::named("sparse-gamma-3-2", 6).unwrap();
    let (_, data) = ancestral_sample(&arch, 15, &mut rng::stream(8)).unwrap();
    let vs = VariationalState::init(&arch, 15, 2).unwrap();
    let s = 4000;
    for (block, index) in [(WeightBlock::Observation, 7), (WeightBlock::Weights(0), 3)] {
        let e = estimate_gradient_w(
            &arch,
            &vs,
            &data,
            block,
            index,
            Blanket::Entry,
            s,
            &mut rng::stream(1),
        )
        .unwrap();
        let f = estimate_gradient_w(
            &arch,
            &vs,
            &data,
            block,
            index,
            Blanket::Full,
            s,
            &mut rng::stream(1),
        )
        .unwrap();
        let (ve, vf) = (e.variance(), f.variance());
        let (se, sf) = (e.std_error(), f.std_error());
        for c in 0..ve.len() {
            assert!(ve[c] < vf[c], "{block:?} coord {c}: {} vs {}", ve[c], vf[c]);
            let tol = 4.0 * (se[c].powi(2) + sf[c].powi(2)).sqrt();
            assert!(
                (e.mean[c] - f.mean[c]).abs() < tol,
                "{block:?} coord {c}: {} vs {}",
                e.mean[c],
                f.mean[c]
            );
        }
    }
}

#[test]
fn global_blocks_are_laid_out_for_every_weight() {
    let mut r = rng::stream(6);
    for _ in 0..20 {
        let arch = common::random_arch(&mut r);
        let vs = VariationalState::init(&arch, 1, 0).unwrap();
        let n_w = arch.stack().n_weight_layers();
        for j in 0..n_w {
            assert!(vs.layout().block(GlobalKind::Weights(j)).is_some());
        }
        assert!(vs.layout().block(GlobalKind::Items(0)).is_some());
    }
}

fn time_iterations(arch: &DefArchitecture, data: &SparseCounts, s: usize) -> f64 {
    let cfg = OptimizerConfig {
        max_iterations: 20,
        n_samples: s,
        batch_size: data.n_rows(),
        ..OptimizerConfig::default()
    };
    (0..3)
        .map(|k| {
            let t = Instant::now();
            fit(arch, data, None, &cfg, &mut rng::stream(k), &mut NoObserver).unwrap();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn iteration_cost_is_linear_in_samples() {
    let arch = DefArchitecture::named("sparse-gamma-5-3", 40).unwrap();
    let (_, data) = ancestral_sample(&arch, 60, &mut rng::stream(1)).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let (t16, t64) = pool.install(|| {
        (
            time_iterations(&arch, &data, 16),
            time_iterations(&arch, &data, 64),
        )
    });
    let ratio = t64 / t16;
    assert!(
        (ratio / 4.0 - 1.0).abs() < 0.3,
        "S=64 took {ratio:.2}x the time of S=16"
    );
}
