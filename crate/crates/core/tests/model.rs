mod common;

use common::{gamma_rate_lp, pois_lp};
use deepexp::bbvi::{SampleTerms, TermContext};
use deepexp::data::SparseCounts;
use deepexp::expfam::FamilyParams;
use deepexp::model::{
    ancestral_sample, double_def_log_likelihood, log_joint, markov_blanket_w,
    markov_blanket_w_entry, markov_blanket_z, DefArchitecture, LatentState, LatentVar,
    ObservationSpec, StackWeights, WeightBlock,
};
use deepexp::rng;
use deepexp::variational::{GlobalKind, VariationalState};
use rand::Rng;

fn one_layer_state(z: &[f64], w: &[Vec<f64>]) -> LatentState {
    LatentState {
        rows: vec![z.to_vec()],
        weights: StackWeights::empty(),
        items: w.to_vec(),
        item_weights: StackWeights::empty(),
    }
}

#[test]
fn one_layer_log_joint_by_hand() {
    let arch = DefArchitecture::named("sparse-gamma-2", 3).unwrap();
    let z = [0.7, 2.1];
    let w = vec![vec![0.3, 0.05], vec![1.2, 0.4], vec![0.01, 2.0]];
    let x = [2u32, 0, 5];
    let data = SparseCounts::from_dense(&[x.to_vec()]).unwrap();
    let state = one_layer_state(&z, &w);
    let mut expect = 0.0;
    for zk in z {
        expect += gamma_rate_lp(zk, 0.3, 0.3);
    }
    for (i, wi) in w.iter().enumerate() {
        for &v in wi {
            expect += gamma_rate_lp(v, 0.1, 0.3);
        }
        expect += pois_lp(x[i], z[0] * wi[0] + z[1] * wi[1]);
    }
    let got = log_joint(&arch, &data, &state).unwrap();
    assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
}

#[test]
fn empty_row_contributes_minus_total_rate() {
    let arch = DefArchitecture::named("sparse-gamma-2", 3).unwrap();
    let z = [0.7, 2.1];
    let w = vec![vec![0.3, 0.05], vec![1.2, 0.4], vec![0.01, 2.0]];
    let empty = SparseCounts::empty(1, 3);
    let state = one_layer_state(&z, &w);
    let blanket = markov_blanket_z(
        &arch,
        &empty,
        &state,
        LatentVar::Row {
            n: 0,
            layer: 0,
            unit: 0,
        },
    )
    .unwrap();
    let own = gamma_rate_lp(z[0], 0.3, 0.3);
    let rates: f64 = w.iter().map(|wi| z[0] * wi[0] + z[1] * wi[1]).sum();
    assert!((blanket - own + rates).abs() < 1e-12, "{blanket}");
}

#[test]
fn double_def_likelihood_fixtures() {
    // orthogonal unit vectors: rate 0, count 0
    let a = vec![vec![1.0, 0.0]];
    let b = vec![vec![0.0, 1.0]];
    assert_eq!(
        double_def_log_likelihood(&a, &b, &[(0, 0, 0)]).unwrap(),
        0.0
    );
    assert_eq!(
        double_def_log_likelihood(&a, &b, &[(0, 0, 3)]).unwrap(),
        f64::NEG_INFINITY
    );
    // aligned unit vectors, count 0: -1
    assert_eq!(
        double_def_log_likelihood(&a, &a, &[(0, 0, 0)]).unwrap(),
        -1.0
    );

    let cols = vec![vec![0.5, 1.0], vec![2.0, 0.1]];
    let rows = vec![vec![1.5, 0.2], vec![0.3, 3.0]];
    let counts = [[1u32, 4], [0, 2]];
    let cells: Vec<(usize, usize, u32)> = (0..2)
        .flat_map(|n| (0..2).map(move |i| (n, i, counts[n][i])))
        .collect();
    let zeros: Vec<(usize, usize, u32)> = cells.iter().map(|&(n, i, _)| (n, i, 0)).collect();
    let mut expect = 0.0;
    let mut minus_rates = 0.0;
    for n in 0..2 {
        for i in 0..2 {
            let rate = cols[n][0] * rows[i][0] + cols[n][1] * rows[i][1];
            expect += pois_lp(counts[n][i], rate);
            minus_rates -= rate;
        }
    }
    let got = double_def_log_likelihood(&cols, &rows, &cells).unwrap();
    assert!((got - expect).abs() < 1e-12);
    let got0 = double_def_log_likelihood(&cols, &rows, &zeros).unwrap();
    assert!((got0 - minus_rates).abs() < 1e-12);
}

/// A bag-of-words model and a double DEF whose item stack is one gamma layer
/// with the same prior agree on every term.
#[test]
fn depth_zero_item_stack_matches_bag_of_words() {
    let w0 = FamilyParams::gamma_rate(0.1, 0.3).unwrap();
    let bow = DefArchitecture::named("sparse-gamma-3-2", 6).unwrap();
    let dd = DefArchitecture::new(
        bow.stack().clone(),
        ObservationSpec::DoubleDef {
            n_items: 6,
            rows: common::single_gamma_stack(3, w0),
        },
    )
    .unwrap();
    assert!(dd.is_double_def());
    let mut r = rng::stream(3);
    let (state, data) = ancestral_sample(&bow, 8, &mut r).unwrap();
    let a = log_joint(&bow, &data, &state).unwrap();
    let b = log_joint(&dd, &data, &state).unwrap();
    assert_eq!(a, b);
    for i in 0..6 {
        for k in 0..3 {
            let idx = i * 3 + k;
            let ea =
                markov_blanket_w_entry(&bow, &data, &state, WeightBlock::Observation, idx).unwrap();
            let eb =
                markov_blanket_w_entry(&dd, &data, &state, WeightBlock::Observation, idx).unwrap();
            assert_eq!(ea, eb);
        }
    }
    let vs = VariationalState::init(&bow, 8, 1).unwrap();
    let vd = VariationalState::init(&dd, 8, 1).unwrap();
    assert_eq!(vs.global.len(), vd.global.len());
    assert_eq!(vs.local.len(), vd.local.len());
}

#[test]
fn ancestral_counts_have_the_model_mean() {
    let arch = DefArchitecture::named("sparse-gamma-3-2", 4).unwrap();
    let mut r = rng::stream(21);
    let n = 10_000;
    let (state, data) = ancestral_sample(&arch, n, &mut r).unwrap();
    let w1 = &state.weights.weights[0];
    // E[z_1k] = Σ_a W1[k, a] E[z_2a], and E[z_2a] = 0.3 / 0.3
    let ez1: Vec<f64> = (0..3).map(|k| w1.unit(k).iter().sum()).collect();
    for i in 0..4 {
        let expect: f64 = (0..3).map(|k| ez1[k] * state.items[i][k]).sum();
        let xs: Vec<f64> = (0..n).map(|d| data.get(d, i) as f64).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!(
            (mean - expect).abs() < 4.0 * se.max(1e-12),
            "item {i}: {mean} vs {expect} (se {se})"
        );
    }
}

#[test]
fn ancestral_sampling_is_seeded() {
    let arch = DefArchitecture::named("sigmoid-3-2", 5).unwrap();
    let (sa, a) = ancestral_sample(&arch, 30, &mut rng::stream(9)).unwrap();
    let (sb, b) = ancestral_sample(&arch, 30, &mut rng::stream(9)).unwrap();
    let (_, c) = ancestral_sample(&arch, 30, &mut rng::stream(10)).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_ne!(a, c);
}

#[test]
fn top_weight_blanket_ignores_the_data() {
    let arch = DefArchitecture::named("sparse-gamma-3-2-2", 4).unwrap();
    let mut r = rng::stream(5);
    let (state, data) = ancestral_sample(&arch, 6, &mut r).unwrap();
    let other = SparseCounts::from_dense(&vec![vec![7, 0, 1, 0]; 6]).unwrap();
    for j in 0..2 {
        let a = markov_blanket_w(&arch, &data, &state, WeightBlock::Weights(j)).unwrap();
        let b = markov_blanket_w(&arch, &other, &state, WeightBlock::Weights(j)).unwrap();
        assert_eq!(a, b);
    }
    // middle layer: own term plus the layer below, not the data
    let v = LatentVar::Row {
        n: 2,
        layer: 1,
        unit: 0,
    };
    let a = markov_blanket_z(&arch, &data, &state, v).unwrap();
    let b = markov_blanket_z(&arch, &other, &state, v).unwrap();
    assert_eq!(a, b);
    let v = LatentVar::Row {
        n: 2,
        layer: 0,
        unit: 0,
    };
    assert_ne!(
        markov_blanket_z(&arch, &data, &state, v).unwrap(),
        markov_blanket_z(&arch, &other, &state, v).unwrap()
    );
}

#[test]
fn shape_mismatches_are_errors() {
    let arch = DefArchitecture::named("sparse-gamma-2", 3).unwrap();
    let (state, _) = ancestral_sample(&arch, 2, &mut rng::stream(1)).unwrap();
    let wrong = SparseCounts::empty(2, 4);
    assert!(log_joint(&arch, &wrong, &state).is_err());
    let short = SparseCounts::empty(1, 3);
    assert!(log_joint(&arch, &short, &state).is_err());
    let ok = SparseCounts::empty(2, 3);
    assert!(markov_blanket_z(
        &arch,
        &ok,
        &state,
        LatentVar::Row {
            n: 0,
            layer: 1,
            unit: 0
        }
    )
    .is_err());
    assert!(markov_blanket_w(&arch, &ok, &state, WeightBlock::Weights(0)).is_err());
}

/// The per-sample term cache used by training reproduces the model's own
/// blankets and log-joint.
#[test]
fn cached_terms_match_model_blankets() {
    let mut r = rng::stream(31);
    for _ in 0..40 {
        let arch = common::random_arch(&mut r);
        let n = r.random_range(1..=4);
        let (_, data) = ancestral_sample(&arch, n, &mut r).unwrap();
        let vs = VariationalState::init(&arch, n, r.random()).unwrap();
        let state = vs.sample_q(&arch, &mut r).unwrap();
        let ctx = TermContext::new(&arch, &vs).unwrap();
        let batch: Vec<usize> = (0..n).collect();
        let t = SampleTerms::compute(&ctx, &data, &batch, &state, 1.0);
        let lj = log_joint(&arch, &data, &state).unwrap();
        let tol = |v: f64| 1e-9 * v.abs().max(1.0);
        assert!(
            (t.log_joint() - lj).abs() < tol(lj),
            "{} vs {lj}",
            t.log_joint()
        );
        for b in 0..n {
            for (j, l) in arch.stack().layers().iter().enumerate() {
                for k in 0..l.size {
                    let v = LatentVar::Row {
                        n: b,
                        layer: j,
                        unit: k,
                    };
                    let e = markov_blanket_z(&arch, &data, &state, v).unwrap();
                    let g = t.blanket_row(&ctx, b, j, k);
                    assert!((e - g).abs() < tol(e), "{v:?}: {e} vs {g}");
                }
            }
        }
        for (bi, block) in vs.layout().global.iter().enumerate() {
            for index in 0..block.len {
                let e = match block.kind {
                    GlobalKind::Items(j) => {
                        let size = arch.item_stack().layer(j).size;
                        let v = LatentVar::Item {
                            i: index / size,
                            layer: j,
                            unit: index % size,
                        };
                        markov_blanket_z(&arch, &data, &state, v).unwrap()
                    }
                    GlobalKind::Weights(j) => {
                        markov_blanket_w_entry(&arch, &data, &state, WeightBlock::Weights(j), index)
                            .unwrap()
                    }
                    GlobalKind::Intercept(j) => markov_blanket_w_entry(
                        &arch,
                        &data,
                        &state,
                        WeightBlock::Intercept(j),
                        index,
                    )
                    .unwrap(),
                    GlobalKind::ItemWeights(j) => markov_blanket_w_entry(
                        &arch,
                        &data,
                        &state,
                        WeightBlock::ItemWeights(j),
                        index,
                    )
                    .unwrap(),
                    GlobalKind::ItemIntercept(j) => markov_blanket_w_entry(
                        &arch,
                        &data,
                        &state,
                        WeightBlock::ItemIntercept(j),
                        index,
                    )
                    .unwrap(),
                };
                let g = t.blanket_global(&ctx, bi, index);
                assert!(
                    (e - g).abs() < tol(e),
                    "{:?}[{index}]: {e} vs {g}",
                    block.kind
                );
            }
        }
    }
}

/// With a minibatch, row terms enter global blankets and the log-joint
/// scaled by N / B.
#[test]
fn cached_terms_scale_row_terms() {
    let arch = DefArchitecture::named("sparse-gamma-2-2", 3).unwrap();
    let mut r = rng::stream(32);
    let (_, data) = ancestral_sample(&arch, 4, &mut r).unwrap();
    let vs = VariationalState::init(&arch, 4, 2).unwrap();
    let mut state = vs.sample_q(&arch, &mut r).unwrap();
    let batch = [1usize, 3];
    let sub = data.select_rows(&batch).unwrap();
    state.rows = batch.iter().map(|&b| state.rows[b].clone()).collect();
    let ctx = TermContext::new(&arch, &vs).unwrap();
    let one = SampleTerms::compute(&ctx, &data, &batch, &state, 1.0);
    let two = SampleTerms::compute(&ctx, &data, &batch, &state, 2.0);
    let local = one.local_log_joint();
    assert!((two.log_joint() - one.log_joint() - local).abs() < 1e-9 * local.abs().max(1.0));
    let wb = vs.layout().block_index(GlobalKind::Weights(0)).unwrap();
    let prior = FamilyParams::gamma_rate(0.1, 0.3).unwrap();
    for index in 0..4 {
        let w = state.weights.weights[0].as_slice()[index];
        let p = deepexp::expfam::log_density(&prior, w).unwrap();
        let d1 = one.blanket_global(&ctx, wb, index) - p;
        let d2 = two.blanket_global(&ctx, wb, index) - p;
        assert!((d2 - 2.0 * d1).abs() < 1e-9 * d1.abs().max(1.0));
        let e =
            markov_blanket_w_entry(&arch, &sub, &state, WeightBlock::Weights(0), index).unwrap();
        assert!((one.blanket_global(&ctx, wb, index) - e).abs() < 1e-9 * e.abs().max(1.0));
    }
}
