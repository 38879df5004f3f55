use std::collections::HashSet;

use deepexp::data::{load_bow, load_tsv, split, write_bow, zero_subsample, Format, SparseCounts};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = Vec<Vec<u32>>> {
    (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
        prop::collection::vec(
            prop::collection::vec(prop_oneof![3 => Just(0u32), 1 => 1u32..50], c),
            r,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uci_round_trip(m in matrix()) {
        let data = SparseCounts::from_dense(&m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bow");
        write_bow(&path, &data, Format::UciBow).unwrap();
        let back = load_bow(&path, Format::UciBow).unwrap();
        prop_assert_eq!(back.to_dense(), m);
        prop_assert_eq!(back, data);
    }

    #[test]
    fn tsv_round_trip(m in matrix()) {
        let data = SparseCounts::from_dense(&m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        write_bow(&path, &data, Format::Tsv).unwrap();
        let back = load_tsv(&path, Some((data.n_rows(), data.n_cols()))).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn split_is_a_partition(n in 0usize..300, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
        let (a, b) = if a + b > 1.0 { (a / 2.0, b / 2.0) } else { (a, b) };
        let f = [a, b, (1.0 - a - b).max(0.0)];
        let s = split(n, f, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.heldout).copied().collect();
        prop_assert_eq!(all.len(), n);
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&s, &split(n, f, seed).unwrap());
    }

    #[test]
    fn zero_subsample_keeps_positives_and_never_collides(m in matrix(), rate in 0.0f64..1.0, seed in any::<u64>()) {
        let data = SparseCounts::from_dense(&m).unwrap();
        let p = zero_subsample(&data, rate, seed).unwrap();
        let mut seen = HashSet::new();
        for &(r, c, x) in &p.cells {
            prop_assert!(seen.insert((r, c)));
            prop_assert_eq!(x, m[r][c]);
        }
        prop_assert_eq!(p.cells.len() - p.n_zeros(), data.nnz());
    }
}

#[test]
fn uci_example_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("docword.txt");
    std::fs::write(&path, "3\n4\n4\n1 1 2\n1 4 1\n3 2 5\n3 3 1\n").unwrap();
    let d = load_bow(&path, Format::UciBow).unwrap();
    assert_eq!(
        d.to_dense(),
        vec![vec![2, 0, 0, 1], vec![0, 0, 0, 0], vec![0, 5, 1, 0]]
    );
    assert_eq!(d.total(), 9);
    assert_eq!(d.row_total(1), 0);
    assert_eq!(d.col_totals(), vec![2, 5, 1, 1]);
}

#[test]
fn loader_errors_name_the_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "2\n2\n1\n1 x 2\n").unwrap();
    let e = load_bow(&path, Format::UciBow).unwrap_err().to_string();
    assert!(e.contains("bad.txt") && e.contains('4'), "{e}");
    std::fs::write(&path, "2\n2\n2\n1 1 2\n").unwrap();
    assert!(load_bow(&path, Format::UciBow).is_err());
    std::fs::write(&path, "2\n2\n1\n3 1 2\n").unwrap();
    assert!(load_bow(&path, Format::UciBow).is_err());
    let missing = dir.path().join("none.txt");
    let e = load_bow(&missing, Format::UciBow).unwrap_err().to_string();
    assert!(e.contains("none.txt"), "{e}");
}

#[test]
fn zero_subsample_rate_is_binomial() {
    let data = SparseCounts::from_dense(&vec![vec![0u32; 100]; 100]).unwrap();
    let rate = 0.2;
    let p = zero_subsample(&data, rate, 4).unwrap();
    let n = 10_000.0;
    let sd = (n * rate * (1.0 - rate)).sqrt();
    assert!(
        (p.n_zeros() as f64 - n * rate).abs() < 4.0 * sd,
        "{}",
        p.n_zeros()
    );
    assert!(zero_subsample(&data, 1.5, 4).is_err());
}

#[test]
fn split_rejects_bad_fractions() {
    assert!(split(10, [0.5, 0.5, 0.5], 1).is_err());
    assert!(split(10, [-0.1, 0.6, 0.5], 1).is_err());
    let s = split(10, [1.0, 0.0, 0.0], 1).unwrap();
    assert_eq!(s.train.len(), 10);
}
