use mlh_core::codebook::{
    build_codebook, generate_centers, gv_min_distance, select_distance, verify_codebook,
    CodebookError, DistanceMode, HashConfig,
};
use proptest::prelude::*;

/// `S(k) = Σ_{i≤k} C(q,i)` from Pascal's triangle in u128; exact for q ≤ 64.
fn partial_sums(q: usize) -> Vec<u128> {
    let mut row = vec![1u128];
    for _ in 0..q {
        let mut next = vec![1u128; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    row.iter()
        .scan(0u128, |acc, &b| {
            *acc += b;
            Some(*acc)
        })
        .collect()
}

fn s(sums: &[u128], k: isize) -> u128 {
    if k < 0 {
        0
    } else {
        sums[(k as usize).min(sums.len() - 1)]
    }
}

/// Brute-force minimum distance between distinct rows.
fn naive_min_distance(rows: &[&[i8]], q: usize) -> usize {
    let mut best = q + 1;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = rows[i].iter().zip(rows[j]).filter(|(a, b)| a != b).count();
            best = best.min(d);
        }
    }
    best
}

#[test]
fn regression_values() {
    let cfg = HashConfig::new(16, 10).unwrap();
    assert_eq!(gv_min_distance(cfg, DistanceMode::PaperLiteral).unwrap(), 5);
    let sums = partial_sums(16);
    assert_eq!(s(&sums, 3), 697);
    assert_eq!(s(&sums, 4), 2517);

    let big = HashConfig::new(16, 100).unwrap();
    assert!(matches!(
        gv_min_distance(big, DistanceMode::PaperLiteral),
        Err(CodebookError::Infeasible { .. })
    ));
    assert_eq!(gv_min_distance(big, DistanceMode::StandardGv).unwrap(), 4);
    let sel = select_distance(big, DistanceMode::PaperLiteral).unwrap();
    assert!(sel.fell_back);
    assert_eq!(sel.d, 4);
}

#[test]
fn standard_gv_is_largest_satisfying_distance() {
    for q in [8usize, 16, 33, 64] {
        let sums = partial_sums(q);
        for c in [2usize, 10, 100, 1000] {
            let cfg = HashConfig::new(q, c).unwrap();
            let d = gv_min_distance(cfg, DistanceMode::StandardGv).unwrap();
            let space = 1u128 << q;
            assert!(
                (c as u128) * s(&sums, d as isize - 2) < space,
                "q={q} c={c} d={d}"
            );
            assert!(
                (c as u128) * s(&sums, d as isize - 1) >= space,
                "q={q} c={c} d={d}"
            );
        }
    }
}

#[test]
fn overfull_request_fails_and_is_beyond_hamming_bound() {
    // any distance-3 code of length 8 has at most 2^8 / (1 + 8) = 28 words
    let cfg = HashConfig::new(8, 300).unwrap();
    assert!(matches!(
        generate_centers(cfg, 3, 0, 4),
        Err(CodebookError::ConstructionFailed { d: 3, .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn paper_literal_double_inequality(q in 8usize..=64, c in 2usize..=32, seed in any::<u64>()) {
        let cfg = HashConfig::new(q, c).unwrap();
        let sums = partial_sums(q);
        match gv_min_distance(cfg, DistanceMode::PaperLiteral) {
            Ok(d) => {
                let target = 1u128 << c;
                prop_assert!(s(&sums, d as isize - 2) < target);
                prop_assert!(target <= s(&sums, d as isize - 1));
            }
            Err(CodebookError::Infeasible { .. }) => prop_assert!(c > q),
            Err(e) => prop_assert!(false, "{e}"),
        }

        let cb = build_codebook(cfg, DistanceMode::PaperLiteral, seed, 8).unwrap();
        let rows: Vec<&[i8]> = (0..c).map(|i| cb.center(i)).collect();
        let naive = naive_min_distance(&rows, q);
        prop_assert_eq!(verify_codebook(&cb), naive);
        prop_assert!(naive >= cb.d);
        prop_assert!(cb.centers().iter().all(|&v| v == 1 || v == -1));
        prop_assert!(cb.d <= cb.meta.requested_d);

        let again = build_codebook(cfg, DistanceMode::PaperLiteral, seed, 8).unwrap();
        prop_assert_eq!(cb, again);
    }

    #[test]
    fn successful_construction_meets_distance(q in 8usize..=64, c in 2usize..=32, d in 1usize..=8, seed in any::<u64>()) {
        let cfg = HashConfig::new(q, c).unwrap();
        if let Ok(cb) = generate_centers(cfg, d, seed, 4) {
            prop_assert!(verify_codebook(&cb) >= d);
        }
    }
}
