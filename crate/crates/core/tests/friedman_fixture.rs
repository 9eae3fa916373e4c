use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use ms2d_core::stats::{chi2_sf, friedman, gamma_q, rank_matrix, summarize, table2_fixture, TABLE2_TIES};
use ms2d_core::{FriedmanOptions, ScoreMatrix, TieMethod};

fn fixture_opts() -> FriedmanOptions {
    FriedmanOptions {
        ties: TABLE2_TIES,
        tie_correction: false,
    }
}

fn rank_of(m: &ScoreMatrix, ranks: &[f64], name: &str) -> f64 {
    ranks[m.treatments.iter().position(|t| t == name).unwrap()]
}

#[test]
fn fixture_statistic_df_and_p() {
    let m = table2_fixture();
    let f = friedman(&m, fixture_opts()).unwrap();
    assert!((f.chi2 - 43.86).abs() <= 0.05, "chi2 {}", f.chi2);
    assert_eq!(f.df, 20);
    assert!((f.p - 0.0016).abs() <= 0.0002, "p {}", f.p);
    for (name, want) in [("Exp3", 2.00), ("Exp19", 2.33), ("Exp16", 18.00), ("Exp7", 19.33)] {
        let got = rank_of(&m, &f.mean_ranks, name);
        assert_eq!(format!("{got:.2}"), format!("{want:.2}"), "{name}");
    }
}

#[test]
fn fixture_statistic_matches_textbook_formula() {
    let m = table2_fixture();
    let ranks = rank_matrix(&m, TABLE2_TIES);
    let (n, k) = (3.0, 21.0);
    let sum_sq: f64 = (0..21).map(|j| ranks.iter().map(|r| r[j]).sum::<f64>().powi(2)).sum();
    let chi2 = 12.0 / (n * k * (k + 1.0)) * sum_sq - 3.0 * n * (k + 1.0);
    let f = friedman(&m, fixture_opts()).unwrap();
    assert!((f.chi2 - chi2).abs() < 1e-9);
    let reference = 1.0 - ChiSquared::new(20.0).unwrap().cdf(chi2);
    assert!((f.p - reference).abs() < 1e-10);
}

#[test]
fn fixture_ties_are_the_two_known_pairs() {
    let m = table2_fixture();
    let avg = rank_matrix(&m, TieMethod::Average);
    let last = rank_matrix(&m, TieMethod::LastWins);
    let differing: Vec<(usize, usize)> = (0..3)
        .flat_map(|b| (0..21).map(move |j| (b, j)))
        .filter(|&(b, j)| avg[b][j] != last[b][j])
        .collect();
    assert_eq!(differing, vec![(0, 3), (0, 7), (1, 2), (1, 13)]);
    let corrected = friedman(
        &m,
        FriedmanOptions {
            ties: TieMethod::Average,
            tie_correction: true,
        },
    )
    .unwrap();
    assert!(corrected.chi2 > friedman(&m, FriedmanOptions::default()).unwrap().chi2);
}

#[test]
fn fixture_deltas() {
    let s = summarize(&table2_fixture(), TABLE2_TIES);
    let deltas: Vec<String> = s.blocks.iter().map(|b| format!("{:.3}", b.delta)).collect();
    assert_eq!(deltas, ["0.114", "0.269", "0.122"]);
    assert_eq!(s.leaderboard[0].0, "Exp3");
    assert_eq!(s.leaderboard[20].0, "Exp7");
}

#[test]
fn fixture_dice_iou_duality_on_binary_datasets() {
    let m = table2_fixture();
    let miou = m.miou.as_ref().unwrap();
    for (b, (dice, iou_row)) in m.scores.iter().zip(miou).enumerate().skip(1) {
        for (j, (&d, &iou)) in dice.iter().zip(iou_row).enumerate() {
            let gap = (iou - d / (2.0 - d)).abs();
            assert!(gap <= 0.0015, "{} {}: gap {gap}", m.blocks[b], m.treatments[j]);
        }
    }
}

#[test]
fn chi2_sf_matches_statrs() {
    for df in [1usize, 2, 3, 5, 10, 20, 50] {
        let dist = ChiSquared::new(df as f64).unwrap();
        for x in [0.01, 0.5, 1.0, 5.0, 19.0, 20.0, 21.0, 43.8615, 80.0] {
            let want = 1.0 - dist.cdf(x);
            let got = chi2_sf(x, df);
            assert!(
                (got - want).abs() < 1e-12 + 1e-9 * want,
                "df {df} x {x}: {got} vs {want}"
            );
        }
    }
    assert_eq!(chi2_sf(0.0, 4), 1.0);
    assert!((gamma_q(1.0, 2.0) - (-2.0f64).exp()).abs() < 1e-14);
}

fn matrix_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..6, 2usize..8).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec(prop::collection::vec(0u8..20, k), n).prop_map(|rows| {
                rows.into_iter()
                    .map(|r| r.into_iter().map(|v| v as f64 / 20.0).collect())
                    .collect()
            }),
            Just((0..k).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #[test]
    fn average_ties_are_permutation_invariant((rows, perm) in matrix_strategy()) {
        let n = rows.len();
        let k = rows[0].len();
        let m = ScoreMatrix::new(
            (0..n).map(|i| format!("d{i}")).collect(),
            (0..k).map(|i| format!("e{i}")).collect(),
            rows,
        ).unwrap();
        let p = m.permute_treatments(&perm);
        for corr in [false, true] {
            let opts = FriedmanOptions { ties: TieMethod::Average, tie_correction: corr };
            let (a, b) = (friedman(&m, opts), friedman(&p, opts));
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert!((a.chi2 - b.chi2).abs() < 1e-9);
                    prop_assert!((a.p - b.p).abs() < 1e-12);
                    for (j, &src) in perm.iter().enumerate() {
                        prop_assert!((b.mean_ranks[j] - a.mean_ranks[src]).abs() < 1e-12);
                    }
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "permutation changed validity"),
            }
        }
    }

    #[test]
    fn rank_sums_are_fixed(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 1..6)) {
        let n = rows.len();
        let m = ScoreMatrix::new(
            (0..n).map(|i| format!("d{i}")).collect(),
            (0..5).map(|i| format!("e{i}")).collect(),
            rows,
        ).unwrap();
        for ties in [TieMethod::Average, TieMethod::FirstWins, TieMethod::LastWins] {
            for r in rank_matrix(&m, ties) {
                prop_assert!((r.iter().sum::<f64>() - 15.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chi2_is_bounded(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 2..6)) {
        let n = rows.len();
        let m = ScoreMatrix::new(
            (0..n).map(|i| format!("d{i}")).collect(),
            (0..4).map(|i| format!("e{i}")).collect(),
            rows,
        ).unwrap();
        let f = friedman(&m, FriedmanOptions::default()).unwrap();
        prop_assert!(f.chi2 >= -1e-12 && f.chi2 <= n as f64 * 3.0 + 1e-9);
        prop_assert!((0.0..=1.0).contains(&f.p));
    }

    #[test]
    fn chi2_sf_two_dof_is_exponential(x in 0.0f64..200.0) {
        prop_assert!((chi2_sf(x, 2) - (-x / 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn chi2_sf_decreases(x in 0.0f64..100.0, dx in 1e-3f64..10.0, df in 1usize..40) {
        prop_assert!(chi2_sf(x + dx, df) <= chi2_sf(x, df));
    }

    #[test]
    fn distinct_scores_rank_strictly(row in prop::collection::hash_set(0u32..10_000, 2..12)) {
        let row: Vec<f64> = row.into_iter().map(|v| v as f64 / 10_000.0).collect();
        let k = row.len();
        let m = ScoreMatrix::new(
            vec!["d0".into(), "d1".into()],
            (0..k).map(|i| format!("e{i}")).collect(),
            vec![row.clone(), row.clone()],
        ).unwrap();
        let ranks = rank_matrix(&m, TieMethod::Average);
        for a in 0..k {
            for b in 0..k {
                if row[a] > row[b] {
                    prop_assert!(ranks[0][a] < ranks[0][b]);
                }
            }
        }
    }
}
