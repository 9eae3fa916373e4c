use std::collections::HashSet;
use std::time::Instant;

use ms2d_core::scan_catalog::{experiment_streams, inverse_order, path_order, ScanFamily};
use ms2d_core::{GridShape, ScanId};

fn grids(max: usize) -> impl Iterator<Item = GridShape> {
    (1..=max).flat_map(move |r| (1..=max).map(move |c| GridShape::new(r, c).unwrap()))
}

#[test]
fn every_scan_is_a_bijection_with_matching_inverse_up_to_64() {
    let start = Instant::now();
    for shape in grids(64) {
        let l = shape.len();
        for id in ScanId::ALL {
            let p = path_order(id, shape);
            assert_eq!(p.len(), l);
            let mut seen = vec![false; l];
            for &i in p.order() {
                assert!(i < l && !seen[i], "{id} on {shape} repeats or overflows at {i}");
                seen[i] = true;
            }
            let inv = p.inverse();
            for t in 0..l {
                assert_eq!(inv[p.order()[t]], t);
                assert_eq!(p.order()[inv[t]], t);
            }
            let q = inverse_order(&p);
            for t in 0..l {
                assert_eq!(q.order()[p.order()[t]], t);
            }
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn six_reversal_pairs() {
    use ScanId::*;
    let pairs = [(S1, S3), (S2, S4), (S5, S6), (S7, S8), (S9, S10), (S11, S12)];
    for shape in grids(64) {
        for (a, b) in pairs {
            let fwd = path_order(a, shape);
            let back = path_order(b, shape);
            let rev: Vec<usize> = fwd.order().iter().rev().copied().collect();
            assert_eq!(back.order(), &rev[..], "{a}/{b} on {shape}");
            assert_eq!(b.reverse_of(), Some(a));
            assert_eq!(a.reverse_of(), None);
        }
    }
}

#[test]
fn serpentines_move_between_4_neighbours() {
    for shape in grids(64) {
        for id in ScanId::ALL.into_iter().filter(|s| s.family() == ScanFamily::Serpentine) {
            let p = path_order(id, shape);
            for w in p.order().windows(2) {
                let (r0, c0) = shape.coords(w[0]);
                let (r1, c1) = shape.coords(w[1]);
                assert_eq!(r0.abs_diff(r1) + c0.abs_diff(c1), 1, "{id} on {shape}");
            }
        }
    }
}

#[test]
fn reference_orders_on_3x3() {
    let g = GridShape::new(3, 3).unwrap();
    let expect: [(ScanId, [usize; 9]); 6] = [
        (ScanId::S1, [0, 1, 2, 3, 4, 5, 6, 7, 8]),
        (ScanId::S2, [0, 3, 6, 1, 4, 7, 2, 5, 8]),
        (ScanId::S5, [0, 1, 3, 2, 4, 6, 5, 7, 8]),
        (ScanId::S7, [2, 1, 5, 0, 4, 8, 3, 7, 6]),
        (ScanId::S9, [0, 1, 2, 5, 4, 3, 6, 7, 8]),
        (ScanId::S11, [0, 3, 6, 7, 4, 1, 2, 5, 8]),
    ];
    for (id, order) in expect {
        assert_eq!(path_order(id, g).order(), &order[..], "{id}");
    }
}

#[test]
fn diagonal_steps_stay_on_their_diagonal() {
    for shape in grids(12) {
        let p = path_order(ScanId::S5, shape);
        let sums: Vec<usize> = p
            .order()
            .iter()
            .map(|&i| {
                let (r, c) = shape.coords(i);
                r + c
            })
            .collect();
        assert!(sums.windows(2).all(|w| w[1] >= w[0]));
    }
}

#[test]
fn experiment_table_shape() {
    let mut seen = HashSet::new();
    for id in 1..=21 {
        let e = experiment_streams(id).unwrap();
        let distinct: HashSet<_> = e.streams.iter().collect();
        assert_eq!(distinct.len(), e.k);
        assert!(seen.insert(e.streams), "experiment {id} duplicates another");
    }
    assert!(experiment_streams(0).is_err());
    assert!(experiment_streams(22).is_err());
}
