//! The twelve primitive patch scans, their inverses, and the 21-experiment
//! stream assignment table.
//!
//! Patch indices are row-major: the patch at (r, c) of an H x W grid has
//! linear index `r * W + c`. A scan's `order[t]` is the linear index of the
//! patch visited at step `t`.
//!
//! Path geometry:
//!
//! | id  | path                                                             |
//! |-----|------------------------------------------------------------------|
//! | S1  | row raster, rows top to bottom, each left to right               |
//! | S2  | column raster, columns left to right, each top to bottom         |
//! | S3  | S1 reversed                                                      |
//! | S4  | S2 reversed                                                      |
//! | S5  | anti-diagonals `r + c` ascending, row ascending within each      |
//! | S6  | S5 reversed                                                      |
//! | S7  | main diagonals `r - c + W - 1` ascending, row ascending within   |
//! | S8  | S7 reversed                                                      |
//! | S9  | horizontal serpentine from top-left (even rows L->R, odd R->L)   |
//! | S10 | S9 reversed                                                      |
//! | S11 | vertical serpentine from top-left (even cols T->B, odd B->T)     |
//! | S12 | S11 reversed                                                     |

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig(format!(
                "grid must be at least 1x1, got {rows}x{cols}"
            )));
        }
        Ok(GridShape { rows, cols })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    /// Number of patches L = H * W.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for GridShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Parse(format!("grid `{s}` is not of the form HxW")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("grid `{s}` is not of the form HxW")))
        };
        GridShape::new(parse(r)?, parse(c)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanFamily {
    Raster,
    Diagonal,
    Serpentine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScanId {
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
    S7,
    S8,
    S9,
    S10,
    S11,
    S12,
}

impl ScanId {
    pub const ALL: [ScanId; 12] = [
        ScanId::S1,
        ScanId::S2,
        ScanId::S3,
        ScanId::S4,
        ScanId::S5,
        ScanId::S6,
        ScanId::S7,
        ScanId::S8,
        ScanId::S9,
        ScanId::S10,
        ScanId::S11,
        ScanId::S12,
    ];

    /// 1-based number (S1 -> 1).
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn from_number(n: usize) -> Option<ScanId> {
        n.checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }

    /// For reversal scans, the forward scan they reverse.
    pub fn reverse_of(self) -> Option<ScanId> {
        use ScanId::*;
        match self {
            S3 => Some(S1),
            S4 => Some(S2),
            S6 => Some(S5),
            S8 => Some(S7),
            S10 => Some(S9),
            S12 => Some(S11),
            _ => None,
        }
    }

    pub fn family(self) -> ScanFamily {
        use ScanId::*;
        match self {
            S1 | S2 | S3 | S4 => ScanFamily::Raster,
            S5 | S6 | S7 | S8 => ScanFamily::Diagonal,
            S9 | S10 | S11 | S12 => ScanFamily::Serpentine,
        }
    }

    pub fn description(self) -> &'static str {
        use ScanId::*;
        match self {
            S1 => "row raster, left to right",
            S2 => "column raster, top to bottom",
            S3 => "row raster, right to left",
            S4 => "column raster, bottom to top",
            S5 => "anti-diagonal sweep",
            S6 => "anti-diagonal sweep, reversed",
            S7 => "main-diagonal sweep",
            S8 => "main-diagonal sweep, reversed",
            S9 => "horizontal serpentine",
            S10 => "horizontal serpentine, reversed",
            S11 => "vertical serpentine",
            S12 => "vertical serpentine, reversed",
        }
    }
}

impl fmt::Display for ScanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.number())
    }
}

impl FromStr for ScanId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim().trim_start_matches(['S', 's']);
        digits
            .parse::<usize>()
            .ok()
            .and_then(ScanId::from_number)
            .ok_or_else(|| Error::Parse(format!("unknown scan id `{s}`")))
    }
}

/// A visitation order over a patch grid together with its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanPermutation {
    shape: GridShape,
    order: Vec<usize>,
    inverse: Vec<usize>,
}

impl ScanPermutation {
    /// Validates that `order` is a bijection on `0..shape.len()`.
    pub fn from_order(shape: GridShape, order: Vec<usize>) -> Result<Self> {
        let n = shape.len();
        if order.len() != n {
            return Err(Error::shape(format!("{n} indices"), order.len()));
        }
        let mut inverse = vec![usize::MAX; n];
        for (t, &idx) in order.iter().enumerate() {
            if idx >= n || inverse[idx] != usize::MAX {
                return Err(Error::InvalidConfig(format!(
                    "order is not a permutation (index {idx} at step {t})"
                )));
            }
            inverse[idx] = t;
        }
        Ok(ScanPermutation { shape, order, inverse })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `inverse()[patch]` is the step at which `patch` is visited.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Same patches, visited back to front.
    pub fn reversed(&self) -> ScanPermutation {
        let order: Vec<usize> = self.order.iter().rev().copied().collect();
        let n = order.len();
        let inverse = self.inverse.iter().map(|&t| n - 1 - t).collect();
        ScanPermutation {
            shape: self.shape,
            order,
            inverse,
        }
    }
}

fn row_raster(shape: GridShape) -> Vec<usize> {
    (0..shape.len()).collect()
}

fn column_raster(shape: GridShape) -> Vec<usize> {
    let mut order = Vec::with_capacity(shape.len());
    for c in 0..shape.cols {
        for r in 0..shape.rows {
            order.push(shape.index(r, c));
        }
    }
    order
}

fn anti_diagonal(shape: GridShape) -> Vec<usize> {
    let mut order = Vec::with_capacity(shape.len());
    for d in 0..shape.rows + shape.cols - 1 {
        // r + c = d, r ascending
        let r_lo = d.saturating_sub(shape.cols - 1);
        let r_hi = d.min(shape.rows - 1);
        for r in r_lo..=r_hi {
            order.push(shape.index(r, d - r));
        }
    }
    order
}

fn main_diagonal(shape: GridShape) -> Vec<usize> {
    let mut order = Vec::with_capacity(shape.len());
    let w = shape.cols;
    for d in 0..shape.rows + shape.cols - 1 {
        // r - c + W - 1 = d  =>  c = r + W - 1 - d, r ascending
        for r in 0..shape.rows {
            let shifted = r + w - 1;
            if shifted >= d && shifted - d < w {
                order.push(shape.index(r, shifted - d));
            }
        }
    }
    order
}

fn horizontal_serpentine(shape: GridShape) -> Vec<usize> {
    let mut order = Vec::with_capacity(shape.len());
    for r in 0..shape.rows {
        if r % 2 == 0 {
            order.extend((0..shape.cols).map(|c| shape.index(r, c)));
        } else {
            order.extend((0..shape.cols).rev().map(|c| shape.index(r, c)));
        }
    }
    order
}

fn vertical_serpentine(shape: GridShape) -> Vec<usize> {
    let mut order = Vec::with_capacity(shape.len());
    for c in 0..shape.cols {
        if c % 2 == 0 {
            order.extend((0..shape.rows).map(|r| shape.index(r, c)));
        } else {
            order.extend((0..shape.rows).rev().map(|r| shape.index(r, c)));
        }
    }
    order
}

/// Visitation order of scan `id` over `shape`.
pub fn path_order(id: ScanId, shape: GridShape) -> ScanPermutation {
    use ScanId::*;
    if let Some(forward) = id.reverse_of() {
        return path_order(forward, shape).reversed();
    }
    let order = match id {
        S1 => row_raster(shape),
        S2 => column_raster(shape),
        S5 => anti_diagonal(shape),
        S7 => main_diagonal(shape),
        S9 => horizontal_serpentine(shape),
        S11 => vertical_serpentine(shape),
        _ => unreachable!("reversal scans handled above"),
    };
    ScanPermutation::from_order(shape, order).expect("catalogue paths are permutations")
}

/// The permutation whose order is `p`'s inverse.
pub fn inverse_order(p: &ScanPermutation) -> ScanPermutation {
    ScanPermutation {
        shape: p.shape,
        order: p.inverse.clone(),
        inverse: p.order.clone(),
    }
}

/// Token `t` of the result is the feature vector at patch `p.order()[t]`.
pub fn serialize(v: &FeatureMap, p: &ScanPermutation) -> Result<TokenSequence> {
    if v.shape() != p.shape() {
        return Err(Error::shape(p.shape(), v.shape()));
    }
    let c = v.channels();
    let mut data = Vec::with_capacity(v.as_slice().len());
    for &idx in p.order() {
        data.extend_from_slice(v.token(idx));
    }
    TokenSequence::from_vec(p.len(), c, data)
}

/// Exact inverse of [`serialize`].
pub fn deserialize(s: &TokenSequence, p: &ScanPermutation) -> Result<FeatureMap> {
    if s.len() != p.len() {
        return Err(Error::shape(format!("{} tokens", p.len()), s.len()));
    }
    let mut out = FeatureMap::zeros(p.shape(), s.channels());
    for (t, &idx) in p.order().iter().enumerate() {
        out.token_mut(idx).copy_from_slice(s.token(t));
    }
    Ok(out)
}

/// Adds the deserialized sequence into `acc` without allocating a map.
pub(crate) fn deserialize_add(s: &TokenSequence, p: &ScanPermutation, acc: &mut FeatureMap) {
    for (t, &idx) in p.order().iter().enumerate() {
        for (a, b) in acc.token_mut(idx).iter_mut().zip(s.token(t)) {
            *a += b;
        }
    }
}

pub const EXPERIMENT_COUNT: usize = 21;

/// Scan assignment for one of the 21 experiments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentConfig {
    pub id: usize,
    pub streams: [ScanId; 4],
    /// Number of distinct scans (1, 2 or 4).
    pub k: usize,
}

impl ExperimentConfig {
    /// True when every stream follows a diagonal path.
    pub fn is_diagonal(&self) -> bool {
        self.streams.iter().all(|s| s.family() == ScanFamily::Diagonal)
    }

    pub fn label(&self) -> String {
        let mut unique: Vec<ScanId> = Vec::new();
        for s in self.streams {
            if !unique.contains(&s) {
                unique.push(s);
            }
        }
        unique.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
    }
}

/// Stream assignment for experiment `id` in 1..=21.
///
/// 1-12 repeat the single scan four times; 13-18 pair two scans,
/// interleaved as `[a, b, a, b]`; 19-21 use four distinct scans.
pub fn experiment_streams(id: usize) -> Result<ExperimentConfig> {
    use ScanId::*;
    let (streams, k) = match id {
        1..=12 => {
            let s = ScanId::ALL[id - 1];
            ([s; 4], 1)
        }
        13..=18 => {
            let (a, b) = match id {
                13 => (S1, S2),
                14 => (S3, S4),
                15 => (S5, S6),
                16 => (S7, S8),
                17 => (S9, S10),
                _ => (S11, S12),
            };
            ([a, b, a, b], 2)
        }
        19 => ([S1, S2, S3, S4], 4),
        20 => ([S5, S6, S7, S8], 4),
        21 => ([S9, S10, S11, S12], 4),
        _ => return Err(Error::ExperimentOutOfRange(id)),
    };
    Ok(ExperimentConfig { id, streams, k })
}

/// One CSV row per scan: `scan_id,t0,t1,...`, preceded by a header.
pub fn catalogue_csv(shape: GridShape) -> String {
    let mut out = String::from("scan_id");
    for t in 0..shape.len() {
        out.push_str(&format!(",t{t}"));
    }
    out.push('\n');
    for id in ScanId::ALL {
        out.push_str(&id.to_string());
        for idx in path_order(id, shape).order() {
            out.push_str(&format!(",{idx}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(r: usize, c: usize) -> GridShape {
        GridShape::new(r, c).unwrap()
    }

    #[test]
    fn documented_orders() {
        assert_eq!(path_order(ScanId::S1, g(2, 3)).order(), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(path_order(ScanId::S3, g(2, 3)).order(), &[5, 4, 3, 2, 1, 0]);
        assert_eq!(path_order(ScanId::S5, g(3, 3)).order(), &[0, 1, 3, 2, 4, 6, 5, 7, 8]);
        assert_eq!(path_order(ScanId::S9, g(3, 3)).order(), &[0, 1, 2, 5, 4, 3, 6, 7, 8]);
        assert_eq!(path_order(ScanId::S7, g(3, 3)).order(), &[2, 1, 5, 0, 4, 8, 3, 7, 6]);
        assert_eq!(path_order(ScanId::S2, g(2, 3)).order(), &[0, 3, 1, 4, 2, 5]);
        assert_eq!(path_order(ScanId::S11, g(2, 3)).order(), &[0, 3, 4, 1, 2, 5]);
    }

    #[test]
    fn inverse_examples() {
        let id = path_order(ScanId::S1, g(3, 4));
        assert_eq!(inverse_order(&id).order(), id.order());

        let rev = ScanPermutation::from_order(g(2, 3), vec![5, 4, 3, 2, 1, 0]).unwrap();
        assert_eq!(inverse_order(&rev).order(), &[5, 4, 3, 2, 1, 0]);

        let diag = path_order(ScanId::S5, g(3, 3));
        let inv = inverse_order(&diag);
        assert_eq!(inv.order(), &[0, 1, 3, 2, 4, 6, 5, 7, 8]);
        for t in 0..9 {
            assert_eq!(inv.order()[diag.order()[t]], t);
        }
        assert_eq!(inverse_order(&inv), diag);
    }

    #[test]
    fn serialize_examples() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let v = FeatureMap::from_vec(g(2, 2), 1, vec![a, b, c, d]).unwrap();
        let s1 = serialize(&v, &path_order(ScanId::S1, g(2, 2))).unwrap();
        assert_eq!(s1.as_slice(), &[a, b, c, d]);
        let p2 = path_order(ScanId::S2, g(2, 2));
        let s2 = serialize(&v, &p2).unwrap();
        assert_eq!(s2.as_slice(), &[a, c, b, d]);
        assert_eq!(deserialize(&s2, &p2).unwrap(), v);

        let constant = FeatureMap::from_fn(g(3, 5), 2, |_, _, _| 7.5);
        for id in ScanId::ALL {
            let s = serialize(&constant, &path_order(id, g(3, 5))).unwrap();
            assert!(s.as_slice().iter().all(|&x| x == 7.5));
            let back = deserialize(&s, &path_order(id, g(3, 5))).unwrap();
            assert_eq!(back, constant);
        }
    }

    #[test]
    fn shape_and_length_mismatch_errors() {
        let v = FeatureMap::zeros(g(2, 2), 1);
        assert!(serialize(&v, &path_order(ScanId::S1, g(2, 3))).is_err());
        let s = TokenSequence::zeros(5, 1);
        assert!(deserialize(&s, &path_order(ScanId::S1, g(2, 2))).is_err());
    }

    #[test]
    fn experiment_examples() {
        use ScanId::*;
        assert_eq!(experiment_streams(5).unwrap().streams, [S5; 4]);
        assert_eq!(experiment_streams(13).unwrap().streams, [S1, S2, S1, S2]);
        assert_eq!(experiment_streams(19).unwrap().streams, [S1, S2, S3, S4]);
        assert_eq!(experiment_streams(21).unwrap().streams, [S9, S10, S11, S12]);
        assert_eq!(experiment_streams(16).unwrap().label(), "S7+S8");
        assert!(matches!(experiment_streams(0), Err(Error::ExperimentOutOfRange(0))));
        assert!(experiment_streams(22).is_err());
    }

    #[test]
    fn multiplicity_rule_holds_for_all_experiments() {
        for id in 1..=EXPERIMENT_COUNT {
            let cfg = experiment_streams(id).unwrap();
            assert_eq!(cfg.id, id);
            let mut distinct: Vec<ScanId> = cfg.streams.to_vec();
            distinct.sort();
            distinct.dedup();
            assert_eq!(distinct.len(), cfg.k, "experiment {id}");
            for s in &distinct {
                let copies = cfg.streams.iter().filter(|x| *x == s).count();
                assert_eq!(copies, 4 / cfg.k, "experiment {id}");
            }
        }
    }

    #[test]
    fn parse_round_trip() {
        for id in ScanId::ALL {
            assert_eq!(id.to_string().parse::<ScanId>().unwrap(), id);
        }
        assert!("S13".parse::<ScanId>().is_err());
        assert_eq!("3x4".parse::<GridShape>().unwrap(), g(3, 4));
        assert!("3by4".parse::<GridShape>().is_err());
        assert!("0x4".parse::<GridShape>().is_err());
    }

    #[test]
    fn catalogue_csv_rows() {
        let csv = catalogue_csv(g(3, 3));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 13);
        assert_eq!(lines[0], "scan_id,t0,t1,t2,t3,t4,t5,t6,t7,t8");
        assert_eq!(lines[1], "S1,0,1,2,3,4,5,6,7,8");
    }

    proptest! {
        #[test]
        fn serialize_round_trip(rows in 1usize..9, cols in 1usize..9, ch in 1usize..4, seed in any::<u64>()) {
            let shape = g(rows, cols);
            let mut state = seed;
            let v = FeatureMap::from_fn(shape, ch, |_, _, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            });
            for id in ScanId::ALL {
                let p = path_order(id, shape);
                let s = serialize(&v, &p).unwrap();
                for t in 0..p.len() {
                    prop_assert_eq!(s.token(t), v.token(p.order()[t]));
                }
                prop_assert_eq!(deserialize(&s, &p).unwrap(), v.clone());
            }
        }
    }

    #[test]
    fn diagonal_experiments() {
        let diag: Vec<usize> = (1..=EXPERIMENT_COUNT)
            .filter(|&id| experiment_streams(id).unwrap().is_diagonal())
            .collect();
        assert_eq!(diag, vec![5, 6, 7, 8, 15, 16, 20]);
    }
}
