//! Friedman rank test, chi-square tail probabilities and score-table
//! summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Blocks (datasets) by treatments (experiments); higher scores are better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub blocks: Vec<String>,
    pub treatments: Vec<String>,
    /// `scores[block][treatment]`
    pub scores: Vec<Vec<f64>>,
    /// Optional IoU values with the same layout.
    pub miou: Option<Vec<Vec<f64>>>,
    /// Blocks whose IoU is a single foreground IoU (so Dice and IoU are dual).
    pub binary: Vec<bool>,
}

impl ScoreMatrix {
    pub fn new(blocks: Vec<String>, treatments: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        let binary = vec![true; blocks.len()];
        let m = ScoreMatrix {
            blocks,
            treatments,
            scores,
            miou: None,
            binary,
        };
        m.check()?;
        Ok(m)
    }

    pub fn with_miou(mut self, miou: Vec<Vec<f64>>) -> Result<Self> {
        self.miou = Some(miou);
        self.check()?;
        Ok(self)
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_treatments(&self) -> usize {
        self.treatments.len()
    }

    fn check(&self) -> Result<()> {
        let (n, k) = (self.n_blocks(), self.n_treatments());
        let rows_ok = |rows: &Vec<Vec<f64>>| rows.len() == n && rows.iter().all(|r| r.len() == k);
        if !rows_ok(&self.scores) || self.miou.as_ref().is_some_and(|m| !rows_ok(m)) || self.binary.len() != n {
            return Err(Error::shape(format!("{n}x{k} scores"), "ragged rows"));
        }
        let finite = |rows: &Vec<Vec<f64>>| rows.iter().flatten().all(|v| v.is_finite());
        if !finite(&self.scores) || self.miou.as_ref().is_some_and(|m| !finite(m)) {
            return Err(Error::NonFinite("score matrix".into()));
        }
        Ok(())
    }

    /// Same matrix with columns reordered by `perm` (new column j = old `perm[j]`).
    pub fn permute_treatments(&self, perm: &[usize]) -> ScoreMatrix {
        let pick = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect()
        };
        ScoreMatrix {
            blocks: self.blocks.clone(),
            treatments: perm.iter().map(|&j| self.treatments[j].clone()).collect(),
            scores: pick(&self.scores),
            miou: self.miou.as_ref().map(pick),
            binary: self.binary.clone(),
        }
    }
}

/// How tied scores inside a block are ranked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieMethod {
    /// Tied entries share the mean of the ranks they span.
    #[default]
    Average,
    /// Ordinal ranks; the earlier column gets the better rank.
    FirstWins,
    /// Ordinal ranks; the later column gets the better rank.
    LastWins,
}

impl std::str::FromStr for TieMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(TieMethod::Average),
            "first" | "first_wins" => Ok(TieMethod::FirstWins),
            "last" | "last_wins" => Ok(TieMethod::LastWins),
            other => Err(Error::Parse(format!("unknown tie method {other:?}"))),
        }
    }
}

fn rank_block(row: &[f64], ties: TieMethod) -> Vec<f64> {
    let k = row.len();
    let mut idx: Vec<usize> = (0..k).collect();
    // descending score; among equals the order decides ordinal ranks
    idx.sort_by(|&a, &b| {
        row[b].total_cmp(&row[a]).then(match ties {
            TieMethod::LastWins => b.cmp(&a),
            _ => a.cmp(&b),
        })
    });
    let mut ranks = vec![0.0; k];
    let mut i = 0;
    while i < k {
        let mut j = i + 1;
        while j < k && row[idx[j]] == row[idx[i]] {
            j += 1;
        }
        for (pos, &col) in idx[i..j].iter().enumerate() {
            ranks[col] = match ties {
                TieMethod::Average => (i + j + 1) as f64 / 2.0,
                _ => (i + pos + 1) as f64,
            };
        }
        i = j;
    }
    ranks
}

/// Within-block ranks; rank 1 is the highest score.
pub fn rank_matrix(s: &ScoreMatrix, ties: TieMethod) -> Vec<Vec<f64>> {
    s.scores.iter().map(|row| rank_block(row, ties)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FriedmanOptions {
    pub ties: TieMethod,
    /// Divide by `1 - sum(t^3 - t) / (n (k^3 - k))` over tie groups.
    pub tie_correction: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
    pub mean_ranks: Vec<f64>,
}

pub fn friedman(s: &ScoreMatrix, opts: FriedmanOptions) -> Result<FriedmanResult> {
    let (n, k) = (s.n_blocks(), s.n_treatments());
    if n < 2 || k < 2 {
        return Err(Error::DegenerateMatrix {
            blocks: n,
            treatments: k,
        });
    }
    let ranks = rank_matrix(s, opts.ties);
    let mut sums = vec![0.0; k];
    for row in &ranks {
        for (acc, r) in sums.iter_mut().zip(row) {
            *acc += r;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let sq: f64 = sums.iter().map(|r| r * r).sum();
    let mut chi2 = 12.0 / (nf * kf * (kf + 1.0)) * sq - 3.0 * nf * (kf + 1.0);
    if opts.tie_correction {
        let mut t_sum = 0.0;
        for row in &s.scores {
            let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
            for v in row {
                *counts.entry(v.to_bits()).or_default() += 1;
            }
            t_sum += counts.values().map(|&t| (t * t * t - t) as f64).sum::<f64>();
        }
        let denom = 1.0 - t_sum / (nf * (kf * kf * kf - kf));
        if denom > 0.0 {
            chi2 /= denom;
        }
    }
    let chi2 = chi2.max(0.0);
    let df = k - 1;
    Ok(FriedmanResult {
        chi2,
        df,
        p: chi2_sf(chi2, df),
        mean_ranks: sums.iter().map(|r| r / nf).collect(),
    })
}

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

fn lower_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    for n in 1..GAMMA_MAX_ITER {
        term *= x / (a + n as f64);
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn upper_fraction(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - lower_series(a, x)
    } else {
        upper_fraction(a, x)
    }
}

/// Chi-square survival function `P(X >= x)` with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(df as f64 / 2.0, x / 2.0).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: String,
    pub best: String,
    pub best_score: f64,
    pub worst: String,
    pub worst_score: f64,
    pub delta: f64,
    /// Largest `|IoU - D/(2 - D)|` over the block, when IoU is known and dual.
    pub duality_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub blocks: Vec<BlockSummary>,
    /// Treatments ordered by mean rank (best first), with their mean rank.
    pub leaderboard: Vec<(String, f64)>,
}

pub fn summarize(s: &ScoreMatrix, ties: TieMethod) -> Summary {
    let blocks = s
        .blocks
        .iter()
        .enumerate()
        .map(|(b, name)| {
            let row = &s.scores[b];
            let mut best = 0;
            let mut worst = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
                if v < row[worst] {
                    worst = j;
                }
            }
            let duality_gap = match &s.miou {
                Some(m) if s.binary[b] => Some(
                    row.iter()
                        .zip(&m[b])
                        .map(|(&d, &j)| (j - d / (2.0 - d)).abs())
                        .fold(0.0, f64::max),
                ),
                _ => None,
            };
            BlockSummary {
                block: name.clone(),
                best: s.treatments[best].clone(),
                best_score: row[best],
                worst: s.treatments[worst].clone(),
                worst_score: row[worst],
                delta: row[best] - row[worst],
                duality_gap,
            }
        })
        .collect();
    let ranks = rank_matrix(s, ties);
    let n = s.n_blocks().max(1) as f64;
    let mut leaderboard: Vec<(String, f64)> = s
        .treatments
        .iter()
        .enumerate()
        .map(|(j, t)| (t.clone(), ranks.iter().map(|r| r[j]).sum::<f64>() / n))
        .collect();
    leaderboard.sort_by(|a, b| a.1.total_cmp(&b.1));
    Summary { blocks, leaderboard }
}

/// Long format: `dataset,experiment,dice,miou`.
pub fn scores_csv(s: &ScoreMatrix) -> String {
    let mut out = String::from("dataset,experiment,dice,miou\n");
    for (b, block) in s.blocks.iter().enumerate() {
        for (j, t) in s.treatments.iter().enumerate() {
            let miou = s.miou.as_ref().map(|m| format!("{}", m[b][j])).unwrap_or_default();
            let _ = writeln!(out, "{block},{t},{},{miou}", s.scores[b][j]);
        }
    }
    out
}

/// Parses one or more long-format score files into a single matrix. Blocks
/// and treatments keep first-seen order; every cell must be present once.
pub fn parse_scores_csv(texts: &[&str]) -> Result<ScoreMatrix> {
    let mut blocks: Vec<String> = Vec::new();
    let mut treatments: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), (f64, Option<f64>)> = BTreeMap::new();
    for text in texts {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().unwrap_or_default().trim();
        if !header.starts_with("dataset,experiment,dice") {
            return Err(Error::Parse(format!("unexpected scores header {header:?}")));
        }
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() < 3 {
                return Err(Error::Parse(format!("short scores row {line:?}")));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{s:?} in {line:?}: {e}")))
            };
            let dice = num(f[2])?;
            let miou = match f.get(3) {
                Some(s) if !s.is_empty() => Some(num(s)?),
                _ => None,
            };
            let pos = |list: &mut Vec<String>, name: &str| {
                list.iter().position(|x| x == name).unwrap_or_else(|| {
                    list.push(name.to_string());
                    list.len() - 1
                })
            };
            let b = pos(&mut blocks, f[0]);
            let t = pos(&mut treatments, f[1]);
            if cells.insert((b, t), (dice, miou)).is_some() {
                return Err(Error::Parse(format!("duplicate cell {} / {}", f[0], f[1])));
            }
        }
    }
    let (n, k) = (blocks.len(), treatments.len());
    let mut scores = vec![vec![0.0; k]; n];
    let mut miou = vec![vec![0.0; k]; n];
    let mut all_miou = true;
    for b in 0..n {
        for t in 0..k {
            let (d, m) = cells
                .get(&(b, t))
                .ok_or_else(|| Error::Parse(format!("missing score for {} / {}", blocks[b], treatments[t])))?;
            scores[b][t] = *d;
            match m {
                Some(v) => miou[b][t] = *v,
                None => all_miou = false,
            }
        }
    }
    let m = ScoreMatrix::new(blocks, treatments, scores)?;
    if all_miou {
        m.with_miou(miou)
    } else {
        Ok(m)
    }
}

/// Wide format for plotting: one row per treatment, one column per block.
pub fn dice_by_experiment_csv(s: &ScoreMatrix) -> String {
    let mut out = String::from("experiment");
    for b in &s.blocks {
        out.push(',');
        out.push_str(b);
    }
    out.push('\n');
    for (j, t) in s.treatments.iter().enumerate() {
        out.push_str(t);
        for row in &s.scores {
            let _ = write!(out, ",{}", row[j]);
        }
        out.push('\n');
    }
    out
}

pub fn leaderboard_markdown(summary: &Summary, test: Option<&FriedmanResult>) -> String {
    let mut out = String::from("# Scan-order leaderboard\n\n");
    if let Some(f) = test {
        let _ = writeln!(out, "Friedman chi2 = {:.4}, df = {}, p = {:.6}\n", f.chi2, f.df, f.p);
    }
    out.push_str("| rank | experiment | mean rank |\n|---:|---|---:|\n");
    for (i, (t, r)) in summary.leaderboard.iter().enumerate() {
        let _ = writeln!(out, "| {} | {t} | {r:.2} |", i + 1);
    }
    out.push_str("\n| dataset | best | worst | delta | max IoU duality gap |\n|---|---|---|---:|---:|\n");
    for b in &summary.blocks {
        let gap = b.duality_gap.map(|g| format!("{g:.5}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            out,
            "| {} | {} ({:.3}) | {} ({:.3}) | {:.3} | {gap} |",
            b.block, b.best, b.best_score, b.worst, b.worst_score, b.delta
        );
    }
    out
}

const TABLE2_ROWS: [[f64; 6]; 21] = [
    // dice, miou per dataset: multi-class glioma, ischemic stroke, low-grade glioma
    [0.739, 0.588, 0.643, 0.474, 0.674, 0.508],
    [0.721, 0.569, 0.811, 0.682, 0.697, 0.535],
    [0.753, 0.607, 0.815, 0.687, 0.740, 0.587],
    [0.701, 0.544, 0.767, 0.622, 0.702, 0.541],
    [0.686, 0.528, 0.740, 0.588, 0.642, 0.473],
    [0.639, 0.476, 0.710, 0.551, 0.646, 0.477],
    [0.688, 0.534, 0.551, 0.380, 0.629, 0.459],
    [0.701, 0.548, 0.666, 0.499, 0.692, 0.529],
    [0.689, 0.529, 0.588, 0.416, 0.637, 0.468],
    [0.729, 0.577, 0.636, 0.466, 0.647, 0.478],
    [0.718, 0.565, 0.762, 0.615, 0.728, 0.573],
    [0.716, 0.563, 0.781, 0.641, 0.711, 0.552],
    [0.745, 0.597, 0.757, 0.610, 0.727, 0.572],
    [0.695, 0.537, 0.815, 0.688, 0.723, 0.566],
    [0.705, 0.553, 0.718, 0.560, 0.661, 0.493],
    [0.665, 0.507, 0.581, 0.409, 0.648, 0.479],
    [0.722, 0.568, 0.579, 0.407, 0.624, 0.454],
    [0.728, 0.576, 0.769, 0.625, 0.720, 0.563],
    [0.731, 0.581, 0.820, 0.694, 0.746, 0.595],
    [0.673, 0.515, 0.754, 0.605, 0.666, 0.500],
    [0.734, 0.584, 0.801, 0.667, 0.705, 0.545],
];

/// Reference test-set Dice/mIoU scores of the 21 experiments on three
/// datasets (BraTS 2020, ISLES 2022, LGG-MRI), three decimals.
pub fn table2_fixture() -> ScoreMatrix {
    let blocks = vec!["BraTS2020".to_string(), "ISLES2022".into(), "LGG-MRI".into()];
    let treatments = (1..=21).map(|i| format!("Exp{i}")).collect();
    let col = |c: usize| -> Vec<Vec<f64>> {
        (0..3)
            .map(|b| TABLE2_ROWS.iter().map(|row| row[2 * b + c]).collect())
            .collect()
    };
    let mut m = ScoreMatrix::new(blocks, treatments, col(0))
        .and_then(|m| m.with_miou(col(1)))
        .expect("fixture is well formed");
    // the glioma mIoU is a mean over three classes, so duality does not apply
    m.binary = vec![false, true, true];
    m
}

/// Tie handling for the fixture. It has two within-dataset ties, and the
/// reference mean ranks correspond to ordinal ranking that favours the
/// later experiment.
pub const TABLE2_TIES: TieMethod = TieMethod::LastWins;

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: Vec<Vec<f64>>) -> ScoreMatrix {
        let n = rows.len();
        let k = rows[0].len();
        ScoreMatrix::new(
            (0..n).map(|i| format!("b{i}")).collect(),
            (0..k).map(|i| format!("t{i}")).collect(),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_block(&[0.9, 0.5, 0.7], TieMethod::Average), vec![1.0, 3.0, 2.0]);
        assert_eq!(rank_block(&[0.8, 0.8, 0.1], TieMethod::Average), vec![1.5, 1.5, 3.0]);
        assert_eq!(rank_block(&[0.8, 0.8, 0.1], TieMethod::FirstWins), vec![1.0, 2.0, 3.0]);
        assert_eq!(rank_block(&[0.8, 0.8, 0.1], TieMethod::LastWins), vec![2.0, 1.0, 3.0]);
        assert_eq!(
            rank_block(&[0.2, 0.5, 0.5, 0.5, 0.9], TieMethod::Average),
            vec![5.0, 3.0, 3.0, 3.0, 1.0]
        );
    }

    #[test]
    fn consistent_three_by_three() {
        let r = friedman(&m(vec![vec![0.9, 0.5, 0.1]; 3]), FriedmanOptions::default()).unwrap();
        assert!((r.chi2 - 6.0).abs() < 1e-12);
        assert_eq!(r.df, 2);
        assert!((r.p - (-3.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn identical_columns_give_zero() {
        let r = friedman(&m(vec![vec![0.5; 4]; 3]), FriedmanOptions::default()).unwrap();
        assert_eq!(r.chi2, 0.0);
        assert_eq!(r.p, 1.0);
        let c = friedman(
            &m(vec![vec![0.5; 4]; 3]),
            FriedmanOptions {
                tie_correction: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(c.chi2, 0.0);
    }

    #[test]
    fn tie_correction_inflates() {
        let s = m(vec![
            vec![0.9, 0.9, 0.1, 0.3],
            vec![0.4, 0.8, 0.8, 0.1],
            vec![0.7, 0.6, 0.2, 0.2],
        ]);
        let plain = friedman(&s, FriedmanOptions::default()).unwrap();
        let corr = friedman(
            &s,
            FriedmanOptions {
                tie_correction: true,
                ..Default::default()
            },
        )
        .unwrap();
        // three tie pairs: sum(t^3 - t) = 18; n (k^3 - k) = 180
        assert!((corr.chi2 - plain.chi2 / 0.9).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rejected() {
        assert!(matches!(
            friedman(&m(vec![vec![0.1, 0.2]]), FriedmanOptions::default()),
            Err(Error::DegenerateMatrix {
                blocks: 1,
                treatments: 2
            })
        ));
    }

    #[test]
    fn chi2_closed_forms() {
        assert_eq!(chi2_sf(0.0, 5), 1.0);
        for x in [0.1, 1.0, 6.0, 20.0, 80.0] {
            assert!((chi2_sf(x, 2) - (-x / 2.0).exp()).abs() < 1e-14, "{x}");
        }
        // df = 4: (1 + x/2) e^{-x/2}
        for x in [0.5f64, 3.0, 12.0] {
            let want = (1.0 + x / 2.0) * (-x / 2.0).exp();
            assert!((chi2_sf(x, 4) - want).abs() < 1e-13);
        }
    }

    #[test]
    fn ln_gamma_integers() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "{n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn fixture_summary() {
        let s = table2_fixture();
        let sum = summarize(&s, TABLE2_TIES);
        let deltas: Vec<f64> = sum.blocks.iter().map(|b| b.delta).collect();
        for (d, want) in deltas.iter().zip([0.114, 0.269, 0.122]) {
            assert!((d - want).abs() < 1e-9);
        }
        assert_eq!(sum.blocks[0].best, "Exp3");
        assert_eq!(sum.blocks[0].best_score, 0.753);
        assert!(sum.blocks[0].duality_gap.is_none());
        assert!(sum.blocks[1].duality_gap.unwrap() <= 0.0015);
        assert!(sum.blocks[2].duality_gap.unwrap() <= 0.0015);
    }

    #[test]
    fn single_treatment_delta_zero() {
        let s = m(vec![vec![0.7]]);
        assert_eq!(summarize(&s, TieMethod::Average).blocks[0].delta, 0.0);
    }

    #[test]
    fn csv_roundtrip() {
        let s = table2_fixture();
        let back = parse_scores_csv(&[&scores_csv(&s)]).unwrap();
        assert_eq!(back.scores, s.scores);
        assert_eq!(back.miou, s.miou);
        assert!(parse_scores_csv(&["dataset,experiment,dice\na,x,0.5\nb,y,0.4\n"]).is_err());
    }
}
