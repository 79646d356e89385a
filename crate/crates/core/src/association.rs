//! Track/detection cost matrices and the rectangular assignment solver.
//!
//! Both cues are expressed as costs (lower is better): cosine distance for
//! appearance, gate-normalized squared Mahalanobis distance for motion.

use std::cmp::Ordering;
use std::ops::{Add, Sub};

use crate::error::{Error, Result};

/// Sentinel for pairs that may never be matched.
pub const INFEASIBLE: f64 = f64::INFINITY;

pub const DEFAULT_LAMBDA: f64 = 0.9;
pub const DEFAULT_MAX_COST: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|v| v.is_nan() || **v < 0.0 || **v == f64::NEG_INFINITY)
        {
            return Err(Error::domain(format!(
                "cost entries must be >= 0 or INFEASIBLE, got {bad}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::domain("ragged cost matrix rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_feasible(&self, r: usize, c: usize) -> bool {
        self.get(r, c).is_finite()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Assignment {
    /// Matched `(row, col)` pairs in ascending row order.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    pub fn from_matches(rows: usize, cols: usize, mut matches: Vec<(usize, usize)>) -> Self {
        matches.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &matches {
            row_used[r] = true;
            col_used[c] = true;
        }
        Self {
            matches,
            unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
        }
    }

    /// Sum of matched costs, accumulated in row order.
    pub fn total_cost(&self, c: &CostMatrix) -> f64 {
        self.matches.iter().map(|&(r, col)| c.get(r, col)).sum()
    }
}

fn check_embeddings<E: AsRef<[f64]>>(embs: &[E], dim: &mut Option<usize>) -> Result<Vec<f64>> {
    embs.iter()
        .map(|e| {
            let e = e.as_ref();
            match *dim {
                Some(d) if d != e.len() => {
                    return Err(Error::domain(format!("embedding dimension {} != {d}", e.len())))
                }
                None => *dim = Some(e.len()),
                _ => {}
            }
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::domain("embedding has zero or non-finite norm"));
            }
            Ok(n)
        })
        .collect()
}

/// Cosine distance `1 - cos(e_i, f_j)` between every track and detection
/// embedding, in `[0, 2]`.
pub fn appearance_cost<T: AsRef<[f64]>, D: AsRef<[f64]>>(track_embs: &[T], det_embs: &[D]) -> Result<CostMatrix> {
    let mut dim = None;
    let tn = check_embeddings(track_embs, &mut dim)?;
    let dn = check_embeddings(det_embs, &mut dim)?;
    let mut data = Vec::with_capacity(tn.len() * dn.len());
    for (t, tnorm) in track_embs.iter().zip(&tn) {
        let t = t.as_ref();
        for (d, dnorm) in det_embs.iter().zip(&dn) {
            let dot: f64 = t.iter().zip(d.as_ref()).map(|(a, b)| a * b).sum();
            let cos = (dot / (tnorm * dnorm)).clamp(-1.0, 1.0);
            data.push(1.0 - cos);
        }
    }
    Ok(CostMatrix {
        rows: tn.len(),
        cols: dn.len(),
        data,
    })
}

/// Normalizes squared Mahalanobis distances by the gate; anything past the
/// gate becomes [`INFEASIBLE`].
pub fn motion_cost(gating: &[Vec<f64>], gate: f64) -> Result<CostMatrix> {
    if !(gate > 0.0) {
        return Err(Error::domain(format!("gate must be positive, got {gate}")));
    }
    let cols = gating.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(gating.len() * cols);
    for row in gating {
        if row.len() != cols {
            return Err(Error::domain("ragged gating matrix"));
        }
        for &d2 in row {
            if d2.is_nan() || d2 < 0.0 {
                return Err(Error::domain(format!("gating distance must be >= 0, got {d2}")));
            }
            data.push(if d2 > gate {
                INFEASIBLE
            } else {
                (d2 / gate).clamp(0.0, 1.0)
            });
        }
    }
    Ok(CostMatrix {
        rows: gating.len(),
        cols,
        data,
    })
}

/// `lambda * a_e + (1 - lambda) * a_m`, propagating infeasibility from either side.
pub fn fuse_costs(a_e: &CostMatrix, a_m: &CostMatrix, lambda: f64) -> Result<CostMatrix> {
    if a_e.shape() != a_m.shape() {
        return Err(Error::domain(format!(
            "cannot fuse {:?} with {:?}",
            a_e.shape(),
            a_m.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::domain(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let data = a_e
        .data
        .iter()
        .zip(&a_m.data)
        .map(|(&e, &m)| {
            if e.is_infinite() || m.is_infinite() {
                INFEASIBLE
            } else {
                lambda * e + (1.0 - lambda) * m
            }
        })
        .collect();
    Ok(CostMatrix {
        rows: a_e.rows,
        cols: a_e.cols,
        data,
    })
}

/// Cost ordered first by the number of infeasible pairs used, then by the
/// summed feasible cost. The Hungarian method only needs an ordered group,
/// so running it over this type yields the cheapest maximum-cardinality
/// feasible matching without a big-M constant eating float precision.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Lex {
    misses: i64,
    cost: f64,
}

impl Lex {
    const ZERO: Lex = Lex { misses: 0, cost: 0.0 };
    const MAX: Lex = Lex {
        misses: i64::MAX / 4,
        cost: 0.0,
    };
}

impl Add for Lex {
    type Output = Lex;
    fn add(self, o: Lex) -> Lex {
        Lex {
            misses: self.misses + o.misses,
            cost: self.cost + o.cost,
        }
    }
}

impl Sub for Lex {
    type Output = Lex;
    fn sub(self, o: Lex) -> Lex {
        Lex {
            misses: self.misses - o.misses,
            cost: self.cost - o.cost,
        }
    }
}

impl PartialOrd for Lex {
    fn partial_cmp(&self, o: &Lex) -> Option<Ordering> {
        match self.misses.cmp(&o.misses) {
            Ordering::Equal => self.cost.partial_cmp(&o.cost),
            ord => Some(ord),
        }
    }
}

/// Shortest-augmenting-path Hungarian method for `n <= m`; returns the
/// column for every row.
fn hungarian(n: usize, m: usize, cost: impl Fn(usize, usize) -> Lex) -> Vec<usize> {
    debug_assert!(n <= m);
    let mut u = vec![Lex::ZERO; n + 1];
    let mut v = vec![Lex::ZERO; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![Lex::MAX; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = Lex::MAX);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = Lex::MAX;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Solves the rectangular assignment problem.
///
/// A pair is feasible when its cost is finite and `<= max_cost`. The result
/// has the largest possible number of feasible matches and, among those, the
/// smallest total cost. Infeasible pairs are never returned.
pub fn solve_assignment(c: &CostMatrix, max_cost: f64) -> Assignment {
    let (rows, cols) = c.shape();
    if rows == 0 || cols == 0 {
        return Assignment::from_matches(rows, cols, Vec::new());
    }
    let feasible = |v: f64| v.is_finite() && v <= max_cost;
    let lex = |v: f64| {
        if feasible(v) {
            Lex { misses: 0, cost: v }
        } else {
            Lex { misses: 1, cost: 0.0 }
        }
    };
    let matches: Vec<(usize, usize)> = if rows <= cols {
        hungarian(rows, cols, |r, col| lex(c.get(r, col)))
            .into_iter()
            .enumerate()
            .filter(|&(r, col)| feasible(c.get(r, col)))
            .collect()
    } else {
        hungarian(cols, rows, |col, r| lex(c.get(r, col)))
            .into_iter()
            .enumerate()
            .map(|(col, r)| (r, col))
            .filter(|&(r, col)| feasible(c.get(r, col)))
            .collect()
    };
    Assignment::from_matches(rows, cols, matches)
}
