use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::rank::unit_rows;
use crate::loss::SimilarityMatrix;
use crate::{Error, Result};

/// Cosine similarities between two embedding sequences, optionally min-max
/// rescaled to [0, 1]. A constant matrix normalizes to all zeros.
pub fn similarity_matrix(emb1: ArrayView2<'_, f64>, emb2: ArrayView2<'_, f64>, normalize: bool) -> Result<SimilarityMatrix> {
    if emb1.ncols() != emb2.ncols() {
        return Err(Error::shape(format!("embedding widths differ: {} vs {}", emb1.ncols(), emb2.ncols())));
    }
    let mut sim = unit_rows(emb1).dot(&unit_rows(emb2).t());
    if normalize && !sim.is_empty() {
        let min = sim.iter().copied().fold(f64::INFINITY, f64::min);
        let max = sim.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        sim.mapv_inplace(|v| if range > 0.0 { (v - min) / range } else { 0.0 });
    }
    Ok(SimilarityMatrix(sim))
}

/// Monotone alignment from `(0, 0)` to the last cell of both sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPath(pub Vec<(usize, usize)>);

impl AlignmentPath {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    /// Checks boundary and step conditions against a `rows x cols` grid.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let p = &self.0;
        if p.first() != Some(&(0, 0)) || p.last() != Some(&(rows.wrapping_sub(1), cols.wrapping_sub(1))) {
            return Err(Error::invalid("path must run from (0, 0) to the last cell"));
        }
        for w in p.windows(2) {
            let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            if !matches!((di, dj), (1, 0) | (0, 1) | (1, 1)) {
                return Err(Error::invalid(format!("illegal step {:?} -> {:?}", w[0], w[1])));
            }
        }
        Ok(())
    }
}

/// Dynamic time warping on cost `1 - sim` with steps (1,0), (0,1), (1,1).
/// Returns the minimal path and its total cost; ties prefer the diagonal,
/// then (1,0).
pub fn dtw_align(sim: &SimilarityMatrix) -> Result<(AlignmentPath, f64)> {
    let s = sim.matrix();
    let (rows, cols) = s.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("cannot align an empty similarity matrix"));
    }
    let mut acc = Array2::<f64>::from_elem((rows, cols), f64::INFINITY);
    for i in 0..rows {
        for j in 0..cols {
            let cost = 1.0 - s[[i, j]];
            acc[[i, j]] = match (i, j) {
                (0, 0) => cost,
                _ => best_predecessor(&acc, i, j).1 + cost,
            };
        }
    }
    let mut path = vec![(rows - 1, cols - 1)];
    let (mut i, mut j) = (rows - 1, cols - 1);
    while (i, j) != (0, 0) {
        (i, j) = best_predecessor(&acc, i, j).0;
        path.push((i, j));
    }
    path.reverse();
    Ok((AlignmentPath(path), acc[[rows - 1, cols - 1]]))
}

fn best_predecessor(acc: &Array2<f64>, i: usize, j: usize) -> ((usize, usize), f64) {
    let mut best = ((0, 0), f64::INFINITY);
    let candidates = [
        (i > 0 && j > 0).then(|| (i - 1, j - 1)),
        (i > 0).then(|| (i - 1, j)),
        (j > 0).then(|| (i, j - 1)),
    ];
    for cell in candidates.into_iter().flatten() {
        if acc[cell] < best.1 {
            best = (cell, acc[cell]);
        }
    }
    best
}

pub fn similarity_csv(sim: &SimilarityMatrix) -> String {
    let mut out = String::new();
    for row in sim.matrix().rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// 8-bit binary PGM; values are clamped to [0, 1] before scaling.
pub fn similarity_pgm(sim: &SimilarityMatrix) -> Vec<u8> {
    let (rows, cols) = sim.matrix().dim();
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(sim.matrix().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn path_csv(path: &AlignmentPath) -> String {
    let mut out = String::from("i,j\n");
    for (i, j) in path.pairs() {
        writeln!(out, "{i},{j}").expect("writing to a String");
    }
    out
}
