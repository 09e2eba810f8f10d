//! Dynamic time warping with pluggable local metrics.
//!
//! Cumulative costs use the standard `{(1,0), (0,1), (1,1)}` step pattern with unit weights. Only
//! two rows of costs are kept; step choices are packed as 2-bit codes for backtracking.

use thiserror::Error;

use crate::noteio::{PitchIndex, PitchSet};

#[derive(Debug, Error, PartialEq)]
pub enum DtwError {
    #[error("cannot warp an empty sequence (lengths {0} and {1})")]
    Empty(usize, usize),
    #[error("local cost {cost} at ({i}, {j}) is not a finite non-negative number")]
    BadCost { i: usize, j: usize, cost: f64 },
}

/// Pairwise cost between an element of sequence A and an element of sequence B.
pub trait LocalMetric<A: ?Sized, B: ?Sized> {
    fn cost(&self, a: &A, b: &B) -> f64;
}

impl<A: ?Sized, B: ?Sized, F: Fn(&A, &B) -> f64> LocalMetric<A, B> for F {
    fn cost(&self, a: &A, b: &B) -> f64 {
        self(a, b)
    }
}

/// Zero when the performed pitch belongs to the onset's pitch set, one otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct Inclusion;

#[inline]
pub fn inclusion_cost(p: PitchIndex, s: &PitchSet) -> f64 {
    if s.contains(p) {
        0.0
    } else {
        1.0
    }
}

impl LocalMetric<PitchIndex, PitchSet> for Inclusion {
    #[inline]
    fn cost(&self, a: &PitchIndex, b: &PitchSet) -> f64 {
        inclusion_cost(*a, b)
    }
}

/// Absolute difference of two times.
#[derive(Debug, Clone, Copy, Default)]
pub struct L1;

impl LocalMetric<f64, f64> for L1 {
    #[inline]
    fn cost(&self, a: &f64, b: &f64) -> f64 {
        (a - b).abs()
    }
}

/// Monotone correspondence between indices of A and B.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarpPath {
    pub pairs: Vec<(usize, usize)>,
}

impl WarpPath {
    /// Checks start, end and step invariants for sequences of the given lengths.
    pub fn is_valid(&self, len_a: usize, len_b: usize) -> bool {
        if self.pairs.first() != Some(&(0, 0))
            || self.pairs.last() != Some(&(len_a.wrapping_sub(1), len_b.wrapping_sub(1)))
        {
            return false;
        }
        self.pairs.windows(2).all(|w| {
            let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
        })
    }
}

const STEP_DIAG: u8 = 0;
const STEP_A: u8 = 1;
const STEP_B: u8 = 2;

/// 2-bit step codes, four cells per byte.
struct StepMatrix {
    cols: usize,
    bits: Vec<u8>,
}

impl StepMatrix {
    fn new(rows: usize, cols: usize) -> Self {
        StepMatrix {
            cols,
            bits: vec![0; (rows * cols).div_ceil(4)],
        }
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, code: u8) {
        let k = i * self.cols + j;
        self.bits[k / 4] |= code << ((k % 4) * 2);
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> u8 {
        let k = i * self.cols + j;
        (self.bits[k / 4] >> ((k % 4) * 2)) & 0b11
    }
}

/// Minimum-cost warping of `a` onto `b`.
///
/// On equal cumulative cost the backtracking prefers the diagonal step, then the step that
/// advances only in A, then the step that advances only in B.
pub fn dtw<A, B, M>(a: &[A], b: &[B], metric: &M) -> Result<(f64, WarpPath), DtwError>
where
    M: LocalMetric<A, B> + ?Sized,
{
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(DtwError::Empty(n, m));
    }
    let mut steps = StepMatrix::new(n, m);
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![f64::INFINITY; m];
    for i in 0..n {
        for j in 0..m {
            let c = metric.cost(&a[i], &b[j]);
            if !(c.is_finite() && c >= 0.0) {
                return Err(DtwError::BadCost { i, j, cost: c });
            }
            if i == 0 && j == 0 {
                cur[0] = c;
                continue;
            }
            let diag = if i > 0 && j > 0 { prev[j - 1] } else { f64::INFINITY };
            let up = if i > 0 { prev[j] } else { f64::INFINITY };
            let left = if j > 0 { cur[j - 1] } else { f64::INFINITY };
            let (best, code) = if diag <= up && diag <= left {
                (diag, STEP_DIAG)
            } else if up <= left {
                (up, STEP_A)
            } else {
                (left, STEP_B)
            };
            cur[j] = best + c;
            steps.set(i, j, code);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let cost = prev[m - 1];

    let (mut i, mut j) = (n - 1, m - 1);
    let mut pairs = Vec::with_capacity(n + m);
    pairs.push((i, j));
    while i > 0 || j > 0 {
        if i == 0 {
            j -= 1;
        } else if j == 0 {
            i -= 1;
        } else {
            match steps.get(i, j) {
                STEP_DIAG => {
                    i -= 1;
                    j -= 1;
                }
                STEP_A => i -= 1,
                _ => j -= 1,
            }
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok((cost, WarpPath { pairs }))
}

/// DTW over both sequences reversed, with the path mapped back to forward indices.
pub fn dtw_backward<A, B, M>(a: &[A], b: &[B], metric: &M) -> Result<(f64, WarpPath), DtwError>
where
    A: Clone,
    B: Clone,
    M: LocalMetric<A, B> + ?Sized,
{
    let ra: Vec<A> = a.iter().rev().cloned().collect();
    let rb: Vec<B> = b.iter().rev().cloned().collect();
    let (cost, path) = dtw(&ra, &rb, metric)?;
    let (n, m) = (a.len(), b.len());
    let pairs = path
        .pairs
        .iter()
        .rev()
        .map(|&(i, j)| (n - 1 - i, m - 1 - j))
        .collect();
    Ok((cost, WarpPath { pairs }))
}

/// Region between two consecutive agreed pairs where the forward and backward paths differ.
///
/// Ranges are half-open and hold the indices strictly between the two anchors; one of them may
/// be empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bracket {
    pub a: std::ops::Range<usize>,
    pub b: std::ops::Range<usize>,
    /// Agreed pairs enclosing the region.
    pub lower: (usize, usize),
    pub upper: (usize, usize),
}

/// Splits two warping paths into the pairs they share and the regions in between.
pub fn disagreement_brackets(fwd: &WarpPath, bwd: &WarpPath) -> (Vec<(usize, usize)>, Vec<Bracket>) {
    let in_bwd: std::collections::HashSet<(usize, usize)> = bwd.pairs.iter().copied().collect();
    let agreed: Vec<(usize, usize)> = fwd
        .pairs
        .iter()
        .copied()
        .filter(|p| in_bwd.contains(p))
        .collect();
    let brackets = agreed
        .windows(2)
        .filter_map(|w| {
            let (lo, hi) = (w[0], w[1]);
            let a = lo.0 + 1..hi.0;
            let b = lo.1 + 1..hi.1;
            (!a.is_empty() || !b.is_empty()).then_some(Bracket {
                a,
                b,
                lower: lo,
                upper: hi,
            })
        })
        .collect();
    (agreed, brackets)
}
