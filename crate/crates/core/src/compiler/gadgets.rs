//! Reusable building blocks for compiled transformers: the Boolean rounding
//! feed-forward unit, tie-breaking score transforms, approximate table
//! lookup, first/last markers and reciprocal-position layers.

use thiserror::Error;

use crate::transformer::{AttentionSpec, FFNSpec, Mask, Matrix, WeightingFn};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GadgetError {
    #[error("tie-break strength must be positive, got {0}")]
    NonPositiveGamma(f64),
}

/// Piecewise-linear rounding: 0 below 1/4, 1 above 3/4, linear between.
/// `f(x) = 2 relu(x - 1/4) - 2 relu(x - 3/4)`.
pub fn rounding_ffn() -> FFNSpec {
    FFNSpec {
        w1: Matrix::from_rows(vec![vec![1.0], vec![1.0]]).unwrap(),
        b1: vec![-0.25, -0.75],
        w2: Matrix::from_rows(vec![vec![2.0, -2.0]]).unwrap(),
        b2: vec![0.0],
    }
}

/// Hidden-unit description of the rounding map, for builders that splice it
/// into a larger feed-forward block: pairs of `(bias, output coefficient)`
/// applied to the same input coordinate.
pub const ROUNDING_UNITS: [(f64, f64); 2] = [(-0.25, 2.0), (-0.75, -2.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreakVariant {
    /// `gamma * n^2 * (s_j - 1/j)`: rightmost maximum, usable without
    /// knowing the sequence length.
    RightmostRecip,
    /// `2 * gamma * n * (s_j + j/(2n))`: rightmost maximum.
    Rightmost,
    /// `2 * gamma * n * (s_j - j/(2n))`: leftmost maximum.
    Leftmost,
}

/// Applies a tie-breaking transform to base scores with gap >= 1. Softmax of
/// the result puts all but `4 e^{-gamma}` of the mass on the targeted
/// maximum of `s`.
pub fn tie_break_scores(
    variant: TieBreakVariant,
    gamma: f64,
    n: usize,
    s: &[f64],
) -> Result<Vec<f64>, GadgetError> {
    if gamma <= 0.0 {
        return Err(GadgetError::NonPositiveGamma(gamma));
    }
    let n_f = n as f64;
    Ok(s.iter()
        .enumerate()
        .map(|(idx, &sj)| {
            let j = (idx + 1) as f64;
            match variant {
                TieBreakVariant::RightmostRecip => gamma * n_f * n_f * (sj - 1.0 / j),
                TieBreakVariant::Rightmost => 2.0 * gamma * n_f * (sj + j / (2.0 * n_f)),
                TieBreakVariant::Leftmost => 2.0 * gamma * n_f * (sj - j / (2.0 * n_f)),
            }
        })
        .collect())
}

/// Scores for retrieving position `c` out of `1..=len` by softmax attention:
/// `s_j = lambda (2 c j - j^2)`, uniquely maximized at `j = c`. The weighted
/// position sum lands within `(3/2) e^{-lambda}` of `c`.
pub fn table_lookup_scores(lambda: f64, c: f64, len: usize) -> Vec<f64> {
    (1..=len)
        .map(|j| {
            let j = j as f64;
            lambda * (2.0 * c * j - j * j)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerKind {
    First,
    Last,
}

/// Attention sublayer computing the raw marker signal: uniform masked
/// attention over values `(-1)^{j+1}` (read off an alternating-sign
/// coordinate). At the marked end the output is +-1; elsewhere its magnitude
/// is at most 1/3.
pub fn marker_attention(
    kind: MarkerKind,
    alt_sign_coord: usize,
    raw_coord: usize,
    d: usize,
    weighting: WeightingFn,
) -> AttentionSpec {
    let mut wv = Matrix::zeros(d, d);
    wv.set(raw_coord, alt_sign_coord, -1.0);
    AttentionSpec {
        wq: Matrix::zeros(1, d),
        wk: Matrix::zeros(1, d),
        wv,
        mask: match kind {
            MarkerKind::First => Mask::Future,
            MarkerKind::Last => Mask::Past,
        },
        weighting,
        scale_scores: true,
    }
}

/// Hidden units turning the raw marker signal into an exact 0/1 bit:
/// `(input coefficient, bias, output coefficient)` triples over the raw
/// coordinate. A bump `3x - 1` clipped against `3x - 2` fires exactly when
/// `x >= 2/3`; the first marker uses the positive bump only, the last marker
/// both bumps (the raw signal at the last position is +-1 depending on the
/// parity of `n`).
pub fn marker_threshold_units(kind: MarkerKind) -> Vec<(f64, f64, f64)> {
    match kind {
        MarkerKind::First => vec![(3.0, -1.0, 1.0), (3.0, -2.0, -1.0)],
        MarkerKind::Last => vec![
            (3.0, -1.0, 1.0),
            (3.0, -2.0, -1.0),
            (-3.0, -1.0, 1.0),
            (-3.0, -2.0, -1.0),
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecipDirection {
    /// 1/i from the first-position marker under future masking.
    Forward,
    /// 1/(n - i + 1) from the last-position marker under past masking.
    Backward,
}

/// Uniform masked attention averaging a marker bit: the running average of a
/// one-hot prefix (suffix) is exactly `1/i` (`1/(n-i+1)`).
pub fn reciprocal_attention(
    direction: RecipDirection,
    marker_coord: usize,
    out_coord: usize,
    d: usize,
    weighting: WeightingFn,
) -> AttentionSpec {
    let mut wv = Matrix::zeros(d, d);
    wv.set(out_coord, marker_coord, 1.0);
    AttentionSpec {
        wq: Matrix::zeros(1, d),
        wk: Matrix::zeros(1, d),
        wv,
        mask: match direction {
            RecipDirection::Forward => Mask::Future,
            RecipDirection::Backward => Mask::Past,
        },
        weighting,
        scale_scores: true,
    }
}
