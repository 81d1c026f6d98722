//! Executable transformer semantics: embeddings, single-head self-attention
//! with pluggable weighting functions and masks, ReLU feed-forward blocks.
//!
//! All vector distances in this crate are l1 (sum of absolute values), and
//! all arithmetic is f64. Softmax is computed with max-subtraction; masked
//! scores are `-inf` and `exp(-inf) = 0` exactly. A layer is
//! `h' = FFN(SA(h))` with no residual stream; specs built by the formula
//! compiler opt into an explicit passthrough (`residual: true`) where the
//! attention and feed-forward outputs are added to the running state instead
//! of replacing it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::PredicateRegistry;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformerError {
    #[error("all attention scores are masked at position {position}")]
    AllMasked { position: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("temperature must be strictly positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("input symbol '{0}' has no word embedding")]
    UnknownSymbol(char),
    #[error("input string must be non-empty")]
    EmptyInput,
    #[error("readout value {0} is in the ambiguous band (1/4, 3/4)")]
    AmbiguousReadout(f64),
    #[error("unknown predicate '{0}' referenced by a position feature")]
    UnknownPredicate(String),
}

/// Dense row-major matrix. Serializes as a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, TransformerError> {
        let r = rows.len();
        let c = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TransformerError::DimensionMismatch(
                "ragged matrix rows".into(),
            ));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = TransformerError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        Matrix::from_rows(rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        (0..m.rows).map(|r| m.row(r).to_vec()).collect()
    }
}

/// Activations for one input: `n` rows of dimension `d`.
pub type ActivationSequence = Matrix;

/// Temperature as a function of the query position `i` and length `n`,
/// restricted to the parametric family `scale / n^power` or `scale / i^power`
/// so specs stay serializable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemperatureFn {
    Constant { tau: f64 },
    OfLength { scale: f64, power: i32 },
    OfQueryPosition { scale: f64, power: i32 },
}

impl TemperatureFn {
    pub fn value(&self, i: usize, n: usize) -> f64 {
        match self {
            TemperatureFn::Constant { tau } => *tau,
            TemperatureFn::OfLength { scale, power } => scale / (n as f64).powi(*power),
            TemperatureFn::OfQueryPosition { scale, power } => scale / (i as f64).powi(*power),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightingFn {
    Softmax,
    SoftmaxTau { tau: TemperatureFn },
    LHard,
    RHard,
    AHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    None,
    /// Position `i` may attend to `j <= i`.
    Future,
    /// Position `i` may attend to `j >= i`.
    Past,
}

/// Named position-embedding features. Each is a total function of the
/// 1-based position `i` and the length `n`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PEFeature {
    /// i / n
    PosOverLen,
    /// (-1)^i
    AltSign,
    /// 1 / i
    RecipPos,
    /// 1 / (n - i + 1)
    RecipRevPos,
    /// i
    Pos,
    /// i^2
    PosSq,
    /// n
    Len,
    /// i * n
    PosLen,
    /// i^2 * n
    PosSqLen,
    /// 1 if the named predicate holds at (n, i), else 0
    PredBit { name: String },
}

impl PEFeature {
    pub fn value(
        &self,
        i: usize,
        n: usize,
        registry: &PredicateRegistry,
    ) -> Result<f64, TransformerError> {
        let i_f = i as f64;
        let n_f = n as f64;
        Ok(match self {
            PEFeature::PosOverLen => i_f / n_f,
            PEFeature::AltSign => {
                if i % 2 == 1 {
                    -1.0
                } else {
                    1.0
                }
            }
            PEFeature::RecipPos => 1.0 / i_f,
            PEFeature::RecipRevPos => 1.0 / (n_f - i_f + 1.0),
            PEFeature::Pos => i_f,
            PEFeature::PosSq => i_f * i_f,
            PEFeature::Len => n_f,
            PEFeature::PosLen => i_f * n_f,
            PEFeature::PosSqLen => i_f * i_f * n_f,
            PEFeature::PredBit { name } => {
                let b = registry
                    .eval(name, n, i as i64)
                    .map_err(|_| TransformerError::UnknownPredicate(name.clone()))?;
                if b {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }
}

/// One self-attention sublayer: query/key maps into dimension `d_k = wq.rows`,
/// value map `d -> d`, mask, weighting and the `1/sqrt(d_k)` score scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub mask: Mask,
    pub weighting: WeightingFn,
    /// Divide scores by sqrt(d_k). On by default; constructions that target
    /// exact score values pre-multiply their queries to cancel it.
    #[serde(default = "default_true")]
    pub scale_scores: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FFNSpec {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl FFNSpec {
    /// FFN that outputs zero everywhere (identity under passthrough).
    pub fn zero(d: usize) -> Self {
        FFNSpec {
            w1: Matrix::zeros(1, d),
            b1: vec![0.0],
            w2: Matrix::zeros(d, 1),
            b2: vec![0.0; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = self.w1.matvec(x);
        for (h, b) in hidden.iter_mut().zip(&self.b1) {
            *h = (*h + *b).max(0.0);
        }
        let mut out = self.w2.matvec(&hidden);
        for (o, b) in out.iter_mut().zip(&self.b2) {
            *o += *b;
        }
        out
    }

    pub fn max_param(&self) -> f64 {
        let mats = [&self.w1, &self.w2];
        let m = mats
            .iter()
            .flat_map(|m| m.values())
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        self.b1
            .iter()
            .chain(&self.b2)
            .fold(m, |a, &v| a.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub attention: AttentionSpec,
    pub ffn: FFNSpec,
}

/// A complete transformer: embeddings, position features, layers, readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub alphabet: Vec<char>,
    pub d: usize,
    pub word_embedding: BTreeMap<char, Vec<f64>>,
    /// `(coordinate, feature)` pairs; feature values are added to the word
    /// embedding at their coordinate. Coordinates must be pairwise distinct.
    pub pe_features: Vec<(usize, PEFeature)>,
    pub layers: Vec<Layer>,
    /// Coordinate whose value at designated positions carries the result.
    pub readout: usize,
    /// When true, each sublayer adds to the running state instead of
    /// replacing it: `a = h + SA(h); h' = a + FFN(a)`.
    #[serde(default)]
    pub residual: bool,
}

impl TransformerSpec {
    pub fn validate(&self) -> Result<(), TransformerError> {
        let d = self.d;
        let mut seen = std::collections::BTreeSet::new();
        for (coord, _) in &self.pe_features {
            if *coord >= d {
                return Err(TransformerError::DimensionMismatch(format!(
                    "pe feature coordinate {coord} out of range for d={d}"
                )));
            }
            if !seen.insert(*coord) {
                return Err(TransformerError::DimensionMismatch(format!(
                    "pe feature coordinate {coord} used twice"
                )));
            }
        }
        for (c, e) in &self.word_embedding {
            if e.len() != d {
                return Err(TransformerError::DimensionMismatch(format!(
                    "word embedding for '{c}' has length {} (want {d})",
                    e.len()
                )));
            }
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            let a = &layer.attention;
            let dk = a.wq.rows();
            if a.wk.rows() != dk || a.wq.cols() != d || a.wk.cols() != d {
                return Err(TransformerError::DimensionMismatch(format!(
                    "layer {idx}: query/key maps must be d_k x {d}"
                )));
            }
            if a.wv.rows() != d || a.wv.cols() != d {
                return Err(TransformerError::DimensionMismatch(format!(
                    "layer {idx}: value map must be {d} x {d}"
                )));
            }
            let f = &layer.ffn;
            if f.w1.cols() != d
                || f.w2.rows() != d
                || f.w1.rows() != f.b1.len()
                || f.w2.cols() != f.w1.rows()
                || f.b2.len() != d
            {
                return Err(TransformerError::DimensionMismatch(format!(
                    "layer {idx}: feed-forward shapes inconsistent"
                )));
            }
        }
        if self.readout >= d {
            return Err(TransformerError::DimensionMismatch(format!(
                "readout coordinate {} out of range for d={d}",
                self.readout
            )));
        }
        Ok(())
    }

    /// Largest absolute parameter value over all layer matrices and biases.
    pub fn max_param(&self) -> f64 {
        self.layers.iter().fold(0.0f64, |acc, layer| {
            let a = &layer.attention;
            let attn = [&a.wq, &a.wk, &a.wv]
                .iter()
                .flat_map(|m| m.values())
                .fold(0.0f64, |x, &v| x.max(v.abs()));
            acc.max(attn).max(layer.ffn.max_param())
        })
    }

    /// Initial activations `WE(w_i) + PE_n(i)`.
    pub fn embed(
        &self,
        w: &str,
        registry: &PredicateRegistry,
    ) -> Result<ActivationSequence, TransformerError> {
        let chars: Vec<char> = w.chars().collect();
        if chars.is_empty() {
            return Err(TransformerError::EmptyInput);
        }
        let n = chars.len();
        let mut h = Matrix::zeros(n, self.d);
        for (idx, &c) in chars.iter().enumerate() {
            let we = self
                .word_embedding
                .get(&c)
                .ok_or(TransformerError::UnknownSymbol(c))?;
            h.row_mut(idx).copy_from_slice(we);
            for (coord, feature) in &self.pe_features {
                h.row_mut(idx)[*coord] += feature.value(idx + 1, n, registry)?;
            }
        }
        Ok(h)
    }

    /// Runs the full forward pass, returning the final activations.
    pub fn forward(
        &self,
        w: &str,
        registry: &PredicateRegistry,
    ) -> Result<ActivationSequence, TransformerError> {
        Ok(self.forward_layers(w, registry)?.pop().unwrap())
    }

    /// Forward pass keeping activations after every layer. Index 0 holds the
    /// embedding; index `l` the state after layer `l`.
    pub fn forward_layers(
        &self,
        w: &str,
        registry: &PredicateRegistry,
    ) -> Result<Vec<ActivationSequence>, TransformerError> {
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        let mut h = self.embed(w, registry)?;
        states.push(h.clone());
        for layer in &self.layers {
            h = apply_layer(layer, &h, self.residual)?;
            states.push(h.clone());
        }
        Ok(states)
    }

    /// Reads the output coordinate at the final position: `>= 3/4` accepts,
    /// `<= 1/4` rejects, anything between breaks the approximate-Boolean
    /// contract and is an error.
    pub fn accepts(&self, w: &str, registry: &PredicateRegistry) -> Result<bool, TransformerError> {
        let h = self.forward(w, registry)?;
        let v = h.get(h.rows() - 1, self.readout);
        if v >= 0.75 {
            Ok(true)
        } else if v <= 0.25 {
            Ok(false)
        } else {
            Err(TransformerError::AmbiguousReadout(v))
        }
    }
}

/// Applies a weighting function to one score row. Masked entries are `-inf`.
/// The result is nonnegative and sums to 1 over unmasked entries.
pub fn apply_weighting(
    wf: &WeightingFn,
    scores: &[f64],
    i: usize,
    n: usize,
) -> Result<Vec<f64>, TransformerError> {
    let finite_max = scores
        .iter()
        .copied()
        .filter(|s| s.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !finite_max.is_finite() {
        return Err(TransformerError::AllMasked { position: i });
    }
    match wf {
        WeightingFn::LHard | WeightingFn::RHard | WeightingFn::AHard => {
            let argmax: Vec<usize> = scores
                .iter()
                .enumerate()
                .filter(|(_, &s)| s == finite_max)
                .map(|(j, _)| j)
                .collect();
            let mut out = vec![0.0; scores.len()];
            match wf {
                WeightingFn::LHard => out[argmax[0]] = 1.0,
                WeightingFn::RHard => out[*argmax.last().unwrap()] = 1.0,
                WeightingFn::AHard => {
                    let share = 1.0 / argmax.len() as f64;
                    for j in argmax {
                        out[j] = share;
                    }
                }
                _ => unreachable!(),
            }
            Ok(out)
        }
        WeightingFn::Softmax | WeightingFn::SoftmaxTau { .. } => {
            let tau = match wf {
                WeightingFn::SoftmaxTau { tau } => {
                    let t = tau.value(i, n);
                    if t <= 0.0 {
                        return Err(TransformerError::NonPositiveTemperature(t));
                    }
                    t
                }
                _ => 1.0,
            };
            let m = finite_max / tau;
            let mut out: Vec<f64> = scores
                .iter()
                .map(|&s| {
                    if s == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (s / tau - m).exp()
                    }
                })
                .collect();
            let z: f64 = out.iter().sum();
            for v in &mut out {
                *v /= z;
            }
            Ok(out)
        }
    }
}

/// Raw (pre-weighting) attention scores, `-inf` where masked.
pub fn attention_scores(
    spec: &AttentionSpec,
    h: &ActivationSequence,
) -> Result<Vec<Vec<f64>>, TransformerError> {
    let n = h.rows();
    if h.cols() != spec.wq.cols() {
        return Err(TransformerError::DimensionMismatch(format!(
            "activations have {} columns, query map expects {}",
            h.cols(),
            spec.wq.cols()
        )));
    }
    let scale = if spec.scale_scores {
        1.0 / (spec.wq.rows() as f64).sqrt()
    } else {
        1.0
    };
    let queries: Vec<Vec<f64>> = (0..n).map(|i| spec.wq.matvec(h.row(i))).collect();
    let keys: Vec<Vec<f64>> = (0..n).map(|j| spec.wk.matvec(h.row(j))).collect();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let masked = match spec.mask {
                Mask::None => false,
                Mask::Future => j > i,
                Mask::Past => j < i,
            };
            if masked {
                row.push(f64::NEG_INFINITY);
            } else {
                let dot: f64 = queries[i].iter().zip(&keys[j]).map(|(a, b)| a * b).sum();
                row.push(dot * scale);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// One self-attention sublayer over the whole sequence.
pub fn attention_layer(
    spec: &AttentionSpec,
    h: &ActivationSequence,
) -> Result<ActivationSequence, TransformerError> {
    let n = h.rows();
    let d = h.cols();
    let mut out = Matrix::zeros(n, d);
    // A zero value map contributes nothing; skip the quadratic work.
    if spec.wv.is_zero() {
        return Ok(out);
    }
    let scores = attention_scores(spec, h)?;
    let values: Vec<Vec<f64>> = (0..n).map(|j| spec.wv.matvec(h.row(j))).collect();
    for i in 0..n {
        let weights = apply_weighting(&spec.weighting, &scores[i], i + 1, n)?;
        let row = out.row_mut(i);
        for (j, &a) in weights.iter().enumerate() {
            if a != 0.0 {
                for (o, v) in row.iter_mut().zip(&values[j]) {
                    *o += a * v;
                }
            }
        }
    }
    Ok(out)
}

fn apply_layer(
    layer: &Layer,
    h: &ActivationSequence,
    residual: bool,
) -> Result<ActivationSequence, TransformerError> {
    let n = h.rows();
    let attn = attention_layer(&layer.attention, h)?;
    let mut state = if residual {
        let mut s = h.clone();
        for i in 0..n {
            for (a, b) in s.row_mut(i).iter_mut().zip(attn.row(i)) {
                *a += *b;
            }
        }
        s
    } else {
        attn
    };
    for i in 0..n {
        let f = layer.ffn.apply(state.row(i));
        if residual {
            for (a, b) in state.row_mut(i).iter_mut().zip(&f) {
                *a += *b;
            }
        } else {
            state.row_mut(i).copy_from_slice(&f);
        }
    }
    Ok(state)
}

/// l1 distance between two equal-length slices.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn softmax_tau(tau: f64) -> WeightingFn {
        WeightingFn::SoftmaxTau {
            tau: TemperatureFn::Constant { tau },
        }
    }

    #[test]
    fn hard_variants_on_tied_scores() {
        let s = [1.0, 2.0, 2.0];
        assert_eq!(
            apply_weighting(&WeightingFn::LHard, &s, 1, 3).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            apply_weighting(&WeightingFn::RHard, &s, 1, 3).unwrap(),
            vec![0.0, 0.0, 1.0]
        );
        assert_eq!(
            apply_weighting(&WeightingFn::AHard, &s, 1, 3).unwrap(),
            vec![0.0, 0.5, 0.5]
        );
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let w = apply_weighting(&softmax_tau(1.0), &[0.0, 0.0], 1, 2).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);

        let w = apply_weighting(&softmax_tau(0.1), &[1.0, 0.0], 1, 2).unwrap();
        let expect0 = 1.0 / (1.0 + (-10.0f64).exp());
        let expect1 = (-10.0f64).exp() / (1.0 + (-10.0f64).exp());
        assert!((w[0] - expect0).abs() < 1e-15);
        assert!((w[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn all_masked_is_an_error() {
        let s = [f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert!(matches!(
            apply_weighting(&WeightingFn::Softmax, &s, 1, 2),
            Err(TransformerError::AllMasked { .. })
        ));
    }

    #[test]
    fn tau_to_zero_approaches_hardmax_monotonically() {
        let s = [0.3, 1.0, -0.5, 0.9];
        let hard = apply_weighting(&WeightingFn::AHard, &s, 1, 4).unwrap();
        let mut last = f64::INFINITY;
        for k in 0..12 {
            let tau = 1.0 / 2f64.powi(k);
            let soft = apply_weighting(&softmax_tau(tau), &s, 1, 4).unwrap();
            let dist = l1_distance(&hard, &soft);
            assert!(dist <= last + 1e-15, "not monotone at tau={tau}");
            last = dist;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn uniform_attention_is_column_mean() {
        let d = 2;
        let spec = AttentionSpec {
            wq: Matrix::zeros(1, d),
            wk: Matrix::zeros(1, d),
            wv: Matrix::identity(d),
            mask: Mask::None,
            weighting: WeightingFn::Softmax,
            scale_scores: true,
        };
        let h = Matrix::from_rows(vec![vec![1.0, 4.0], vec![3.0, 0.0], vec![5.0, 2.0]]).unwrap();
        let out = attention_layer(&spec, &h).unwrap();
        for i in 0..3 {
            assert!((out.get(i, 0) - 3.0).abs() < 1e-12);
            assert!((out.get(i, 1) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn future_mask_first_row_attends_to_itself() {
        let d = 2;
        let spec = AttentionSpec {
            wq: Matrix::zeros(1, d),
            wk: Matrix::zeros(1, d),
            wv: Matrix::identity(d),
            mask: Mask::Future,
            weighting: WeightingFn::Softmax,
            scale_scores: true,
        };
        let h = Matrix::from_rows(vec![vec![7.0, -1.0], vec![3.0, 0.0]]).unwrap();
        let out = attention_layer(&spec, &h).unwrap();
        assert_eq!(out.row(0), &[7.0, -1.0]);
    }

    #[test]
    fn ahard_unique_max_retrieves_that_row() {
        let d = 2;
        // keys = first coordinate, queries constant: row with largest first
        // coordinate wins everywhere.
        let spec = AttentionSpec {
            wq: Matrix::from_rows(vec![vec![0.0, 1.0]]).unwrap(),
            wk: Matrix::from_rows(vec![vec![1.0, 0.0]]).unwrap(),
            wv: Matrix::identity(d),
            mask: Mask::None,
            weighting: WeightingFn::AHard,
            scale_scores: true,
        };
        let h = Matrix::from_rows(vec![vec![0.0, 1.0], vec![2.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let out = attention_layer(&spec, &h).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), &[2.0, 1.0]);
        }
    }

    fn zero_layer_spec() -> TransformerSpec {
        let mut we = BTreeMap::new();
        we.insert('a', vec![1.0, 0.0]);
        we.insert('b', vec![0.0, 0.0]);
        TransformerSpec {
            alphabet: vec!['a', 'b'],
            d: 2,
            word_embedding: we,
            pe_features: vec![(1, PEFeature::PosOverLen)],
            layers: vec![],
            readout: 0,
            residual: false,
        }
    }

    #[test]
    fn zero_layer_forward_is_embedding() {
        let spec = zero_layer_spec();
        let reg = PredicateRegistry::builtin();
        let h = spec.forward("ab", &reg).unwrap();
        assert_eq!(h.row(0), &[1.0, 0.5]);
        assert_eq!(h.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = zero_layer_spec();
        let reg = PredicateRegistry::builtin();
        let a = spec.forward("abab", &reg).unwrap();
        let b = spec.forward("abab", &reg).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = zero_layer_spec();
        let json = serde_json::to_string_pretty(&spec).unwrap();
        let back: TransformerSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn accepts_thresholds() {
        let mut spec = zero_layer_spec();
        spec.readout = 0;
        let reg = PredicateRegistry::builtin();
        assert!(spec.accepts("a", &reg).unwrap());
        assert!(!spec.accepts("b", &reg).unwrap());
        assert!(matches!(
            spec.accepts("", &reg),
            Err(TransformerError::EmptyInput)
        ));
        // value 0.5 on the readout coordinate is ambiguous
        let mut amb = zero_layer_spec();
        amb.word_embedding.insert('a', vec![0.5, 0.0]);
        assert!(matches!(
            amb.accepts("a", &reg),
            Err(TransformerError::AmbiguousReadout(_))
        ));
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(scores in prop::collection::vec(-50.0..50.0f64, 1..20),
                              pick in 0..4usize) {
            let wf = match pick {
                0 => WeightingFn::Softmax,
                1 => softmax_tau(0.37),
                2 => WeightingFn::LHard,
                _ => WeightingFn::AHard,
            };
            let w = apply_weighting(&wf, &scores, 1, scores.len()).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn tieless_hard_variants_agree(scores in prop::collection::vec(-20.0..20.0f64, 1..16)) {
            // the generator can emit boundary duplicates; only tieless rows
            // are in scope here
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(scores.iter().filter(|&&s| s == max).count() == 1);
            let l = apply_weighting(&WeightingFn::LHard, &scores, 1, scores.len()).unwrap();
            let r = apply_weighting(&WeightingFn::RHard, &scores, 1, scores.len()).unwrap();
            let a = apply_weighting(&WeightingFn::AHard, &scores, 1, scores.len()).unwrap();
            prop_assert_eq!(&l, &r);
            prop_assert_eq!(&l, &a);
        }

        #[test]
        fn softmax_shift_invariance(scores in prop::collection::vec(-30.0..30.0f64, 1..16),
                                    shift in -100.0..100.0f64) {
            let base = apply_weighting(&WeightingFn::Softmax, &scores, 1, scores.len()).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let moved = apply_weighting(&WeightingFn::Softmax, &shifted, 1, scores.len()).unwrap();
            prop_assert!(l1_distance(&base, &moved) < 1e-12);
        }
    }
}
