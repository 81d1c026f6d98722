//! Reference evaluator: the exact semantics every compiled transformer is
//! checked against. Written for obviousness over speed — counts and the
//! temporal operators are evaluated by direct enumeration over positions.

use std::collections::BTreeMap;

use super::{
    CountCoefficient, CountDirection, CountTerm, Formula, LogicError, NormalizedComparison,
    PredicateRegistry,
};

/// Evaluates `f` at every position of `w` (1-based positions internally).
/// Returns one Boolean per position.
pub fn eval_formula(
    f: &Formula,
    w: &str,
    registry: &PredicateRegistry,
) -> Result<Vec<bool>, LogicError> {
    let chars: Vec<char> = w.chars().collect();
    if chars.is_empty() {
        return Err(LogicError::EmptyInput);
    }
    eval_on(f, &chars, registry)
}

fn eval_on(
    f: &Formula,
    w: &[char],
    registry: &PredicateRegistry,
) -> Result<Vec<bool>, LogicError> {
    let n = w.len();
    let out = match f {
        Formula::Atom(c) => w.iter().map(|&s| s == *c).collect(),
        Formula::Not(a) => {
            let va = eval_on(a, w, registry)?;
            va.into_iter().map(|b| !b).collect()
        }
        Formula::And(a, b) => {
            let va = eval_on(a, w, registry)?;
            let vb = eval_on(b, w, registry)?;
            va.into_iter().zip(vb).map(|(x, y)| x && y).collect()
        }
        Formula::Or(a, b) => {
            let va = eval_on(a, w, registry)?;
            let vb = eval_on(b, w, registry)?;
            va.into_iter().zip(vb).map(|(x, y)| x || y).collect()
        }
        Formula::Prev(a) => {
            let va = eval_on(a, w, registry)?;
            (0..n).map(|i| i >= 1 && va[i - 1]).collect()
        }
        Formula::Next(a) => {
            let va = eval_on(a, w, registry)?;
            (0..n).map(|i| i + 1 < n && va[i + 1]).collect()
        }
        Formula::Since(a, b) => {
            let va = eval_on(a, w, registry)?;
            let vb = eval_on(b, w, registry)?;
            (0..n)
                .map(|i| (0..=i).any(|j| vb[j] && (j..=i).all(|k| va[k])))
                .collect()
        }
        Formula::Until(a, b) => {
            let va = eval_on(a, w, registry)?;
            let vb = eval_on(b, w, registry)?;
            (0..n)
                .map(|i| (i..n).any(|j| vb[j] && (i..=j).all(|k| va[k])))
                .collect()
        }
        Formula::Pred(name) => {
            let mut out = Vec::with_capacity(n);
            for i in 1..=n {
                out.push(registry.eval(name, n, i as i64)?);
            }
            out
        }
        Formula::PredCount(name, t) => {
            let mut out = Vec::with_capacity(n);
            for i in 1..=n {
                let v = eval_term_on(t, w, i, registry)?;
                out.push(registry.eval(name, n, v)?);
            }
            out
        }
        Formula::Le(t1, t2) => {
            let mut out = Vec::with_capacity(n);
            for i in 1..=n {
                let v1 = eval_term_on(t1, w, i, registry)?;
                let v2 = eval_term_on(t2, w, i, registry)?;
                out.push(v1 <= v2);
            }
            out
        }
    };
    Ok(out)
}

/// Evaluates a count term at 1-based position `i` of `w`.
pub fn eval_count_term(
    t: &CountTerm,
    w: &str,
    i: usize,
    registry: &PredicateRegistry,
) -> Result<i64, LogicError> {
    let chars: Vec<char> = w.chars().collect();
    if chars.is_empty() {
        return Err(LogicError::EmptyInput);
    }
    assert!(
        i >= 1 && i <= chars.len(),
        "position {i} out of range 1..={}",
        chars.len()
    );
    eval_term_on(t, &chars, i, registry)
}

fn eval_term_on(
    t: &CountTerm,
    w: &[char],
    i: usize,
    registry: &PredicateRegistry,
) -> Result<i64, LogicError> {
    Ok(match t {
        CountTerm::Left(f) => {
            let v = eval_on(f, w, registry)?;
            v[..i].iter().filter(|&&b| b).count() as i64
        }
        CountTerm::Right(f) => {
            let v = eval_on(f, w, registry)?;
            v[i - 1..].iter().filter(|&&b| b).count() as i64
        }
        CountTerm::Add(a, b) => {
            eval_term_on(a, w, i, registry)? + eval_term_on(b, w, i, registry)?
        }
        CountTerm::Sub(a, b) => {
            eval_term_on(a, w, i, registry)? - eval_term_on(b, w, i, registry)?
        }
        CountTerm::One => 1,
    })
}

/// Rewrites `t1 <= t2` as a linear inequality over count leaves:
/// `sum_k coeff_k * count_k >= threshold`. Coefficients of identical
/// `(direction, formula)` leaves are merged and `1` leaves fold into the
/// threshold. Semantics-preserving for every string and position.
pub fn normalize_comparison(t1: &CountTerm, t2: &CountTerm) -> NormalizedComparison {
    // t1 <= t2  <=>  (t2 - t1) >= 0  <=>  sum coeff*count >= -constant
    let mut coeffs: BTreeMap<(CountDirection, Formula), i64> = BTreeMap::new();
    let mut constant = 0i64;
    collect(t2, 1, &mut coeffs, &mut constant);
    collect(t1, -1, &mut coeffs, &mut constant);

    let terms: Vec<CountCoefficient> = coeffs
        .into_iter()
        .filter(|(_, c)| *c != 0)
        .map(|((direction, formula), coeff)| CountCoefficient {
            coeff,
            direction,
            formula,
        })
        .collect();
    let coeff_magnitude = terms.iter().map(|t| t.coeff.abs()).sum();
    NormalizedComparison {
        terms,
        threshold: -constant,
        coeff_magnitude,
    }
}

fn collect(
    t: &CountTerm,
    sign: i64,
    coeffs: &mut BTreeMap<(CountDirection, Formula), i64>,
    constant: &mut i64,
) {
    match t {
        CountTerm::Left(f) => {
            *coeffs
                .entry((CountDirection::Left, (**f).clone()))
                .or_insert(0) += sign;
        }
        CountTerm::Right(f) => {
            *coeffs
                .entry((CountDirection::Right, (**f).clone()))
                .or_insert(0) += sign;
        }
        CountTerm::Add(a, b) => {
            collect(a, sign, coeffs, constant);
            collect(b, sign, coeffs, constant);
        }
        CountTerm::Sub(a, b) => {
            collect(a, sign, coeffs, constant);
            collect(b, -sign, coeffs, constant);
        }
        CountTerm::One => *constant += sign,
    }
}
