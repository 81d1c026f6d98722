//! Temporal-logic formulas with counting terms.
//!
//! A [`Formula`] is evaluated over a finite non-empty string, producing one
//! Boolean per position. Besides the usual Boolean connectives the language
//! has positional operators (`Y` previous, `X` next, `S` since, `U` until),
//! prefix/suffix counting terms (`#L[f]`, `#R[f]`), linear comparisons
//! between counting terms, and unary numerical predicates that may be applied
//! either to the current position or to a counting term.
//!
//! The concrete grammar lives in [`parser`]; the reference semantics in
//! [`eval`]. Everything here is plain immutable data, safe to share across
//! threads.

mod eval;
mod parser;

pub use eval::{eval_count_term, eval_formula, normalize_comparison};
pub use parser::parse_formula;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Errors from parsing or evaluating formulas.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogicError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown symbol '{0}' (not in the declared alphabet)")]
    UnknownSymbol(char),
    #[error("unknown predicate '{0}'")]
    UnknownPredicate(String),
    #[error("input string must be non-empty")]
    EmptyInput,
    #[error("predicate may only be applied to a single count term #L[..] or #R[..]")]
    PredicateOnCompoundTerm,
}

/// A formula of the temporal logic.
///
/// `Atom(c)` is true where the input symbol equals `c`. `Prev`/`Next` look one
/// position left/right and are false at the boundary. `Since`/`Until` follow
/// the reflexive convention: `f1 S f2` holds at `i` iff there is `j <= i`
/// with `f2` at `j` and `f1` everywhere on `[j, i]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Formula {
    Atom(char),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Prev(Box<Formula>),
    Next(Box<Formula>),
    Since(Box<Formula>, Box<Formula>),
    Until(Box<Formula>, Box<Formula>),
    /// Numerical predicate applied to the current position.
    Pred(String),
    /// Numerical predicate applied to the value of a count term.
    PredCount(String, CountTerm),
    /// `t1 <= t2` on integer term values.
    Le(CountTerm, CountTerm),
}

/// An integer-valued counting term.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CountTerm {
    /// Number of positions `j <= i` satisfying the formula.
    Left(Box<Formula>),
    /// Number of positions `j >= i` satisfying the formula.
    Right(Box<Formula>),
    Add(Box<CountTerm>, Box<CountTerm>),
    Sub(Box<CountTerm>, Box<CountTerm>),
    One,
}

impl Formula {
    pub fn not(f: Formula) -> Formula {
        Formula::Not(Box::new(f))
    }
    pub fn and(a: Formula, b: Formula) -> Formula {
        Formula::And(Box::new(a), Box::new(b))
    }
    pub fn or(a: Formula, b: Formula) -> Formula {
        Formula::Or(Box::new(a), Box::new(b))
    }
    pub fn prev(f: Formula) -> Formula {
        Formula::Prev(Box::new(f))
    }
    pub fn next(f: Formula) -> Formula {
        Formula::Next(Box::new(f))
    }
    pub fn since(a: Formula, b: Formula) -> Formula {
        Formula::Since(Box::new(a), Box::new(b))
    }
    pub fn until(a: Formula, b: Formula) -> Formula {
        Formula::Until(Box::new(a), Box::new(b))
    }

    /// All distinct subformulas, children before parents.
    pub fn subformulas(&self) -> Vec<&Formula> {
        let mut out: Vec<&Formula> = Vec::new();
        fn walk<'a>(f: &'a Formula, out: &mut Vec<&'a Formula>) {
            match f {
                Formula::Atom(_) | Formula::Pred(_) => {}
                Formula::Not(a) | Formula::Prev(a) | Formula::Next(a) => walk(a, out),
                Formula::And(a, b)
                | Formula::Or(a, b)
                | Formula::Since(a, b)
                | Formula::Until(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
                Formula::PredCount(_, t) => walk_term(t, out),
                Formula::Le(t1, t2) => {
                    walk_term(t1, out);
                    walk_term(t2, out);
                }
            }
            if !out.contains(&f) {
                out.push(f);
            }
        }
        fn walk_term<'a>(t: &'a CountTerm, out: &mut Vec<&'a Formula>) {
            match t {
                CountTerm::Left(f) | CountTerm::Right(f) => walk(f, out),
                CountTerm::Add(a, b) | CountTerm::Sub(a, b) => {
                    walk_term(a, out);
                    walk_term(b, out);
                }
                CountTerm::One => {}
            }
        }
        walk(self, &mut out);
        out
    }

    /// Names of every numerical predicate mentioned in the formula.
    pub fn predicate_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for sub in self.subformulas() {
            match sub {
                Formula::Pred(name) | Formula::PredCount(name, _) => {
                    if !names.contains(name) {
                        names.push(name.clone());
                    }
                }
                _ => {}
            }
        }
        names
    }
}

// Canonical printing: binary operators fully parenthesized, unary operators
// prefix. `parse(print(f)) == f` for every formula.
impl fmt::Display for Formula {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Atom(c) => write!(w, "Q{c}"),
            Formula::Not(f) => write!(w, "! {f}"),
            Formula::And(a, b) => write!(w, "({a} & {b})"),
            Formula::Or(a, b) => write!(w, "({a} | {b})"),
            Formula::Prev(f) => write!(w, "Y {f}"),
            Formula::Next(f) => write!(w, "X {f}"),
            Formula::Since(a, b) => write!(w, "({a} S {b})"),
            Formula::Until(a, b) => write!(w, "({a} U {b})"),
            Formula::Pred(name) => write!(w, "{name}"),
            Formula::PredCount(name, t) => write!(w, "{name}({t})"),
            Formula::Le(t1, t2) => write!(w, "({t1} <= {t2})"),
        }
    }
}

impl fmt::Display for CountTerm {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CountTerm::Left(f) => write!(w, "#L[{f}]"),
            CountTerm::Right(f) => write!(w, "#R[{f}]"),
            CountTerm::Add(a, b) => write!(w, "({a} + {b})"),
            CountTerm::Sub(a, b) => write!(w, "({a} - {b})"),
            CountTerm::One => write!(w, "1"),
        }
    }
}

/// Registry of unary numerical predicates: named total functions
/// `(n, i) -> bool` with `n` the input length and `i` a 1-based position.
///
/// Queries outside `1..=n` (a count term can evaluate to `0`) return `false`;
/// the predicate families themselves are only defined on `[1, n]`.
#[derive(Clone)]
pub struct PredicateRegistry {
    preds: BTreeMap<String, Arc<dyn Fn(usize, usize) -> bool + Send + Sync>>,
}

impl PredicateRegistry {
    /// Registry containing the built-in `ODD` predicate (`i` is odd) and its
    /// companion `EVEN`.
    pub fn builtin() -> Self {
        let mut r = PredicateRegistry {
            preds: BTreeMap::new(),
        };
        r.register("ODD", |_n, i| i % 2 == 1);
        r.register("EVEN", |_n, i| i % 2 == 0);
        r
    }

    pub fn register<F>(&mut self, name: &str, f: F)
    where
        F: Fn(usize, usize) -> bool + Send + Sync + 'static,
    {
        self.preds.insert(name.to_string(), Arc::new(f));
    }

    /// Adapter for table-backed predicates: one bit row per input length.
    /// Lengths absent from the table evaluate to `false`.
    pub fn register_table(&mut self, name: &str, table: BTreeMap<usize, Vec<bool>>) {
        self.register_table_arc(name, Arc::new(table));
    }

    fn register_table_arc(&mut self, name: &str, table: Arc<BTreeMap<usize, Vec<bool>>>) {
        self.preds.insert(
            name.to_string(),
            Arc::new(move |n, i| {
                table
                    .get(&n)
                    .and_then(|row| row.get(i - 1))
                    .copied()
                    .unwrap_or(false)
            }),
        );
    }

    /// Loads `{ "name": ..., "table": { "<n>": [0,1,...], ... } }` documents.
    /// Accepts either a single object or an array of them.
    pub fn load_json(&mut self, json: &str) -> Result<Vec<String>, serde_json::Error> {
        #[derive(serde::Deserialize)]
        struct PredFile {
            name: String,
            table: BTreeMap<String, Vec<u8>>,
        }
        let docs: Vec<PredFile> = match serde_json::from_str::<serde_json::Value>(json)? {
            serde_json::Value::Array(_) => serde_json::from_str(json)?,
            _ => vec![serde_json::from_str(json)?],
        };
        let mut names = Vec::new();
        for doc in docs {
            let mut table = BTreeMap::new();
            for (n, bits) in doc.table {
                if let Ok(n) = n.parse::<usize>() {
                    table.insert(n, bits.into_iter().map(|b| b != 0).collect());
                }
            }
            self.register_table(&doc.name, table);
            names.push(doc.name);
        }
        Ok(names)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.preds.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.preds.keys().map(|s| s.as_str())
    }

    /// Evaluates `name` at `(n, i)`. Positions outside `[1, n]` are `false`.
    pub fn eval(&self, name: &str, n: usize, i: i64) -> Result<bool, LogicError> {
        let f = self
            .preds
            .get(name)
            .ok_or_else(|| LogicError::UnknownPredicate(name.to_string()))?;
        if i < 1 || i > n as i64 {
            return Ok(false);
        }
        Ok(f(n, i as usize))
    }
}

impl Default for PredicateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl fmt::Debug for PredicateRegistry {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        w.debug_struct("PredicateRegistry")
            .field("names", &self.preds.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// A comparison `t1 <= t2` rewritten as `sum_k coeff_k * count_k >= threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedComparison {
    /// Merged coefficients over distinct `(direction, formula)` leaves.
    pub terms: Vec<CountCoefficient>,
    /// Right-hand side `c` of the rewritten inequality.
    pub threshold: i64,
    /// Sum of absolute coefficient values.
    pub coeff_magnitude: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountCoefficient {
    pub coeff: i64,
    pub direction: CountDirection,
    pub formula: Formula,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CountDirection {
    Left,
    Right,
}

impl NormalizedComparison {
    /// A comparison with no count leaves is constant; returns its value.
    pub fn constant_value(&self) -> Option<bool> {
        if self.terms.is_empty() {
            Some(0 >= self.threshold)
        } else {
            None
        }
    }
}

/// The language fragments a formula can fall into, ordered from most
/// restrictive to least. Names use the grammar's operator tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fragment {
    /// Boolean operations and `Y` only.
    Prev,
    /// Boolean operations, `Y` and `X`.
    PrevNext,
    /// `S` only.
    Since,
    /// `S` and `U`.
    SinceUntil,
    /// All four positional operators.
    Ltl,
    /// Counting with `#L` only, no positional operators.
    CountLeft,
    /// Counting with both directions, no positional operators.
    CountBoth,
    /// `Y`, `S` and `#L` counting together.
    PastCount,
    /// Everything.
    LtlCount,
}

impl fmt::Display for Fragment {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Fragment::Prev => "TL[Y]",
            Fragment::PrevNext => "TL[Y,X]",
            Fragment::Since => "TL[S]",
            Fragment::SinceUntil => "TL[S,U]",
            Fragment::Ltl => "LTL",
            Fragment::CountLeft => "TL[#L,+,Mon]",
            Fragment::CountBoth => "TL[#L,#R,+,Mon]",
            Fragment::PastCount => "TL[Y,S,#L,+,Mon]",
            Fragment::LtlCount => "LTL[#L,#R,+,Mon]",
        };
        w.write_str(s)
    }
}

/// Result of [`classify_fragment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FragmentInfo {
    /// Smallest fragment containing the formula.
    pub fragment: Fragment,
    /// Whether the formula uses only past-looking operators (`Y`, `S`, `#L`)
    /// and can therefore be compiled with future masking alone.
    pub future_compilable: bool,
}

/// Determines the smallest fragment containing `f`, from its operator set.
pub fn classify_fragment(f: &Formula) -> FragmentInfo {
    #[derive(Default)]
    struct Uses {
        prev: bool,
        next: bool,
        since: bool,
        until: bool,
        count_left: bool,
        count_right: bool,
        pred: bool,
    }
    fn walk(f: &Formula, u: &mut Uses) {
        match f {
            Formula::Atom(_) => {}
            Formula::Not(a) => walk(a, u),
            Formula::And(a, b) | Formula::Or(a, b) => {
                walk(a, u);
                walk(b, u);
            }
            Formula::Prev(a) => {
                u.prev = true;
                walk(a, u);
            }
            Formula::Next(a) => {
                u.next = true;
                walk(a, u);
            }
            Formula::Since(a, b) => {
                u.since = true;
                walk(a, u);
                walk(b, u);
            }
            Formula::Until(a, b) => {
                u.until = true;
                walk(a, u);
                walk(b, u);
            }
            Formula::Pred(_) => u.pred = true,
            Formula::PredCount(_, t) => {
                u.pred = true;
                walk_term(t, u);
            }
            Formula::Le(a, b) => {
                u.pred = true;
                walk_term(a, u);
                walk_term(b, u);
            }
        }
    }
    fn walk_term(t: &CountTerm, u: &mut Uses) {
        match t {
            CountTerm::Left(f) => {
                u.count_left = true;
                walk(f, u);
            }
            CountTerm::Right(f) => {
                u.count_right = true;
                walk(f, u);
            }
            CountTerm::Add(a, b) | CountTerm::Sub(a, b) => {
                walk_term(a, u);
                walk_term(b, u);
            }
            CountTerm::One => {}
        }
    }

    let mut u = Uses::default();
    walk(f, &mut u);

    let counting = u.pred || u.count_left || u.count_right;
    let positional = u.prev || u.next || u.since || u.until;
    let future_compilable = !u.next && !u.until && !u.count_right;

    let fragment = if counting {
        match (positional, u.count_right) {
            (false, false) => Fragment::CountLeft,
            (false, true) => Fragment::CountBoth,
            (true, _) if future_compilable => Fragment::PastCount,
            (true, _) => Fragment::LtlCount,
        }
    } else if (u.prev || u.next) && (u.since || u.until) {
        Fragment::Ltl
    } else if u.since || u.until {
        if u.until {
            Fragment::SinceUntil
        } else {
            Fragment::Since
        }
    } else if u.next {
        Fragment::PrevNext
    } else {
        Fragment::Prev
    };

    FragmentInfo {
        fragment,
        future_compilable,
    }
}
