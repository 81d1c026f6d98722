//! A minimal interpreter for the two prefix-sum style attention operations a
//! balanced-bracket checker needs, the checker program itself, and a classic
//! stack oracle to verify it against.

use std::fmt;

/// Values a program vector can hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VectorData {
    Ints(Vec<i64>),
    Bools(Vec<bool>),
    Syms(Vec<char>),
}

/// A named length-n vector produced while running a program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SRaspVector {
    pub name: String,
    pub data: VectorData,
}

impl fmt::Display for SRaspVector {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(w, "{} = ", self.name)?;
        match &self.data {
            VectorData::Ints(v) => write!(w, "{v:?}"),
            VectorData::Bools(v) => {
                let bits: Vec<u8> = v.iter().map(|&b| b as u8).collect();
                write!(w, "{bits:?}")
            }
            VectorData::Syms(v) => write!(w, "{v:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SumRange {
    /// positions j <= i
    UpTo,
    /// positions j >= i
    From,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchRange {
    /// positions j < i
    Before,
    /// positions j <= i
    UpTo,
}

/// Summing attention: position `i` holds the sum of `payload(j)` over the
/// range.
pub fn attsum(range: SumRange, payload: &[i64]) -> Vec<i64> {
    let n = payload.len();
    match range {
        SumRange::UpTo => {
            let mut acc = 0;
            (0..n)
                .map(|i| {
                    acc += payload[i];
                    acc
                })
                .collect()
        }
        SumRange::From => {
            let mut out = vec![0; n];
            let mut acc = 0;
            for i in (0..n).rev() {
                acc += payload[i];
                out[i] = acc;
            }
            out
        }
    }
}

/// Rightmost-match attention with a default: position `i` holds `payload(j)`
/// for the rightmost in-range `j` satisfying the predicate, or `default`.
pub fn attrdefault<T: Copy>(
    range: MatchRange,
    predicate: impl Fn(usize, usize) -> bool,
    payload: &[T],
    default: T,
) -> Vec<T> {
    let n = payload.len();
    (0..n)
        .map(|i| {
            let upper = match range {
                MatchRange::Before => i,
                MatchRange::UpTo => i + 1,
            };
            (0..upper)
                .rev()
                .find(|&j| predicate(i, j))
                .map(|j| payload[j])
                .unwrap_or(default)
        })
        .collect()
}

/// Bracket alphabet with `k` matched pairs. Symbols are drawn from `([{<`
/// and `)]}>`; the reserved `?` is never a bracket and mismatches everything.
#[derive(Debug, Clone)]
pub struct BracketAlphabet {
    pub k: usize,
    lefts: Vec<char>,
    rights: Vec<char>,
}

pub const DEFAULT_SENTINEL: char = '?';

impl BracketAlphabet {
    pub fn new(k: usize) -> Self {
        assert!((1..=4).contains(&k), "supported bracket counts are 1..=4");
        BracketAlphabet {
            k,
            lefts: "([{<".chars().take(k).collect(),
            rights: ")]}>".chars().take(k).collect(),
        }
    }

    pub fn symbols(&self) -> Vec<char> {
        self.lefts.iter().chain(&self.rights).copied().collect()
    }

    pub fn is_left(&self, c: char) -> bool {
        self.lefts.contains(&c)
    }

    pub fn is_right(&self, c: char) -> bool {
        self.rights.contains(&c)
    }

    /// True unless `open` and `close` form a matched pair of the same type.
    pub fn mismatch(&self, open: char, close: char) -> bool {
        match (
            self.lefts.iter().position(|&l| l == open),
            self.rights.iter().position(|&r| r == close),
        ) {
            (Some(a), Some(b)) => a != b,
            _ => true,
        }
    }
}

/// Everything a program run produces: the output vector plus every
/// intermediate, for inspection and invariant checks.
#[derive(Debug, Clone)]
pub struct DyckRun {
    pub vectors: Vec<SRaspVector>,
    pub out: Vec<bool>,
}

impl DyckRun {
    pub fn vector(&self, name: &str) -> Option<&SRaspVector> {
        self.vectors.iter().find(|v| v.name == name)
    }

    fn push_ints(&mut self, name: &str, v: Vec<i64>) -> Vec<i64> {
        self.vectors.push(SRaspVector {
            name: name.to_string(),
            data: VectorData::Ints(v.clone()),
        });
        v
    }

    fn push_bools(&mut self, name: &str, v: Vec<bool>) -> Vec<bool> {
        self.vectors.push(SRaspVector {
            name: name.to_string(),
            data: VectorData::Bools(v.clone()),
        });
        v
    }

    fn push_syms(&mut self, name: &str, v: Vec<char>) -> Vec<char> {
        self.vectors.push(SRaspVector {
            name: name.to_string(),
            data: VectorData::Syms(v.clone()),
        });
        v
    }
}

/// Runs the bracket-checker program. `out(i)` is true iff the prefix through
/// `i` is a balanced bracket string.
pub fn dyck_program(w: &str, alphabet: &BracketAlphabet) -> DyckRun {
    let input: Vec<char> = w.chars().collect();
    assert!(!input.is_empty(), "input must be non-empty");
    let n = input.len();
    let mut run = DyckRun {
        vectors: Vec::new(),
        out: Vec::new(),
    };

    let left: Vec<i64> = input.iter().map(|&c| alphabet.is_left(c) as i64).collect();
    let right: Vec<i64> = input.iter().map(|&c| alphabet.is_right(c) as i64).collect();

    let sleft = run.push_ints("sleft", attsum(SumRange::UpTo, &left));
    let sright = run.push_ints("sright", attsum(SumRange::UpTo, &right));
    let er1 = run.push_bools(
        "er1",
        (0..n).map(|i| sright[i] > sleft[i]).collect(),
    );
    let diff = run.push_ints(
        "diff",
        (0..n).map(|i| sleft[i] - sright[i]).collect(),
    );
    let d = run.push_ints("d", (0..n).map(|i| diff[i] + right[i]).collect());
    let check = run.push_syms(
        "check",
        attrdefault(
            MatchRange::Before,
            |i, j| d[j] == d[i],
            &input,
            DEFAULT_SENTINEL,
        ),
    );
    let er2 = run.push_bools(
        "er2",
        (0..n)
            .map(|i| right[i] == 1 && alphabet.mismatch(check[i], input[i]))
            .collect(),
    );
    let okprefix = run.push_bools(
        "okprefix",
        attrdefault(
            MatchRange::UpTo,
            |_i, j| er1[j] || er2[j],
            &vec![false; n],
            true,
        ),
    );
    let out = run.push_bools(
        "out",
        (0..n).map(|i| okprefix[i] && diff[i] == 0).collect(),
    );
    run.out = out;
    run
}

/// Ground truth: a stack-based checker run on every prefix.
pub fn dyck_oracle(w: &str, alphabet: &BracketAlphabet) -> Vec<bool> {
    let mut stack: Vec<char> = Vec::new();
    let mut broken = false;
    let mut out = Vec::new();
    for c in w.chars() {
        if !broken {
            if alphabet.is_left(c) {
                stack.push(c);
            } else if alphabet.is_right(c) {
                match stack.pop() {
                    Some(open) if !alphabet.mismatch(open, c) => {}
                    _ => broken = true,
                }
            } else {
                broken = true;
            }
        }
        out.push(!broken && stack.is_empty());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn bools(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b != 0).collect()
    }

    #[test]
    fn attsum_examples() {
        assert_eq!(attsum(SumRange::UpTo, &[1, 0, 1]), vec![1, 1, 2]);
        assert_eq!(attsum(SumRange::UpTo, &[0, 0, 0]), vec![0, 0, 0]);
        assert_eq!(attsum(SumRange::From, &[1, 1]), vec![2, 1]);
    }

    #[test]
    fn attrdefault_examples() {
        // no j satisfies the predicate
        assert_eq!(
            attrdefault(MatchRange::Before, |_, _| false, &[1, 2, 3], -1),
            vec![-1, -1, -1]
        );
        // predicate always true: previous element, default at the start
        assert_eq!(
            attrdefault(MatchRange::Before, |_, _| true, &['a', 'b', 'c'], '?'),
            vec!['?', 'a', 'b']
        );
    }

    #[test]
    fn check_vector_on_simple_pair() {
        let alpha = BracketAlphabet::new(1);
        let run = dyck_program("()", &alpha);
        match &run.vector("check").unwrap().data {
            VectorData::Syms(v) => assert_eq!(v, &vec!['?', '(']),
            other => panic!("unexpected vector {other:?}"),
        }
        match &run.vector("d").unwrap().data {
            VectorData::Ints(v) => assert_eq!(v, &vec![1, 1]),
            other => panic!("unexpected vector {other:?}"),
        }
    }

    #[test]
    fn program_examples() {
        let k1 = BracketAlphabet::new(1);
        assert_eq!(dyck_program("()", &k1).out, bools(&[0, 1]));
        assert_eq!(dyck_program("(())", &k1).out, bools(&[0, 0, 0, 1]));
        let k2 = BracketAlphabet::new(2);
        assert_eq!(dyck_program("(]", &k2).out, bools(&[0, 0]));
        assert_eq!(dyck_program("([])", &k2).out, bools(&[0, 0, 0, 1]));
    }

    fn exhaustive(alpha: &BracketAlphabet, max_len: usize) -> Vec<String> {
        let syms = alpha.symbols();
        let mut out = Vec::new();
        for n in 1..=max_len {
            let mut idx = vec![0usize; n];
            loop {
                out.push(idx.iter().map(|&i| syms[i]).collect::<String>());
                let mut k = 0;
                loop {
                    if k == n {
                        break;
                    }
                    idx[k] += 1;
                    if idx[k] < syms.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == n {
                    break;
                }
            }
        }
        out
    }

    #[test]
    fn program_matches_oracle_exhaustively() {
        for k in 1..=2 {
            let alpha = BracketAlphabet::new(k);
            for w in exhaustive(&alpha, 6) {
                assert_eq!(
                    dyck_program(&w, &alpha).out,
                    dyck_oracle(&w, &alpha),
                    "mismatch on {w} (k={k})"
                );
            }
        }
    }

    #[test]
    fn program_matches_oracle_on_random_long_strings() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in 3..=4 {
            let alpha = BracketAlphabet::new(k);
            let syms = alpha.symbols();
            for _ in 0..500 {
                let n = rng.gen_range(1..=32);
                // half the samples biased towards balanced-ish strings
                let w: String = if rng.gen_bool(0.5) {
                    (0..n).map(|_| syms[rng.gen_range(0..syms.len())]).collect()
                } else {
                    let mut s = String::new();
                    let mut depth: Vec<usize> = Vec::new();
                    for _ in 0..n {
                        if !depth.is_empty() && rng.gen_bool(0.5) {
                            let t = depth.pop().unwrap();
                            s.push(alpha.rights[t]);
                        } else {
                            let t = rng.gen_range(0..k);
                            depth.push(t);
                            s.push(alpha.lefts[t]);
                        }
                    }
                    s
                };
                assert_eq!(
                    dyck_program(&w, &alpha).out,
                    dyck_oracle(&w, &alpha),
                    "mismatch on {w} (k={k})"
                );
            }
        }
    }

    #[test]
    fn early_error_absorbs() {
        // once er1 or er2 fires, out stays false at all later positions
        let alpha = BracketAlphabet::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let syms = alpha.symbols();
        for _ in 0..300 {
            let n = rng.gen_range(1..=16);
            let w: String = (0..n).map(|_| syms[rng.gen_range(0..syms.len())]).collect();
            let run = dyck_program(&w, &alpha);
            let er1 = match &run.vector("er1").unwrap().data {
                VectorData::Bools(v) => v.clone(),
                _ => unreachable!(),
            };
            let er2 = match &run.vector("er2").unwrap().data {
                VectorData::Bools(v) => v.clone(),
                _ => unreachable!(),
            };
            let mut seen_error = false;
            for i in 0..n {
                seen_error = seen_error || er1[i] || er2[i];
                if seen_error {
                    assert!(!run.out[i], "out should stay false after an error: {w}");
                }
            }
        }
    }
}
