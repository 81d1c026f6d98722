//! Recursive-descent parser for the formula grammar.
//!
//! ```text
//! formula   := or_expr (("S" | "U") formula)?          (right-associative)
//! or_expr   := and_expr ("|" and_expr)*
//! and_expr  := unary ("&" unary)*
//! unary     := "!" unary | "X" unary | "Y" unary | primary
//! primary   := QATOM                       e.g. "Q1", "Qa"
//!            | NAME                        predicate at current position
//!            | NAME "(" term ")"           predicate of a count term
//!            | comparison
//!            | "(" formula ")"
//! comparison:= term ("<=" | "=" | ">=") term
//! term      := factor (("+" | "-") factor)*
//! factor    := "#L" "[" formula "]" | "#R" "[" formula "]"
//!            | INT | "(" term ")"
//! ```
//!
//! Tokens are ASCII. `S`, `U`, `X`, `Y` are reserved operator names. An
//! identifier `Q<c>` (exactly two characters) is an atom for symbol `c`;
//! every other identifier is a predicate name looked up in the registry.
//! `t1 = t2` desugars to `t1 <= t2 & t2 <= t1`, `t1 >= t2` to `t2 <= t1`,
//! and a non-negative integer literal `k` to a sum of `k` ones (`0` becomes
//! `1 - 1`).

use super::{CountTerm, Formula, LogicError, PredicateRegistry};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    CountLeft,
    CountRight,
    Amp,
    Pipe,
    Bang,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Plus,
    Minus,
    Le,
    Ge,
    Eq,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(src: &'a str) -> Result<Vec<(Tok, usize)>, LogicError> {
        let mut lx = Lexer {
            src: src.as_bytes(),
            pos: 0,
        };
        let mut out = Vec::new();
        loop {
            lx.skip_ws();
            if lx.pos >= lx.src.len() {
                return Ok(out);
            }
            let start = lx.pos;
            let c = lx.src[lx.pos];
            let tok = match c {
                b'&' => {
                    lx.pos += 1;
                    Tok::Amp
                }
                b'|' => {
                    lx.pos += 1;
                    Tok::Pipe
                }
                b'!' => {
                    lx.pos += 1;
                    Tok::Bang
                }
                b'(' => {
                    lx.pos += 1;
                    Tok::LParen
                }
                b')' => {
                    lx.pos += 1;
                    Tok::RParen
                }
                b'[' => {
                    lx.pos += 1;
                    Tok::LBracket
                }
                b']' => {
                    lx.pos += 1;
                    Tok::RBracket
                }
                b'+' => {
                    lx.pos += 1;
                    Tok::Plus
                }
                b'-' => {
                    lx.pos += 1;
                    Tok::Minus
                }
                b'=' => {
                    lx.pos += 1;
                    Tok::Eq
                }
                b'<' => {
                    if lx.src.get(lx.pos + 1) == Some(&b'=') {
                        lx.pos += 2;
                        Tok::Le
                    } else {
                        return Err(LogicError::Syntax {
                            position: start,
                            message: "expected '<='".into(),
                        });
                    }
                }
                b'>' => {
                    if lx.src.get(lx.pos + 1) == Some(&b'=') {
                        lx.pos += 2;
                        Tok::Ge
                    } else {
                        return Err(LogicError::Syntax {
                            position: start,
                            message: "expected '>='".into(),
                        });
                    }
                }
                b'#' => match lx.src.get(lx.pos + 1) {
                    Some(b'L') => {
                        lx.pos += 2;
                        Tok::CountLeft
                    }
                    Some(b'R') => {
                        lx.pos += 2;
                        Tok::CountRight
                    }
                    _ => {
                        return Err(LogicError::Syntax {
                            position: start,
                            message: "expected '#L' or '#R'".into(),
                        })
                    }
                },
                b'0'..=b'9' => {
                    let mut end = lx.pos;
                    while end < lx.src.len() && lx.src[end].is_ascii_digit() {
                        end += 1;
                    }
                    let text = std::str::from_utf8(&lx.src[lx.pos..end]).unwrap();
                    lx.pos = end;
                    Tok::Int(text.parse().map_err(|_| LogicError::Syntax {
                        position: start,
                        message: "integer literal out of range".into(),
                    })?)
                }
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    let mut end = lx.pos;
                    while end < lx.src.len()
                        && (lx.src[end].is_ascii_alphanumeric() || lx.src[end] == b'_')
                    {
                        end += 1;
                    }
                    let text = std::str::from_utf8(&lx.src[lx.pos..end]).unwrap().to_string();
                    lx.pos = end;
                    Tok::Ident(text)
                }
                other => {
                    return Err(LogicError::Syntax {
                        position: start,
                        message: format!("unexpected character '{}'", other as char),
                    })
                }
            };
            out.push((tok, start));
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    idx: usize,
    end: usize,
    alphabet: &'a [char],
    registry: &'a PredicateRegistry,
}

/// Parses a single formula. Atoms must use symbols from `alphabet`; predicate
/// names must exist in `registry`.
pub fn parse_formula(
    text: &str,
    alphabet: &[char],
    registry: &PredicateRegistry,
) -> Result<Formula, LogicError> {
    let toks = Lexer::tokens(text)?;
    let end = text.len();
    let mut p = Parser {
        toks,
        idx: 0,
        end,
        alphabet,
        registry,
    };
    let f = p.formula()?;
    if p.idx < p.toks.len() {
        return Err(LogicError::Syntax {
            position: p.toks[p.idx].1,
            message: "unexpected trailing input".into(),
        });
    }
    Ok(f)
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|(t, _)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.idx).map(|(_, p)| *p).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.idx).map(|(t, _)| t.clone());
        if t.is_some() {
            self.idx += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), LogicError> {
        if self.peek() == Some(&tok) {
            self.idx += 1;
            Ok(())
        } else {
            Err(LogicError::Syntax {
                position: self.pos(),
                message: format!("expected {what}"),
            })
        }
    }

    fn err(&self, message: impl Into<String>) -> LogicError {
        LogicError::Syntax {
            position: self.pos(),
            message: message.into(),
        }
    }

    fn formula(&mut self) -> Result<Formula, LogicError> {
        let lhs = self.or_expr()?;
        match self.peek() {
            Some(Tok::Ident(name)) if name == "S" => {
                self.idx += 1;
                let rhs = self.formula()?;
                Ok(Formula::since(lhs, rhs))
            }
            Some(Tok::Ident(name)) if name == "U" => {
                self.idx += 1;
                let rhs = self.formula()?;
                Ok(Formula::until(lhs, rhs))
            }
            _ => Ok(lhs),
        }
    }

    fn or_expr(&mut self) -> Result<Formula, LogicError> {
        let mut f = self.and_expr()?;
        while self.peek() == Some(&Tok::Pipe) {
            self.idx += 1;
            f = Formula::or(f, self.and_expr()?);
        }
        Ok(f)
    }

    fn and_expr(&mut self) -> Result<Formula, LogicError> {
        let mut f = self.unary()?;
        while self.peek() == Some(&Tok::Amp) {
            self.idx += 1;
            f = Formula::and(f, self.unary()?);
        }
        Ok(f)
    }

    fn unary(&mut self) -> Result<Formula, LogicError> {
        match self.peek() {
            Some(Tok::Bang) => {
                self.idx += 1;
                Ok(Formula::not(self.unary()?))
            }
            Some(Tok::Ident(name)) if name == "X" => {
                self.idx += 1;
                Ok(Formula::next(self.unary()?))
            }
            Some(Tok::Ident(name)) if name == "Y" => {
                self.idx += 1;
                Ok(Formula::prev(self.unary()?))
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Formula, LogicError> {
        match self.peek().cloned() {
            Some(Tok::Ident(name)) => {
                self.idx += 1;
                self.ident_primary(name)
            }
            Some(Tok::CountLeft) | Some(Tok::CountRight) | Some(Tok::Int(_)) => {
                self.comparison()
            }
            Some(Tok::LParen) => {
                // Could open a parenthesized formula or the left term of a
                // comparison; try the comparison reading first and rewind on
                // failure.
                let save = self.idx;
                if let Ok(f) = self.comparison() {
                    return Ok(f);
                }
                self.idx = save;
                self.expect(Tok::LParen, "'('")?;
                let f = self.formula()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(f)
            }
            _ => Err(self.err("expected a formula")),
        }
    }

    fn ident_primary(&mut self, name: String) -> Result<Formula, LogicError> {
        if name.len() == 2 && name.starts_with('Q') {
            let sym = name.chars().nth(1).unwrap();
            if !self.alphabet.contains(&sym) {
                return Err(LogicError::UnknownSymbol(sym));
            }
            return Ok(Formula::Atom(sym));
        }
        if matches!(name.as_str(), "S" | "U" | "X" | "Y") {
            return Err(self.err(format!("operator '{name}' cannot start a formula")));
        }
        if !self.registry.contains(&name) {
            return Err(LogicError::UnknownPredicate(name));
        }
        if self.peek() == Some(&Tok::LParen) {
            self.idx += 1;
            let t = self.term()?;
            self.expect(Tok::RParen, "')'")?;
            if !matches!(t, CountTerm::Left(_) | CountTerm::Right(_)) {
                return Err(LogicError::PredicateOnCompoundTerm);
            }
            return Ok(Formula::PredCount(name, t));
        }
        Ok(Formula::Pred(name))
    }

    fn comparison(&mut self) -> Result<Formula, LogicError> {
        let t1 = self.term()?;
        let op = self.bump().ok_or_else(|| self.err("expected a comparison operator"))?;
        let t2 = self.term()?;
        match op {
            Tok::Le => Ok(Formula::Le(t1, t2)),
            Tok::Ge => Ok(Formula::Le(t2, t1)),
            Tok::Eq => Ok(Formula::and(
                Formula::Le(t1.clone(), t2.clone()),
                Formula::Le(t2, t1),
            )),
            _ => Err(self.err("expected '<=', '=' or '>='")),
        }
    }

    fn term(&mut self) -> Result<CountTerm, LogicError> {
        let mut t = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.idx += 1;
                    t = CountTerm::Add(Box::new(t), Box::new(self.factor()?));
                }
                Some(Tok::Minus) => {
                    self.idx += 1;
                    t = CountTerm::Sub(Box::new(t), Box::new(self.factor()?));
                }
                _ => return Ok(t),
            }
        }
    }

    fn factor(&mut self) -> Result<CountTerm, LogicError> {
        let start_idx = self.idx;
        match self.bump() {
            Some(Tok::CountLeft) => {
                self.expect(Tok::LBracket, "'['")?;
                let f = self.formula()?;
                self.expect(Tok::RBracket, "']'")?;
                Ok(CountTerm::Left(Box::new(f)))
            }
            Some(Tok::CountRight) => {
                self.expect(Tok::LBracket, "'['")?;
                let f = self.formula()?;
                self.expect(Tok::RBracket, "']'")?;
                Ok(CountTerm::Right(Box::new(f)))
            }
            Some(Tok::Int(k)) => {
                if k == 0 {
                    return Ok(CountTerm::Sub(Box::new(CountTerm::One), Box::new(CountTerm::One)));
                }
                let mut t = CountTerm::One;
                for _ in 1..k {
                    t = CountTerm::Add(Box::new(t), Box::new(CountTerm::One));
                }
                Ok(t)
            }
            Some(Tok::LParen) => {
                let t = self.term()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(t)
            }
            _ => {
                self.idx = start_idx;
                Err(self.err("expected a count term"))
            }
        }
    }
}
