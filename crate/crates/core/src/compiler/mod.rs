//! Translates formulas into concrete transformer specs.
//!
//! The compilation is a structural induction: every subformula gets a
//! dedicated activation coordinate that holds an exact 0/1 after the layer
//! that defines it. Atoms come from the word embedding, Boolean connectives
//! from feed-forward units, positional operators from tie-broken near-hard
//! attention, and counting comparisons from a three-stage pipeline (masked
//! uniform averaging, approximate table lookup, linear threshold). Every
//! approximate retrieval is rounded back to an exact Boolean before anything
//! consumes it.
//!
//! Two scaling regimes produce the sharp attention needed: `TempScaling`
//! divides scores by a temperature that shrinks with the input (or query
//! position), while `UnboundedPe` keeps temperature 1 and instead scales
//! scores through position features that grow with the input. Both yield the
//! same post-rounding Boolean streams.
//!
//! Compiled specs run with the explicit passthrough flag set: each sublayer
//! adds its contribution to the running state. The attention sublayer of
//! this architecture otherwise replaces state wholesale (its output is a
//! convex combination of value vectors), so a retrieval layer writing the
//! whole vector would destroy the position-local coordinates later layers
//! still need; the passthrough keeps them intact and lets value maps stay
//! sparse.

pub mod gadgets;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{
    classify_fragment, eval_formula, normalize_comparison, CountDirection, CountTerm, Formula,
    FragmentInfo, LogicError, PredicateRegistry,
};
use crate::transformer::{
    AttentionSpec, FFNSpec, Layer, Mask, Matrix, PEFeature, TemperatureFn, TransformerError,
    TransformerSpec, WeightingFn,
};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error("future-only masking requires a past-looking formula; {formula} sits in {fragment}")]
    NotFutureCompilable { formula: String, fragment: String },
    #[error(
        "counting retrieval cannot be expressed with unbounded positional scaling under \
         future-only masking"
    )]
    UnsupportedMode,
    #[error("predicate '{0}' is not registered")]
    UnknownPredicate(String),
    #[error("formula atom '{0}' is not in the declared alphabet")]
    AtomOutsideAlphabet(char),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// Temperature shrinks with the input; position features stay bounded.
    TempScaling,
    /// Temperature 1; scores grow through unbounded position features.
    UnboundedPe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingPolicy {
    Any,
    FutureOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompileMode {
    pub scaling: ScalingMode,
    pub masking: MaskingPolicy,
    /// Tie-breaking strength; each retrieval loses at most `4 e^{-gamma}` of
    /// attention mass to non-target positions, which must stay under 1/4.
    pub gamma: f64,
}

impl CompileMode {
    pub fn new(scaling: ScalingMode, masking: MaskingPolicy) -> Self {
        CompileMode {
            scaling,
            masking,
            gamma: 3.0,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}",
            match self.scaling {
                ScalingMode::TempScaling => "temp",
                ScalingMode::UnboundedPe => "unbounded-pe",
            },
            match self.masking {
                MaskingPolicy::Any => "any-mask",
                MaskingPolicy::FutureOnly => "future-only",
            }
        )
    }
}

/// Where a raw (pre-rounding) value lives and how far it may sit from the
/// value an exact hard-attention run produces.
#[derive(Debug, Clone, Serialize)]
pub struct AuditPoint {
    pub label: String,
    pub kind: String,
    pub coord: usize,
    pub budget: f64,
}

/// Result of compiling one formula.
#[derive(Debug, Clone)]
pub struct CompiledFormula {
    pub formula: Formula,
    pub spec: TransformerSpec,
    /// Subformula -> coordinate holding its exact 0/1 stream (includes the
    /// auxiliary connective nodes the construction introduces).
    pub coordinate_map: BTreeMap<Formula, usize>,
    pub mode: CompileMode,
    pub temperature: TemperatureFn,
    pub pe_features: Vec<PEFeature>,
    pub audit_points: Vec<AuditPoint>,
    pub trace: Vec<String>,
    pub construction: String,
}

impl CompiledFormula {
    pub fn accepts(
        &self,
        w: &str,
        registry: &PredicateRegistry,
    ) -> Result<bool, TransformerError> {
        self.spec.accepts(w, registry)
    }

    /// Post-rounding Boolean stream of the root formula at every position.
    pub fn readout_bits(
        &self,
        w: &str,
        registry: &PredicateRegistry,
    ) -> Result<Vec<bool>, TransformerError> {
        let h = self.spec.forward(w, registry)?;
        (0..h.rows())
            .map(|i| {
                let v = h.get(i, self.spec.readout);
                if v >= 0.75 {
                    Ok(true)
                } else if v <= 0.25 {
                    Ok(false)
                } else {
                    Err(TransformerError::AmbiguousReadout(v))
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Resource planning: which temperature, position features and helper routes
// a compilation may use, determined by the formula's operator set and mode.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ResourcePlan {
    construction: String,
    tau: TemperatureFn,
    pe: BTreeSet<PEFeature>,
    tie_query: QueryScale,
    /// Counting key rows use length-scaled position features.
    counting_keys_scaled: bool,
    /// Reciprocal positions must be produced by marker averaging rather than
    /// read from a position feature.
    recip_via_gadget: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QueryScale {
    One,
    Len,
    PosSq,
}

#[derive(Debug, Default, Clone, Copy)]
struct OperatorNeeds {
    shift: bool,
    since_until: bool,
    counting: bool,
    count_right: bool,
}

fn operator_needs(f: &Formula) -> OperatorNeeds {
    let mut n = OperatorNeeds::default();
    fn walk(f: &Formula, n: &mut OperatorNeeds) {
        match f {
            Formula::Atom(_) => {}
            Formula::Not(a) | Formula::Prev(a) | Formula::Next(a) => {
                if matches!(f, Formula::Prev(_) | Formula::Next(_)) {
                    n.shift = true;
                }
                walk(a, n);
            }
            Formula::And(a, b) | Formula::Or(a, b) => {
                walk(a, n);
                walk(b, n);
            }
            Formula::Since(a, b) | Formula::Until(a, b) => {
                n.since_until = true;
                walk(a, n);
                walk(b, n);
            }
            Formula::Pred(_) => n.counting = true,
            Formula::PredCount(_, t) => {
                n.counting = true;
                walk_term(t, n);
            }
            Formula::Le(a, b) => {
                n.counting = true;
                walk_term(a, n);
                walk_term(b, n);
            }
        }
    }
    fn walk_term(t: &CountTerm, n: &mut OperatorNeeds) {
        match t {
            CountTerm::Left(f) => walk(f, n),
            CountTerm::Right(f) => {
                n.count_right = true;
                walk(f, n);
            }
            CountTerm::Add(a, b) | CountTerm::Sub(a, b) => {
                walk_term(a, n);
                walk_term(b, n);
            }
            CountTerm::One => {}
        }
    }
    walk(f, &mut n);
    n
}

fn resource_plan(
    f: &Formula,
    info: FragmentInfo,
    mode: CompileMode,
    pred_names: &[String],
) -> Result<ResourcePlan, CompileError> {
    let needs = operator_needs(f);
    let pe_mode = mode.scaling == ScalingMode::UnboundedPe;
    let mut pe: BTreeSet<PEFeature> = BTreeSet::new();
    for name in pred_names {
        pe.insert(PEFeature::PredBit { name: name.clone() });
    }

    match mode.masking {
        MaskingPolicy::Any => {
            if needs.shift {
                pe.insert(PEFeature::AltSign);
            }
            if needs.shift || needs.since_until {
                pe.insert(PEFeature::PosOverLen);
                if pe_mode {
                    pe.insert(PEFeature::Len);
                }
            }
            let mut recip_via_gadget = false;
            if needs.counting {
                pe.insert(PEFeature::Pos);
                if pe_mode {
                    pe.insert(PEFeature::PosLen);
                    pe.insert(PEFeature::PosSqLen);
                } else {
                    pe.insert(PEFeature::PosSq);
                }
                if needs.shift || needs.since_until {
                    // the combined construction regenerates 1/i and
                    // 1/(n-i+1) from markers instead of reading them as
                    // position features
                    recip_via_gadget = true;
                    pe.insert(PEFeature::AltSign);
                } else {
                    pe.insert(PEFeature::RecipPos);
                    if needs.count_right {
                        pe.insert(PEFeature::RecipRevPos);
                    }
                }
            }
            let construction = match (needs.counting, needs.shift, needs.since_until) {
                (false, _, false) => "prev-next",
                (false, false, true) => "since-until",
                (false, true, true) => "ltl",
                (true, false, false) => "counting",
                (true, _, _) => "ltl-counting",
            };
            Ok(ResourcePlan {
                construction: construction.to_string(),
                tau: if pe_mode {
                    TemperatureFn::Constant { tau: 1.0 }
                } else {
                    TemperatureFn::OfLength {
                        scale: 1.0,
                        power: 1,
                    }
                },
                pe,
                tie_query: if pe_mode {
                    QueryScale::Len
                } else {
                    QueryScale::One
                },
                counting_keys_scaled: pe_mode,
                recip_via_gadget,
            })
        }
        MaskingPolicy::FutureOnly => {
            if !info.future_compilable {
                return Err(CompileError::NotFutureCompilable {
                    formula: f.to_string(),
                    fragment: info.fragment.to_string(),
                });
            }
            if needs.counting && pe_mode {
                return Err(CompileError::UnsupportedMode);
            }
            let pure_counting = needs.counting && !needs.shift && !needs.since_until;
            let mut recip_via_gadget = false;
            if needs.shift || (needs.since_until && needs.counting) {
                pe.insert(PEFeature::AltSign);
                recip_via_gadget = true;
            } else if needs.since_until {
                pe.insert(PEFeature::RecipPos);
            }
            if needs.counting {
                pe.insert(PEFeature::Pos);
                pe.insert(PEFeature::PosSq);
                if pure_counting {
                    pe.insert(PEFeature::RecipPos);
                } else {
                    pe.insert(PEFeature::AltSign);
                    recip_via_gadget = true;
                }
            }
            if pe_mode {
                pe.insert(PEFeature::PosSq);
            }
            let construction = if pure_counting {
                "future-counting"
            } else if needs.counting {
                "future-past-counting"
            } else if needs.shift && needs.since_until {
                "future-prev-since"
            } else if needs.shift {
                "future-prev"
            } else {
                "future-since"
            };
            Ok(ResourcePlan {
                construction: construction.to_string(),
                tau: if pe_mode {
                    TemperatureFn::Constant { tau: 1.0 }
                } else if pure_counting {
                    TemperatureFn::OfQueryPosition {
                        scale: 1.0,
                        power: 1,
                    }
                } else {
                    TemperatureFn::OfQueryPosition {
                        scale: 1.0,
                        power: 2,
                    }
                },
                pe,
                tie_query: if pe_mode {
                    QueryScale::PosSq
                } else {
                    QueryScale::One
                },
                counting_keys_scaled: false,
                recip_via_gadget,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Layer plans: sparse descriptions materialized once the width is known.
// ---------------------------------------------------------------------------

type Terms = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
struct AttnPlan {
    q_rows: Vec<Terms>,
    k_rows: Vec<Terms>,
    /// (target coordinate, source terms): sparse value rows.
    v_rows: Vec<(usize, Terms)>,
    mask: Mask,
}

#[derive(Debug, Clone, Default)]
struct FfnPlan {
    units: Vec<FfnUnit>,
}

#[derive(Debug, Clone)]
struct FfnUnit {
    terms: Terms,
    bias: f64,
    outputs: Terms,
}

#[derive(Debug, Clone)]
struct LayerPlan {
    label: String,
    attn: Option<AttnPlan>,
    ffn: FfnPlan,
}

impl FfnPlan {
    /// `target += relu(sum terms + bias) * coeff`
    fn relu(&mut self, target: usize, terms: Terms, bias: f64, coeff: f64) {
        self.units.push(FfnUnit {
            terms,
            bias,
            outputs: vec![(target, coeff)],
        });
    }

    /// `target += sum terms + bias`, exact for either sign.
    fn affine(&mut self, target: usize, terms: Terms, bias: f64) {
        let neg: Terms = terms.iter().map(|&(c, w)| (c, -w)).collect();
        self.units.push(FfnUnit {
            terms: terms.clone(),
            bias,
            outputs: vec![(target, 1.0)],
        });
        self.units.push(FfnUnit {
            terms: neg,
            bias: -bias,
            outputs: vec![(target, -1.0)],
        });
    }

    /// `target += round(source)` for an approximate Boolean source.
    fn round(&mut self, target: usize, source: usize) {
        for (bias, coeff) in gadgets::ROUNDING_UNITS {
            self.relu(target, vec![(source, 1.0)], bias, coeff);
        }
    }

    /// `target += coeff * [u1 + u2 <= 2q]`. Exact whenever the sum is known
    /// to avoid the band `(2q, 3q)`.
    fn window_indicator(&mut self, target: usize, u1: usize, u2: usize, q: f64, coeff: f64) {
        self.relu(
            target,
            vec![(u1, -1.0), (u2, -1.0)],
            3.0 * q,
            coeff / q,
        );
        self.relu(
            target,
            vec![(u1, -1.0), (u2, -1.0)],
            2.0 * q,
            -coeff / q,
        );
    }
}

// ---------------------------------------------------------------------------
// The builder.
// ---------------------------------------------------------------------------

struct Builder<'a> {
    alphabet: Vec<char>,
    mode: CompileMode,
    plan: ResourcePlan,
    coords: Vec<String>,
    atom_coords: BTreeMap<char, usize>,
    feature_coords: BTreeMap<PEFeature, usize>,
    one: usize,
    layers: Vec<LayerPlan>,
    node_coords: BTreeMap<Formula, usize>,
    marker_coords: BTreeMap<bool, usize>, // key: is_first
    recip_coords: BTreeMap<bool, usize>,  // key: is_forward
    retrieval_cache: BTreeMap<(CountDirection, Formula, i64, Option<String>), Retrieval>,
    ratio_cache: BTreeMap<(CountDirection, Formula), usize>,
    corrected_cache: BTreeMap<(CountDirection, Formula, i64), usize>,
    audits: Vec<AuditPoint>,
    trace: Vec<String>,
    _registry: &'a PredicateRegistry,
}

#[derive(Debug, Clone, Copy)]
struct Retrieval {
    r1: usize,
    pred_payload: Option<usize>,
    /// |r1 - 1| and |r2 - 1|, available one layer after the second lookup.
    u1: usize,
    u2: usize,
}

#[derive(Debug, Clone, Copy)]
struct CountLookup {
    dir: CountDirection,
    ratio: usize,
    recip: usize,
    pos: usize,
    key_pos: usize,
    key_pos_sq: usize,
    mask: Mask,
    scale: f64,
}

/// Compiles `f` over `alphabet` into a transformer whose readout coordinate
/// reproduces the evaluation of `f` at every position.
pub fn compile(
    f: &Formula,
    alphabet: &[char],
    mode: CompileMode,
    registry: &PredicateRegistry,
) -> Result<CompiledFormula, CompileError> {
    let info = classify_fragment(f);
    let pred_names = f.predicate_names();
    for name in &pred_names {
        if !registry.contains(name) {
            return Err(CompileError::UnknownPredicate(name.clone()));
        }
    }
    for sub in f.subformulas() {
        if let Formula::Atom(c) = sub {
            if !alphabet.contains(c) {
                return Err(CompileError::AtomOutsideAlphabet(*c));
            }
        }
    }
    let plan = resource_plan(f, info, mode, &pred_names)?;

    let mut ordered_alphabet: Vec<char> = alphabet.to_vec();
    ordered_alphabet.sort_unstable();
    ordered_alphabet.dedup();

    let mut b = Builder {
        alphabet: ordered_alphabet,
        mode,
        plan: plan.clone(),
        coords: Vec::new(),
        atom_coords: BTreeMap::new(),
        feature_coords: BTreeMap::new(),
        one: 0,
        layers: Vec::new(),
        node_coords: BTreeMap::new(),
        marker_coords: BTreeMap::new(),
        recip_coords: BTreeMap::new(),
        retrieval_cache: BTreeMap::new(),
        ratio_cache: BTreeMap::new(),
        corrected_cache: BTreeMap::new(),
        audits: Vec::new(),
        trace: Vec::new(),
        _registry: registry,
    };

    b.one = b.alloc("one");
    for c in b.alphabet.clone() {
        let coord = b.alloc(&format!("atom:{c}"));
        b.atom_coords.insert(c, coord);
    }
    for feature in plan.pe.iter() {
        let coord = b.alloc(&format!("pe:{feature:?}"));
        b.feature_coords.insert(feature.clone(), coord);
    }
    b.trace.push(format!(
        "construction {} ({}), temperature {:?}, features {:?}",
        plan.construction,
        mode.label(),
        plan.tau,
        plan.pe
    ));

    let root = b.compile_node(f)?;
    let spec = b.materialize(root)?;
    spec.validate()?;

    Ok(CompiledFormula {
        formula: f.clone(),
        spec,
        coordinate_map: b.node_coords,
        mode,
        temperature: plan.tau.clone(),
        pe_features: plan.pe.iter().cloned().collect(),
        audit_points: b.audits,
        trace: b.trace,
        construction: plan.construction,
    })
}

impl<'a> Builder<'a> {
    fn alloc(&mut self, label: &str) -> usize {
        self.coords.push(label.to_string());
        self.coords.len() - 1
    }

    fn feature(&self, f: &PEFeature) -> usize {
        *self
            .feature_coords
            .get(f)
            .unwrap_or_else(|| panic!("feature {f:?} not provisioned by the resource plan"))
    }

    fn ffn_layer(&mut self, label: &str) -> usize {
        self.layers.push(LayerPlan {
            label: label.to_string(),
            attn: None,
            ffn: FfnPlan::default(),
        });
        self.layers.len() - 1
    }

    fn attn_layer(&mut self, label: &str, attn: AttnPlan) -> usize {
        self.layers.push(LayerPlan {
            label: label.to_string(),
            attn: Some(attn),
            ffn: FfnPlan::default(),
        });
        self.layers.len() - 1
    }

    fn audit(&mut self, label: String, kind: &str, coord: usize, budget: f64) {
        self.audits.push(AuditPoint {
            label,
            kind: kind.to_string(),
            coord,
            budget,
        });
    }

    /// Query terms of a tie-break retrieval: 1, n or i^2 times `coeff`.
    fn tie_query_terms(&self, coeff: f64) -> Terms {
        match self.plan.tie_query {
            QueryScale::One => vec![(self.one, coeff)],
            QueryScale::Len => vec![(self.feature(&PEFeature::Len), coeff)],
            QueryScale::PosSq => vec![(self.feature(&PEFeature::PosSq), coeff)],
        }
    }

    /// Key terms realizing, after the mode's score scaling, either
    /// `2*gamma*n*(s_j +- j/(2n))` (bounded tie-break, sign picks the
    /// rightmost or leftmost maximum) or `gamma*i^2*(s_j - 1/j)` (the
    /// future-only reciprocal tie-break).
    fn tie_key_terms(&self, s_terms: &[(usize, f64)], rightmost: bool) -> Terms {
        let g = self.mode.gamma;
        let mut terms: Terms = Vec::new();
        if self.mode.masking == MaskingPolicy::FutureOnly {
            let recip = self.recip_coords[&true];
            for &(c, w) in s_terms {
                terms.push((c, g * w));
            }
            terms.push((recip, -g));
        } else {
            let pol = self.feature(&PEFeature::PosOverLen);
            for &(c, w) in s_terms {
                terms.push((c, 2.0 * g * w));
            }
            terms.push((pol, if rightmost { g } else { -g }));
        }
        terms
    }

    fn weighting(&self) -> WeightingFn {
        WeightingFn::SoftmaxTau {
            tau: self.plan.tau.clone(),
        }
    }

    // -- markers and reciprocals ---------------------------------------------

    fn ensure_marker(&mut self, first: bool) -> usize {
        if let Some(&c) = self.marker_coords.get(&first) {
            return c;
        }
        let which = if first { "first" } else { "last" };
        let recip_feature = if first {
            PEFeature::RecipPos
        } else {
            PEFeature::RecipRevPos
        };
        let coord = if let Some(&rc) = self.feature_coords.get(&recip_feature) {
            // 1/i equals 1 exactly at the marked end and is at most 1/2
            // elsewhere; a clipped ramp extracts the bit.
            let marker = self.alloc(&format!("marker:{which}"));
            let l = self.ffn_layer(&format!("mark {which} position (reciprocal threshold)"));
            let ffn = &mut self.layers[l].ffn;
            ffn.relu(marker, vec![(rc, 1.0)], -0.5, 2.0);
            ffn.relu(marker, vec![(rc, 1.0)], -1.0, -2.0);
            marker
        } else {
            // Uniform masked attention over alternating signs: magnitude 1
            // at the marked end, at most 1/3 elsewhere.
            let alt = self.feature(&PEFeature::AltSign);
            let raw = self.alloc(&format!("raw:marker:{which}"));
            let marker = self.alloc(&format!("marker:{which}"));
            let kind = if first {
                gadgets::MarkerKind::First
            } else {
                gadgets::MarkerKind::Last
            };
            let attn = AttnPlan {
                q_rows: vec![vec![]],
                k_rows: vec![vec![]],
                v_rows: vec![(raw, vec![(alt, -1.0)])],
                mask: if first { Mask::Future } else { Mask::Past },
            };
            let l = self.attn_layer(
                &format!("mark {which} position (uniform alternating-sign average)"),
                attn,
            );
            let ffn = &mut self.layers[l].ffn;
            for (scale, bias, coeff) in gadgets::marker_threshold_units(kind) {
                ffn.relu(marker, vec![(raw, scale)], bias, coeff);
            }
            marker
        };
        self.trace
            .push(format!("coord {coord} <- {which}-position marker"));
        self.marker_coords.insert(first, coord);
        coord
    }

    fn ensure_recip(&mut self, forward: bool) -> usize {
        if let Some(&c) = self.recip_coords.get(&forward) {
            return c;
        }
        let feature = if forward {
            PEFeature::RecipPos
        } else {
            PEFeature::RecipRevPos
        };
        let coord = if !self.plan.recip_via_gadget && self.feature_coords.contains_key(&feature) {
            self.feature(&feature)
        } else {
            let marker = self.ensure_marker(forward);
            let out = self.alloc(if forward { "recip:fwd" } else { "recip:bwd" });
            let attn = AttnPlan {
                q_rows: vec![vec![]],
                k_rows: vec![vec![]],
                v_rows: vec![(out, vec![(marker, 1.0)])],
                mask: if forward { Mask::Future } else { Mask::Past },
            };
            self.attn_layer(
                &format!(
                    "reciprocal position ({}) by uniform marker averaging",
                    if forward { "1/i" } else { "1/(n-i+1)" }
                ),
                attn,
            );
            out
        };
        self.recip_coords.insert(forward, coord);
        coord
    }

    // -- structural induction --------------------------------------------------

    fn compile_node(&mut self, f: &Formula) -> Result<usize, CompileError> {
        if let Some(&c) = self.node_coords.get(f) {
            return Ok(c);
        }
        let coord = match f {
            Formula::Atom(c) => self.atom_coords[c],
            Formula::Pred(name) => self.feature(&PEFeature::PredBit { name: name.clone() }),
            Formula::Not(a) => {
                let ca = self.compile_node(a)?;
                let out = self.alloc(&format!("node:{f}"));
                let l = self.ffn_layer(&format!("negation -> coord {out}"));
                self.layers[l].ffn.affine(out, vec![(ca, -1.0)], 1.0);
                out
            }
            Formula::And(a, b) => {
                let ca = self.compile_node(a)?;
                let cb = self.compile_node(b)?;
                let out = self.alloc(&format!("node:{f}"));
                let l = self.ffn_layer(&format!("conjunction -> coord {out}"));
                self.layers[l]
                    .ffn
                    .relu(out, vec![(ca, 1.0), (cb, 1.0)], -1.0, 1.0);
                out
            }
            Formula::Or(a, b) => {
                let ca = self.compile_node(a)?;
                let cb = self.compile_node(b)?;
                let out = self.alloc(&format!("node:{f}"));
                let l = self.ffn_layer(&format!("disjunction -> coord {out}"));
                let ffn = &mut self.layers[l].ffn;
                ffn.relu(out, vec![(ca, 1.0), (cb, 1.0)], 0.0, 1.0);
                ffn.relu(out, vec![(ca, 1.0), (cb, 1.0)], -1.0, -1.0);
                out
            }
            Formula::Prev(a) => self.emit_shift(f, a, true)?,
            Formula::Next(a) => self.emit_shift(f, a, false)?,
            Formula::Since(a, b) => self.emit_since_until(f, a, b, true)?,
            Formula::Until(a, b) => self.emit_since_until(f, a, b, false)?,
            Formula::Le(t1, t2) => self.emit_comparison(f, t1, t2)?,
            Formula::PredCount(name, t) => self.emit_pred_count(f, name, t)?,
        };
        self.node_coords.insert(f.clone(), coord);
        Ok(coord)
    }

    /// Previous/next value of a subformula via two tie-broken retrievals
    /// (rightmost even and rightmost odd position up to `i`, mirrored for
    /// next), selected by the parity of the querying position and forced to
    /// 0 at the boundary.
    fn emit_shift(&mut self, f: &Formula, a: &Formula, prev: bool) -> Result<usize, CompileError> {
        let ca = self.compile_node(a)?;
        if self.mode.masking == MaskingPolicy::FutureOnly {
            self.ensure_recip(true);
        }
        let alt = self.feature(&PEFeature::AltSign);
        let marker = self.ensure_marker(prev);
        let even_bit = self.emit_parity_retrieval(f, ca, true, prev);
        let odd_bit = self.emit_parity_retrieval(f, ca, false, prev);

        let out = self.alloc(&format!("node:{f}"));
        let l = self.ffn_layer(&format!(
            "parity select + boundary fix for {f} -> coord {out}"
        ));
        let ffn = &mut self.layers[l].ffn;
        // odd query positions read the even retrieval and vice versa; the
        // boundary marker zeroes the position with no neighbour.
        ffn.relu(
            out,
            vec![(alt, -0.5), (even_bit, 1.0), (marker, -1.0)],
            -0.5,
            1.0,
        );
        ffn.relu(
            out,
            vec![(alt, 0.5), (odd_bit, 1.0), (marker, -1.0)],
            -0.5,
            1.0,
        );
        Ok(out)
    }

    /// One tie-broken retrieval targeting the rightmost (or leftmost) even
    /// or odd position, rounded to an exact bit.
    fn emit_parity_retrieval(&mut self, f: &Formula, ca: usize, even: bool, prev: bool) -> usize {
        let alt = self.feature(&PEFeature::AltSign);
        // base scores (+-1/2)(-1)^j: even targets for the positive sign
        let sign = if even { 0.5 } else { -0.5 };
        let parity = if even { "even" } else { "odd" };
        let k_terms = self.tie_key_terms(&[(alt, sign)], prev);
        let raw = self.alloc(&format!("raw:{f}#{parity}"));
        let rounded = self.alloc(&format!("bit:{f}#{parity}"));
        let attn = AttnPlan {
            q_rows: vec![self.tie_query_terms(1.0)],
            k_rows: vec![k_terms],
            v_rows: vec![(raw, vec![(ca, 1.0)])],
            mask: if prev { Mask::Future } else { Mask::Past },
        };
        let l = self.attn_layer(
            &format!(
                "{} {parity} position retrieval for {f}",
                if prev { "rightmost" } else { "leftmost" }
            ),
            attn,
        );
        self.layers[l].ffn.round(rounded, raw);
        self.audit(
            format!("{f}#{parity}"),
            "shift-retrieval",
            raw,
            4.0 * (-self.mode.gamma).exp(),
        );
        rounded
    }

    /// `a S b` retrieves the value of `a & b` at the rightmost position
    /// `j <= i` maximizing `!a | b`; `a U b` mirrors it to the left.
    fn emit_since_until(
        &mut self,
        f: &Formula,
        a: &Formula,
        b: &Formula,
        since: bool,
    ) -> Result<usize, CompileError> {
        let guard = Formula::or(Formula::not(a.clone()), b.clone());
        let payload = Formula::and(a.clone(), b.clone());
        let c_guard = self.compile_node(&guard)?;
        let c_payload = self.compile_node(&payload)?;
        if self.mode.masking == MaskingPolicy::FutureOnly {
            self.ensure_recip(true);
        }
        let k_terms = self.tie_key_terms(&[(c_guard, 1.0)], since);
        let raw = self.alloc(&format!("raw:{f}"));
        let out = self.alloc(&format!("node:{f}"));
        let attn = AttnPlan {
            q_rows: vec![self.tie_query_terms(1.0)],
            k_rows: vec![k_terms],
            v_rows: vec![(raw, vec![(c_payload, 1.0)])],
            mask: if since { Mask::Future } else { Mask::Past },
        };
        let l = self.attn_layer(
            &format!(
                "{} retrieval of ({payload}) at extremal ({guard}) for {f}",
                if since { "rightmost" } else { "leftmost" }
            ),
            attn,
        );
        self.layers[l].ffn.round(out, raw);
        self.audit(
            f.to_string(),
            "since-until-retrieval",
            raw,
            4.0 * (-self.mode.gamma).exp(),
        );
        Ok(out)
    }

    // -- counting ----------------------------------------------------------------

    /// Exact `count/window` ratio by uniform masked attention.
    fn ensure_ratio(&mut self, dir: CountDirection, phi: &Formula) -> Result<usize, CompileError> {
        if let Some(&c) = self.ratio_cache.get(&(dir, phi.clone())) {
            return Ok(c);
        }
        let c_phi = self.compile_node(phi)?;
        let out = self.alloc(&format!("ratio:{dir:?}:{phi}"));
        let attn = AttnPlan {
            q_rows: vec![vec![]],
            k_rows: vec![vec![]],
            v_rows: vec![(out, vec![(c_phi, 1.0)])],
            mask: match dir {
                CountDirection::Left => Mask::Future,
                CountDirection::Right => Mask::Past,
            },
        };
        self.attn_layer(
            &format!("uniform {dir:?} average of ({phi}) -> coord {out}"),
            attn,
        );
        self.ratio_cache.insert((dir, phi.clone()), out);
        Ok(out)
    }

    /// The two approximate count lookups (targets `m` and `m+1`) plus the
    /// window distances `|r - 1|` feeding the zero-count test. Optionally
    /// also carries the predicate bit at the target position.
    fn ensure_retrieval(
        &mut self,
        dir: CountDirection,
        phi: &Formula,
        c_scale: i64,
        payload_pred: Option<&str>,
    ) -> Result<Retrieval, CompileError> {
        let key = (
            dir,
            phi.clone(),
            c_scale,
            payload_pred.map(|s| s.to_string()),
        );
        if let Some(r) = self.retrieval_cache.get(&key) {
            return Ok(*r);
        }
        let ratio = self.ensure_ratio(dir, phi)?;
        let recip = self.ensure_recip(dir == CountDirection::Left)?;
        let pos = self.feature(&PEFeature::Pos);
        let (key_pos, key_pos_sq) = if self.plan.counting_keys_scaled {
            (
                self.feature(&PEFeature::PosLen),
                self.feature(&PEFeature::PosSqLen),
            )
        } else {
            (pos, self.feature(&PEFeature::PosSq))
        };
        let mask = match dir {
            CountDirection::Left => Mask::Future,
            CountDirection::Right => Mask::None,
        };
        let scale = 3.0 * c_scale as f64;
        let lookup = CountLookup {
            dir,
            ratio,
            recip,
            pos,
            key_pos,
            key_pos_sq,
            mask,
            scale,
        };
        let (r1, rp1) = self.emit_count_lookup(&lookup, phi, 0.0, "1", payload_pred);
        let (r2, _) = self.emit_count_lookup(&lookup, phi, 1.0, "2", payload_pred);

        // window distances, computed in the feed-forward block of the second
        // lookup layer where both results are visible
        let u1 = self.alloc(&format!("u1:{dir:?}:{phi}"));
        let u2 = self.alloc(&format!("u2:{dir:?}:{phi}"));
        let last = self.layers.len() - 1;
        let ffn = &mut self.layers[last].ffn;
        for (u, r) in [(u1, r1), (u2, r2)] {
            ffn.relu(u, vec![(r, 1.0)], -1.0, 1.0);
            ffn.relu(u, vec![(r, -1.0)], 1.0, 1.0);
        }
        let out = Retrieval {
            r1,
            pred_payload: rp1,
            u1,
            u2,
        };
        self.retrieval_cache.insert(key, out);
        self.audit(
            format!("count {dir:?} ({phi}) x{c_scale}"),
            "count-retrieval",
            r1,
            1.0 / (4.0 * c_scale as f64),
        );
        Ok(out)
    }

    /// One approximate count lookup: queries `3C [ratio + offset/i, 1/i]`
    /// against keys `[2j, -j^2]` (length-scaled in the unbounded-feature
    /// mode), reading the position as the value.
    fn emit_count_lookup(
        &mut self,
        lk: &CountLookup,
        phi: &Formula,
        offset: f64,
        tag: &str,
        payload_pred: Option<&str>,
    ) -> (usize, Option<usize>) {
        let dir = lk.dir;
        let r = self.alloc(&format!("r{tag}:{dir:?}:{phi}"));
        let mut v_rows = vec![(r, vec![(lk.pos, 1.0)])];
        let rp = payload_pred.map(|name| {
            let coord = self.alloc(&format!("rpred{tag}:{name}:{dir:?}:{phi}"));
            let pred = self.feature(&PEFeature::PredBit {
                name: name.to_string(),
            });
            v_rows.push((coord, vec![(pred, 1.0)]));
            coord
        });
        let mut q1 = vec![(lk.ratio, lk.scale)];
        if offset != 0.0 {
            q1.push((lk.recip, lk.scale * offset));
        }
        let attn = AttnPlan {
            q_rows: vec![q1, vec![(lk.recip, lk.scale)]],
            k_rows: vec![vec![(lk.key_pos, 2.0)], vec![(lk.key_pos_sq, -1.0)]],
            v_rows,
            mask: lk.mask,
        };
        self.attn_layer(
            &format!("count lookup ({dir:?} count of ({phi}) + {offset}) -> coord {r}"),
            attn,
        );
        (r, rp)
    }

    /// Boolean patch terms for the degenerate windows where both lookups are
    /// forced onto position 1: `first & phi` for prefix counts, and
    /// `first & last & phi` (length-1 inputs) for suffix counts.
    fn count_patch(&mut self, dir: CountDirection, c_phi: usize) -> Terms {
        let first = self.ensure_marker(true);
        match dir {
            CountDirection::Left => vec![(first, 1.0), (c_phi, 1.0)],
            CountDirection::Right => {
                let last = self.ensure_marker(false);
                vec![(first, 1.0), (last, 1.0), (c_phi, 1.0)]
            }
        }
    }

    /// Corrected approximate count, within `1/(4C)` of the true value: the
    /// raw lookup minus the zero-count indicator, plus the boundary patch.
    fn ensure_corrected_count(
        &mut self,
        dir: CountDirection,
        phi: &Formula,
        c_scale: i64,
    ) -> Result<usize, CompileError> {
        if let Some(&c) = self.corrected_cache.get(&(dir, phi.clone(), c_scale)) {
            return Ok(c);
        }
        let ret = self.ensure_retrieval(dir, phi, c_scale, None)?;
        let c_phi = self.compile_node(phi)?;
        let patch = self.count_patch(dir, c_phi);
        let q = 1.0 / (4.0 * c_scale as f64);

        let out = self.alloc(&format!("count:{dir:?}:{phi}x{c_scale}"));
        let l = self.ffn_layer(&format!(
            "corrected count of ({phi}) [{dir:?}] -> coord {out}"
        ));
        let ffn = &mut self.layers[l].ffn;
        ffn.relu(out, vec![(ret.r1, 1.0)], 0.0, 1.0); // lookups are >= 0
        ffn.window_indicator(out, ret.u1, ret.u2, q, -1.0);
        let bias = patch_bias(&patch);
        ffn.relu(out, patch, bias, 1.0);
        self.corrected_cache
            .insert((dir, phi.clone(), c_scale), out);
        Ok(out)
    }

    /// Linear comparison over corrected counts, thresholded with the 1/4
    /// margin the per-term errors leave intact.
    fn emit_comparison(
        &mut self,
        f: &Formula,
        t1: &CountTerm,
        t2: &CountTerm,
    ) -> Result<usize, CompileError> {
        let nc = normalize_comparison(t1, t2);
        if let Some(value) = nc.constant_value() {
            let out = self.alloc(&format!("node:{f}"));
            let l = self.ffn_layer(&format!("constant comparison -> coord {out}"));
            self.layers[l]
                .ffn
                .affine(out, vec![], if value { 1.0 } else { 0.0 });
            self.trace.push(format!("comparison {f} is constant {value}"));
            return Ok(out);
        }
        let c_total = nc.coeff_magnitude;
        let mut sum_terms: Terms = Vec::new();
        for term in &nc.terms {
            let coord = self.ensure_corrected_count(term.direction, &term.formula, c_total)?;
            sum_terms.push((coord, term.coeff as f64));
        }
        // margin = sum - threshold + 1: lands in [3/4, inf) when true and
        // (-inf, 1/4] when false
        let margin = self.alloc(&format!("margin:{f}"));
        let l = self.ffn_layer(&format!("comparison margin for {f} -> coord {margin}"));
        self.layers[l]
            .ffn
            .affine(margin, sum_terms, 1.0 - nc.threshold as f64);
        self.audit(f.to_string(), "count-margin", margin, 0.25);

        let out = self.alloc(&format!("node:{f}"));
        let l = self.ffn_layer(&format!("threshold for {f} -> coord {out}"));
        self.layers[l].ffn.round(out, margin);
        Ok(out)
    }

    /// Predicate applied to a count: the double lookup carries the predicate
    /// bit at the target position as a second payload; a gate zeroes it when
    /// the count is 0 (predicates are false off `[1, n]`), and the boundary
    /// patch restores the honest value on degenerate windows.
    fn emit_pred_count(
        &mut self,
        f: &Formula,
        name: &str,
        t: &CountTerm,
    ) -> Result<usize, CompileError> {
        let (dir, phi) = match t {
            CountTerm::Left(p) => (CountDirection::Left, (**p).clone()),
            CountTerm::Right(p) => (CountDirection::Right, (**p).clone()),
            _ => return Err(CompileError::Logic(LogicError::PredicateOnCompoundTerm)),
        };
        let ret = self.ensure_retrieval(dir, &phi, 1, Some(name))?;
        let rp = ret.pred_payload.expect("payload requested");
        let c_phi = self.compile_node(&phi)?;
        let mut patch = self.count_patch(dir, c_phi);
        let pred_here = self.feature(&PEFeature::PredBit {
            name: name.to_string(),
        });
        patch.push((pred_here, 1.0));

        // stage 1: materialize the zero-count indicator
        let z = self.alloc(&format!("zero:{dir:?}:{phi}"));
        let l = self.ffn_layer(&format!("zero-count indicator for {f} -> coord {z}"));
        self.layers[l].ffn.window_indicator(z, ret.u1, ret.u2, 0.25, 1.0);

        // stage 2: gate the retrieved bit by the indicator and add the patch
        let raw = self.alloc(&format!("raw:{f}"));
        let l = self.ffn_layer(&format!("gated predicate-of-count for {f}"));
        let ffn = &mut self.layers[l].ffn;
        // rp * (1 - z) = relu(rp - 2z) - relu(-rp - 2z) for |rp| < 2
        ffn.relu(raw, vec![(rp, 1.0), (z, -2.0)], 0.0, 1.0);
        ffn.relu(raw, vec![(rp, -1.0), (z, -2.0)], 0.0, -1.0);
        let bias = patch_bias(&patch);
        ffn.relu(raw, patch, bias, 1.0);
        self.audit(f.to_string(), "pred-of-count", raw, 0.25);

        // stage 3: round
        let out = self.alloc(&format!("node:{f}"));
        let l = self.ffn_layer(&format!("rounding for {f} -> coord {out}"));
        self.layers[l].ffn.round(out, raw);
        Ok(out)
    }

    // -- materialization -----------------------------------------------------------

    fn materialize(&mut self, root: usize) -> Result<TransformerSpec, CompileError> {
        let d = self.coords.len();
        let weighting = self.weighting();

        let mut word_embedding = BTreeMap::new();
        for &c in &self.alphabet {
            let mut row = vec![0.0; d];
            row[self.one] = 1.0;
            row[self.atom_coords[&c]] = 1.0;
            word_embedding.insert(c, row);
        }
        let pe_features: Vec<(usize, PEFeature)> = self
            .feature_coords
            .iter()
            .map(|(f, &c)| (c, f.clone()))
            .collect();

        let plans = std::mem::take(&mut self.layers);
        let mut layers = Vec::with_capacity(plans.len());
        for (idx, plan) in plans.iter().enumerate() {
            let attention = match &plan.attn {
                Some(a) => {
                    let dk = a.q_rows.len();
                    let sqrt_dk = (dk as f64).sqrt();
                    let mut wq = Matrix::zeros(dk, d);
                    for (r, row) in a.q_rows.iter().enumerate() {
                        for &(c, w) in row {
                            // pre-multiplied by sqrt(d_k) so the score
                            // scaling cancels and scores match the
                            // construction exactly
                            wq.set(r, c, w * sqrt_dk);
                        }
                    }
                    let mut wk = Matrix::zeros(dk, d);
                    for (r, row) in a.k_rows.iter().enumerate() {
                        for &(c, w) in row {
                            wk.set(r, c, w);
                        }
                    }
                    let mut wv = Matrix::zeros(d, d);
                    for (target, terms) in &a.v_rows {
                        for &(c, w) in terms {
                            wv.set(*target, c, w);
                        }
                    }
                    AttentionSpec {
                        wq,
                        wk,
                        wv,
                        mask: a.mask,
                        weighting: weighting.clone(),
                        scale_scores: true,
                    }
                }
                None => AttentionSpec {
                    wq: Matrix::zeros(1, d),
                    wk: Matrix::zeros(1, d),
                    wv: Matrix::zeros(d, d),
                    mask: Mask::None,
                    weighting: weighting.clone(),
                    scale_scores: true,
                },
            };
            let unit_count = plan.ffn.units.len().max(1);
            let mut w1 = Matrix::zeros(unit_count, d);
            let mut b1 = vec![0.0; unit_count];
            let mut w2 = Matrix::zeros(d, unit_count);
            for (u, unit) in plan.ffn.units.iter().enumerate() {
                for &(c, w) in &unit.terms {
                    w1.set(u, c, w1.get(u, c) + w);
                }
                b1[u] = unit.bias;
                for &(c, w) in &unit.outputs {
                    w2.set(c, u, w2.get(c, u) + w);
                }
            }
            self.trace.push(format!("layer {idx}: {}", plan.label));
            layers.push(Layer {
                attention,
                ffn: FFNSpec {
                    w1,
                    b1,
                    w2,
                    b2: vec![0.0; d],
                },
            });
        }

        Ok(TransformerSpec {
            alphabet: self.alphabet.clone(),
            d,
            word_embedding,
            pe_features,
            layers,
            readout: root,
            residual: true,
        })
    }
}

/// Bias turning a conjunction of `k` Boolean terms into a single ReLU unit.
fn patch_bias(terms: &Terms) -> f64 {
    -(terms.len() as f64 - 1.0)
}

// ---------------------------------------------------------------------------
// Audit: compare every raw retrieval coordinate against the exact
// hard-attention twin of the compiled spec.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AuditEntryResult {
    pub label: String,
    pub kind: String,
    pub budget: f64,
    pub max_deviation: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub input: String,
    pub entries: Vec<AuditEntryResult>,
    pub max_deviation: f64,
    /// All deviations within their budgets and under the 1/4 contract.
    pub pass: bool,
    /// The hard twin's readout agreed with the reference evaluator.
    pub hard_matches_oracle: bool,
}

/// Replaces every weighting by exact average-hard attention. Uniform layers
/// are unchanged (equal scores stay uniform) and tie-broken retrievals
/// become exact, so the twin computes the idealized construction.
pub fn hard_twin(spec: &TransformerSpec) -> TransformerSpec {
    let mut twin = spec.clone();
    for layer in &mut twin.layers {
        layer.attention.weighting = WeightingFn::AHard;
    }
    twin
}

/// Runs `w` through the compiled spec and its hard twin, reporting the worst
/// deviation of every audited raw coordinate from its idealized value.
pub fn compiled_error_audit(
    cf: &CompiledFormula,
    w: &str,
    registry: &PredicateRegistry,
) -> Result<AuditReport, CompileError> {
    let soft = cf.spec.forward(w, registry)?;
    let twin = hard_twin(&cf.spec);
    let hard = twin.forward(w, registry)?;

    let mut entries = Vec::new();
    let mut max_dev = 0.0f64;
    for point in &cf.audit_points {
        let mut dev = 0.0f64;
        for i in 0..soft.rows() {
            dev = dev.max((soft.get(i, point.coord) - hard.get(i, point.coord)).abs());
        }
        max_dev = max_dev.max(dev);
        entries.push(AuditEntryResult {
            label: point.label.clone(),
            kind: point.kind.clone(),
            budget: point.budget,
            max_deviation: dev,
            ok: dev <= point.budget + 1e-9,
        });
    }

    let oracle = eval_formula(&cf.formula, w, registry)?;
    let hard_bits: Vec<bool> = (0..hard.rows())
        .map(|i| hard.get(i, cf.spec.readout) >= 0.5)
        .collect();
    let pass = entries.iter().all(|e| e.ok) && max_dev <= 0.25 + 1e-9;
    Ok(AuditReport {
        input: w.to_string(),
        entries,
        max_deviation: max_dev,
        pass,
        hard_matches_oracle: hard_bits == oracle,
    })
}

#[cfg(test)]
mod tests;
