//! Average-hard attention transformers whose layers are each either uniform
//! (zero query/key maps) or tieless (a unique maximum score at every
//! position), conversion to temperature-scaled softmax, and layer-by-layer
//! verification that the softmax run tracks the hard run within its error
//! budgets.
//!
//! The pipeline: [`check_uniform_tieless`] validates the structural tags,
//! [`estimate_gap`] measures the score gap over an input set, [`calibrate`]
//! derives the constants of the per-layer error bound, [`choose_temperature`]
//! solves for the temperature that keeps the final error under 1/4, and
//! [`verify_simulation`] measures actual errors against the budgets.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::PredicateRegistry;
use crate::transformer::{
    attention_scores, l1_distance, Layer, Matrix, TemperatureFn, TransformerError,
    TransformerSpec, WeightingFn,
};

#[derive(Debug, Error)]
pub enum AhatError {
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error("layer {layer} is tagged {tag:?} but {problem}")]
    BadTag {
        layer: usize,
        tag: LayerKind,
        problem: String,
    },
    #[error("kinds list has {kinds} entries for {layers} layers")]
    KindArity { kinds: usize, layers: usize },
    #[error("exhaustive enumeration of {count} inputs exceeds the cap {cap}")]
    TooManyInputs { count: u128, cap: u128 },
    #[error("gap is undefined or not positive; cannot choose a temperature")]
    NoGap,
    #[error("calibration inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Uniform,
    Tieless,
}

/// A transformer whose attention layers all use average-hard weighting, each
/// tagged uniform or tieless. Serializes as the plain spec with a `kind`
/// field inside every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AhatSpec {
    pub spec: TransformerSpec,
    pub kinds: Vec<LayerKind>,
}

impl AhatSpec {
    pub fn new(spec: TransformerSpec, kinds: Vec<LayerKind>) -> Result<Self, AhatError> {
        if kinds.len() != spec.layers.len() {
            return Err(AhatError::KindArity {
                kinds: kinds.len(),
                layers: spec.layers.len(),
            });
        }
        Ok(AhatSpec { spec, kinds })
    }
}

// Serialized form: the spec with `kind` embedded per layer.
#[derive(Serialize, Deserialize)]
struct AhatLayerSerde {
    kind: LayerKind,
    #[serde(flatten)]
    layer: Layer,
}

#[derive(Serialize, Deserialize)]
struct AhatSpecSerde {
    alphabet: Vec<char>,
    d: usize,
    word_embedding: BTreeMap<char, Vec<f64>>,
    pe_features: Vec<(usize, crate::transformer::PEFeature)>,
    layers: Vec<AhatLayerSerde>,
    readout: usize,
    #[serde(default)]
    residual: bool,
}

impl Serialize for AhatSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let spec = self.spec.clone();
        let layers = spec
            .layers
            .into_iter()
            .zip(&self.kinds)
            .map(|(layer, &kind)| AhatLayerSerde { kind, layer })
            .collect();
        AhatSpecSerde {
            alphabet: spec.alphabet,
            d: spec.d,
            word_embedding: spec.word_embedding,
            pe_features: spec.pe_features,
            layers,
            readout: spec.readout,
            residual: spec.residual,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AhatSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = AhatSpecSerde::deserialize(d)?;
        let mut kinds = Vec::with_capacity(raw.layers.len());
        let mut layers = Vec::with_capacity(raw.layers.len());
        for l in raw.layers {
            kinds.push(l.kind);
            layers.push(l.layer);
        }
        Ok(AhatSpec {
            spec: TransformerSpec {
                alphabet: raw.alphabet,
                d: raw.d,
                word_embedding: raw.word_embedding,
                pe_features: raw.pe_features,
                layers,
                readout: raw.readout,
                residual: raw.residual,
            },
            kinds,
        })
    }
}

/// Where probe inputs come from. Exhaustive is exact for the length;
/// sampling gives seeded, reproducible subsets (gap estimates over samples
/// are upper bounds on the true gap and are labelled as such).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSource {
    Exhaustive,
    Sampled { count: usize, seed: u64 },
}

const EXHAUSTIVE_CAP: u128 = 1 << 20;

pub fn probe_inputs(
    alphabet: &[char],
    n: usize,
    source: InputSource,
) -> Result<Vec<String>, AhatError> {
    match source {
        InputSource::Exhaustive => {
            let count = (alphabet.len() as u128).pow(n as u32);
            if count > EXHAUSTIVE_CAP {
                return Err(AhatError::TooManyInputs {
                    count,
                    cap: EXHAUSTIVE_CAP,
                });
            }
            let mut out = Vec::with_capacity(count as usize);
            let mut idx = vec![0usize; n];
            loop {
                out.push(idx.iter().map(|&i| alphabet[i]).collect::<String>());
                let mut k = 0;
                loop {
                    if k == n {
                        return Ok(out);
                    }
                    idx[k] += 1;
                    if idx[k] < alphabet.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
            }
        }
        InputSource::Sampled { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..count)
                .map(|_| {
                    (0..n)
                        .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                        .collect()
                })
                .collect())
        }
    }
}

/// A tie found where none was allowed.
#[derive(Debug, Clone, Serialize)]
pub struct TieWitness {
    pub input: String,
    pub layer: usize,
    pub position: usize,
    pub tied: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TielessCheck {
    pub ok: bool,
    pub inputs_probed: usize,
    pub witness: Option<TieWitness>,
}

fn layer_scores_per_input(
    spec: &TransformerSpec,
    w: &str,
    registry: &PredicateRegistry,
) -> Result<Vec<Vec<Vec<f64>>>, TransformerError> {
    let states = spec.forward_layers(w, registry)?;
    spec.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| attention_scores(&layer.attention, &states[l]))
        .collect()
}

/// Checks the structural tags: uniform layers must have identically zero
/// query/key maps, tieless layers a unique score maximum at every position
/// of every probed input.
pub fn check_uniform_tieless(
    ahat: &AhatSpec,
    n: usize,
    source: InputSource,
    registry: &PredicateRegistry,
) -> Result<TielessCheck, AhatError> {
    for (l, (layer, kind)) in ahat.spec.layers.iter().zip(&ahat.kinds).enumerate() {
        if *kind == LayerKind::Uniform
            && !(layer.attention.wq.is_zero() && layer.attention.wk.is_zero())
        {
            return Err(AhatError::BadTag {
                layer: l,
                tag: LayerKind::Uniform,
                problem: "query/key maps are not identically zero".into(),
            });
        }
    }
    let inputs = probe_inputs(&ahat.spec.alphabet, n, source)?;
    let witness = inputs
        .par_iter()
        .map(|w| -> Result<Option<TieWitness>, AhatError> {
            let scores = layer_scores_per_input(&ahat.spec, w, registry)?;
            for (l, kind) in ahat.kinds.iter().enumerate() {
                if *kind != LayerKind::Tieless {
                    continue;
                }
                for (i, row) in scores[l].iter().enumerate() {
                    let max = row
                        .iter()
                        .copied()
                        .filter(|s| s.is_finite())
                        .fold(f64::NEG_INFINITY, f64::max);
                    let tied: Vec<usize> = row
                        .iter()
                        .enumerate()
                        .filter(|(_, &s)| s == max)
                        .map(|(j, _)| j)
                        .collect();
                    if tied.len() != 1 {
                        return Ok(Some(TieWitness {
                            input: w.clone(),
                            layer: l,
                            position: i,
                            tied,
                        }));
                    }
                }
            }
            Ok(None)
        })
        .find_map_first(|r| match r {
            Ok(None) => None,
            Ok(Some(w)) => Some(Ok(w)),
            Err(e) => Some(Err(e)),
        })
        .transpose()?;
    Ok(TielessCheck {
        ok: witness.is_none(),
        inputs_probed: inputs.len(),
        witness,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GapEstimate {
    /// Smallest (max - runner-up) over probed inputs, tieless layers and
    /// positions. Infinite when no tieless layer exists or no row has a
    /// runner-up.
    pub gamma: f64,
    pub no_tieless_layers: bool,
    pub inputs_probed: usize,
    /// "exhaustive" estimates are exact minima for the length; "sampled"
    /// ones are upper bounds on the true gap.
    pub method: String,
}

fn source_label(source: InputSource) -> String {
    match source {
        InputSource::Exhaustive => "exhaustive".to_string(),
        InputSource::Sampled { count, seed } => format!("sampled({count},seed={seed})"),
    }
}

/// Minimum gap between the maximum score and the largest strictly smaller
/// score, over every probed input, tieless layer and position.
pub fn estimate_gap(
    ahat: &AhatSpec,
    n: usize,
    source: InputSource,
    registry: &PredicateRegistry,
) -> Result<GapEstimate, AhatError> {
    let no_tieless = !ahat.kinds.iter().any(|k| *k == LayerKind::Tieless);
    if no_tieless {
        return Ok(GapEstimate {
            gamma: f64::INFINITY,
            no_tieless_layers: true,
            inputs_probed: 0,
            method: source_label(source),
        });
    }
    let inputs = probe_inputs(&ahat.spec.alphabet, n, source)?;
    let gamma = inputs
        .par_iter()
        .map(|w| -> Result<f64, AhatError> {
            let scores = layer_scores_per_input(&ahat.spec, w, registry)?;
            let mut local = f64::INFINITY;
            for (l, kind) in ahat.kinds.iter().enumerate() {
                if *kind != LayerKind::Tieless {
                    continue;
                }
                for row in &scores[l] {
                    let max = row
                        .iter()
                        .copied()
                        .filter(|s| s.is_finite())
                        .fold(f64::NEG_INFINITY, f64::max);
                    let runner_up = row
                        .iter()
                        .copied()
                        .filter(|s| s.is_finite() && *s < max)
                        .fold(f64::NEG_INFINITY, f64::max);
                    if runner_up.is_finite() {
                        local = local.min(max - runner_up);
                    }
                }
            }
            Ok(local)
        })
        .try_reduce(|| f64::INFINITY, |a, b| Ok(a.min(b)))?;
    Ok(GapEstimate {
        gamma,
        no_tieless_layers: false,
        inputs_probed: inputs.len(),
        method: source_label(source),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Activation bounds from the compounding worst-case amplification of
    /// each layer's weight matrices.
    Analytic,
    /// Activation bounds measured on the probe set, doubled for safety.
    Empirical,
}

/// Everything [`choose_temperature`] needs: the measured gap, activation
/// bounds, the largest parameter, and the composition constants of the
/// per-layer error bound.
#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub n: usize,
    pub gamma: f64,
    pub x_max: f64,
    pub p_max: f64,
    /// Bound on activation entries at the *input* of each layer
    /// (`u_max[0] = x_max`).
    pub u_max: Vec<f64>,
    pub k1: f64,
    pub k2: f64,
    pub method: String,
}

/// Derives the calibration over the probe set. Analytic mode compounds the
/// per-layer amplification `(d p)^3` (plus bias terms); empirical mode
/// measures the hard run's activations and doubles them.
pub fn calibrate(
    ahat: &AhatSpec,
    n: usize,
    mode: CalibrationMode,
    source: InputSource,
    registry: &PredicateRegistry,
) -> Result<Calibration, AhatError> {
    let gap = estimate_gap(ahat, n, source, registry)?;
    let inputs = probe_inputs(&ahat.spec.alphabet, n, source)?;
    let d = ahat.spec.d as f64;
    let p_max = ahat.spec.max_param();
    let layer_count = ahat.spec.layers.len();

    // x_max: max of 1 and any entry of the initial activations.
    let x_max = inputs
        .par_iter()
        .map(|w| -> Result<f64, AhatError> {
            let h = ahat.spec.embed(w, registry)?;
            Ok(h.values().iter().fold(1.0f64, |a, &v| a.max(v.abs())))
        })
        .try_reduce(|| 1.0f64, |a, b| Ok(a.max(b)))?;

    let u_max: Vec<f64> = match mode {
        CalibrationMode::Analytic => {
            // l1-norm recurrence: attention and the two feed-forward maps each
            // amplify by at most D = max(1, d p), and the feed-forward biases
            // add at most d p per map.
            let dp = (d * p_max).max(1.0);
            let mut bounds = Vec::with_capacity(layer_count.max(1));
            let mut b = d * x_max;
            bounds.push(b.max(1.0));
            for _ in 0..layer_count.saturating_sub(1) {
                b = dp * dp * dp * b + dp * dp + dp;
                bounds.push(b.max(1.0));
            }
            bounds
        }
        CalibrationMode::Empirical => {
            let layer_maxima = inputs
                .par_iter()
                .map(|w| -> Result<Vec<f64>, AhatError> {
                    let states = ahat.spec.forward_layers(w, registry)?;
                    // bound at the input of layer l = state l of the run
                    Ok(states[..layer_count.max(1)]
                        .iter()
                        .map(|h| h.values().iter().fold(1.0f64, |a, &v| a.max(v.abs())))
                        .collect())
                })
                .try_reduce(
                    || vec![1.0; layer_count.max(1)],
                    |a, b| Ok(a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect()),
                )?;
            layer_maxima.into_iter().map(|m| 2.0 * m).collect()
        }
    };

    // Composition constants of the one-layer error bound. The score error at
    // layer l is at most d^{3/2} p^2 (2*ub + 1) eps with ub the activation
    // bound entering the layer (the softmax run adds at most eps <= 1), so k2
    // absorbs the layer maximum relative to x_max. k1 covers the worst layer:
    // value mixing (d p), the amplification through the feed-forward block
    // (d^2 p^2), and the payload magnitude 2 d * ub against the attention
    // weight error.
    let u_peak = u_max.iter().fold(1.0f64, |a, &v| a.max(v));
    let p_eff = p_max.max(1.0);
    let k2 = (d.powf(1.5) * p_eff * p_eff * (2.0 * (u_peak + 1.0) + 1.0) / x_max).max(1.0);
    let k1 = (d.powi(3) * p_eff.powi(3) * (2.0 * d * 2.0 * u_peak).max(1.0)).max(1.0);

    Ok(Calibration {
        n,
        gamma: gap.gamma,
        x_max,
        p_max,
        u_max,
        k1,
        k2,
        method: format!("{mode:?}/{}", source_label(source)),
    })
}

/// The per-layer error budgets and the temperature meeting them.
#[derive(Debug, Clone, Serialize)]
pub struct TemperaturePlan {
    /// Budgets `E_1..E_L`; the error after layer l must stay under `E_l`.
    pub budgets: Vec<f64>,
    pub tau: f64,
    pub derivation: String,
}

/// Solves the budget recursion: `E_L = gamma/(4 k2 x_max)`, each earlier
/// budget divided by `2 k1`, and the temperature from
/// `e^{-gamma/(2 tau)} = E_1 / (k1 n x_max)` (with `gamma` clamped to 1).
pub fn choose_temperature(
    cal: &Calibration,
    layer_count: usize,
    n: usize,
) -> Result<TemperaturePlan, AhatError> {
    if !cal.gamma.is_finite() || cal.gamma <= 0.0 {
        return Err(AhatError::NoGap);
    }
    if cal.k1 < 1.0 || cal.k2 < 1.0 || cal.x_max < 1.0 {
        return Err(AhatError::Inconsistent(
            "constants below their floors".into(),
        ));
    }
    let gamma = cal.gamma.min(1.0);
    if layer_count == 0 {
        return Ok(TemperaturePlan {
            budgets: vec![],
            tau: 1.0,
            derivation: "no layers; temperature irrelevant".into(),
        });
    }
    let mut budgets = vec![0.0; layer_count];
    budgets[layer_count - 1] = gamma / (4.0 * cal.k2 * cal.x_max);
    for l in (0..layer_count - 1).rev() {
        budgets[l] = budgets[l + 1] / (2.0 * cal.k1);
    }
    // side conditions: score perturbations stay below half the gap, and the
    // final budget is inside the 1/4 output contract
    for (l, &e) in budgets.iter().enumerate() {
        if cal.k2 * cal.x_max * e > gamma / 4.0 + 1e-12 {
            return Err(AhatError::Inconsistent(format!(
                "budget E_{} = {e} breaks the quarter-gap condition",
                l + 1
            )));
        }
    }
    let e_last = budgets[layer_count - 1];
    if e_last > 0.25 + 1e-12 {
        return Err(AhatError::Inconsistent(format!(
            "final budget {e_last} exceeds 1/4"
        )));
    }
    let ratio = cal.k1 * n as f64 * cal.x_max / budgets[0];
    let tau = gamma / (2.0 * ratio.ln());
    Ok(TemperaturePlan {
        budgets,
        tau,
        derivation: format!(
            "gamma={gamma:.6e} (clamped from {:.6e}), E_L={e_last:.6e}, \
             tau = gamma / (2 ln(k1*n*x_max/E_1)) with k1={:.3e}, k2={:.3e}, x_max={:.3e}",
            cal.gamma, cal.k1, cal.k2, cal.x_max
        ),
    })
}

/// The softmax twin: same parameters, every attention layer's weighting
/// swapped to temperature-scaled softmax with the plan's constant
/// temperature. Uniform layers keep equal scores and are unaffected.
pub fn to_smat(ahat: &AhatSpec, plan: &TemperaturePlan) -> TransformerSpec {
    let mut spec = ahat.spec.clone();
    for layer in &mut spec.layers {
        layer.attention.weighting = WeightingFn::SoftmaxTau {
            tau: TemperatureFn::Constant { tau: plan.tau },
        };
    }
    spec
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerErrorRow {
    pub layer: usize,
    pub max_error: f64,
    pub budget: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub n: usize,
    pub method: String,
    pub inputs_probed: usize,
    pub per_layer: Vec<LayerErrorRow>,
    pub final_max_error: f64,
    pub final_budget: f64,
    pub worst_input: String,
    pub pass: bool,
}

/// Per-input per-layer error rows for CSV export.
#[derive(Debug, Clone, Serialize)]
pub struct SimDetailRow {
    pub n: usize,
    pub input_id: usize,
    pub layer: usize,
    pub error: f64,
    pub budget: f64,
}

/// Runs the hard spec and its softmax twin on every probed input and
/// compares activations layer by layer against the plan's budgets.
pub fn verify_simulation(
    ahat: &AhatSpec,
    smat: &TransformerSpec,
    plan: &TemperaturePlan,
    n: usize,
    source: InputSource,
    registry: &PredicateRegistry,
    mut detail: Option<&mut Vec<SimDetailRow>>,
) -> Result<SimReport, AhatError> {
    let inputs = probe_inputs(&ahat.spec.alphabet, n, source)?;
    let layer_count = ahat.spec.layers.len();
    let per_input: Vec<(Vec<f64>, f64)> = inputs
        .par_iter()
        .map(|w| -> Result<(Vec<f64>, f64), AhatError> {
            let hard = ahat.spec.forward_layers(w, registry)?;
            let soft = smat.forward_layers(w, registry)?;
            let mut layer_errors = Vec::with_capacity(layer_count);
            for l in 1..=layer_count {
                let mut err = 0.0f64;
                for i in 0..hard[l].rows() {
                    err = err.max(l1_distance(hard[l].row(i), soft[l].row(i)));
                }
                layer_errors.push(err);
            }
            let final_err = layer_errors.last().copied().unwrap_or(0.0);
            Ok((layer_errors, final_err))
        })
        .collect::<Result<_, _>>()?;

    if let Some(rows) = detail.as_deref_mut() {
        for (id, (errors, _)) in per_input.iter().enumerate() {
            for (l, &e) in errors.iter().enumerate() {
                rows.push(SimDetailRow {
                    n,
                    input_id: id,
                    layer: l + 1,
                    error: e,
                    budget: plan.budgets.get(l).copied().unwrap_or(f64::NAN),
                });
            }
        }
    }

    let mut per_layer = Vec::with_capacity(layer_count);
    for l in 0..layer_count {
        let max_error = per_input
            .iter()
            .map(|(e, _)| e[l])
            .fold(0.0f64, f64::max);
        let budget = plan.budgets[l];
        per_layer.push(LayerErrorRow {
            layer: l + 1,
            max_error,
            budget,
            ok: max_error <= budget,
        });
    }
    let (worst_idx, final_max_error) = per_input
        .iter()
        .enumerate()
        .map(|(i, (_, f))| (i, *f))
        .fold((0, 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });
    let pass = per_layer.iter().all(|r| r.ok) && final_max_error <= 0.25;
    Ok(SimReport {
        n,
        method: source_label(source),
        inputs_probed: inputs.len(),
        per_layer,
        final_max_error,
        final_budget: 0.25,
        worst_input: inputs.get(worst_idx).cloned().unwrap_or_default(),
        pass,
    })
}

/// End-to-end convenience: check tags, calibrate, choose the temperature,
/// convert and verify.
pub fn simulate(
    ahat: &AhatSpec,
    n: usize,
    mode: CalibrationMode,
    source: InputSource,
    registry: &PredicateRegistry,
) -> Result<(Calibration, TemperaturePlan, SimReport), AhatError> {
    let check = check_uniform_tieless(ahat, n, source, registry)?;
    if !check.ok {
        return Err(AhatError::BadTag {
            layer: check.witness.as_ref().map(|w| w.layer).unwrap_or(0),
            tag: LayerKind::Tieless,
            problem: format!("tie witness {:?}", check.witness),
        });
    }
    let cal = calibrate(ahat, n, mode, source, registry)?;
    let plan = choose_temperature(&cal, ahat.spec.layers.len(), n)?;
    let smat = to_smat(ahat, &plan);
    let report = verify_simulation(ahat, &smat, &plan, n, source, registry, None)?;
    Ok((cal, plan, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn reg() -> PredicateRegistry {
        PredicateRegistry::builtin()
    }

    #[test]
    fn flip_flop_is_uniform_tieless() {
        let ff = fixtures::flip_flop();
        let check = check_uniform_tieless(&ff, 4, InputSource::Exhaustive, &reg()).unwrap();
        assert!(check.ok, "witness: {:?}", check.witness);
        assert_eq!(check.inputs_probed, 81);
    }

    #[test]
    fn mislabeled_uniform_layer_is_rejected() {
        let mut ff = fixtures::flip_flop();
        ff.kinds[0] = LayerKind::Uniform;
        let err = check_uniform_tieless(&ff, 3, InputSource::Exhaustive, &reg()).unwrap_err();
        assert!(matches!(err, AhatError::BadTag { .. }));
    }

    #[test]
    fn uniform_scores_tagged_tieless_produce_witness() {
        // zero query/key maps tagged tieless: every position ties
        let mut ff = fixtures::flip_flop();
        let zeros = Matrix::zeros(1, ff.spec.d);
        ff.spec.layers[0].attention.wq = zeros.clone();
        ff.spec.layers[0].attention.wk = zeros;
        let check = check_uniform_tieless(&ff, 3, InputSource::Exhaustive, &reg()).unwrap();
        assert!(!check.ok);
        let w = check.witness.unwrap();
        assert!(w.tied.len() > 1);
    }

    #[test]
    fn single_position_inputs_are_trivially_tieless() {
        let ff = fixtures::flip_flop();
        let check = check_uniform_tieless(&ff, 1, InputSource::Exhaustive, &reg()).unwrap();
        assert!(check.ok);
    }

    #[test]
    fn flip_flop_gap_shrinks_like_one_over_n() {
        let ff = fixtures::flip_flop();
        for n in [4usize, 8] {
            let gap = estimate_gap(&ff, n, InputSource::Exhaustive, &reg()).unwrap();
            let expected = 1.0 / (4.0 * n as f64);
            assert!(
                (gap.gamma - expected).abs() < 1e-12,
                "n={n}: gamma {} vs expected {expected}",
                gap.gamma
            );
        }
    }

    #[test]
    fn boolean_score_gap_is_one() {
        // a tieless layer whose scores differ by at least 1 measures gap >= 1
        let counter = fixtures::counter();
        let gap = estimate_gap(&counter, 4, InputSource::Exhaustive, &reg()).unwrap();
        assert!(gap.gamma > 0.0 && gap.gamma.is_finite());
    }

    #[test]
    fn uniform_only_spec_has_infinite_gap_sentinel() {
        let mut ff = fixtures::flip_flop();
        let zeros = Matrix::zeros(1, ff.spec.d);
        ff.spec.layers[0].attention.wq = zeros.clone();
        ff.spec.layers[0].attention.wk = zeros;
        ff.kinds[0] = LayerKind::Uniform;
        let gap = estimate_gap(&ff, 4, InputSource::Exhaustive, &reg()).unwrap();
        assert!(gap.no_tieless_layers);
        assert!(gap.gamma.is_infinite());
        // and temperature selection refuses it
        let cal = calibrate(&ff, 4, CalibrationMode::Empirical, InputSource::Exhaustive, &reg())
            .unwrap();
        assert!(matches!(
            choose_temperature(&cal, 1, 4),
            Err(AhatError::NoGap)
        ));
    }

    #[test]
    fn empirical_bounds_stay_under_analytic() {
        let ff = fixtures::flip_flop();
        let reg = reg();
        let a = calibrate(&ff, 6, CalibrationMode::Analytic, InputSource::Exhaustive, &reg)
            .unwrap();
        let e = calibrate(&ff, 6, CalibrationMode::Empirical, InputSource::Exhaustive, &reg)
            .unwrap();
        assert!(a.x_max >= 1.0 && e.x_max >= 1.0);
        assert_eq!(a.x_max, e.x_max);
        for (ub_a, ub_e) in a.u_max.iter().zip(&e.u_max) {
            // the doubled measurement stays below the compounded worst case
            assert!(ub_e <= ub_a, "empirical {ub_e} > analytic {ub_a}");
        }
    }

    #[test]
    fn single_layer_temperature_closed_form() {
        let cal = Calibration {
            n: 8,
            gamma: 0.5,
            x_max: 2.0,
            p_max: 1.0,
            u_max: vec![2.0],
            k1: 3.0,
            k2: 5.0,
            method: "test".into(),
        };
        let plan = choose_temperature(&cal, 1, 8).unwrap();
        let gamma = 0.5;
        let e1 = gamma / (4.0 * 5.0 * 2.0);
        assert!((plan.budgets[0] - e1).abs() < 1e-15);
        let tau = gamma / (2.0 * (3.0 * 8.0 * 2.0 / e1).ln());
        assert!((plan.tau - tau).abs() < 1e-15);
    }

    #[test]
    fn doubling_length_decreases_temperature() {
        let ff = fixtures::flip_flop();
        let reg = reg();
        let mut last = f64::INFINITY;
        for n in [4usize, 8] {
            let cal = calibrate(&ff, n, CalibrationMode::Analytic, InputSource::Exhaustive, &reg)
                .unwrap();
            let plan = choose_temperature(&cal, ff.spec.layers.len(), n).unwrap();
            assert!(plan.tau < last);
            last = plan.tau;
        }
    }

    #[test]
    fn conversion_preserves_parameters_exactly() {
        let ff = fixtures::flip_flop();
        let reg = reg();
        let cal = calibrate(&ff, 4, CalibrationMode::Empirical, InputSource::Exhaustive, &reg)
            .unwrap();
        let plan = choose_temperature(&cal, ff.spec.layers.len(), 4).unwrap();
        let smat = to_smat(&ff, &plan);
        for (a, b) in ff.spec.layers.iter().zip(&smat.layers) {
            assert_eq!(a.attention.wq, b.attention.wq);
            assert_eq!(a.attention.wk, b.attention.wk);
            assert_eq!(a.attention.wv, b.attention.wv);
            assert_eq!(a.ffn, b.ffn);
            assert!(matches!(
                b.attention.weighting,
                WeightingFn::SoftmaxTau { .. }
            ));
        }
        assert_eq!(ff.spec.word_embedding, smat.word_embedding);
    }

    #[test]
    fn flip_flop_simulation_verifies() {
        let ff = fixtures::flip_flop();
        let reg = reg();
        for mode in [CalibrationMode::Analytic, CalibrationMode::Empirical] {
            let (_, plan, report) =
                simulate(&ff, 6, mode, InputSource::Exhaustive, &reg).unwrap();
            assert!(report.pass, "{mode:?}: {report:?}");
            assert!(report.final_max_error <= 0.25);
            assert!(plan.tau > 0.0);
        }
    }

    #[test]
    fn counter_simulation_verifies() {
        let counter = fixtures::counter();
        let reg = reg();
        let (_, _, report) = simulate(
            &counter,
            6,
            CalibrationMode::Empirical,
            InputSource::Exhaustive,
            &reg,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn uniform_layers_are_unchanged_by_conversion() {
        // a uniform layer computes the same values under any temperature
        let counter = fixtures::counter();
        let reg = reg();
        let cal = calibrate(
            &counter,
            5,
            CalibrationMode::Empirical,
            InputSource::Exhaustive,
            &reg,
        )
        .unwrap();
        let plan = choose_temperature(&cal, counter.spec.layers.len(), 5).unwrap();
        let smat = to_smat(&counter, &plan);
        for w in ["abab", "aaaaa", "b"] {
            let hard = counter.spec.forward_layers(w, &reg).unwrap();
            let soft = smat.forward_layers(w, &reg).unwrap();
            // layer 1 is uniform: identical outputs
            for i in 0..hard[1].rows() {
                assert!(l1_distance(hard[1].row(i), soft[1].row(i)) < 1e-12);
            }
        }
    }

    #[test]
    fn oversized_temperature_fails_verification() {
        let ff = fixtures::flip_flop();
        let reg = reg();
        let cal = calibrate(&ff, 6, CalibrationMode::Empirical, InputSource::Exhaustive, &reg)
            .unwrap();
        let mut plan = choose_temperature(&cal, ff.spec.layers.len(), 6).unwrap();
        plan.tau *= 100.0;
        let smat = to_smat(&ff, &plan);
        let report =
            verify_simulation(&ff, &smat, &plan, 6, InputSource::Exhaustive, &reg, None).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn halving_temperature_never_hurts() {
        let ff = fixtures::flip_flop();
        let reg = reg();
        let cal = calibrate(&ff, 5, CalibrationMode::Empirical, InputSource::Exhaustive, &reg)
            .unwrap();
        let plan = choose_temperature(&cal, ff.spec.layers.len(), 5).unwrap();
        let mut last = f64::INFINITY;
        for halvings in 0..4 {
            let mut p = TemperaturePlan {
                budgets: plan.budgets.clone(),
                tau: plan.tau / f64::powi(2.0, halvings),
                derivation: String::new(),
            };
            // budgets unchanged; only the measured error matters here
            let smat = to_smat(&ff, &p);
            let report =
                verify_simulation(&ff, &smat, &p, 5, InputSource::Exhaustive, &reg, None).unwrap();
            assert!(report.final_max_error <= last + 1e-15);
            last = report.final_max_error;
            p.derivation.clear();
        }
    }

    #[test]
    fn ahat_spec_json_roundtrip_embeds_kinds_per_layer() {
        let ff = fixtures::flip_flop();
        let json = serde_json::to_string_pretty(&ff).unwrap();
        assert!(json.contains("\"kind\": \"tieless\""));
        let back: AhatSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(ff, back);
    }

    #[test]
    fn gap_estimate_is_a_true_minimum_on_probes() {
        let ff = fixtures::flip_flop();
        let reg = reg();
        let gap = estimate_gap(&ff, 5, InputSource::Exhaustive, &reg).unwrap();
        // re-scan: no score row anywhere violates the reported gap
        for w in probe_inputs(&ff.spec.alphabet, 5, InputSource::Exhaustive).unwrap() {
            let scores = layer_scores_per_input(&ff.spec, &w, &reg).unwrap();
            for row in &scores[0] {
                let max = row
                    .iter()
                    .copied()
                    .filter(|s| s.is_finite())
                    .fold(f64::NEG_INFINITY, f64::max);
                for &s in row.iter().filter(|s| s.is_finite()) {
                    if s < max {
                        assert!(max - s >= gap.gamma - 1e-15);
                    }
                }
            }
        }
    }
}
