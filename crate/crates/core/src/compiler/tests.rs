use super::gadgets::{
    marker_attention, marker_threshold_units, reciprocal_attention, MarkerKind, RecipDirection,
};
use super::*;
use crate::logic::parse_formula;
use crate::transformer::l1_distance;

fn reg() -> PredicateRegistry {
    PredicateRegistry::builtin()
}

fn binary_strings(max_len: usize) -> Vec<String> {
    let mut out = Vec::new();
    for n in 1..=max_len {
        for bits in 0..(1u32 << n) {
            out.push(
                (0..n)
                    .map(|k| if bits >> k & 1 == 1 { '1' } else { '0' })
                    .collect(),
            );
        }
    }
    out
}

fn assert_oracle_equivalence(formula: &str, mode: CompileMode, max_len: usize) {
    let registry = reg();
    let alpha = ['0', '1'];
    let f = parse_formula(formula, &alpha, &registry).unwrap();
    let cf = compile(&f, &alpha, mode, &registry).unwrap();
    for w in binary_strings(max_len) {
        let want = crate::logic::eval_formula(&f, &w, &registry).unwrap();
        let got = cf.readout_bits(&w, &registry).unwrap();
        assert_eq!(
            got, want,
            "mismatch for {formula} ({}) on {w}",
            mode.label()
        );
    }
}

fn all_modes() -> Vec<CompileMode> {
    vec![
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::Any),
        CompileMode::new(ScalingMode::UnboundedPe, MaskingPolicy::Any),
    ]
}

#[test]
fn three_gram_matches_oracle() {
    for mode in all_modes() {
        assert_oracle_equivalence("Q1 & X Q1 & X X Q0", mode, 6);
    }
}

#[test]
fn prev_formula_matches_oracle_in_every_mode() {
    let mut modes = all_modes();
    modes.push(CompileMode::new(
        ScalingMode::TempScaling,
        MaskingPolicy::FutureOnly,
    ));
    modes.push(CompileMode::new(
        ScalingMode::UnboundedPe,
        MaskingPolicy::FutureOnly,
    ));
    for mode in modes {
        assert_oracle_equivalence("Y Q1", mode, 6);
        assert_oracle_equivalence("Q1 & Y (Q0 | Y Q1)", mode, 6);
    }
}

#[test]
fn since_until_matches_oracle() {
    for mode in all_modes() {
        assert_oracle_equivalence("(Q1 | Q0) S Q0", mode, 6);
        assert_oracle_equivalence("Q0 U (Q1 & Q0)", mode, 5);
        assert_oracle_equivalence("(Q1 S Q0) U Q1", mode, 5);
    }
    assert_oracle_equivalence(
        "(Q1 | Q0) S Q0",
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::FutureOnly),
        6,
    );
}

#[test]
fn counting_parity_matches_oracle() {
    for mode in all_modes() {
        assert_oracle_equivalence("ODD(#L[Q1])", mode, 6);
    }
    assert_oracle_equivalence(
        "ODD(#L[Q1])",
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::FutureOnly),
        6,
    );
}

#[test]
fn counting_comparisons_match_oracle() {
    for mode in all_modes() {
        assert_oracle_equivalence("#L[Q1] <= #R[Q1]", mode, 5);
        assert_oracle_equivalence("1 + #L[Q0] <= #L[Q1]", mode, 5);
    }
}

#[test]
fn predicate_free_parity_matches_oracle() {
    assert_oracle_equivalence(
        "#L[#L[Y Q1] = #R[Q1]] = 0",
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::Any),
        5,
    );
}

#[test]
fn pred_of_right_count_matches_oracle() {
    assert_oracle_equivalence(
        "ODD(#R[Q1])",
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::Any),
        5,
    );
}

#[test]
fn accepts_follows_last_position() {
    let registry = reg();
    let alpha = ['0', '1'];
    let f = parse_formula("ODD(#L[Q1])", &alpha, &registry).unwrap();
    let cf = compile(
        &f,
        &alpha,
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::Any),
        &registry,
    )
    .unwrap();
    assert!(cf.accepts("1", &registry).unwrap());
    assert!(!cf.accepts("11", &registry).unwrap());
    assert!(cf.accepts("10100", &registry).unwrap());
}

#[test]
fn modes_agree_on_node_streams() {
    let registry = reg();
    let alpha = ['0', '1'];
    for formula in ["Y Q1 | X Q0", "(Q1 | Q0) S Q0", "ODD(#L[Q1])"] {
        let f = parse_formula(formula, &alpha, &registry).unwrap();
        let a = compile(
            &f,
            &alpha,
            CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::Any),
            &registry,
        )
        .unwrap();
        let b = compile(
            &f,
            &alpha,
            CompileMode::new(ScalingMode::UnboundedPe, MaskingPolicy::Any),
            &registry,
        )
        .unwrap();
        for w in binary_strings(5) {
            let ha = a.spec.forward(&w, &registry).unwrap();
            let hb = b.spec.forward(&w, &registry).unwrap();
            for (node, &ca) in &a.coordinate_map {
                let cb = b.coordinate_map[node];
                for i in 0..w.len() {
                    let va = ha.get(i, ca).round();
                    let vb = hb.get(i, cb).round();
                    assert_eq!(va, vb, "node {node} differs at {w}:{i}");
                }
            }
        }
    }
}

#[test]
fn future_only_rejects_future_operators() {
    let registry = reg();
    let alpha = ['0', '1'];
    let until = parse_formula("Q1 U Q0", &alpha, &registry).unwrap();
    let err = compile(
        &until,
        &alpha,
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::FutureOnly),
        &registry,
    )
    .unwrap_err();
    assert!(matches!(err, CompileError::NotFutureCompilable { .. }));

    let right_count = parse_formula("ODD(#R[Q1])", &alpha, &registry).unwrap();
    assert!(compile(
        &right_count,
        &alpha,
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::FutureOnly),
        &registry,
    )
    .is_err());
}

#[test]
fn future_only_unbounded_counting_is_unsupported() {
    let registry = reg();
    let alpha = ['0', '1'];
    let f = parse_formula("ODD(#L[Q1])", &alpha, &registry).unwrap();
    let err = compile(
        &f,
        &alpha,
        CompileMode::new(ScalingMode::UnboundedPe, MaskingPolicy::FutureOnly),
        &registry,
    )
    .unwrap_err();
    assert!(matches!(err, CompileError::UnsupportedMode));
}

#[test]
fn constant_comparison_folds() {
    let registry = reg();
    let alpha = ['0', '1'];
    let f = parse_formula("#L[Q0] <= #L[Q0]", &alpha, &registry).unwrap();
    let cf = compile(
        &f,
        &alpha,
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::Any),
        &registry,
    )
    .unwrap();
    for w in ["0", "0110", "111"] {
        assert!(cf.readout_bits(w, &registry).unwrap().iter().all(|&b| b));
    }
}

#[test]
fn audit_examples() {
    let registry = reg();
    let alpha = ['0', '1'];

    // three-gram formula: every retrieval within the tie-break budget
    let f = parse_formula("Q1 & X Q1 & X X Q0", &alpha, &registry).unwrap();
    let cf = compile(
        &f,
        &alpha,
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::Any),
        &registry,
    )
    .unwrap();
    let report = compiled_error_audit(&cf, "1101", &registry).unwrap();
    assert!(report.pass);
    assert!(report.hard_matches_oracle);
    assert!(report.max_deviation <= 4.0 * (-3.0f64).exp() + 1e-9);

    // atom-only formula has no attention approximation at all
    let f = parse_formula("Q1 & ! Q0", &alpha, &registry).unwrap();
    let cf = compile(
        &f,
        &alpha,
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::Any),
        &registry,
    )
    .unwrap();
    let report = compiled_error_audit(&cf, "1010", &registry).unwrap();
    assert!(report.pass);
    assert_eq!(report.max_deviation, 0.0);

    // counting formula stays within the 1/4 contract
    let f = parse_formula("#L[Q1] = #R[Q1]", &alpha, &registry).unwrap();
    let cf = compile(
        &f,
        &alpha,
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::Any),
        &registry,
    )
    .unwrap();
    let report = compiled_error_audit(&cf, "1111", &registry).unwrap();
    assert!(report.pass, "audit failed: {report:?}");
    assert!(report.hard_matches_oracle);
}

#[test]
fn trace_names_every_layer() {
    let registry = reg();
    let alpha = ['0', '1'];
    let f = parse_formula("(Q1 | Q0) S Q0", &alpha, &registry).unwrap();
    let cf = compile(
        &f,
        &alpha,
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::Any),
        &registry,
    )
    .unwrap();
    let layer_lines = cf.trace.iter().filter(|l| l.starts_with("layer ")).count();
    assert_eq!(layer_lines, cf.spec.layers.len());
}

#[test]
fn compiled_spec_serializes() {
    let registry = reg();
    let alpha = ['0', '1'];
    let f = parse_formula("Y Q1", &alpha, &registry).unwrap();
    let cf = compile(
        &f,
        &alpha,
        CompileMode::new(ScalingMode::TempScaling, MaskingPolicy::Any),
        &registry,
    )
    .unwrap();
    let json = serde_json::to_string(&cf.spec).unwrap();
    let back: TransformerSpec = serde_json::from_str(&json).unwrap();
    assert_eq!(cf.spec, back);
}

// --- marker and reciprocal layer fragments, exercised standalone -----------

fn marker_spec(kind: MarkerKind) -> TransformerSpec {
    // coords: 0 = alternating sign (PE), 1 = raw, 2 = marker
    let d = 3;
    let attention = marker_attention(kind, 0, 1, d, WeightingFn::Softmax);
    let units = marker_threshold_units(kind);
    let mut w1 = Matrix::zeros(units.len(), d);
    let mut b1 = vec![0.0; units.len()];
    let mut w2 = Matrix::zeros(d, units.len());
    for (u, (scale, bias, coeff)) in units.iter().enumerate() {
        w1.set(u, 1, *scale);
        b1[u] = *bias;
        w2.set(2, u, *coeff);
    }
    let mut we = BTreeMap::new();
    we.insert('a', vec![0.0; d]);
    TransformerSpec {
        alphabet: vec!['a'],
        d,
        word_embedding: we,
        pe_features: vec![(0, PEFeature::AltSign)],
        layers: vec![Layer {
            attention,
            ffn: FFNSpec {
                w1,
                b1,
                w2,
                b2: vec![0.0; d],
            },
        }],
        readout: 2,
        residual: false,
    }
}

#[test]
fn marker_layers_mark_the_ends() {
    let registry = reg();
    for n in 1..=7 {
        let w: String = "a".repeat(n);
        let first = marker_spec(MarkerKind::First).forward(&w, &registry).unwrap();
        let last = marker_spec(MarkerKind::Last).forward(&w, &registry).unwrap();
        for i in 0..n {
            assert_eq!(first.get(i, 2), if i == 0 { 1.0 } else { 0.0 }, "first at {n}:{i}");
            assert_eq!(last.get(i, 2), if i == n - 1 { 1.0 } else { 0.0 }, "last at {n}:{i}");
        }
    }
}

#[test]
fn reciprocal_layers_produce_exact_reciprocals() {
    // layer 1 marks an end; layer 2 averages the marker uniformly
    let registry = reg();
    for (dir, kind) in [
        (RecipDirection::Forward, MarkerKind::First),
        (RecipDirection::Backward, MarkerKind::Last),
    ] {
        let d = 4; // alt, raw, marker, recip
        let mut spec = marker_spec(kind);
        spec.d = d;
        spec.word_embedding.insert('a', vec![0.0; d]);
        // widen layer 1 to d=4
        let l1 = &mut spec.layers[0];
        l1.attention.wq = Matrix::zeros(1, d);
        l1.attention.wk = Matrix::zeros(1, d);
        let mut wv = Matrix::zeros(d, d);
        wv.set(1, 0, -1.0);
        l1.attention.wv = wv;
        let units = marker_threshold_units(kind);
        let mut w1 = Matrix::zeros(units.len(), d);
        let mut b1 = vec![0.0; units.len()];
        let mut w2 = Matrix::zeros(d, units.len());
        for (u, (scale, bias, coeff)) in units.iter().enumerate() {
            w1.set(u, 1, *scale);
            b1[u] = *bias;
            w2.set(2, u, *coeff);
        }
        l1.ffn = FFNSpec {
            w1,
            b1,
            w2,
            b2: vec![0.0; d],
        };
        // layer 2: uniform masked average of the marker, plus an identity
        // pass so the non-residual feed-forward keeps the result
        let attention = reciprocal_attention(dir, 2, 3, d, WeightingFn::Softmax);
        let mut w1 = Matrix::zeros(2, d);
        w1.set(0, 3, 1.0);
        w1.set(1, 3, -1.0);
        let mut w2 = Matrix::zeros(d, 2);
        w2.set(3, 0, 1.0);
        w2.set(3, 1, -1.0);
        spec.layers.push(Layer {
            attention,
            ffn: FFNSpec {
                w1,
                b1: vec![0.0; 2],
                w2,
                b2: vec![0.0; d],
            },
        });
        spec.readout = 3;

        let h = spec.forward("aaaa", &registry).unwrap();
        let want: Vec<f64> = match dir {
            RecipDirection::Forward => vec![1.0, 0.5, 1.0 / 3.0, 0.25],
            RecipDirection::Backward => vec![0.25, 1.0 / 3.0, 0.5, 1.0],
        };
        let got: Vec<f64> = (0..4).map(|i| h.get(i, 3)).collect();
        assert!(
            l1_distance(&want, &got) < 1e-12,
            "{dir:?}: want {want:?} got {got:?}"
        );

        let h1 = spec.forward("a", &registry).unwrap();
        assert_eq!(h1.get(0, 3), 1.0);
    }
}
