//! Trace inventory, provenance and serialization over the shipped models.

mod common;

use std::collections::BTreeMap;

use common::{bundled_models, smallest_case};
use glassgnn::graph::Labels;
use glassgnn::kernels::{layer_seed, sample_neighbors, DenseParams, SageParams};
use glassgnn::model::{predict, PredictOptions};
use glassgnn::trace::{LayerKind, OpKind, Symbol};
use glassgnn::{Graph, Target, Trace};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn stage(trace: &Trace, layer: usize, symbol: Symbol) -> u32 {
    let id = trace.symbol_lookup(layer, symbol).unwrap()[0];
    trace.step(id).unwrap().stage_order
}

#[test]
fn every_shipped_model_has_a_complete_trace() {
    for b in bundled_models() {
        let (g, target) = smallest_case(&b);
        let (p, trace) = predict(&b.model, &g, &target, &PredictOptions::default()).unwrap();
        trace.check_completeness().unwrap();
        assert_eq!(trace.final_logits().unwrap(), &p.logits[..]);
        assert_eq!(trace.layers.len(), b.model.layer_count());

        for layer in &trace.layers {
            let l = layer.index;
            // every in-scope node carries the required symbols
            for &sym in layer.kind.required_node_symbols() {
                let mut nodes: Vec<usize> = layer
                    .steps
                    .iter()
                    .filter(|s| s.symbol == sym)
                    .filter_map(|s| s.node_scope)
                    .collect();
                nodes.sort_unstable();
                assert_eq!(nodes, (0..trace.node_count()).collect::<Vec<_>>(), "{sym} in layer {l}");
            }
            // symbols partition the layer's steps
            let covered: usize = Symbol::ALL.iter().map(|&s| trace.symbol_lookup(l, s).unwrap().len()).sum();
            assert_eq!(covered, layer.steps.len());

            let order = |syms: &[Symbol]| {
                let stages: Vec<u32> = syms.iter().map(|&s| stage(&trace, l, s)).collect();
                assert!(stages.windows(2).all(|w| w[0] < w[1]), "{:?} in {}: {stages:?}", syms, layer.name);
            };
            match layer.kind {
                LayerKind::Gcn => order(&[Symbol::Coeff, Symbol::Agg, Symbol::Wx, Symbol::BiasAdd, Symbol::Activation]),
                LayerKind::Gat => order(&[Symbol::Wx, Symbol::Eij, Symbol::Alpha, Symbol::Agg, Symbol::Activation]),
                LayerKind::Sage => {
                    order(&[Symbol::Sample, Symbol::Mean, Symbol::WxNeigh, Symbol::Agg, Symbol::BiasAdd, Symbol::Activation]);
                    assert_eq!(stage(&trace, l, Symbol::WxSelf), stage(&trace, l, Symbol::WxNeigh));
                }
                LayerKind::Mlp => {
                    let last = if trace.symbol_lookup(l, Symbol::Logits).unwrap().is_empty() {
                        Symbol::BiasAdd
                    } else {
                        Symbol::Logits
                    };
                    order(&[Symbol::Wx, last]);
                }
                _ => {}
            }
        }
    }
}

#[test]
fn attention_rows_sum_to_one_in_shipped_traces() {
    for b in bundled_models().into_iter().filter(|b| b.entry.variant == glassgnn::Variant::Gat) {
        let (g, target) = smallest_case(&b);
        let (_, trace) = predict(&b.model, &g, &target, &PredictOptions::default()).unwrap();
        for step in trace.steps().filter(|s| s.symbol == Symbol::Alpha) {
            let sum: f64 = step.values.iter().map(|&v| f64::from(v)).sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn provenance_recomputes_from_the_serialized_trace() {
    let mut rng = StdRng::seed_from_u64(2024);
    let mut traces = Vec::new();
    for b in bundled_models() {
        let (g, target) = smallest_case(&b);
        let (_, trace) = predict(&b.model, &g, &target, &PredictOptions::with_seed(3)).unwrap();
        traces.push(Trace::from_json(&trace.to_json().unwrap()).unwrap());
    }
    let mut checked = 0;
    while checked < 1000 {
        let t = &traces[rng.random_range(0..traces.len())];
        let step = &t.layers.iter().flat_map(|l| &l.steps).nth(rng.random_range(0..t.step_count())).unwrap();
        let cell = rng.random_range(0..step.values.len().max(1));
        match t.cell_provenance(step.step_id, cell) {
            Ok(p) => {
                let again = p.recompute(t).unwrap();
                let stored = f64::from(step.values[cell]);
                assert!(
                    (again - stored).abs() <= 1e-6 * stored.abs().max(1.0),
                    "step {} cell {cell}: {again} vs {stored}",
                    step.step_id
                );
                checked += 1;
            }
            Err(e) => assert!(matches!(e.name(), "InputStepHasNoProvenance" | "IndexOutOfRange")),
        }
    }
}

#[test]
fn gcn_aggregation_provenance_lists_the_normalized_neighborhood() {
    let b = bundled_models()
        .into_iter()
        .find(|b| b.entry.variant == glassgnn::Variant::Gcn && b.entry.dataset == "karate")
        .unwrap();
    let g = &b.dataset.graphs[0];
    let (_, trace) = predict(&b.model, g, &Target::Node { node: 33 }, &PredictOptions::default()).unwrap();
    for &id in &trace.symbol_lookup(0, Symbol::Agg).unwrap() {
        let i = trace.step(id).unwrap().node_scope.unwrap();
        let prov = trace.cell_provenance(id, 0).unwrap();
        assert_eq!(prov.op_kind, OpKind::WeightedSum);
        assert_eq!(prov.terms.len(), g.degree_with_self_loop(i).unwrap());
        let members = g.closed_neighborhood(i).unwrap();
        for (t, &j) in prov.terms.iter().zip(&members) {
            let want = 1.0 / ((g.degree_with_self_loop(i).unwrap() * g.degree_with_self_loop(j).unwrap()) as f64).sqrt();
            assert_eq!(t.coefficient, f64::from(want as f32));
        }
        let (nodes, coefs) = trace.neighborhood_highlight(0, i).unwrap();
        assert_eq!(nodes, members);
        for (&c, &j) in coefs.iter().zip(&members) {
            assert_eq!(c, g.gcn_coefficient(i, j).unwrap() as f32);
        }
    }
    let act = trace.symbol_lookup(1, Symbol::Activation).unwrap()[0];
    let prov = trace.cell_provenance(act, 0).unwrap();
    assert_eq!(prov.op_kind, OpKind::MaxZero);
    assert_eq!(prov.terms.len(), 1);

    assert_eq!(trace.symbol_lookup(0, Symbol::B).unwrap().len(), 1);
    assert!(trace.symbol_lookup(0, Symbol::Alpha).unwrap().is_empty());
    assert_eq!(trace.symbol_lookup(99, Symbol::B).unwrap_err().name(), "UnknownLayer");
    let w = trace.symbol_lookup(0, Symbol::W).unwrap()[0];
    assert_eq!(trace.cell_provenance(w, 0).unwrap_err().name(), "InputStepHasNoProvenance");
    assert_eq!(trace.cell_provenance(u32::MAX, 0).unwrap_err().name(), "UnknownStep");
    assert_eq!(trace.neighborhood_highlight(0, 34).unwrap_err().name(), "UnknownNode");
}

#[test]
fn gat_layer_lookup_has_one_alpha_step_per_node() {
    let b = bundled_models()
        .into_iter()
        .find(|b| b.entry.variant == glassgnn::Variant::Gat && b.entry.dataset == "karate")
        .unwrap();
    let g = &b.dataset.graphs[0];
    let (_, trace) = predict(&b.model, g, &Target::Node { node: 0 }, &PredictOptions::default()).unwrap();
    assert_eq!(trace.symbol_lookup(0, Symbol::Alpha).unwrap().len(), 34);
    let (_, coefs) = trace.neighborhood_highlight(1, 0).unwrap();
    let sum: f64 = coefs.iter().map(|&c| f64::from(c)).sum();
    assert!((sum - 1.0).abs() <= 1e-6);
}

#[test]
fn sage_hub_highlight_lists_sample_and_self() {
    let edges: Vec<(usize, usize)> = (1..=50).map(|j| (0, j)).collect();
    let g = Graph::build(vec![vec![1.0, 0.5]; 51], &edges, Labels::default()).unwrap();
    let spec = glassgnn::ModelSpec {
        variant: glassgnn::Variant::Sage,
        task: glassgnn::Task::NodeClassification,
        gnn_layers: vec![[2, 2]],
        head: glassgnn::model::Head::PerNodeMlp,
        mlp_layers: vec![[2, 2]],
        leaky_slope: None,
        sample_size: Some(25),
    };
    let mut bundle = glassgnn::WeightBundle {
        format_version: 1,
        spec: spec.clone(),
        dataset_id: "synthetic".into(),
        parameters: Vec::new(),
        training_metadata: BTreeMap::new(),
    };
    for (name, shape) in spec.expected_parameters() {
        let n = shape.iter().product();
        bundle.parameters.push(glassgnn::model::NamedTensor {
            name,
            shape,
            values: vec![0.25; n],
        });
    }
    let model = glassgnn::model::assemble(&spec, &bundle).unwrap();
    let (_, trace) = predict(&model, &g, &Target::Node { node: 0 }, &PredictOptions::with_seed(9)).unwrap();
    let seed = trace.layers[0].sample_seed.unwrap();
    assert_eq!(seed, layer_seed(9, 0));
    let (nodes, coefs) = trace.neighborhood_highlight(0, 0).unwrap();
    assert_eq!(nodes.len(), 26);
    let mut want = sample_neighbors(&g, 0, 25, seed).unwrap();
    want.push(0);
    assert_eq!(nodes, want);
    assert!(coefs[..25].iter().all(|&c| c == 1.0 / 25.0));
    let _ = (DenseParams::new, SageParams::new);
}

#[test]
fn serialization_round_trips_and_is_deterministic() {
    for b in bundled_models() {
        let (g, target) = smallest_case(&b);
        let (p1, t1) = predict(&b.model, &g, &target, &PredictOptions::with_seed(5)).unwrap();
        let (p2, t2) = predict(&b.model, &g, &target, &PredictOptions::with_seed(5)).unwrap();
        let (j1, j2) = (t1.to_json().unwrap(), t2.to_json().unwrap());
        assert_eq!(j1, j2);
        assert_eq!(p1, p2);
        assert_eq!(t1.trace_id, p1.trace_id);
        let parsed = Trace::from_json(&j1).unwrap();
        assert_eq!(parsed, t1);
        assert_eq!(parsed.to_json().unwrap(), j1);
    }
}

#[test]
fn mutag_trace_validates_against_the_published_schema() {
    let schema: serde_json::Value = serde_json::from_slice(
        &std::fs::read(common::data_dir().join("schema/trace.schema.json")).unwrap(),
    )
    .unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    for b in bundled_models() {
        let (g, target) = if b.entry.dataset == "mutag" {
            (b.dataset.graphs[0].clone(), Target::Graph)
        } else {
            smallest_case(&b)
        };
        let (_, trace) = predict(&b.model, &g, &target, &PredictOptions::default()).unwrap();
        let doc: serde_json::Value = serde_json::from_slice(&trace.to_json().unwrap()).unwrap();
        let errors: Vec<String> = validator.iter_errors(&doc).map(|e| e.to_string()).take(3).collect();
        assert!(errors.is_empty(), "{}: {errors:?}", b.entry.bundle_path.display());
    }
}

#[test]
fn damaged_traces_are_rejected() {
    let b = &bundled_models()[0];
    let (g, target) = smallest_case(b);
    let (_, trace) = predict(&b.model, &g, &target, &PredictOptions::default()).unwrap();
    let mut broken = trace.clone();
    let layer = &mut broken.layers[0];
    let pos = layer.steps.iter().position(|s| s.symbol == Symbol::Activation).unwrap();
    layer.steps.remove(pos);
    assert_eq!(broken.to_json().unwrap_err().name(), "IncompleteTrace");

    let mut text = String::from_utf8(trace.to_json().unwrap()).unwrap();
    text = text.replacen("\"schema_version\":1", "\"schema_version\":7", 1);
    assert_eq!(Trace::from_json(text.as_bytes()).unwrap_err().name(), "UnsupportedVersion");
}
