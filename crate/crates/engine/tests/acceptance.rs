//! Acceptance checks for the inference engine. Prints one `PASS`/`FAIL` line
//! per criterion and exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use common::oracle::{bfs_from_edge_csv, gat_naive, gcn_dense, sage_naive};
use common::{bundled_models, close, random_graph, random_matrix, smallest_case, uniform, Bundled};
use glassgnn::dataset::{select_inference_target, Selector};
use glassgnn::kernels::{
    gat_attention, gat_layer_forward, gcn_layer_forward, sage_layer_forward, Activations, DenseParams, GatParams,
    NeighborSampler, SageParams,
};
use glassgnn::model::{load_weight_bundle_file, predict, Model, PredictOptions};
use glassgnn::trace::{LayerKind, NullRecorder, Symbol};
use glassgnn::{Matrix, Target, Task, Trace, Variant};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

fn assert_matches(got: &Matrix, want: &[Vec<f64>], tol: f64, case: usize) {
    for (i, row) in want.iter().enumerate() {
        for (o, &v) in row.iter().enumerate() {
            let g = f64::from(got.get(i, o));
            assert!(close(g, v, tol), "case {case} node {i} dim {o}: {g} vs {v}");
        }
    }
}

fn random_case(rng: &mut StdRng) -> (glassgnn::Graph, usize, usize) {
    let n = rng.random_range(1..=20);
    let (din, dout) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let density = rng.random_range(0.0..0.5);
    (random_graph(rng, n, din, density), din, dout)
}

fn dense_gcn_oracle() -> String {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(101);
    for case in 0..100 {
        let (g, din, dout) = random_case(&mut rng);
        let w = random_matrix(&mut rng, dout, din);
        let b = uniform(&mut rng, dout);
        let p = DenseParams::new(w.clone(), b.clone()).unwrap();
        let out = gcn_layer_forward(&g, &Activations::input(g.features().clone()), &p, &mut NullRecorder::default()).unwrap();
        assert_matches(&out.values, &gcn_dense(&g, &w, &b), 1e-5, case);
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    format!("100 cases in {:.0} ms", elapsed.as_secs_f64() * 1e3)
}

/// Returns the largest deviation of an alpha row sum from 1.
fn gat_cases(rng: &mut StdRng) -> f64 {
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (g, din, dout) = random_case(rng);
        let w = random_matrix(rng, dout, din);
        let a = uniform(rng, 2 * dout);
        let p = GatParams::new(w.clone(), a.clone(), 0.2).unwrap();
        let oracle = gat_naive(&g, &w, &a, f64::from(0.2f32));
        let out = gat_layer_forward(&g, &Activations::input(g.features().clone()), &p, &mut NullRecorder::default()).unwrap();
        assert_matches(&out.values, &oracle.out, 1e-5, case);
        for (i, row) in gat_attention(&g, g.features(), &p).unwrap().iter().enumerate() {
            worst = worst.max((row.view.coefficients.iter().sum::<f64>() - 1.0).abs());
            for (&j, &al) in row.view.members.iter().zip(&row.view.coefficients) {
                let want = oracle.alpha[i].iter().find(|(m, _)| *m == j).unwrap().1;
                assert!((al - want).abs() <= 1e-6, "case {case} alpha[{i}][{j}]: {al} vs {want}");
            }
        }
    }
    worst
}

fn naive_gat_and_sage_oracles() -> String {
    gat_cases(&mut StdRng::seed_from_u64(102));
    let mut rng = StdRng::seed_from_u64(103);
    for case in 0..100 {
        let (g, din, dout) = random_case(&mut rng);
        let ws = random_matrix(&mut rng, dout, din);
        let wn = random_matrix(&mut rng, dout, din);
        let b = uniform(&mut rng, dout);
        let size = rng.random_range(1..=5);
        let seed = rng.random::<u64>();
        let p = SageParams::new(ws.clone(), wn.clone(), b.clone(), size).unwrap();
        let x = Activations::input(g.features().clone());
        let out = sage_layer_forward(&g, &x, &p, &NeighborSampler::Seeded(seed), &mut NullRecorder::default()).unwrap();
        assert_matches(&out.values, &sage_naive(&g, &ws, &wn, &b, size, seed), 1e-5, case);
    }
    "100 GAT + 100 SAGE cases".into()
}

fn attention_normalization(models: &[Bundled]) -> String {
    let mut worst = gat_cases(&mut StdRng::seed_from_u64(102));
    let mut rows = 0;
    for b in models.iter().filter(|b| b.entry.variant == Variant::Gat) {
        for (g, target) in golden_targets(b).into_iter().chain([smallest_case(b)]) {
            let (_, trace) = predict(&b.model, &g, &target, &PredictOptions::default()).unwrap();
            for step in trace.steps().filter(|s| s.symbol == Symbol::Alpha) {
                let sum: f64 = step.values.iter().map(|&v| f64::from(v)).sum();
                worst = worst.max((sum - 1.0).abs());
                rows += 1;
            }
        }
    }
    assert!(worst <= 1e-6, "worst row sum deviation {worst:e}");
    format!("oracle rows and {rows} trace rows, max |sum-1| = {worst:.1e}")
}

fn golden_targets(b: &Bundled) -> Vec<(glassgnn::Graph, Target)> {
    let path = support::data_dir()
        .join("golden")
        .join(b.entry.bundle_path.file_stem().unwrap().to_str().unwrap().to_string() + ".golden.json");
    let golden: Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    golden["cases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| {
            let sel: Selector = serde_json::from_value(c["selector"].clone()).unwrap();
            let (g, t) = select_inference_target(&b.dataset, b.entry.task, sel).unwrap();
            (g.clone(), t)
        })
        .collect()
}

fn permutation_properties(models: &[Bundled]) -> String {
    let mut rng = StdRng::seed_from_u64(104);
    let opts = PredictOptions::default();
    let mut checked = 0;
    let mut worst: f32 = 0.0;
    for b in models.iter().filter(|b| b.entry.variant != Variant::Sage) {
        for k in 0..20 {
            let g = &b.dataset.graphs[k % b.dataset.graphs.len()];
            let mut perm: Vec<usize> = (0..g.node_count()).collect();
            perm.shuffle(&mut rng);
            let pg = g.permute(&perm).unwrap();
            let (t, pt) = match b.entry.task {
                Task::GraphClassification => (Target::Graph, Target::Graph),
                Task::NodeClassification => {
                    let i = rng.random_range(0..g.node_count());
                    (Target::Node { node: i }, Target::Node { node: perm[i] })
                }
                Task::LinkPrediction => {
                    let (u, v) = g.edges()[rng.random_range(0..g.edges().len())];
                    (Target::Link { pair: [u, v] }, Target::Link { pair: [perm[u], perm[v]] })
                }
            };
            let (p, _) = predict(&b.model, g, &t, &opts).unwrap();
            let (q, _) = predict(&b.model, &pg, &pt, &opts).unwrap();
            for (x, y) in p.logits.iter().zip(&q.logits) {
                worst = worst.max((x - y).abs());
            }
            assert!(worst <= 1e-5, "{}: {:?} vs {:?}", b.entry.bundle_path.display(), p.logits, q.logits);
            checked += 1;
        }
    }
    format!("{checked} permutations, max logit change {worst:.1e}")
}

fn golden_logits() -> String {
    let data = support::data_dir();
    let manifest: Value = serde_json::from_slice(&std::fs::read(data.join("export_manifest.json")).unwrap()).unwrap();
    let mut datasets = BTreeMap::new();
    let (mut bundles, mut cases_total, mut worst) = (0, 0, 0.0f64);
    for entry in manifest["entries"].as_array().unwrap() {
        let bundle = load_weight_bundle_file(&data.join(entry["bundle"].as_str().unwrap())).unwrap();
        let model = Model::from_bundle(&bundle).unwrap();
        let golden: Value = serde_json::from_slice(&std::fs::read(data.join(entry["golden"].as_str().unwrap())).unwrap()).unwrap();
        let id = golden["dataset"].as_str().unwrap().to_string();
        let ds = datasets
            .entry(id.clone())
            .or_insert_with(|| glassgnn::dataset::load_dataset(&data.join("datasets"), &id).unwrap());
        let cases = golden["cases"].as_array().unwrap();
        assert!(cases.len() >= 3, "{} has {} cases", entry["bundle"], cases.len());
        for case in cases {
            let sel: Selector = serde_json::from_value(case["selector"].clone()).unwrap();
            let (g, target) = select_inference_target(ds, bundle.spec.task, sel).unwrap();
            let mut opts = PredictOptions::with_seed(case["seed"].as_u64().unwrap_or(0));
            if let Some(s) = case.get("sampled_neighbors") {
                opts.sample_override = Some(serde_json::from_value(s.clone()).unwrap());
            }
            let (p, _) = predict(&model, g, &target, &opts).unwrap();
            let want: Vec<f64> = serde_json::from_value(case["logits"].clone()).unwrap();
            assert_eq!(p.logits.len(), want.len());
            for (got, want) in p.logits.iter().zip(&want) {
                worst = worst.max((f64::from(*got) - want).abs());
            }
            assert!(worst <= 1e-4, "{} {}: {:?} vs {want:?}", entry["bundle"], case["selector"], p.logits);
            cases_total += 1;
        }
        bundles += 1;
    }
    assert!(bundles >= 5);
    format!("{cases_total} cases over {bundles} bundles, max error {worst:.1e}")
}

fn stage(trace: &Trace, layer: usize, symbol: Symbol) -> u32 {
    trace.step(trace.symbol_lookup(layer, symbol).unwrap()[0]).unwrap().stage_order
}

fn trace_completeness(models: &[Bundled]) -> String {
    for b in models {
        let (g, target) = smallest_case(b);
        let (p, trace) = predict(&b.model, &g, &target, &PredictOptions::default()).unwrap();
        trace.check_completeness().unwrap();
        assert_eq!(trace.final_logits().unwrap(), &p.logits[..]);
        for layer in &trace.layers {
            let l = layer.index;
            for &sym in layer.kind.required_node_symbols() {
                let nodes: BTreeSet<usize> = layer.steps.iter().filter(|s| s.symbol == sym).filter_map(|s| s.node_scope).collect();
                assert_eq!(nodes.len(), trace.node_count(), "{} {sym}", layer.name);
            }
            let increasing = |syms: &[Symbol]| {
                let stages: Vec<u32> = syms.iter().map(|&s| stage(&trace, l, s)).collect();
                assert!(stages.windows(2).all(|w| w[0] < w[1]), "{}: {syms:?} at {stages:?}", layer.name);
            };
            match layer.kind {
                LayerKind::Gcn => increasing(&[Symbol::Agg, Symbol::Wx, Symbol::BiasAdd, Symbol::Activation]),
                LayerKind::Gat => increasing(&[Symbol::Wx, Symbol::Alpha, Symbol::Agg, Symbol::Activation]),
                LayerKind::Sage => increasing(&[Symbol::Mean, Symbol::WxNeigh, Symbol::Agg, Symbol::BiasAdd, Symbol::Activation]),
                _ => {}
            }
        }
    }
    format!("{} models on their smallest graphs", models.len())
}

fn provenance_soundness(models: &[Bundled]) -> String {
    let mut rng = StdRng::seed_from_u64(105);
    let traces: Vec<Trace> = models
        .iter()
        .map(|b| {
            let (g, target) = smallest_case(b);
            let (_, t) = predict(&b.model, &g, &target, &PredictOptions::with_seed(7)).unwrap();
            Trace::from_json(&t.to_json().unwrap()).unwrap()
        })
        .collect();
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 1000 {
        let t = &traces[rng.random_range(0..traces.len())];
        let step = t.steps().nth(rng.random_range(0..t.step_count())).unwrap();
        if step.values.is_empty() {
            continue;
        }
        let cell = rng.random_range(0..step.values.len());
        match t.cell_provenance(step.step_id, cell) {
            Ok(p) => {
                let again = p.recompute(t).unwrap();
                let stored = f64::from(step.values[cell]);
                let err = (again - stored).abs() / stored.abs().max(1.0);
                worst = worst.max(err);
                assert!(err <= 1e-6, "step {} cell {cell}: {again} vs {stored}", step.step_id);
                checked += 1;
            }
            Err(e) => assert_eq!(e.name(), "InputStepHasNoProvenance"),
        }
    }
    format!("{checked} cells, max error {worst:.1e}")
}

fn subgraph_correctness(models: &[Bundled]) -> String {
    let link: Vec<&Bundled> = models.iter().filter(|b| b.entry.task == Task::LinkPrediction).collect();
    let g = &link[0].dataset.graphs[0];
    let csv = std::fs::read_to_string(support::data_dir().join("datasets/twitch/edges.csv")).unwrap();
    let mut rng = StdRng::seed_from_u64(106);
    let mut slowest = Duration::ZERO;
    for case in 0..25 {
        let (u, v) = g.edges()[rng.random_range(0..g.edges().len())];
        let start = Instant::now();
        let (sub, _) = g.k_hop_subgraph(&[u, v], 2).unwrap();
        let b = link[case % link.len()];
        let (_, trace) = predict(&b.model, g, &Target::Link { pair: [u, v] }, &PredictOptions::default()).unwrap();
        trace.to_json().unwrap();
        let elapsed = start.elapsed();
        slowest = slowest.max(elapsed);

        let ids = g.node_ids();
        let got: BTreeSet<String> = sub.node_ids().iter().cloned().collect();
        assert_eq!(got, bfs_from_edge_csv(&csv, &[&ids[u], &ids[v]], 2), "seeds {u},{v}");
        assert_eq!(trace.node_count(), sub.node_count());
        assert!(elapsed < Duration::from_secs(1), "seeds {u},{v} took {elapsed:?}");
    }
    format!("25 edges, slowest extraction + trace {:.0} ms", slowest.as_secs_f64() * 1e3)
}

fn determinism(models: &[Bundled]) -> String {
    for b in models {
        let (g, target) = smallest_case(b);
        let opts = PredictOptions::with_seed(9);
        let a = predict(&b.model, &g, &target, &opts).unwrap().1.to_json().unwrap();
        let c = predict(&b.model, &g, &target, &opts).unwrap().1.to_json().unwrap();
        assert!(a == c, "{} differs between runs", b.entry.bundle_path.display());
    }

    let app = support::app(64);
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let requests = [
        ("gcn", "graph", "mutag", json!({"graph_index": 3}), vec!["--graph-index", "3"]),
        ("gat", "node", "karate", json!({"node": 33}), vec!["--node", "33"]),
        ("sage", "link", "twitch", json!({"edge": [25, 1976]}), vec!["--edge", "25,1976"]),
        ("sage", "graph", "mutag", json!({"graph_index": 7}), vec!["--graph-index", "7"]),
    ];
    for (model, task, dataset, target, flags) in requests {
        let out = dir.path().join(format!("{model}_{task}.json"));
        let status = Command::new(env!("CARGO_BIN_EXE_glassgnn"))
            .args(["predict", "--model", model, "--task", task, "--dataset", dataset, "--seed", "11"])
            .args(&flags)
            .arg("--out")
            .arg(&out)
            .arg("--bundle-dir")
            .arg(support::data_dir().join("bundles"))
            .arg("--dataset-dir")
            .arg(support::data_dir().join("datasets"))
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let from_cli = std::fs::read(&out).unwrap();

        let body = json!({"model": model, "task": task, "dataset": dataset, "target": target, "seed": 11});
        let from_service = rt.block_on(async {
            let (_, resp) = support::call(&app, "POST", "/v1/predict", Some(body)).await;
            let id = support::json(&resp)["trace_id"].as_str().unwrap().to_string();
            support::call(&app, "GET", &format!("/v1/trace/{id}"), None).await.1
        });
        assert!(from_cli == from_service, "{model} {task}: CLI and service traces differ");
    }
    format!("{} models twice, 4 requests CLI vs service", models.len())
}

fn main() {
    let models = bundled_models();
    let criteria: Vec<(&str, Box<dyn Fn() -> String + '_>)> = vec![
        ("dense GCN oracle", Box::new(dense_gcn_oracle)),
        ("naive GAT and SAGE oracles", Box::new(naive_gat_and_sage_oracles)),
        ("attention normalization", Box::new(|| attention_normalization(&models))),
        ("permutation invariance and equivariance", Box::new(|| permutation_properties(&models))),
        ("golden logits", Box::new(golden_logits)),
        ("trace completeness and stage order", Box::new(|| trace_completeness(&models))),
        ("provenance soundness", Box::new(|| provenance_soundness(&models))),
        ("subgraph extraction", Box::new(|| subgraph_correctness(&models))),
        ("determinism", Box::new(|| determinism(&models))),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in &criteria {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(payload) => {
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL {name}: {msg}");
                failed += 1;
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
