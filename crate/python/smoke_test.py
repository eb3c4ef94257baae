"""Smoke test for the glassgnn_py extension.

Build and install it first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/glassgnn_py-*.whl
    python python/smoke_test.py
"""

import json
import math
import os
import sys
from pathlib import Path

import glassgnn_py as gg

DATA = Path(os.environ.get("GLASSGNN_DATA", Path(__file__).resolve().parent.parent / "data"))


def check(cond, msg):
    if not cond:
        print(f"FAIL {msg}")
        sys.exit(1)
    print(f"ok   {msg}")


def main():
    models = gg.list_models(DATA / "bundles")
    check(len(models) == 9, "nine shipped models")
    check(
        any(m["variant"] == "gcn" and m["task"] == "graph_classification" and m["dataset"] == "mutag" for m in models),
        "catalog has gcn/graph_classification/mutag",
    )

    mutag = gg.load_dataset(DATA / "datasets", "mutag")
    model = gg.Model.load(DATA / "bundles" / "gcn_graph_classification_mutag.json")
    pred, trace = gg.predict(model, mutag, {"graph_index": 0})
    check(abs(sum(pred.probabilities) - 1.0) < 1e-9, "probabilities sum to one")
    check(pred.trace_id == trace.trace_id and len(pred.trace_id) == 16, "trace id is shared")
    check(trace.final_logits() == pred.logits, "trace ends in the predicted logits")

    agg = trace.symbol_lookup(0, "agg")
    check(len(agg) == trace.node_count, "one aggregation step per node")
    prov = trace.cell_provenance(agg[0], 0)
    stored = trace.step(agg[0])["values"][0]
    check(math.isclose(trace.recompute_cell(agg[0], 0), stored, rel_tol=1e-6, abs_tol=1e-6), "provenance recomputes")
    check(len(prov["terms"]) > 0, "provenance has terms")

    again = gg.Trace.from_json(trace.to_json())
    check(again.to_json() == trace.to_json(), "trace JSON round-trips")

    karate = gg.load_dataset(DATA / "datasets", "karate")
    gat = gg.Model.load(DATA / "bundles" / "gat_node_classification_karate.json")
    g = karate.graph(0)
    pred, trace = gat.predict(g, node=33)
    for step in trace.symbol_lookup(0, "alpha"):
        check_sum = sum(trace.step(step)["values"])
        if abs(check_sum - 1.0) > 1e-6:
            check(False, f"alpha step {step} sums to {check_sum}")
    check(True, "attention rows sum to one")
    nodes, coefs = trace.neighborhood_highlight(0, 33)
    check(len(nodes) == len(g.neighbors(33)) + 1, "highlight covers the closed neighborhood")

    upload = gg.Graph.from_json(json.dumps({
        "nodes": [{"id": "a", "features": [1, 0, 0, 0, 0, 0, 0]}, {"id": "b", "features": [0, 1, 0, 0, 0, 0, 0]}],
        "edges": [["a", "b"]],
    }))
    pred, _ = model.predict(upload)
    check(pred.processed_node_count == 2, "uploaded graph runs")

    try:
        gg.Model.load(DATA / "bundles" / "gcn_link_prediction_twitch.json").predict(
            gg.load_dataset(DATA / "datasets", "twitch").graph(0), edge=(5, 5)
        )
        check(False, "self-link rejected")
    except gg.GlassGnnError as e:
        check(e.args[0] == "InvalidTarget", "self-link rejected with InvalidTarget")

    print("smoke test passed")


if __name__ == "__main__":
    main()
