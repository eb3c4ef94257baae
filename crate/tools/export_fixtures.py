#!/usr/bin/env python3
"""Generate the bundled dataset fixtures, weight bundles and golden logits.

This is the training-side exporter. It builds the three datasets, trains the
3 variant x 3 task model zoo with PyTorch Geometric, writes one JSON weight
bundle per model, and records reference logits (float64 forward pass of the
framework layers over the float32-rounded weights) for the engine's golden
tests.

Usage: python3 tools/export_fixtures.py [--out data]
"""

import argparse
import hashlib
import json
import os
import random

import networkx as nx
import numpy as np
import torch
import torch.nn.functional as F
import torch_geometric
from torch_geometric.datasets import KarateClub
from torch_geometric.nn import GATConv, GCNConv, SAGEConv, global_mean_pool
from torch_geometric.utils import k_hop_subgraph, to_undirected

FORMAT_VERSION = 1
ATOMS = ["C", "N", "O", "F", "I", "Cl", "Br"]
SAMPLE_SIZE = 25
SUBGRAPH_THRESHOLD = 500
TWITCH_NODES = 2000
TWITCH_FEATURES = 8


def f32(v):
    """Shortest decimal that round-trips to the same float32."""
    return float(np.format_float_positional(np.float32(v), unique=True, trim="-"))


# ---------------------------------------------------------------- datasets


def make_molecule(rng, size_hint):
    """Random organic-looking molecule; label 1 iff it carries a nitro group."""
    atoms, edges = [], []

    def add(a, parent=None):
        atoms.append(a)
        idx = len(atoms) - 1
        if parent is not None:
            edges.append((parent, idx))
        return idx

    ring = [add(0) for _ in range(6)]
    for k in range(6):
        edges.append((ring[k], ring[(k + 1) % 6]))
    carbons = list(ring)
    if size_hint > 14 and rng.random() < 0.6:
        # fused second ring
        a, b = ring[0], ring[1]
        extra = [add(0) for _ in range(4)]
        edges.extend([(a, extra[0]), (extra[0], extra[1]), (extra[1], extra[2]),
                      (extra[2], extra[3]), (extra[3], b)])
        carbons += extra
    nitro = rng.random() < 0.5
    free = [c for c in carbons if sum(c in e for e in edges) < 3]
    rng.shuffle(free)
    if nitro and free:
        n = add(1, free.pop())
        add(2, n)
        add(2, n)
    while len(atoms) < size_hint and free:
        site = free.pop()
        kind = rng.choice(["amine", "hydroxyl", "halogen", "methyl"])
        if kind == "amine":
            add(1, site)
        elif kind == "hydroxyl":
            add(2, site)
        elif kind == "halogen":
            add(int(rng.choice([3, 4, 5, 6])), site)
        else:
            m = add(0, site)
            if rng.random() < 0.5:
                add(2, m)
    label = int(nitro)
    if rng.random() < 0.08:
        label = 1 - label
    return atoms, edges, label


def build_mutag(out_dir, rng):
    graphs = []
    # A five-node fragment (nitro-ethane shape) keeps the smallest case small.
    graphs.append(([0, 0, 1, 2, 2], [(0, 1), (1, 2), (2, 3), (2, 4)], 1))
    for _ in range(59):
        graphs.append(make_molecule(rng, int(rng.integers(10, 27))))
    order = list(range(len(graphs)))
    rng.shuffle(order)
    graphs = [graphs[k] for k in order]

    os.makedirs(out_dir, exist_ok=True)
    a_lines, ind_lines, lab_lines, glab_lines = [], [], [], []
    offset = 0
    for gi, (atoms, edges, label) in enumerate(graphs):
        for a in atoms:
            ind_lines.append(str(gi + 1))
            lab_lines.append(str(a))
        for (u, v) in edges:
            a_lines.append(f"{u + offset + 1}, {v + offset + 1}")
            a_lines.append(f"{v + offset + 1}, {u + offset + 1}")
        glab_lines.append(str(label))
        offset += len(atoms)
    write_lines(os.path.join(out_dir, "A.txt"), a_lines)
    write_lines(os.path.join(out_dir, "graph_indicator.txt"), ind_lines)
    write_lines(os.path.join(out_dir, "node_labels.txt"), lab_lines)
    write_lines(os.path.join(out_dir, "graph_labels.txt"), glab_lines)
    return [to_graph(np.eye(len(ATOMS))[atoms], edges, label) for atoms, edges, label in graphs]


def build_karate(out_dir):
    data = KarateClub()[0]
    ei = data.edge_index.t().tolist()
    edges = sorted({(min(u, v), max(u, v)) for u, v in ei})
    os.makedirs(out_dir, exist_ok=True)
    write_lines(os.path.join(out_dir, "nodes.txt"),
                [f"{i} {int(y)}" for i, y in enumerate(data.y.tolist())])
    write_lines(os.path.join(out_dir, "edges.txt"), [f"{u} {v}" for u, v in edges])
    return to_graph(np.eye(34), edges, None, node_labels=data.y.numpy())


def build_twitch(out_dir, rng):
    g = nx.powerlaw_cluster_graph(TWITCH_NODES, 3, 0.3, seed=11)
    n = g.number_of_nodes()
    labels = (rng.random(n) < 0.45).astype(int)
    raw = rng.normal(size=(n, TWITCH_FEATURES)) * 0.6
    raw[:, 0] += np.where(labels == 1, 1.0, -1.0)
    raw[:, 1] += np.array([g.degree(v) for v in range(n)]) / 20.0
    adj = nx.to_scipy_sparse_array(g, nodelist=range(n), format="csr")
    deg = np.asarray(adj.sum(axis=1)).ravel()
    smooth = (adj @ raw) / deg[:, None]
    feats = 0.5 * raw + 0.5 * smooth
    feats = np.vectorize(f32)(feats)
    edges = sorted((min(u, v), max(u, v)) for u, v in g.edges())
    os.makedirs(out_dir, exist_ok=True)
    write_lines(os.path.join(out_dir, "edges.csv"),
                ["from,to"] + [f"{u},{v}" for u, v in edges])
    write_lines(os.path.join(out_dir, "features.csv"),
                ["id," + ",".join(f"f{d}" for d in range(TWITCH_FEATURES))]
                + [f"{i}," + ",".join(repr(float(x)) for x in feats[i]) for i in range(n)])
    write_lines(os.path.join(out_dir, "target.csv"),
                ["id,mature"] + [f"{i},{labels[i]}" for i in range(n)])
    return to_graph(feats, edges, None, node_labels=labels)


def to_graph(x, edges, label, node_labels=None):
    if edges:
        ei = torch.tensor(edges, dtype=torch.long).t()
        ei = to_undirected(ei, num_nodes=len(x))
    else:
        ei = torch.zeros((2, 0), dtype=torch.long)
    d = torch_geometric.data.Data(x=torch.tensor(np.asarray(x), dtype=torch.float32), edge_index=ei)
    d.graph_label = label
    d.node_labels = None if node_labels is None else torch.tensor(node_labels)
    d.edges = [tuple(e) for e in edges]
    return d


def write_lines(path, lines):
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------------------ models


class Net(torch.nn.Module):
    def __init__(self, variant, task, dims, mlp_dims):
        super().__init__()
        self.variant, self.task = variant, task
        convs = []
        for (i, o) in dims:
            if variant == "gcn":
                convs.append(GCNConv(i, o))
            elif variant == "gat":
                convs.append(GATConv(i, o, heads=1, bias=False, negative_slope=0.2))
            else:
                convs.append(SAGEConv(i, o, aggr="mean", root_weight=True, bias=True))
        self.convs = torch.nn.ModuleList(convs)
        self.mlp = torch.nn.ModuleList(torch.nn.Linear(i, o) for (i, o) in mlp_dims)

    def embed(self, x, edge_index, sampled=None):
        for li, conv in enumerate(self.convs):
            ei = edge_index if sampled is None else sampled[li]
            x = F.relu(conv(x, ei))
        return x

    def head(self, h, batch=None):
        for k, lin in enumerate(self.mlp):
            h = lin(h)
            if k + 1 < len(self.mlp):
                h = F.relu(h)
        return h

    def forward_graph(self, x, ei, batch, sampled=None):
        return self.head(global_mean_pool(self.embed(x, ei, sampled), batch))

    def forward_nodes(self, x, ei, sampled=None):
        return self.head(self.embed(x, ei, sampled))


def sample_edge_index(num_nodes, edge_index, rng, size=SAMPLE_SIZE):
    """Per-node uniform neighbour sample without replacement; returns edge_index
    restricted to sampled (j -> i) messages plus the explicit lists for hubs."""
    nbrs = [[] for _ in range(num_nodes)]
    for u, v in edge_index.t().tolist():
        nbrs[v].append(u)
    src, dst, recorded = [], [], {}
    for i in range(num_nodes):
        ns = sorted(set(nbrs[i]))
        if len(ns) > size:
            ns = sorted(rng.choice(ns, size=size, replace=False).tolist())
            recorded[i] = ns
        src += ns
        dst += [i] * len(ns)
    return torch.tensor([src, dst], dtype=torch.long), recorded


def train(model, variant, task, data, rng, epochs):
    opt = torch.optim.Adam(model.parameters(), lr=0.01, weight_decay=5e-4)
    model.train()
    for _ in range(epochs):
        opt.zero_grad()
        if task == "graph_classification":
            loss = 0.0
            for d in data:
                out = model.forward_graph(d.x, d.edge_index, torch.zeros(d.num_nodes, dtype=torch.long))
                loss = loss + F.cross_entropy(out, torch.tensor([d.graph_label]))
            loss = loss / len(data)
        elif task == "node_classification":
            out = model.forward_nodes(data.x, data.edge_index)
            loss = F.cross_entropy(out, data.node_labels.long())
        else:
            h = model.embed(data.x, data.edge_index)
            pos = data.edge_index
            neg = torch.randint(0, data.num_nodes, pos.shape)
            ps = (h[pos[0]] * h[pos[1]]).sum(-1)
            ns = (h[neg[0]] * h[neg[1]]).sum(-1)
            loss = F.binary_cross_entropy_with_logits(ps, torch.ones_like(ps)) + \
                F.binary_cross_entropy_with_logits(ns, torch.zeros_like(ns))
        loss.backward()
        opt.step()
    model.eval()


def round_params(model):
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.tensor(np.vectorize(f32)(p.detach().numpy()), dtype=p.dtype))


def export_parameters(model, variant):
    params = []

    def put(name, t):
        arr = t.detach().double().numpy()
        params.append({"name": name, "shape": list(arr.shape),
                       "values": [f32(v) for v in arr.ravel()]})

    for li, conv in enumerate(model.convs):
        if variant == "gcn":
            put(f"gnn.{li}.W", conv.lin.weight)
            put(f"gnn.{li}.b", conv.bias)
        elif variant == "gat":
            put(f"gnn.{li}.W", conv.lin.weight)
            a = torch.cat([conv.att_dst.reshape(-1), conv.att_src.reshape(-1)])
            put(f"gnn.{li}.a", a)
        else:
            put(f"gnn.{li}.W_self", conv.lin_r.weight)
            put(f"gnn.{li}.W_neigh", conv.lin_l.weight)
            put(f"gnn.{li}.b", conv.lin_l.bias)
    for k, lin in enumerate(model.mlp):
        put(f"mlp.{k}.W", lin.weight)
        put(f"mlp.{k}.b", lin.bias)
    return params


MODEL_ZOO = [
    # (task, dataset, gnn dims, mlp dims, head)
    ("graph_classification", "mutag", [(7, 8), (8, 8)], [(8, 8), (8, 2)], "pool_then_mlp"),
    ("node_classification", "karate", [(34, 8), (8, 4)], [(4, 4)], "per_node_mlp"),
    ("link_prediction", "twitch", [(TWITCH_FEATURES, 16), (16, 8)], [], "dot_product"),
]
VARIANTS = ["gcn", "gat", "sage"]


def golden_cases(model, variant, task, dataset, data, rng):
    cases = []
    model = model.double()
    if isinstance(data, list):
        data = [d.clone() for d in data]
        for d in data:
            d.x = d.x.double()
    else:
        data = data.clone()
        data.x = data.x.double()
    with torch.no_grad():
        if task == "graph_classification":
            for gi in range(5):
                d = data[gi]
                sampled, recorded = sampled_for(variant, d.num_nodes, d.edge_index, model, rng)
                out = model.forward_graph(d.x, d.edge_index, torch.zeros(d.num_nodes, dtype=torch.long), sampled)
                cases.append(case({"graph_index": gi}, {"kind": "graph"}, d.num_nodes, out[0], recorded, variant))
        elif task == "node_classification":
            for node in [0, 5, 16, 33]:
                sampled, recorded = sampled_for(variant, data.num_nodes, data.edge_index, model, rng)
                out = model.forward_nodes(data.x, data.edge_index, sampled)
                cases.append(case({"node": node}, {"kind": "node", "node": node},
                                  data.num_nodes, out[node], recorded, variant))
        else:
            picks = []
            edges = [tuple(int(x) for x in e) for e in data.edges]
            for k in rng.choice(len(edges), size=3, replace=False):
                picks.append(tuple(int(v) for v in edges[k]))
            edge_set = set(edges)
            while True:
                u, v = (int(x) for x in rng.choice(data.num_nodes, size=2, replace=False))
                if (min(u, v), max(u, v)) not in edge_set:
                    picks.append((u, v))
                    break
            # hub edge, so the sample lists matter for SAGE
            hub = int(np.argmax(np.bincount(data.edge_index[0].numpy())))
            hub_edge = next(e for e in edges if hub in e)
            picks.append(tuple(int(x) for x in hub_edge))
            for (u, v) in picks:
                subset, sub_ei, mapping, _ = k_hop_subgraph(
                    torch.tensor([u, v]), 2, data.edge_index, relabel_nodes=True,
                    num_nodes=data.num_nodes)
                x = data.x[subset]
                sampled, recorded = sampled_for(variant, len(subset), sub_ei, model, rng)
                h = model.embed(x, sub_ei, sampled)
                su, sv = int(mapping[0]), int(mapping[1])
                raw = float((h[su] * h[sv]).sum())
                prob = 1.0 / (1.0 + np.exp(-raw))
                # back to external node ids
                ids = subset.tolist()
                recorded = [{str(ids[i]): [str(ids[j]) for j in ns] for i, ns in layer.items()}
                            for layer in recorded] if recorded is not None else None
                c = case({"edge": [u, v]}, {"kind": "link", "pair": [u, v]}, len(subset),
                         torch.tensor([raw, 0.0]), recorded, variant, remap=False)
                c["raw_score"] = raw
                c["probability"] = prob
                cases.append(c)
    return cases


def sampled_for(variant, num_nodes, edge_index, model, rng):
    if variant != "sage":
        return None, None
    sampled, recorded = [], []
    for _ in model.convs:
        ei, rec = sample_edge_index(num_nodes, edge_index, rng)
        sampled.append(ei)
        recorded.append(rec)
    return sampled, recorded


def case(selector, target, processed, logits, recorded, variant, remap=True):
    c = {"selector": selector, "target": target, "processed_node_count": int(processed),
         "logits": [float(v) for v in logits.tolist()]}
    if variant == "sage":
        c["seed"] = 7
        if remap:
            recorded = [{str(i): [str(j) for j in ns] for i, ns in layer.items()} for layer in recorded]
        c["sampled_neighbors"] = recorded
    return c


def sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    args = ap.parse_args()
    out = args.out
    torch.manual_seed(0)
    random.seed(0)
    rng = np.random.default_rng(2024)

    ds_dir = os.path.join(out, "datasets")
    datasets = {
        "mutag": build_mutag(os.path.join(ds_dir, "mutag"), rng),
        "karate": build_karate(os.path.join(ds_dir, "karate")),
        "twitch": build_twitch(os.path.join(ds_dir, "twitch"), rng),
    }
    manifest_lines = []
    for name in ["karate", "mutag", "twitch"]:
        d = os.path.join(ds_dir, name)
        for f in sorted(os.listdir(d)):
            manifest_lines.append(f"{sha256(os.path.join(d, f))}  {name}/{f}")
    write_lines(os.path.join(ds_dir, "MANIFEST"), manifest_lines)

    bundle_dir = os.path.join(out, "bundles")
    golden_dir = os.path.join(out, "golden")
    os.makedirs(bundle_dir, exist_ok=True)
    os.makedirs(golden_dir, exist_ok=True)
    entries = []
    for (task, dataset, dims, mlp_dims, head) in MODEL_ZOO:
        for variant in VARIANTS:
            torch.manual_seed(100 * VARIANTS.index(variant) + len(entries))
            model = Net(variant, task, dims, mlp_dims)
            epochs = {"graph_classification": 60, "node_classification": 200, "link_prediction": 100}[task]
            train(model, variant, task, datasets[dataset], rng, epochs)
            round_params(model)
            spec = {"variant": variant, "task": task, "gnn_layers": [list(d) for d in dims],
                    "head": head, "mlp_layers": [list(d) for d in mlp_dims]}
            if variant == "gat":
                spec["leaky_slope"] = 0.2
            if variant == "sage":
                spec["sample_size"] = SAMPLE_SIZE
            params = export_parameters(model, variant)
            stem = f"{variant}_{task}_{dataset}"
            bundle = {
                "format_version": FORMAT_VERSION,
                "spec": spec,
                "dataset_id": dataset,
                "parameters": params,
                "training_metadata": {
                    "framework": f"torch_geometric {torch_geometric.__version__}",
                    "torch": torch.__version__,
                    "epochs": str(epochs),
                    "optimizer": "adam lr=0.01 wd=5e-4",
                    "features": {"mutag": "one-hot atom type (7)",
                                 "karate": "one-hot node identity (34)",
                                 "twitch": f"{TWITCH_FEATURES} synthetic account attributes"}[dataset],
                },
            }
            bpath = os.path.join(bundle_dir, stem + ".json")
            with open(bpath, "w") as fh:
                json.dump(bundle, fh, indent=1, sort_keys=False)
                fh.write("\n")
            cases = golden_cases(model, variant, task, dataset, datasets[dataset], rng)
            gpath = os.path.join(golden_dir, stem + ".golden.json")
            with open(gpath, "w") as fh:
                json.dump({"bundle": f"bundles/{stem}.json", "dataset": dataset, "cases": cases}, fh, indent=1)
                fh.write("\n")
            count = sum(int(np.prod(p["shape"])) for p in params)
            entries.append({"bundle": f"bundles/{stem}.json", "golden": f"golden/{stem}.golden.json",
                            "variant": variant, "task": task, "dataset": dataset,
                            "parameter_count": count, "golden_cases": len(cases)})
            print(stem, count, len(cases))
    with open(os.path.join(out, "export_manifest.json"), "w") as fh:
        json.dump({"framework": f"torch_geometric {torch_geometric.__version__}",
                   "torch": torch.__version__, "subgraph_threshold": SUBGRAPH_THRESHOLD,
                   "entries": entries}, fh, indent=1)
        fh.write("\n")


if __name__ == "__main__":
    main()
