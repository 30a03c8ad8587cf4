"""Discretizing the relaxed super-network into a concrete architecture.

Derivation rules: per hyper-cell the surviving depth is argmax(beta)+1
(ties break toward the shallower depth), cells past it are pruned, and the
next hyper-cell's second input is rewired to the penultimate survivor (or
to the bridged hyper-cell input when only the reduction cell survives).
Per edge the op is argmax(alpha) with ties toward the lower catalog index;
edges whose winner is the zero op are removed from the graph.

The architecture serializes to a versioned JSON document that is enough to
rebuild and retrain the network from scratch (`DiscreteNetwork`), and the
module names line up with the super-network's so weights can be copied
across for equivalence checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .space import (
    AGG_EDGES,
    AGG_OUTPUT_NODES,
    Adapter,
    AggregationCell,
    CandidateOp,
    ConvUnit,
    SuperNetwork,
    _he_normal,
    _node_sources,
)
from .tensor import ParamStore, Tensor, TensorError, add, concat_channels

ARCH_VERSION = 1


def _slot_name(slot: int) -> str:
    return ("in0", "in1")[slot] if slot < 2 else f"n{slot - 1}"


def edge_layout(num_nodes: int, connectivity: str):
    """Ordered (src_slot, dst_slot) pairs matching Cell edge enumeration."""
    layout = []
    for j, sources in enumerate(_node_sources(num_nodes, connectivity)):
        for src in sources:
            layout.append((src, 2 + j))
    return layout


@dataclass
class HyperCellArch:
    depth: int                       # surviving cells, 1 = reduction only
    n_initial: int
    reduction_ops: list              # per edge: catalog index or None (pruned)
    normal_ops: list | None          # shared by all surviving normal cells


@dataclass
class DerivedArchitecture:
    hyper_cells: list
    aggregation_ops: list            # catalog index per aggregation edge
    space: dict                      # nodes_per_cell, connectivity, catalogs, widths, classes
    provenance: dict

    # ------------------------------------------------------------------ io

    def _cell_edges_json(self, ops, connectivity):
        layout = edge_layout(self.space["nodes_per_cell"], connectivity)
        edges = []
        for (src, dst), op_idx in zip(layout, ops):
            if op_idx is None:
                continue
            edges.append({"src": _slot_name(src), "dst": _slot_name(dst),
                          "op": self.space["intra_ops"][op_idx]})
        return edges

    def to_json_dict(self) -> dict:
        conn = self.space["cell_connectivity"]
        hcs = []
        for hc in self.hyper_cells:
            cells = [{"kind": "reduction", "edges": self._cell_edges_json(hc.reduction_ops, conn)}]
            for _ in range(hc.depth - 1):
                cells.append({"kind": "normal", "edges": self._cell_edges_json(hc.normal_ops, conn)})
            hcs.append({"depth": hc.depth, "n_initial": hc.n_initial, "cells": cells})
        agg_edges = []
        for (src, dst, stride), op_idx in zip(AGG_EDGES, self.aggregation_ops):
            agg_edges.append({"src": src, "dst": dst, "stride": stride,
                              "op": self.space["agg_ops"][op_idx]})
        c0 = self.space["initial_channels"]
        mult = self.space["channel_multiplier"]
        return {
            "version": ARCH_VERSION,
            "stem": {"channels": c0, "strides": [2, 2]},
            "space": dict(self.space),
            "hyper_cells": hcs,
            "aggregation": {"edges": agg_edges},
            "channel_plan": {
                "hc_in": [c0 * mult**s for s in range(3)],
                "hc_out": [c0 * mult ** (s + 1) for s in range(3)],
            },
            "provenance": dict(self.provenance),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DerivedArchitecture":
        if not isinstance(doc, dict) or doc.get("version") != ARCH_VERSION:
            raise TensorError(f"unsupported architecture version {doc.get('version')!r}")
        for key in ("space", "hyper_cells", "aggregation", "provenance"):
            if key not in doc:
                raise TensorError(f"architecture file missing {key!r}")
        space = doc["space"]
        intra = list(space["intra_ops"])
        aggs = list(space["agg_ops"])
        layout = edge_layout(space["nodes_per_cell"], space["cell_connectivity"])
        names = {(_slot_name(s), _slot_name(d)): i for i, (s, d) in enumerate(layout)}

        def parse_cell(cell_doc):
            ops = [None] * len(layout)
            for e in cell_doc["edges"]:
                key = (e["src"], e["dst"])
                if key not in names:
                    raise TensorError(f"architecture edge {key} not in the cell layout")
                if e["op"] not in intra:
                    raise TensorError(f"unknown cell op {e['op']!r}")
                ops[names[key]] = intra.index(e["op"])
            return ops

        hcs = []
        for hc_doc in doc["hyper_cells"]:
            depth = int(hc_doc["depth"])
            n_initial = int(hc_doc["n_initial"])
            if not 1 <= depth <= n_initial + 1:
                raise TensorError(f"architecture depth {depth} outside [1, {n_initial + 1}]")
            cells = hc_doc["cells"]
            if len(cells) != depth or cells[0]["kind"] != "reduction":
                raise TensorError("architecture cells list inconsistent with depth")
            reduction_ops = parse_cell(cells[0])
            normal_ops = parse_cell(cells[1]) if depth > 1 else None
            hcs.append(HyperCellArch(depth, n_initial, reduction_ops, normal_ops))
        if len(hcs) != 3:
            raise TensorError(f"expected 3 hyper-cells, got {len(hcs)}")

        agg_ops = []
        agg_doc = doc["aggregation"]["edges"]
        if len(agg_doc) != len(AGG_EDGES):
            raise TensorError(f"expected {len(AGG_EDGES)} aggregation edges, got {len(agg_doc)}")
        for e, (src, dst, stride) in zip(agg_doc, AGG_EDGES):
            if (e["src"], e["dst"], int(e["stride"])) != (src, dst, stride):
                raise TensorError(f"aggregation edge mismatch: {e}")
            if e["op"] not in aggs:
                raise TensorError(f"unknown aggregation op {e['op']!r}")
            agg_ops.append(aggs.index(e["op"]))
        return cls(hcs, agg_ops, dict(space), dict(doc["provenance"]))

    @classmethod
    def load(cls, path) -> "DerivedArchitecture":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise TensorError(f"architecture file is not valid JSON: {e}") from e
        return cls.from_json_dict(doc)

    def depths(self) -> tuple:
        return tuple(hc.depth for hc in self.hyper_cells)


def space_dict(config) -> dict:
    return {
        "nodes_per_cell": config.nodes_per_cell,
        "cell_connectivity": config.cell_connectivity,
        "intra_ops": list(config.intra_ops),
        "agg_ops": list(config.agg_ops),
        "initial_channels": config.initial_channels,
        "channel_multiplier": config.channel_multiplier,
        "agg_channels": config.agg_channels,
        "classes": config.dataset.classes,
    }


def derive(network: SuperNetwork, provenance: dict | None = None) -> DerivedArchitecture:
    """Discretize the current architecture parameters of a super-network."""
    config = network.config
    zero_idx = config.intra_ops.index("zero") if "zero" in config.intra_ops else None

    def pick_ops(cell):
        ops = []
        for edge in cell.edges:
            a = edge.alpha.data
            if not np.all(np.isfinite(a)):
                raise TensorError(f"non-finite architecture parameter on {cell.prefix}")
            idx = int(np.argmax(a))
            ops.append(None if idx == zero_idx else idx)
        return ops

    hcs = []
    for hc in network.hyper_cells:
        if not np.all(np.isfinite(hc.beta.data)):
            raise TensorError(f"non-finite depth parameter on {hc.prefix}")
        depth = int(np.argmax(hc.beta.data)) + 1
        hcs.append(HyperCellArch(
            depth=depth,
            n_initial=hc.n_normal,
            reduction_ops=pick_ops(hc.reduction),
            normal_ops=pick_ops(hc.normal) if hc.normal is not None else None,
        ))
    agg_ops = []
    for (_, _, _, alpha, _) in network.agg.edges:
        if not np.all(np.isfinite(alpha.data)):
            raise TensorError("non-finite architecture parameter on aggregation edge")
        agg_ops.append(int(np.argmax(alpha.data)))
    prov = {"config_hash": config.config_hash(), "seed": config.seed}
    if provenance:
        prov.update(provenance)
    return DerivedArchitecture(hcs, agg_ops, space_dict(config), prov)


# --------------------------------------------------------------------------
# Standalone discrete network (fresh weights; used for retraining)


class DiscreteCell:
    """One concrete cell: a single op per surviving edge."""

    def __init__(self, store, prefix, kind, num_nodes, in0_ch, in1_ch, node_ch,
                 ops, catalog, connectivity, rng):
        self.prefix = prefix
        self.kind = kind
        self.num_nodes = num_nodes
        self.node_ch = node_ch
        self.pre0 = Adapter(store, f"{prefix}.pre0", in0_ch, node_ch, 1, rng) if in0_ch != node_ch else None
        self.pre1 = Adapter(store, f"{prefix}.pre1", in1_ch, node_ch, 1, rng) if in1_ch != node_ch else None
        self.edges = []
        eidx = 0
        for j, sources in enumerate(_node_sources(num_nodes, connectivity)):
            for src in sources:
                stride = 2 if (kind == "reduction" and src < 2) else 1
                op = None
                if ops[eidx] is not None:
                    kind_name = catalog[ops[eidx]]
                    op = CandidateOp(store, f"{prefix}.e{eidx}.{kind_name}", kind_name,
                                     node_ch, node_ch, stride, rng)
                self.edges.append((src, j, stride, op))
                eidx += 1

    def forward(self, input0: Tensor, input1: Tensor, training: bool) -> Tensor:
        x0 = self.pre0.forward(input0) if self.pre0 is not None else input0
        x1 = self.pre1.forward(input1) if self.pre1 is not None else input1
        slots = [x0, x1]
        for j in range(self.num_nodes):
            val = None
            fallback = None
            for src, dst, stride, op in self.edges:
                if dst != j:
                    continue
                srct = slots[src]
                b, _, h, w = srct.data.shape
                fallback = (b, self.node_ch, nn.conv_out_size(h, stride), nn.conv_out_size(w, stride))
                if op is None:
                    continue
                y = op.forward(srct, training)
                val = y if val is None else add(val, y)
            slots.append(val if val is not None else Tensor(np.zeros(fallback)))
        nodes = slots[2:]
        return nodes[0] if self.num_nodes == 1 else concat_channels(nodes)


class DiscreteNetwork:
    """A derived architecture instantiated with its own (fresh) parameters."""

    def __init__(self, arch: DerivedArchitecture, rng: np.random.Generator | int = 0):
        if isinstance(rng, (int, np.integer)):
            rng = np.random.Generator(np.random.PCG64(int(rng)))
        self.arch = arch
        sp = arch.space
        store = ParamStore()
        self.store = store
        c0 = sp["initial_channels"]
        mult = sp["channel_multiplier"]
        n_nodes = sp["nodes_per_cell"]
        self.stem = [
            ConvUnit(store, "stem.0", 3, c0, 3, 2, 1, False, rng),
            ConvUnit(store, "stem.1", c0, c0, 3, 2, 1, False, rng),
        ]
        self.hyper = []
        for s, hc in enumerate(arch.hyper_cells):
            in_ch = c0 * mult**s
            out_ch = in_ch * mult
            node_ch = out_ch // n_nodes
            prefix = f"hc{s + 1}"
            bridge = Adapter(store, f"{prefix}.bridge", in_ch, out_ch, 2, rng)
            reduction = DiscreteCell(store, f"{prefix}.reduce", "reduction", n_nodes, in_ch, in_ch,
                                     node_ch, hc.reduction_ops, sp["intra_ops"], sp["cell_connectivity"], rng)
            normal = None
            if hc.depth > 1:
                normal = DiscreteCell(store, f"{prefix}.normal", "normal", n_nodes, out_ch, out_ch,
                                      node_ch, hc.normal_ops, sp["intra_ops"], sp["cell_connectivity"], rng)
            self.hyper.append((hc.depth, bridge, reduction, normal))
        tap_ch = [c0 * mult ** (s + 1) for s in range(3)]
        width = sp["agg_channels"]
        ch = {"t1": tap_ch[0], "t2": tap_ch[1], "t3": tap_ch[2],
              "n1": width, "n2": width, "n3": width, "n4": width}
        self.agg_edges = []
        for eidx, ((src, dst, stride), op_idx) in enumerate(zip(AGG_EDGES, arch.aggregation_ops)):
            kind_name = sp["agg_ops"][op_idx]
            op = CandidateOp(store, f"agg.e{eidx}.{kind_name}", kind_name, ch[src], width, stride, rng)
            self.agg_edges.append((src, dst, op))
        fused = width * len(AGG_OUTPUT_NODES)
        self.head_w = store.create("head.w", _he_normal(rng, (sp["classes"], fused, 1, 1), fused))
        self.head_b = store.create("head.b", np.zeros(sp["classes"]))

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        h = x
        for unit in self.stem:
            h = unit.forward(h, training)
        x0 = x1 = h
        taps = []
        for depth, bridge, reduction, normal in self.hyper:
            bridged = bridge.forward(x0)
            c = reduction.forward(x0, x1, training)
            prev2, prev1 = bridged, c
            for _ in range(depth - 1):
                nxt = normal.forward(prev1, prev2, training)
                prev2, prev1 = prev1, nxt
            taps.append(prev1)
            x0, x1 = prev1, prev2
        values = {"t1": taps[0], "t2": taps[1], "t3": taps[2]}
        for src, dst, op in self.agg_edges:
            y = op.forward(values[src], training)
            values[dst] = y if dst not in values else add(values[dst], y)
        fused = concat_channels([values[n] for n in AGG_OUTPUT_NODES])
        logits = nn.add_channel_bias(nn.conv2d(fused, self.head_w), self.head_b)
        return nn.upsample_to(logits, x.data.shape[2], x.data.shape[3])

    def copy_params_from(self, src_store: ParamStore) -> None:
        """Adopt matching-name parameters (and buffers) from a super-network."""
        for name, tensor in self.store.items():
            if name not in src_store:
                raise TensorError(f"source store is missing parameter {name!r}")
            src = src_store[name]
            if src.data.shape != tensor.data.shape:
                raise TensorError(f"parameter {name!r} shape mismatch: {src.data.shape} vs {tensor.data.shape}")
            tensor.data[...] = src.data
