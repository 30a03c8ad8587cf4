"""Measured op latencies and the differentiable latency objective.

A lookup table maps (op, in_ch, out_ch, height, width, stride, dilation)
to a median execution time in microseconds, measured on this host with
warm-up runs and an inner loop sized against the timer resolution.  Costs
are strictly positive and every shape the search can query must be present
-- a miss raises, never falls back.

The expected network latency is the keep-probability relaxation of the
pruned-cell sum: cell p of a hyper-cell survives iff the activated depth
edge index is >= p, so its keep probability under depth mask U is
sum_{e >= p} u_e, and the expectation reduces exactly to the discrete
surviving-cell sum when U is one-hot.  The aggregation cell is searched
without a latency constraint, so its cost is reported separately and never
enters the objective; fixed stem/adapter/head costs are likewise excluded.
"""

from __future__ import annotations

import json
import platform
import time
from pathlib import Path

import numpy as np

from . import nn
from .space import AGG_EDGES, CandidateOp, _node_sources, op_dilation
from .tensor import ParamStore, Tensor, TensorError, add, dot_const, log_scalar, scale, weighted_scalar_sum

TABLE_VERSION = 1
_MIN_COST_US = 0.001  # table costs are rounded to 3 decimals and kept positive


class LatencyError(ValueError):
    pass


# --------------------------------------------------------------------------
# Shape plan (pure function of the configuration)


def hc_resolutions(height: int, width: int):
    """Per hyper-cell ((input h, w), (cell h, w)) after the stride-4 stem."""
    h = nn.conv_out_size(nn.conv_out_size(height, 2), 2)
    w = nn.conv_out_size(nn.conv_out_size(width, 2), 2)
    out = []
    for _ in range(3):
        ch, cw = nn.conv_out_size(h, 2), nn.conv_out_size(w, 2)
        out.append(((h, w), (ch, cw)))
        h, w = ch, cw
    return out


def _cell_edge_keys(kind, num_nodes, connectivity, node_ch, catalog, in_res, cell_res):
    keys = []
    for j, sources in enumerate(_node_sources(num_nodes, connectivity)):
        for src in sources:
            stride = 2 if (kind == "reduction" and src < 2) else 1
            hh, ww = in_res if (kind == "reduction" and src < 2) else cell_res
            keys.append([(op, node_ch, node_ch, hh, ww, stride, op_dilation(op)) for op in catalog])
    return keys


def network_plan(config, height: int | None = None, width: int | None = None) -> dict:
    """Latency-table keys for every candidate op of the configured network."""
    height = config.dataset.height if height is None else height
    width = config.dataset.width if width is None else width
    res = hc_resolutions(height, width)
    mult = config.channel_multiplier
    plan = {"hyper_cells": [], "agg": []}
    for s in range(3):
        in_ch = config.initial_channels * mult**s
        out_ch = in_ch * mult
        node_ch = out_ch // config.nodes_per_cell
        in_res, cell_res = res[s]
        plan["hyper_cells"].append({
            "n_cells": config.cells[s],
            "red": _cell_edge_keys("reduction", config.nodes_per_cell, config.cell_connectivity,
                                   node_ch, config.intra_ops, in_res, cell_res),
            "norm": _cell_edge_keys("normal", config.nodes_per_cell, config.cell_connectivity,
                                    node_ch, config.intra_ops, cell_res, cell_res)
            if config.cells[s] > 1 else [],
        })
    tap_ch = [config.initial_channels * mult ** (s + 1) for s in range(3)]
    width_a = config.agg_channels
    src_ch = {"t1": tap_ch[0], "t2": tap_ch[1], "t3": tap_ch[2],
              "n1": width_a, "n2": width_a, "n3": width_a, "n4": width_a}
    src_res = {"t1": res[0][1], "t2": res[1][1], "t3": res[2][1],
               "n1": res[1][1], "n2": res[2][1], "n3": res[2][1], "n4": res[2][1]}
    for src, dst, stride in AGG_EDGES:
        hh, ww = src_res[src]
        plan["agg"].append([
            (op, src_ch[src], width_a, hh, ww, stride, op_dilation(op)) for op in config.agg_ops
        ])
    return plan


def plan_keys(plan: dict):
    keys = set()
    for hc in plan["hyper_cells"]:
        for group in ("red", "norm"):
            for edge in hc[group]:
                keys.update(edge)
    for edge in plan["agg"]:
        keys.update(edge)
    return sorted(keys)


# --------------------------------------------------------------------------
# Table


def _key_str(key) -> str:
    op, cin, cout, h, w, s, d = key
    return f"{op}|{cin}|{cout}|{h}|{w}|{s}|{d}"


def _parse_key(s: str):
    parts = s.split("|")
    if len(parts) != 7:
        raise LatencyError(f"malformed latency key {s!r}")
    return (parts[0], *(int(p) for p in parts[1:]))


class LatencyTable:
    def __init__(self, entries: dict | None = None, metadata: dict | None = None):
        self.entries = dict(entries or {})
        self.metadata = dict(metadata or {})
        for k, v in self.entries.items():
            if not (np.isfinite(v) and v > 0):
                raise LatencyError(f"latency cost for {k} must be positive and finite, got {v}")

    def get(self, key) -> float:
        try:
            return self.entries[key]
        except KeyError:
            raise LatencyError(f"latency table has no entry for {_key_str(key)}") from None

    def costs(self, keys) -> np.ndarray:
        return np.array([self.get(k) for k in keys], dtype=np.float64)

    def __len__(self):
        return len(self.entries)

    def save(self, path) -> Path:
        doc = {
            "version": TABLE_VERSION,
            "metadata": self.metadata,
            "entries": {_key_str(k): round(float(v), 3) for k, v in sorted(self.entries.items())},
        }
        path = Path(path)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "LatencyTable":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise LatencyError(f"latency table is not valid JSON: {e}") from e
        if not isinstance(doc, dict) or doc.get("version") != TABLE_VERSION:
            raise LatencyError(f"unsupported latency table version {doc.get('version')!r}")
        entries = {_parse_key(k): float(v) for k, v in doc.get("entries", {}).items()}
        return cls(entries, doc.get("metadata", {}))


# --------------------------------------------------------------------------
# Benchmarking


def _time_once(fn, inner: int) -> float:
    t0 = time.perf_counter_ns()
    for _ in range(inner):
        fn()
    return (time.perf_counter_ns() - t0) / inner / 1000.0  # microseconds


def measure_op(key, reps: int, warmup: int, rng: np.random.Generator) -> float:
    """Median single-execution time of one candidate op, in microseconds."""
    op_kind, cin, cout, h, w, stride, _ = key
    store = ParamStore()
    op = CandidateOp(store, "bench", op_kind, cin, cout, stride, rng)
    x = Tensor(rng.standard_normal((1, cin, h, w)))

    def run():
        op.forward(x, training=False)

    tick_us = max(time.get_clock_info("perf_counter").resolution * 1e6, 1e-3)
    if tick_us > 1e5:
        raise LatencyError(f"timer resolution too coarse to benchmark: {tick_us} us per tick")
    inner = 1
    first = _time_once(run, inner)
    if first < 10.0 * tick_us:
        inner = min(int(np.ceil(10.0 * tick_us / max(first, 1e-6))), 10000)
    for _ in range(warmup):
        _time_once(run, inner)
    samples = [_time_once(run, inner) for _ in range(reps)]
    return max(round(float(np.median(samples)), 3), _MIN_COST_US)


def bench_table(config, reps: int | None = None, warmup: int | None = None) -> LatencyTable:
    """Measure every op/shape the configured super-network can query."""
    reps = config.bench_reps if reps is None else reps
    warmup = config.bench_warmup if warmup is None else warmup
    if reps < 1:
        raise LatencyError("bench reps must be >= 1")
    keys = plan_keys(network_plan(config))
    rng = np.random.Generator(np.random.PCG64(config.seed))
    entries = {key: measure_op(key, reps, warmup, rng) for key in keys}
    metadata = {
        "host": platform.node(),
        "platform": platform.platform(),
        "reps": reps,
        "warmup": warmup,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config_hash": config.config_hash(),
        "n_entries": len(entries),
    }
    return LatencyTable(entries, metadata)


# --------------------------------------------------------------------------
# Differentiable costs


def cell_latency(masks: list[Tensor], cost_vectors: list[np.ndarray]) -> Tensor:
    """Mask-weighted cost of one cell: sum_e <mask_e, costs_e>."""
    if len(masks) != len(cost_vectors):
        raise LatencyError(f"cell_latency: {len(masks)} masks vs {len(cost_vectors)} cost vectors")
    total = None
    for m, vec in zip(masks, cost_vectors):
        term = dot_const(m, vec)
        total = term if total is None else add(total, term)
    if total is None:
        return Tensor(np.float64(0.0))
    return total


def hypercell_latency(u: Tensor, cell_lats: list[Tensor]) -> Tensor:
    """Keep-probability-weighted latency of one hyper-cell.

    cell_lats[p] is the (differentiable) latency of cell p+1; u is the
    depth-selection mask of length len(cell_lats).  Evaluates to
    sum_e u_e * (sum_{p<=e} lat_p).
    """
    if u.data.shape != (len(cell_lats),):
        raise LatencyError(f"hypercell_latency: mask shape {u.data.shape} vs {len(cell_lats)} cells")
    prefix = []
    run = None
    for lat in cell_lats:
        run = lat if run is None else add(run, lat)
        prefix.append(run)
    return weighted_scalar_sum(u, prefix)


def total_loss(ce: Tensor, latency: Tensor, gamma: float) -> Tensor:
    """Cross-entropy plus gamma * log(latency in microseconds)."""
    if latency.data.shape != ():
        raise LatencyError(f"latency must be scalar, got shape {latency.data.shape}")
    if not latency.data > 0:
        raise LatencyError(f"latency must be positive, got {float(latency.data)}")
    if gamma < 0:
        raise LatencyError("gamma must be >= 0")
    return add(ce, scale(log_scalar(latency), gamma))


class LatencyModel:
    """Pre-resolved cost vectors for one configuration + table pair."""

    def __init__(self, config, table: LatencyTable):
        self.config = config
        self.table = table
        plan = network_plan(config)
        self.hc = []
        for entry in plan["hyper_cells"]:
            self.hc.append({
                "n_cells": entry["n_cells"],
                "red": [table.costs(edge) for edge in entry["red"]],
                "norm": [table.costs(edge) for edge in entry["norm"]],
            })
        self.agg = [table.costs(edge) for edge in plan["agg"]]

    def expected(self, masks) -> Tensor:
        """Differentiable expected latency of the (pruned) cell stack."""
        total = None
        for s, hc in enumerate(self.hc):
            lat_red = cell_latency(masks.red[s], hc["red"])
            cells = [lat_red]
            if hc["n_cells"] > 1:
                lat_norm = cell_latency(masks.norm[s], hc["norm"])
                cells.extend([lat_norm] * (hc["n_cells"] - 1))
            hc_lat = hypercell_latency(masks.hyper[s], cells)
            total = hc_lat if total is None else add(total, hc_lat)
        return total

    def expected_agg(self, masks) -> Tensor:
        """Aggregation-cell expected cost (reporting only, not in the loss)."""
        return cell_latency(masks.agg, self.agg)

    # -- discrete sums ------------------------------------------------------

    def _cell_cost(self, vectors, ops) -> float:
        cost = 0.0
        for vec, op_idx in zip(vectors, ops):
            if op_idx is not None:
                cost += float(vec[op_idx])
        return cost

    def discrete_cells_us(self, arch) -> float:
        total = 0.0
        for s, hc_arch in enumerate(arch.hyper_cells):
            total += self._cell_cost(self.hc[s]["red"], hc_arch.reduction_ops)
            if hc_arch.depth > 1:
                total += (hc_arch.depth - 1) * self._cell_cost(self.hc[s]["norm"], hc_arch.normal_ops)
        return total

    def discrete_agg_us(self, arch) -> float:
        return self._cell_cost(self.agg, arch.aggregation_ops)
