"""Cell-based search space: candidate ops, cells, hyper-cells, aggregation.

Network layout: a two-conv stem (overall stride 4), three hyper-cells
(each one reduction cell followed by n normal cells, so tap strides come
out at 8/16/32 relative to the input), an aggregation cell fusing the
three taps at the deepest resolution, and a 1x1-conv + bilinear-upsample
prediction head.

A cell is a small DAG over two input slots and N intermediate nodes; each
edge carries every candidate op and a softened one-hot mask selects among
them.  All normal cells inside a hyper-cell share one op/weight set, so a
single Cell instance is executed n times.  Within a hyper-cell, cell p
consumes the outputs of cells p-1 and p-2; the chain bottoms out at the
hyper-cell's direct input and at a fixed 1x1 stride-2 bridge of it (the
bridge also supplies the soft "penultimate" output used to rewire the next
hyper-cell when depth collapses to the reduction cell alone).

Aggregation topology (7 nodes, 7 searched edges, strides relative to the
taps t1:r, t2:2r, t3:4r):

    t1 --s2--> n1 <--s1-- t2        n1: low+mid fusion at 2r
    n1 --s2--> n2 <--s1-- t3        n2: full fusion at 4r
    n2 --s1--> n3 <--s1-- t3        n3: context refinement at 4r
    n1 --s2--> n4                   n4: detail branch at 4r

Output = concat(n2, n3, n4).
"""

from __future__ import annotations

import numpy as np

from . import nn
from .sampling import GumbelSampler, gumbel_softmax
from .tensor import (
    ParamStore,
    Tensor,
    TensorError,
    add,
    concat_channels,
    relu,
    subsample2,
    weighted_sum,
)

INTRA_CELL_OPS = (
    "zero",
    "skip",
    "max_pool3",
    "conv3",
    "conv3_x2",
    "sep3",
    "sep3_x2",
    "dilsep3_d2",
    "dilsep3_d4",
    "dilsep3_d2_x2",
)

AGGREGATION_OPS = (
    "agg_conv1_x2",
    "agg_conv3_x2",
    "agg_dilsep3_d2_x2",
    "agg_dilsep3_d4_x2",
    "agg_dilsep3_d8_x2",
)

# kernel, dilation, repeats, separable; None marks the parameter-free ops
OP_DEFS = {
    "zero": None,
    "skip": None,
    "max_pool3": None,
    "conv3": (3, 1, 1, False),
    "conv3_x2": (3, 1, 2, False),
    "sep3": (3, 1, 1, True),
    "sep3_x2": (3, 1, 2, True),
    "dilsep3_d2": (3, 2, 1, True),
    "dilsep3_d4": (3, 4, 1, True),
    "dilsep3_d2_x2": (3, 2, 2, True),
    "agg_conv1_x2": (1, 1, 2, False),
    "agg_conv3_x2": (3, 1, 2, False),
    "agg_dilsep3_d2_x2": (3, 2, 2, True),
    "agg_dilsep3_d4_x2": (3, 4, 2, True),
    "agg_dilsep3_d8_x2": (3, 8, 2, True),
}

AGG_EDGES = (
    ("t1", "n1", 2),
    ("t2", "n1", 1),
    ("n1", "n2", 2),
    ("t3", "n2", 1),
    ("n2", "n3", 1),
    ("t3", "n3", 1),
    ("n1", "n4", 2),
)
AGG_OUTPUT_NODES = ("n2", "n3", "n4")


def op_dilation(kind: str) -> int:
    d = OP_DEFS[kind]
    return 1 if d is None else d[1]


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Norm:
    """Per-channel affine normalization with running statistics."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.gamma = store.create(f"{name}.gamma", np.ones(channels))
        self.beta = store.create(f"{name}.beta", np.zeros(channels))
        self.rmean = store.create(f"{name}.rmean", np.zeros(channels), kind="buffer")
        self.rvar = store.create(f"{name}.rvar", np.ones(channels), kind="buffer")

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if training:
            return nn.channel_norm_train(x, self.gamma, self.beta, self.rmean.data, self.rvar.data)
        return nn.channel_norm_eval(x, self.gamma, self.beta, self.rmean.data, self.rvar.data)


class ConvUnit:
    """conv -> norm -> relu; separable = depthwise k x k then pointwise 1x1."""

    def __init__(self, store, name, in_ch, out_ch, kernel, stride, dilation, separable, rng):
        self.stride = stride
        self.dilation = dilation
        self.separable = separable
        if separable:
            self.dw = store.create(f"{name}.dw", _he_normal(rng, (in_ch, 1, kernel, kernel), kernel * kernel))
            self.pw = store.create(f"{name}.pw", _he_normal(rng, (out_ch, in_ch, 1, 1), in_ch))
        else:
            self.w = store.create(
                f"{name}.w", _he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
            )
        self.norm = Norm(store, f"{name}.norm", out_ch)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if self.separable:
            y = nn.conv2d(x, self.dw, stride=self.stride, dilation=self.dilation, groups=x.data.shape[1])
            y = nn.conv2d(y, self.pw)
        else:
            y = nn.conv2d(x, self.w, stride=self.stride, dilation=self.dilation)
        return relu(self.norm.forward(y, training))


class CandidateOp:
    """One catalog entry instantiated on a specific edge."""

    def __init__(self, store, name, kind, in_ch, out_ch, stride, rng):
        self.kind = kind
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stride = stride
        spec = OP_DEFS[kind]
        self.units = []
        self._zero_cache: dict[tuple, Tensor] = {}
        if spec is None:
            if kind in ("skip", "max_pool3") and in_ch != out_ch:
                raise TensorError(f"{kind} requires matching channels, got {in_ch} -> {out_ch}")
        else:
            kernel, dilation, repeats, separable = spec
            chans = in_ch
            for r in range(repeats):
                self.units.append(
                    ConvUnit(store, f"{name}.u{r}", chans, out_ch, kernel,
                             stride if r == 0 else 1, dilation, separable, rng)
                )
                chans = out_ch

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if self.kind == "zero":
            cached = self._zero_cache.get(x.data.shape)
            if cached is None:
                b, _, h, w = x.data.shape
                shape = (b, self.out_ch, nn.conv_out_size(h, self.stride), nn.conv_out_size(w, self.stride))
                # constant output, safe to share: nothing writes through it
                cached = self._zero_cache[x.data.shape] = Tensor(np.zeros(shape))
            return cached
        if self.kind == "skip":
            return subsample2(x) if self.stride == 2 else x
        if self.kind == "max_pool3":
            return nn.max_pool3(x, stride=self.stride)
        y = x
        for unit in self.units:
            y = unit.forward(y, training)
        return y


class Adapter:
    """Fixed 1x1 conv used for channel/resolution reconciliation; not searched."""

    def __init__(self, store, name, in_ch, out_ch, stride, rng):
        self.stride = stride
        self.w = store.create(f"{name}.w", _he_normal(rng, (out_ch, in_ch, 1, 1), in_ch))

    def forward(self, x: Tensor) -> Tensor:
        return nn.conv2d(x, self.w, stride=self.stride)


class Edge:
    def __init__(self, src: int, dst: int, stride: int, alpha: Tensor, ops: list[CandidateOp]):
        self.src = src  # 0=input0, 1=input1, 2+j = intermediate node j
        self.dst = dst  # intermediate node index (0-based)
        self.stride = stride
        self.alpha = alpha
        self.ops = ops


def _node_sources(num_nodes: int, connectivity: str):
    """Edge sources per intermediate node: slot ids 0,1 then 2+j for node j."""
    out = []
    for j in range(num_nodes):
        if connectivity == "full":
            out.append([0, 1] + [2 + i for i in range(j)])
        elif connectivity == "single":
            out.append([0] if j == 0 else [2 + j - 1])
        else:
            raise TensorError(f"unknown cell connectivity {connectivity!r}")
    return out


class Cell:
    """DAG of searched edges over two inputs and `num_nodes` intermediates.

    The output is the channel concatenation of all intermediate nodes.
    Inputs that do not already match (node_ch, cell resolution expectations)
    pass through fixed 1x1 adapters before the searched ops.
    """

    def __init__(self, store, prefix, kind, num_nodes, in0_ch, in1_ch, node_ch,
                 catalog, connectivity, rng):
        if kind not in ("normal", "reduction"):
            raise TensorError(f"unknown cell kind {kind!r}")
        self.prefix = prefix
        self.kind = kind
        self.num_nodes = num_nodes
        self.node_ch = node_ch
        self.catalog = tuple(catalog)
        self.pre0 = Adapter(store, f"{prefix}.pre0", in0_ch, node_ch, 1, rng) if in0_ch != node_ch else None
        self.pre1 = Adapter(store, f"{prefix}.pre1", in1_ch, node_ch, 1, rng) if in1_ch != node_ch else None
        self.edges: list[Edge] = []
        for j, sources in enumerate(_node_sources(num_nodes, connectivity)):
            if not sources:
                raise TensorError("every intermediate node needs at least one incoming edge")
            for src in sources:
                eidx = len(self.edges)
                stride = 2 if (kind == "reduction" and src < 2) else 1
                alpha = store.create(f"{prefix}.e{eidx}.alpha", np.zeros(len(self.catalog)), kind="arch")
                ops = [
                    CandidateOp(store, f"{prefix}.e{eidx}.{op}", op, node_ch, node_ch, stride, rng)
                    for op in self.catalog
                ]
                self.edges.append(Edge(src, j, stride, alpha, ops))

    @property
    def out_ch(self) -> int:
        return self.num_nodes * self.node_ch

    def _slots(self, input0: Tensor, input1: Tensor) -> list[Tensor]:
        x0 = self.pre0.forward(input0) if self.pre0 is not None else input0
        x1 = self.pre1.forward(input1) if self.pre1 is not None else input1
        return [x0, x1]

    def forward(self, input0: Tensor, input1: Tensor, masks: list[Tensor], training: bool) -> Tensor:
        """Relaxed forward: every edge mixes its full candidate set."""
        if len(masks) != len(self.edges):
            raise TensorError(f"{self.prefix}: expected {len(self.edges)} masks, got {len(masks)}")
        for m in masks:
            if m.data.shape != (len(self.catalog),):
                raise TensorError(
                    f"{self.prefix}: mask length {m.data.shape} does not match catalog size {len(self.catalog)}"
                )
        slots = self._slots(input0, input1)
        for j in range(self.num_nodes):
            val = None
            for edge, mask in zip(self.edges, masks):
                if edge.dst != j:
                    continue
                outs = [op.forward(slots[edge.src], training) for op in edge.ops]
                mixed = weighted_sum(outs, mask)
                val = mixed if val is None else add(val, mixed)
            slots.append(val)
        nodes = slots[2:]
        return nodes[0] if self.num_nodes == 1 else concat_channels(nodes)

    def forward_discrete(self, input0: Tensor, input1: Tensor, chosen: list[int | None],
                         training: bool) -> Tensor:
        """Discrete forward: one op per edge; None = pruned (zero) edge."""
        if len(chosen) != len(self.edges):
            raise TensorError(f"{self.prefix}: expected {len(self.edges)} op choices, got {len(chosen)}")
        slots = self._slots(input0, input1)
        for j in range(self.num_nodes):
            val = None
            fallback_shape = None
            for edge, op_idx in zip(self.edges, chosen):
                if edge.dst != j:
                    continue
                src = slots[edge.src]
                b, _, h, w = src.data.shape
                fallback_shape = (b, self.node_ch, nn.conv_out_size(h, edge.stride), nn.conv_out_size(w, edge.stride))
                if op_idx is None:
                    continue
                y = edge.ops[op_idx].forward(src, training)
                val = y if val is None else add(val, y)
            if val is None:
                # all incoming edges pruned: the node is a zero map
                val = Tensor(np.zeros(fallback_shape))
            slots.append(val)
        nodes = slots[2:]
        return nodes[0] if self.num_nodes == 1 else concat_channels(nodes)


class HyperCell:
    """A reduction cell plus n weight-sharing normal cells with depth logits.

    beta has n+1 entries; entry p selects "stop after cell p".  The forward
    pass returns the mask-weighted output sum_p u_p*C_p and the matching
    penultimate mixture sum_p u_p*C_{p-1}, where C_0 is the bridged input.
    """

    def __init__(self, store, prefix, n_normal, in_ch, out_ch, num_nodes, catalog, connectivity, rng):
        if out_ch % num_nodes != 0:
            raise TensorError(f"{prefix}: out_ch {out_ch} not divisible by num_nodes {num_nodes}")
        self.prefix = prefix
        self.n_normal = n_normal
        self.in_ch = in_ch
        self.out_ch = out_ch
        node_ch = out_ch // num_nodes
        self.bridge = Adapter(store, f"{prefix}.bridge", in_ch, out_ch, 2, rng)
        self.reduction = Cell(store, f"{prefix}.reduce", "reduction", num_nodes,
                              in_ch, in_ch, node_ch, catalog, connectivity, rng)
        self.normal = None
        if n_normal > 0:
            self.normal = Cell(store, f"{prefix}.normal", "normal", num_nodes,
                               out_ch, out_ch, node_ch, catalog, connectivity, rng)
        self.beta = store.create(f"{prefix}.beta", np.zeros(n_normal + 1), kind="arch")

    def cell_outputs(self, input0: Tensor, input1: Tensor, red_masks, norm_masks, training: bool):
        bridged = self.bridge.forward(input0)
        c = self.reduction.forward(input0, input1, red_masks, training)
        outs = [c]
        prev2, prev1 = bridged, c
        for _ in range(self.n_normal):
            nxt = self.normal.forward(prev1, prev2, norm_masks, training)
            prev2, prev1 = prev1, nxt
            outs.append(nxt)
        return bridged, outs

    def forward(self, input0: Tensor, input1: Tensor, red_masks, norm_masks, u: Tensor, training: bool):
        if u.data.shape != (self.n_normal + 1,):
            raise TensorError(f"{self.prefix}: depth mask length {u.data.shape} != {self.n_normal + 1}")
        bridged, outs = self.cell_outputs(input0, input1, red_masks, norm_masks, training)
        out = weighted_sum(outs, u)
        penult = weighted_sum([bridged] + outs[:-1], u)
        return out, penult

    def forward_discrete(self, input0: Tensor, input1: Tensor, depth: int,
                         red_chosen, norm_chosen, training: bool):
        if not 1 <= depth <= self.n_normal + 1:
            raise TensorError(f"{self.prefix}: depth {depth} outside [1, {self.n_normal + 1}]")
        bridged = self.bridge.forward(input0)
        c = self.reduction.forward_discrete(input0, input1, red_chosen, training)
        prev2, prev1 = bridged, c
        for _ in range(depth - 1):
            nxt = self.normal.forward_discrete(prev1, prev2, norm_chosen, training)
            prev2, prev1 = prev1, nxt
        return prev1, prev2


class AggregationCell:
    """Searched fusion DAG over the three hyper-cell taps (see module doc)."""

    def __init__(self, store, prefix, tap_channels, width, catalog, rng):
        self.prefix = prefix
        self.tap_channels = tuple(tap_channels)
        self.width = width
        self.catalog = tuple(catalog)
        self.edges = []  # (src, dst, stride, alpha, ops)
        ch = {"t1": tap_channels[0], "t2": tap_channels[1], "t3": tap_channels[2],
              "n1": width, "n2": width, "n3": width, "n4": width}
        for eidx, (src, dst, stride) in enumerate(AGG_EDGES):
            alpha = store.create(f"{prefix}.e{eidx}.alpha", np.zeros(len(self.catalog)), kind="arch")
            ops = [
                CandidateOp(store, f"{prefix}.e{eidx}.{op}", op, ch[src], width, stride, rng)
                for op in self.catalog
            ]
            self.edges.append((src, dst, stride, alpha, ops))

    def _run(self, taps, edge_fn, training: bool) -> Tensor:
        values = {"t1": taps[0], "t2": taps[1], "t3": taps[2]}
        for eidx, (src, dst, stride, alpha, ops) in enumerate(self.edges):
            y = edge_fn(eidx, ops, values[src])
            if y is None:
                continue
            values[dst] = y if dst not in values else add(values[dst], y)
        return concat_channels([values[n] for n in AGG_OUTPUT_NODES])

    def forward(self, taps, masks: list[Tensor], training: bool) -> Tensor:
        if len(masks) != len(self.edges):
            raise TensorError(f"{self.prefix}: expected {len(self.edges)} masks, got {len(masks)}")

        def mix(eidx, ops, x):
            outs = [op.forward(x, training) for op in ops]
            return weighted_sum(outs, masks[eidx])

        return self._run(taps, mix, training)

    def forward_discrete(self, taps, chosen: list[int], training: bool) -> Tensor:
        def pick(eidx, ops, x):
            return ops[chosen[eidx]].forward(x, training)

        return self._run(taps, pick, training)


class MaskSet:
    """All softened one-hot masks for one forward pass of the super-network."""

    def __init__(self, red, norm, hyper, agg):
        self.red = red      # per hyper-cell: list of per-edge masks
        self.norm = norm    # per hyper-cell: list of per-edge masks (shared cells)
        self.hyper = hyper  # per hyper-cell: depth-selection mask
        self.agg = agg      # per aggregation edge


def _mask_from_logits(alpha: Tensor, sampler: GumbelSampler | None) -> Tensor:
    if alpha.data.shape[0] == 1:
        return Tensor(np.ones(1))  # singleton catalog: nothing to sample
    if sampler is None:
        hot = np.zeros(alpha.data.shape[0])
        hot[int(np.argmax(alpha.data))] = 1.0
        return Tensor(hot)
    return gumbel_softmax(alpha, sampler)


class SuperNetwork:
    """The relaxed super-network: stem, three hyper-cells, aggregation, head."""

    NUM_HYPER_CELLS = 3

    def __init__(self, config, rng: np.random.Generator | None = None):
        from .config import SearchConfig  # local to avoid an import cycle

        if not isinstance(config, SearchConfig):
            raise TensorError("SuperNetwork expects a SearchConfig")
        config.validate()
        self.config = config
        self.store = ParamStore()
        rng = rng if rng is not None else np.random.Generator(np.random.PCG64(config.seed))

        c0 = config.initial_channels
        mult = config.channel_multiplier
        self.stem = [
            ConvUnit(self.store, "stem.0", 3, c0, 3, 2, 1, False, rng),
            ConvUnit(self.store, "stem.1", c0, c0, 3, 2, 1, False, rng),
        ]
        self.hc_in = [c0 * mult**s for s in range(self.NUM_HYPER_CELLS)]
        self.hc_out = [c * mult for c in self.hc_in]
        self.hyper_cells = [
            HyperCell(self.store, f"hc{s + 1}", config.cells[s] - 1, self.hc_in[s], self.hc_out[s],
                      config.nodes_per_cell, config.intra_ops, config.cell_connectivity, rng)
            for s in range(self.NUM_HYPER_CELLS)
        ]
        self.agg = AggregationCell(self.store, "agg", self.hc_out, config.agg_channels,
                                   config.agg_ops, rng)
        fused = config.agg_channels * len(AGG_OUTPUT_NODES)
        self.head_w = self.store.create("head.w", _he_normal(rng, (config.dataset.classes, fused, 1, 1), fused))
        self.head_b = self.store.create("head.b", np.zeros(config.dataset.classes))

        # stride bookkeeping, computed from the components actually built
        stem_stride = 1
        for unit in self.stem:
            stem_stride *= unit.stride
        self.stem_stride = stem_stride
        self.tap_strides = []
        s = stem_stride
        for hc in self.hyper_cells:
            s *= 2  # one reduction cell per hyper-cell
            self.tap_strides.append(s)

    # -- masks ------------------------------------------------------------

    def sample_masks(self, sampler: GumbelSampler) -> MaskSet:
        red, norm, hyper = [], [], []
        for hc in self.hyper_cells:
            red.append([_mask_from_logits(e.alpha, sampler) for e in hc.reduction.edges])
            norm.append([_mask_from_logits(e.alpha, sampler) for e in hc.normal.edges] if hc.normal else [])
            hyper.append(_mask_from_logits(hc.beta, sampler) if hc.beta.data.shape[0] > 1 else Tensor(np.ones(1)))
        agg = [_mask_from_logits(alpha, sampler) for (_, _, _, alpha, _) in self.agg.edges]
        return MaskSet(red, norm, hyper, agg)

    def hard_masks(self) -> MaskSet:
        """Constant one-hot masks at the current argmax of every logit."""
        red, norm, hyper = [], [], []
        for hc in self.hyper_cells:
            red.append([_mask_from_logits(e.alpha, None) for e in hc.reduction.edges])
            norm.append([_mask_from_logits(e.alpha, None) for e in hc.normal.edges] if hc.normal else [])
            hyper.append(_mask_from_logits(hc.beta, None))
        agg = [_mask_from_logits(alpha, None) for (_, _, _, alpha, _) in self.agg.edges]
        return MaskSet(red, norm, hyper, agg)

    # -- forward ----------------------------------------------------------

    def _stem(self, x: Tensor, training: bool) -> Tensor:
        h = x
        for unit in self.stem:
            h = unit.forward(h, training)
        return h

    def _head(self, fused: Tensor, out_h: int, out_w: int) -> Tensor:
        logits = nn.add_channel_bias(nn.conv2d(fused, self.head_w), self.head_b)
        return nn.upsample_to(logits, out_h, out_w)

    def forward(self, x: Tensor, masks: MaskSet, training: bool = True) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise TensorError(f"expected (B, 3, H, W) input, got {x.data.shape}")
        h = self._stem(x, training)
        x0 = x1 = h
        taps = []
        for s, hc in enumerate(self.hyper_cells):
            out, penult = hc.forward(x0, x1, masks.red[s], masks.norm[s], masks.hyper[s], training)
            taps.append(out)
            x0, x1 = out, penult
        fused = self.agg.forward(taps, masks.agg, training)
        return self._head(fused, x.data.shape[2], x.data.shape[3])

    def forward_discrete(self, x: Tensor, arch, training: bool = False) -> Tensor:
        """Run the discrete architecture using this network's own weights."""
        h = self._stem(x, training)
        x0 = x1 = h
        taps = []
        for s, hc in enumerate(self.hyper_cells):
            spec = arch.hyper_cells[s]
            out, penult = hc.forward_discrete(x0, x1, spec.depth, spec.reduction_ops, spec.normal_ops, training)
            taps.append(out)
            x0, x1 = out, penult
        fused = self.agg.forward_discrete(taps, arch.aggregation_ops, training)
        return self._head(fused, x.data.shape[2], x.data.shape[3])

    def num_weights(self) -> int:
        return self.store.num_values("weight")
