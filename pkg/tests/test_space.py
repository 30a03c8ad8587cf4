"""Search-space semantics: cells, hyper-cells, aggregation, derivation."""

import numpy as np
import pytest

from conftest import tiny_config, tiny_dataset
from segnas.arch import DerivedArchitecture, DiscreteNetwork, derive, edge_layout
from segnas.config import ConfigError, SearchConfig
from segnas.sampling import GumbelSampler
from segnas.space import (
    AGG_EDGES,
    AGGREGATION_OPS,
    INTRA_CELL_OPS,
    AggregationCell,
    Cell,
    HyperCell,
    SuperNetwork,
)
from segnas.tensor import ParamStore, Tensor, TensorError


def one_hot(n, k):
    v = np.zeros(n)
    v[k] = 1.0
    return Tensor(v)


def make_cell(kind="normal", num_nodes=2, in_ch=4, node_ch=4, catalog=INTRA_CELL_OPS,
              connectivity="full", seed=0):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    cell = Cell(store, "cell", kind, num_nodes, in_ch, in_ch, node_ch, catalog, connectivity, rng)
    return cell, store


class TestCatalogs:
    def test_sizes(self):
        assert len(INTRA_CELL_OPS) == 10
        assert len(AGGREGATION_OPS) == 5

    def test_disjoint_namespaces(self):
        assert not set(INTRA_CELL_OPS) & set(AGGREGATION_OPS)


class TestCellForward:
    def test_all_zero_masks_give_zero_output(self, rng):
        cell, _ = make_cell()
        zero_idx = INTRA_CELL_OPS.index("zero")
        masks = [one_hot(10, zero_idx) for _ in cell.edges]
        x0 = Tensor(rng.random((2, 4, 6, 6)))
        x1 = Tensor(rng.random((2, 4, 6, 6)))
        out = cell.forward(x0, x1, masks, training=False)
        assert out.shape == (2, 8, 6, 6)
        assert not out.data.any()

    def test_skip_identity(self, rng):
        # N=1, single edge from input0, matching channels: skip is identity
        cell, _ = make_cell(num_nodes=1, connectivity="single")
        assert cell.pre0 is None
        masks = [one_hot(10, INTRA_CELL_OPS.index("skip"))]
        x0 = Tensor(rng.random((1, 4, 5, 5)))
        out = cell.forward(x0, Tensor(rng.random((1, 4, 5, 5))), masks, training=False)
        np.testing.assert_array_equal(out.data, x0.data)

    def test_hard_masks_equal_selected_op_execution(self, rng):
        # discrete-execution oracle: run only the chosen op per edge by hand
        cell, _ = make_cell(num_nodes=2, seed=4)
        chosen = [rng.integers(10) for _ in cell.edges]
        masks = [one_hot(10, k) for k in chosen]
        x0 = Tensor(rng.standard_normal((1, 4, 6, 6)))
        x1 = Tensor(rng.standard_normal((1, 4, 6, 6)))
        out = cell.forward(x0, x1, masks, training=False)

        slots = [x0 if cell.pre0 is None else cell.pre0.forward(x0),
                 x1 if cell.pre1 is None else cell.pre1.forward(x1)]
        for j in range(cell.num_nodes):
            val = None
            for edge, k in zip(cell.edges, chosen):
                if edge.dst != j:
                    continue
                y = edge.ops[k].forward(slots[edge.src], False).data
                val = y if val is None else val + y
            slots.append(Tensor(val))
        expect = np.concatenate([s.data for s in slots[2:]], axis=1)
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_mask_length_validated(self, rng):
        cell, _ = make_cell()
        masks = [one_hot(9, 0) for _ in cell.edges]
        with pytest.raises(TensorError, match="catalog"):
            cell.forward(Tensor(rng.random((1, 4, 4, 4))), Tensor(rng.random((1, 4, 4, 4))), masks, False)

    def test_reduction_halves_and_adapts(self, rng):
        cell, _ = make_cell(kind="reduction", num_nodes=2, in_ch=4, node_ch=6)
        masks = [one_hot(10, INTRA_CELL_OPS.index("conv3")) for _ in cell.edges]
        out = cell.forward(Tensor(rng.random((1, 4, 8, 10))), Tensor(rng.random((1, 4, 8, 10))), masks, False)
        assert out.shape == (1, 12, 4, 5)

    def test_mask_linearity_single_node(self, rng):
        # with N=1 every edge feeds the output node, so the forward map is
        # exactly linear in each edge's mask (other edges held fixed)
        cell, _ = make_cell(num_nodes=1, seed=2)
        x0 = Tensor(rng.standard_normal((1, 4, 5, 5)))
        x1 = Tensor(rng.standard_normal((1, 4, 5, 5)))
        m_other = one_hot(10, 3)
        rng2 = np.random.default_rng(5)

        def run(m_edge0):
            return cell.forward(x0, x1, [m_edge0, m_other], training=False).data

        m1 = Tensor(rng2.dirichlet(np.ones(10)))
        m2 = Tensor(rng2.dirichlet(np.ones(10)))
        t = 0.3
        blend = Tensor(t * m1.data + (1 - t) * m2.data)
        np.testing.assert_allclose(run(blend), t * run(m1) + (1 - t) * run(m2), atol=1e-10)

    def test_mask_linearity_final_node_edges(self, rng):
        # for N=2 the property holds per edge into the final node; edges into
        # earlier nodes feed through nonlinear candidate ops downstream
        cell, _ = make_cell(num_nodes=2, seed=3)
        x0 = Tensor(rng.standard_normal((1, 4, 5, 5)))
        x1 = Tensor(rng.standard_normal((1, 4, 5, 5)))
        final_edges = [i for i, e in enumerate(cell.edges) if e.dst == 1]
        base = [one_hot(10, 4) for _ in cell.edges]
        rng2 = np.random.default_rng(8)
        for eidx in final_edges:
            def run(mask):
                masks = list(base)
                masks[eidx] = mask
                return cell.forward(x0, x1, masks, training=False).data

            m1 = Tensor(rng2.dirichlet(np.ones(10)))
            m2 = Tensor(rng2.dirichlet(np.ones(10)))
            t = 0.7
            blend = Tensor(t * m1.data + (1 - t) * m2.data)
            np.testing.assert_allclose(run(blend), t * run(m1) + (1 - t) * run(m2), atol=1e-10)


class TestHyperCell:
    def make_hc(self, n_normal=2, seed=0):
        store = ParamStore()
        rng = np.random.default_rng(seed)
        hc = HyperCell(store, "hc1", n_normal, 4, 8, 2, INTRA_CELL_OPS, "full", rng)
        return hc, store

    def uniform_masks(self, hc):
        k = len(INTRA_CELL_OPS)
        red = [Tensor(np.full(k, 1.0 / k)) for _ in hc.reduction.edges]
        norm = [Tensor(np.full(k, 1.0 / k)) for _ in hc.normal.edges] if hc.normal else []
        return red, norm

    def test_one_hot_selects_cell_output(self, rng):
        hc, _ = self.make_hc()
        red, norm = self.uniform_masks(hc)
        x0 = Tensor(rng.random((1, 4, 8, 8)))
        x1 = Tensor(rng.random((1, 4, 8, 8)))
        _, outs = hc.cell_outputs(x0, x1, red, norm, training=False)
        for p in range(3):
            out, _ = hc.forward(x0, x1, red, norm, one_hot(3, p), training=False)
            np.testing.assert_array_equal(out.data, outs[p].data)

    def test_uniform_mask_averages_two_cells(self, rng):
        hc, _ = self.make_hc(n_normal=1)
        red, norm = self.uniform_masks(hc)
        x0 = Tensor(rng.random((1, 4, 8, 8)))
        x1 = Tensor(rng.random((1, 4, 8, 8)))
        _, outs = hc.cell_outputs(x0, x1, red, norm, training=False)
        out, _ = hc.forward(x0, x1, red, norm, Tensor(np.array([0.5, 0.5])), training=False)
        np.testing.assert_allclose(out.data, 0.5 * (outs[0].data + outs[1].data), atol=1e-12)

    def test_matches_explicit_mixture_oracle(self, rng):
        # materialize every cell output, mix in plain numpy
        hc, store = self.make_hc(n_normal=2, seed=9)
        for _, t in store.items("arch"):
            t.data[...] = np.random.default_rng(1).standard_normal(t.data.shape)
        red, norm = self.uniform_masks(hc)
        u = Tensor(np.random.default_rng(2).dirichlet(np.ones(3)))
        x0 = Tensor(rng.standard_normal((2, 4, 8, 8)))
        x1 = Tensor(rng.standard_normal((2, 4, 8, 8)))
        bridged, outs = hc.cell_outputs(x0, x1, red, norm, training=False)
        out, penult = hc.forward(x0, x1, red, norm, u, training=False)
        expect_out = sum(u.data[p] * outs[p].data for p in range(3))
        expect_pen = sum(u.data[p] * prev.data for p, prev in enumerate([bridged] + outs[:-1]))
        np.testing.assert_allclose(out.data, expect_out, atol=1e-12)
        np.testing.assert_allclose(penult.data, expect_pen, atol=1e-12)

    def test_depth_mask_linearity(self, rng):
        hc, _ = self.make_hc(n_normal=2)
        red, norm = self.uniform_masks(hc)
        x0 = Tensor(rng.random((1, 4, 8, 8)))
        x1 = Tensor(rng.random((1, 4, 8, 8)))

        def run(u):
            return hc.forward(x0, x1, red, norm, u, training=False)[0].data

        rng2 = np.random.default_rng(3)
        u1, u2 = Tensor(rng2.dirichlet(np.ones(3))), Tensor(rng2.dirichlet(np.ones(3)))
        t = 0.25
        blend = Tensor(t * u1.data + (1 - t) * u2.data)
        np.testing.assert_allclose(run(blend), t * run(u1) + (1 - t) * run(u2), atol=1e-10)

    def test_depth_mask_length_validated(self, rng):
        hc, _ = self.make_hc(n_normal=2)
        red, norm = self.uniform_masks(hc)
        with pytest.raises(TensorError, match="depth mask"):
            hc.forward(Tensor(rng.random((1, 4, 8, 8))), Tensor(rng.random((1, 4, 8, 8))),
                       red, norm, one_hot(4, 0), training=False)


class TestAggregation:
    def test_zeroed_weights_give_zero_fusion(self, rng):
        store = ParamStore()
        agg = AggregationCell(store, "agg", (4, 4, 4), 4, AGGREGATION_OPS, np.random.default_rng(0))
        for name, t in store.items("weight"):
            if name.endswith((".w", ".dw", ".pw")):
                t.data[...] = 0.0
        masks = [Tensor(np.full(5, 0.2)) for _ in agg.edges]
        taps = [Tensor(rng.random((1, 4, 8, 8))), Tensor(rng.random((1, 4, 4, 4))),
                Tensor(rng.random((1, 4, 2, 2)))]
        out = agg.forward(taps, masks, training=False)
        assert out.shape == (1, 12, 2, 2)
        assert not out.data.any()

    def test_hard_masks_equal_discrete_execution(self, rng):
        store = ParamStore()
        agg = AggregationCell(store, "agg", (4, 6, 8), 5, AGGREGATION_OPS, np.random.default_rng(1))
        chosen = [int(rng.integers(5)) for _ in agg.edges]
        masks = [one_hot(5, k) for k in chosen]
        taps = [Tensor(rng.standard_normal((1, 4, 8, 8))), Tensor(rng.standard_normal((1, 6, 4, 4))),
                Tensor(rng.standard_normal((1, 8, 2, 2)))]
        soft = agg.forward(taps, masks, training=False)
        hard = agg.forward_discrete(taps, chosen, training=False)
        np.testing.assert_allclose(soft.data, hard.data, atol=1e-12)

    def test_identity_weights_reproduce_taps(self, rng):
        # all edges pick the 1x1 double conv; identity conv weights and
        # frozen norm stats (with gamma cancelling the variance epsilon)
        # make each unit an identity on non-negative inputs, so the DAG
        # reduces to strided adds of taps.
        width = 3
        store = ParamStore()
        agg = AggregationCell(store, "agg", (width, width, width), width,
                              ("agg_conv1_x2",), np.random.default_rng(0))
        eye = np.eye(width).reshape(width, width, 1, 1)
        for name, t in store.items("weight"):
            if name.endswith(".w"):
                t.data[...] = eye
            elif name.endswith(".gamma"):
                t.data[...] = np.sqrt(1.0 + 1e-5)  # undo 1/sqrt(var + eps)
        t1 = rng.random((1, width, 8, 8))
        t2 = rng.random((1, width, 4, 4))
        t3 = rng.random((1, width, 2, 2))
        out = agg.forward_discrete([Tensor(t1), Tensor(t2), Tensor(t3)], [0] * 7, training=False)
        sub = lambda a: a[:, :, ::2, ::2]
        n1 = sub(t1) + t2
        n2 = sub(n1) + t3
        n3 = n2 + t3
        n4 = sub(n1)
        expect = np.concatenate([n2, n3, n4], axis=1)
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_seven_nodes_seven_edges(self):
        assert len(AGG_EDGES) == 7
        nodes = {e[0] for e in AGG_EDGES} | {e[1] for e in AGG_EDGES}
        assert len(nodes) == 7  # 3 tap entry nodes + 4 internal nodes


class TestBuildNetwork:
    def test_channel_plan_8_24_72(self):
        cfg = tiny_config(cells=(2, 2, 2), initial_channels=8, nodes_per_cell=2)
        net = SuperNetwork(cfg)
        assert net.hc_in == [8, 24, 72]
        assert net.hc_out == [24, 72, 216]

    def test_minimal_network_builds_and_runs(self, rng):
        cfg = tiny_config(cells=(1, 1, 1))
        net = SuperNetwork(cfg)
        masks = net.sample_masks(GumbelSampler(0, 1.0))
        out = net.forward(Tensor(rng.random((1, 3, 32, 64))), masks, training=True)
        assert out.shape == (1, 6, 32, 64)

    def test_tap_strides_from_built_network(self):
        net = SuperNetwork(tiny_config())
        assert net.stem_stride == 4
        assert net.tap_strides == [8, 16, 32]

    def test_invalid_config_reports_field(self):
        with pytest.raises(ConfigError, match="'cells'"):
            SearchConfig.from_dict({"cells": [2, 2]})
        with pytest.raises(ConfigError, match="'gamma'"):
            SearchConfig.from_dict({"gamma": -1})

    def test_parameter_count_matches_hand_count(self):
        # single-edge N=1 cells, two candidate ops, singleton aggregation op:
        # small enough to enumerate every weight by hand
        c0, mult, width, classes = 2, 3, 4, 6
        cfg = tiny_config(cells=(1, 1, 1), nodes_per_cell=1, initial_channels=c0,
                          agg_channels=width, cell_connectivity="single",
                          intra_ops=("skip", "conv3"), agg_ops=("agg_conv1_x2",))
        net = SuperNetwork(cfg)

        def conv_unit(cin, cout, k):  # conv weight + norm gamma/beta
            return cout * cin * k * k + 2 * cout

        expect = conv_unit(3, c0, 3) + conv_unit(c0, c0, 3)  # stem
        for s in range(3):
            cin = c0 * mult**s
            node = cin * mult
            expect += node * cin  # bridge 1x1
            expect += 2 * (node * cin)  # two cell input adapters to node_ch
            expect += conv_unit(node, node, 3)  # conv3 candidate on the single edge
        tap_chs = [c0 * mult ** (s + 1) for s in range(3)]
        src_ch = {"t1": tap_chs[0], "t2": tap_chs[1], "t3": tap_chs[2],
                  "n1": width, "n2": width, "n3": width, "n4": width}
        for src, _, _ in AGG_EDGES:
            expect += conv_unit(src_ch[src], width, 1) + conv_unit(width, width, 1)
        expect += classes * (3 * width) + classes  # head conv + bias
        assert net.store.num_values("weight") == expect

    def test_alpha_storage_shared_across_normal_cells(self):
        cfg = tiny_config(cells=(3, 1, 1))
        net = SuperNetwork(cfg)
        shared = [n for n in net.store.names("arch") if n.startswith("hc1.normal")]
        # one alpha per edge of the shared cell, not per cell instance
        assert len(shared) == len(net.hyper_cells[0].normal.edges)
        masks = net.sample_masks(GumbelSampler(3, 0.5))
        assert len(masks.norm[0]) == len(net.hyper_cells[0].normal.edges)

    def test_nodes_must_divide_width(self):
        with pytest.raises(ConfigError, match="nodes_per_cell"):
            tiny_config(initial_channels=3, nodes_per_cell=2).validate()


class TestDerive:
    def test_beta_one_hot_prunes_behind_activated_edge(self):
        cfg = tiny_config(cells=(5, 2, 2))
        net = SuperNetwork(cfg)
        net.hyper_cells[0].beta.data[...] = [0, 5, 0, 0, 0]  # edge 2 of 5
        arch = derive(net)
        assert arch.hyper_cells[0].depth == 2
        doc = arch.to_json_dict()
        assert len(doc["hyper_cells"][0]["cells"]) == 2  # cells 3..5 pruned

    def test_uniform_beta_ties_to_shallowest(self):
        net = SuperNetwork(tiny_config(cells=(4, 3, 2)))
        assert derive(net).depths() == (1, 1, 1)

    def test_alpha_tie_breaks_to_lower_index_and_zero_edges_removed(self):
        net = SuperNetwork(tiny_config())
        arch = derive(net)
        # all-zero logits: argmax is index 0 == the zero op -> every edge pruned
        assert all(op is None for op in arch.hyper_cells[0].reduction_ops)
        doc = arch.to_json_dict()
        assert doc["hyper_cells"][0]["cells"][0]["edges"] == []

    def test_depth_bounds(self, rng):
        cfg = tiny_config(cells=(3, 2, 4))
        net = SuperNetwork(cfg)
        for _, t in net.store.items("arch"):
            t.data[...] = rng.standard_normal(t.data.shape)
        arch = derive(net)
        for hc_arch, total in zip(arch.hyper_cells, cfg.cells):
            assert 1 <= hc_arch.depth <= total

    def test_non_finite_parameters_rejected(self):
        net = SuperNetwork(tiny_config())
        net.hyper_cells[1].beta.data[0] = np.nan
        with pytest.raises(TensorError, match="non-finite"):
            derive(net)

    def test_hard_mask_equivalence_same_weights(self, rng):
        # super-network with one-hot masks == discrete forward on the same
        # weights, both through the super-network object and through a
        # standalone network with copied parameters
        cfg = tiny_config(cells=(2, 2, 2), initial_channels=4, seed=11)
        net = SuperNetwork(cfg)
        arng = np.random.default_rng(5)
        for _, t in net.store.items("arch"):
            t.data[...] = arng.standard_normal(t.data.shape)
        arch = derive(net)
        x = Tensor(rng.random((2, 3, 32, 64)))
        soft = net.forward(x, net.hard_masks(), training=False)
        hard = net.forward_discrete(x, arch, training=False)
        assert np.max(np.abs(soft.data - hard.data)) < 1e-10
        dnet = DiscreteNetwork(arch, rng=0)
        dnet.copy_params_from(net.store)
        standalone = dnet.forward(x, training=False)
        assert np.max(np.abs(soft.data - standalone.data)) < 1e-10


class TestArchitectureJson:
    def make_arch(self, seed=2):
        net = SuperNetwork(tiny_config(cells=(3, 2, 2), seed=seed))
        rng = np.random.default_rng(seed)
        for _, t in net.store.items("arch"):
            t.data[...] = rng.standard_normal(t.data.shape)
        return derive(net)

    def test_round_trip_lossless(self, tmp_path):
        arch = self.make_arch()
        path = arch.save(tmp_path / "arch.json")
        again = DerivedArchitecture.load(path)
        assert again.to_json_dict() == arch.to_json_dict()

    def test_rejects_unknown_version(self, tmp_path):
        doc = self.make_arch().to_json_dict()
        doc["version"] = 99
        with pytest.raises(TensorError, match="version"):
            DerivedArchitecture.from_json_dict(doc)

    def test_rejects_unknown_op(self):
        doc = self.make_arch().to_json_dict()
        doc["hyper_cells"][0]["cells"][0]["edges"] = [{"src": "in0", "dst": "n1", "op": "warp"}]
        with pytest.raises(TensorError, match="unknown cell op"):
            DerivedArchitecture.from_json_dict(doc)

    def test_rejects_bad_depth(self):
        doc = self.make_arch().to_json_dict()
        doc["hyper_cells"][0]["depth"] = 9
        with pytest.raises(TensorError):
            DerivedArchitecture.from_json_dict(doc)

    def test_edge_layout_matches_connectivity(self):
        assert edge_layout(2, "full") == [(0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]
        assert edge_layout(2, "single") == [(0, 2), (2, 3)]
