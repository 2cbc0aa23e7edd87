import math

import numpy as np
import pytest
import torch

from oracles import attention_pool_reference
from semgraph_reloc.errors import ConfigError, DegenerateInputError
from semgraph_reloc.graph import VOID, build_graph
from semgraph_reloc.graphnet import (
    EdgeMLP,
    GraphBranch,
    attention_pool,
    edgeconv,
    knn_neighbors,
    normalized_positions,
)
from semgraph_reloc.nodes import InstanceNode


def _graph(xs, capacity=6):
    return build_graph([InstanceNode((float(x), 0.0, 0.0), 1, 5) for x in xs], capacity=capacity)


class TestKnn:
    def test_nearest_first(self):
        nb = knn_neighbors(_graph([0, 1, 3, 7]), 2)
        assert nb[:4].tolist() == [[1, 2], [0, 2], [1, 0], [2, 1]]

    def test_tie_goes_to_lower_index(self):
        assert knn_neighbors(_graph([0, -1, 1]), 1)[0].tolist() == [1]

    def test_cyclic_when_short(self):
        nb = knn_neighbors(_graph([0, 1, 5]), 5)
        assert nb[0].tolist() == [1, 2, 1, 2, 1]

    def test_lone_and_virtual_self(self):
        nb = knn_neighbors(_graph([4]), 3)
        assert nb.tolist() == [[i] * 3 for i in range(6)]

    def test_no_real_nodes(self):
        with pytest.raises(DegenerateInputError):
            knn_neighbors(_graph([]), 2)

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            knn_neighbors(_graph([0, 1]), 0)


class TestEdgeConv:
    def test_max_over_neighbours(self):
        f = torch.tensor([[1.0], [3.0], [-2.0], [0.0]])
        nb = torch.tensor([[1, 2], [0, 2], [0, 1], [3, 3]])
        mask = torch.tensor([True, True, True, False])
        out = edgeconv(f, mask, nb, lambda c, d: d)
        assert out.squeeze(-1).tolist() == [3.0, 5.0, -3.0, 0.0]

    def test_batched_equals_unbatched(self):
        torch.manual_seed(0)
        mlp = EdgeMLP(4, 4)
        f = torch.randn(2, 5, 4)
        nb = torch.randint(0, 5, (2, 5, 3))
        mask = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)
        both = edgeconv(f, mask, nb, mlp)
        for b in range(2):
            torch.testing.assert_close(both[b], edgeconv(f[b], mask[b], nb[b], mlp))


class TestAttentionPool:
    def test_single_node_hand_values(self):
        res = attention_pool(torch.tensor([[1.0, 0.0]], dtype=torch.float64),
                             torch.tensor([True]), torch.eye(2, dtype=torch.float64))
        assert res.context.tolist() == [1.0, 0.0]
        # sigmoid(tanh(1)) = 0.681700 (0.68160 is a rounding slip)
        expected = 1.0 / (1.0 + math.exp(-math.tanh(1.0)))
        assert round(float(res.scores[0]), 5) == round(expected, 5) == 0.68170
        assert [round(float(v), 5) for v in res.whole] == [0.68170, 0.0]

    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        nodes = rng.normal(size=(4, 3))
        M = rng.normal(size=(3, 3))
        res = attention_pool(torch.tensor(nodes), torch.ones(4, dtype=torch.bool), torch.tensor(M))
        g, s, w = attention_pool_reference(nodes, M.tolist())
        np.testing.assert_allclose(res.context, g, rtol=1e-12)
        np.testing.assert_allclose(res.scores, s, rtol=1e-12)
        np.testing.assert_allclose(res.whole, w, rtol=1e-12)

    def test_empty_graph_degenerate(self):
        res = attention_pool(torch.zeros(3, 2), torch.zeros(3, dtype=torch.bool), torch.eye(2))
        assert bool(res.degenerate) and not res.whole.any()

    def test_batched_matches_unbatched(self):
        torch.manual_seed(2)
        f = torch.randn(3, 5, 4, dtype=torch.float64)
        mask = torch.tensor([[1, 1, 0, 0, 0], [1, 1, 1, 1, 1], [0, 0, 0, 0, 0]], dtype=torch.bool)
        M = torch.randn(4, 4, dtype=torch.float64)
        batched = attention_pool(f, mask, M)
        for b in range(3):
            single = attention_pool(f[b], mask[b], M)
            torch.testing.assert_close(batched.whole[b], single.whole)
            assert bool(batched.degenerate[b]) == bool(single.degenerate)

    def test_dimension_check(self):
        with pytest.raises(ConfigError):
            attention_pool(torch.zeros(2, 3), torch.ones(2, dtype=torch.bool), torch.eye(2))


class TestGraphBranch:
    def test_unknown_class_rejected(self):
        br = GraphBranch(num_classes=4, dim=8)
        with pytest.raises(ConfigError):
            br.class_index(torch.tensor([0, 4]))

    def test_ablated_semantics_use_dummy(self):
        br = GraphBranch(num_classes=4, dim=8)
        idx = br.class_index(torch.tensor([1, 3, VOID]), semantic=False)
        assert idx.tolist() == [5, 5, 4]

    def test_virtual_slots_do_not_matter(self):
        torch.manual_seed(0)
        br = GraphBranch(num_classes=4, dim=8).double()
        g = _graph([0, 1, 3], capacity=5)
        nb = torch.as_tensor(knn_neighbors(g, 2))
        pos = torch.as_tensor(normalized_positions(g))
        ids = torch.as_tensor(g.class_ids)
        out = br(ids, pos, torch.as_tensor(g.mask), nb, "lidar")
        pos2 = pos.clone()
        pos2[3:] = 123.0  # garbage in the padding
        torch.testing.assert_close(br(ids, pos2, torch.as_tensor(g.mask), nb, "lidar"), out)


def test_normalized_positions():
    g = build_graph([InstanceNode((64.0, 24.0), 1, 9)], capacity=2, modality="image")
    np.testing.assert_array_equal(normalized_positions(g, image_size=(128, 48))[0], [0.5, 0.5])
    with pytest.raises(ConfigError):
        normalized_positions(g)
    np.testing.assert_array_equal(normalized_positions(_graph([50]), 50.0)[0], [1, 0, 0])
