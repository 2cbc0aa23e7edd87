import json

import numpy as np
import pytest

from semgraph_reloc.errors import ConfigError, ParseError
from semgraph_reloc.graph import VOID, SemanticGraph, build_graph
from semgraph_reloc.nodes import InstanceNode


def _nodes(n, dim=3):
    return [InstanceNode(tuple(float(i + d) for d in range(dim)), i % 5 + 1, 10 + i) for i in range(n)]


def test_padding_to_capacity():
    g = build_graph(_nodes(3))
    assert g.capacity == 35 and g.real_count == 3
    assert g.mask.sum() == 3
    pad = g.nodes[3:]
    assert all(n.is_virtual and n.class_id == VOID and n.member_count == 0 for n in pad)
    assert all(n.position == (0.0, 0.0, 0.0) for n in pad)


def test_image_padding_is_two_dimensional():
    g = build_graph(_nodes(2, dim=2), capacity=4, modality="image")
    assert g.positions.shape == (4, 2)


def test_exact_capacity_untouched():
    nodes = _nodes(35)
    assert list(build_graph(nodes).nodes) == nodes


def test_downsample_is_seeded_subset_in_order():
    nodes = _nodes(60)
    a = build_graph(nodes, rng_seed=4)
    b = build_graph(nodes, rng_seed=4)
    c = build_graph(nodes, rng_seed=5)
    assert a == b and a != c
    idx = [nodes.index(n) for n in a.nodes]
    assert idx == sorted(idx) and len(set(idx)) == 35


def test_empty_graph_all_virtual():
    g = build_graph([], capacity=5)
    assert g.real_count == 0 and all(n.is_virtual for n in g.nodes)


def test_size_weighted_prefers_large():
    nodes = [InstanceNode((float(i), 0.0, 0.0), 1, 1000 if i < 5 else 1) for i in range(50)]
    g = build_graph(nodes, capacity=5, size_weighted=True)
    assert sum(n.member_count == 1000 for n in g.nodes) >= 4


def test_bad_capacity():
    with pytest.raises(ConfigError):
        build_graph(_nodes(2), capacity=0)


def test_record_round_trip():
    g = build_graph(_nodes(4), capacity=6)
    rec = json.loads(json.dumps(g.to_record()))
    assert SemanticGraph.from_record(rec) == g


def test_record_version_checked():
    rec = build_graph(_nodes(1), capacity=2).to_record()
    rec["version"] = 99
    with pytest.raises(ParseError):
        SemanticGraph.from_record(rec)


def test_virtual_slots_must_trail():
    n = _nodes(1)[0]
    with pytest.raises(ValueError):
        SemanticGraph((InstanceNode((0.0,) * 3, VOID, 0, True), n), 1, 2, "lidar")


def test_positions_and_ids():
    g = build_graph(_nodes(2), capacity=3)
    np.testing.assert_array_equal(g.class_ids, [1, 2, VOID])
    np.testing.assert_array_equal(g.positions[1], [1, 2, 3])
