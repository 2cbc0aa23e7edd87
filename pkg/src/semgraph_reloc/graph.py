"""Fixed-capacity semantic graphs with virtual-node padding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semgraph_reloc.errors import ConfigError, ParseError
from semgraph_reloc.nodes import InstanceNode

VOID = -1
GRAPH_FORMAT_VERSION = 1
MODALITIES = ("lidar", "image")

_POS_DIM = {"lidar": 3, "image": 2}


def virtual_node(modality: str) -> InstanceNode:
    return InstanceNode((0.0,) * _POS_DIM[modality], VOID, 0, True)


@dataclass(frozen=True)
class SemanticGraph:
    nodes: tuple
    real_count: int
    capacity: int
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if len(self.nodes) != self.capacity or not 0 <= self.real_count <= self.capacity:
            raise ValueError("graph slots inconsistent with capacity/real_count")
        for i, node in enumerate(self.nodes):
            if node.is_virtual != (i >= self.real_count):
                raise ValueError(f"slot {i}: virtual flag out of place")

    @property
    def real_nodes(self) -> list:
        return list(self.nodes[: self.real_count])

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.capacity) < self.real_count

    @property
    def positions(self) -> np.ndarray:
        return np.array([n.position for n in self.nodes], dtype=np.float64).reshape(
            self.capacity, _POS_DIM[self.modality])

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([n.class_id for n in self.nodes], dtype=np.int64)

    def to_record(self) -> dict:
        return {
            "version": GRAPH_FORMAT_VERSION,
            "capacity": self.capacity,
            "real_count": self.real_count,
            "modality": self.modality,
            "slots": [
                {"class_id": n.class_id, "position": list(n.position),
                 "member_count": n.member_count, "is_virtual": n.is_virtual}
                for n in self.nodes
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SemanticGraph":
        if rec.get("version") != GRAPH_FORMAT_VERSION:
            raise ParseError(f"unsupported graph record version {rec.get('version')!r}")
        try:
            nodes = tuple(
                InstanceNode(tuple(float(x) for x in s["position"]), int(s["class_id"]),
                             int(s["member_count"]), bool(s["is_virtual"]))
                for s in rec["slots"]
            )
            return cls(nodes, int(rec["real_count"]), int(rec["capacity"]), rec["modality"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed graph record: {exc}") from None


def build_graph(nodes, capacity: int = 35, rng_seed: int = 0, modality: str = "lidar",
                size_weighted: bool = False) -> SemanticGraph:
    """Keep at most ``capacity`` nodes, padding the rest with virtual slots.

    Oversized inputs are down-sampled uniformly without replacement (or in
    proportion to ``member_count`` with ``size_weighted``); the kept nodes
    stay in input order.
    """
    if capacity < 1:
        raise ConfigError(f"capacity must be >= 1, got {capacity}")
    nodes = list(nodes)
    if len(nodes) > capacity:
        rng = np.random.default_rng(rng_seed)
        p = None
        if size_weighted:
            sizes = np.array([n.member_count for n in nodes], dtype=np.float64)
            p = sizes / sizes.sum()
        keep = np.sort(rng.choice(len(nodes), size=capacity, replace=False, p=p))
        nodes = [nodes[i] for i in keep]
    real = len(nodes)
    pad = [virtual_node(modality)] * (capacity - real)
    return SemanticGraph(tuple(nodes) + tuple(pad), real, capacity, modality)
