"""Semantic instance nodes from labeled clouds and label rasters.

LiDAR instances come from distance-adaptive clustering: within one semantic
class every point gets a radius ``alpha * d_nn`` (``d_nn`` = distance to its
nearest same-class neighbour) and two points are linked when their distance
is within either point's radius.  Instances are the connected components of
that link graph.  Image instances are connected components of each class in
the label raster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from semgraph_reloc.errors import ConfigError, DegenerateInputError
from semgraph_reloc.ingest import LabeledPointCloud, SemanticImage

# candidate-search slack; exact distances decide membership
_SEARCH_SLACK = 1e-9
# d == R ties survive a change of units only up to rounding
_TIE_RTOL = 1e-9
_NN_CANDIDATES = 8


@dataclass(frozen=True)
class InstanceNode:
    position: tuple  # (x, y, z) metres or (u, v) pixels
    class_id: int
    member_count: int
    is_virtual: bool = False


@dataclass(frozen=True)
class ClusterConfig:
    alpha: float = 2.0
    min_member_count: int = 5
    connectivity: int = 8
    ignore_classes: tuple = (0,)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.min_member_count < 1:
            raise ConfigError(f"min_member_count must be >= 1, got {self.min_member_count}")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {self.connectivity}")
        object.__setattr__(self, "ignore_classes", tuple(int(c) for c in self.ignore_classes))


def _exact_dist(a, b):
    return np.sqrt(((a - b) ** 2).sum(-1))


def nearest_neighbor_distances(points) -> np.ndarray:
    """Exact distance from every point to its nearest other point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < 2:
        raise DegenerateInputError(f"nearest-neighbour distance needs >= 2 points, got {n}")
    k = min(n, _NN_CANDIDATES)
    _, idx = cKDTree(pts).query(pts, k=k)
    cand = _exact_dist(pts[:, None, :], pts[idx])
    cand[idx == np.arange(n)[:, None]] = np.inf
    best = cand.min(axis=1)
    if k == n:
        return best
    # the tree's own metric can disagree with the exact one only at near-ties,
    # so rows whose farthest candidate ties the best are rechecked by brute force
    farthest = np.where(np.isfinite(cand), cand, -np.inf).max(axis=1)
    for i in np.nonzero(farthest <= best * (1 + 1e-12))[0]:
        d = _exact_dist(pts[i], pts)
        d[i] = np.inf
        best[i] = d.min()
    return best


def _cluster_class(pts: np.ndarray, alpha: float) -> np.ndarray:
    """Component labels for same-class points (arbitrary label order)."""
    n = len(pts)
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    radius = alpha * nearest_neighbor_distances(pts)
    tree = cKDTree(pts)
    hits = tree.query_ball_point(pts, radius * (1 + _SEARCH_SLACK) + _SEARCH_SLACK,
                                 return_sorted=False)
    lens = np.fromiter((len(h) for h in hits), dtype=np.int64, count=n)
    src = np.repeat(np.arange(n), lens)
    dst = np.fromiter((j for h in hits for j in h), dtype=np.int64, count=int(lens.sum()))
    # the radius condition is checked from the query side, which yields the
    # symmetric OR rule once edges are treated as undirected
    keep = _exact_dist(pts[src], pts[dst]) <= radius[src] * (1 + _TIE_RTOL)
    graph = coo_matrix((np.ones(int(keep.sum()), dtype=np.int8), (src[keep], dst[keep])),
                       shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    return comp


def _dense_by_first_occurrence(raw: np.ndarray) -> np.ndarray:
    _, first, inverse = np.unique(raw, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first, kind="stable"), kind="stable")
    return order[inverse]


def adaptive_cluster(cloud: LabeledPointCloud, config: ClusterConfig = ClusterConfig()) -> np.ndarray:
    """Per-point instance ids, dense and ordered by first-occurring point index."""
    n = len(cloud)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    raw = np.empty(n, dtype=np.int64)
    offset = 0
    for cls in np.unique(cloud.labels):
        members = np.nonzero(cloud.labels == cls)[0]
        comp = _cluster_class(cloud.points[members], config.alpha)
        raw[members] = comp + offset
        offset += int(comp.max()) + 1
    return _dense_by_first_occurrence(raw)


def lidar_nodes(cloud: LabeledPointCloud, instance_ids, config: ClusterConfig = ClusterConfig()):
    ids = np.asarray(instance_ids, dtype=np.int64)
    if len(ids) != len(cloud):
        raise ValueError(f"{len(ids)} instance ids for {len(cloud)} points")
    nodes = []
    if len(ids) == 0:
        return nodes
    ignore = set(config.ignore_classes)
    counts = np.bincount(ids)
    sums = np.stack([np.bincount(ids, weights=cloud.points[:, d], minlength=len(counts))
                     for d in range(3)], axis=1)
    first = np.full(len(counts), -1)
    first[ids[::-1]] = np.arange(len(ids))[::-1]
    for inst in range(len(counts)):
        if counts[inst] < config.min_member_count:
            continue
        cls = int(cloud.labels[first[inst]])
        if cls in ignore:
            continue
        centroid = sums[inst] / counts[inst]
        nodes.append(InstanceNode(tuple(float(c) for c in centroid), cls, int(counts[inst])))
    return nodes


def cluster_cloud(cloud: LabeledPointCloud, config: ClusterConfig = ClusterConfig()):
    return lidar_nodes(cloud, adaptive_cluster(cloud, config), config)


def image_nodes(image: SemanticImage, config: ClusterConfig = ClusterConfig(min_member_count=50)):
    structure = np.ones((3, 3)) if config.connectivity == 8 else ndimage.generate_binary_structure(2, 1)
    nodes = []
    ignore = set(config.ignore_classes)
    for cls in np.unique(image.label_map):
        if int(cls) in ignore:
            continue
        comp, n_comp = ndimage.label(image.label_map == cls, structure=structure)
        if n_comp == 0:
            continue
        idx = np.arange(1, n_comp + 1)
        counts = ndimage.sum_labels(np.ones_like(comp), comp, idx)
        rows, cols = np.indices(comp.shape)
        v = ndimage.sum_labels(rows, comp, idx) / counts
        u = ndimage.sum_labels(cols, comp, idx) / counts
        for c, uu, vv in zip(counts, u, v):
            if c >= config.min_member_count:
                nodes.append(InstanceNode((float(uu), float(vv)), int(cls), int(c)))
    return nodes
