"""Graph similarity branch: node embedding, k-NN EdgeConv, attention pooling.

Tensors are batched as ``(B, C, ...)`` with ``C`` the graph capacity and a
boolean ``mask`` marking real slots; unbatched ``(C, ...)`` inputs are also
accepted by the functional pieces.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from semgraph_reloc.errors import ConfigError, DegenerateInputError
from semgraph_reloc.graph import VOID, SemanticGraph


def knn_neighbors(graph: SemanticGraph, k: int) -> np.ndarray:
    """``(capacity, k)`` neighbour indices among real nodes, by position.

    Ties go to the lower index.  With fewer than ``k`` other real nodes the
    available ones repeat cyclically; a lone real node and every virtual slot
    point at themselves.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    r = graph.real_count
    if r == 0:
        raise DegenerateInputError("k-NN on a graph without real nodes")
    out = np.repeat(np.arange(graph.capacity)[:, None], k, axis=1)
    pos = graph.positions[:r]
    d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, : r - 1]
    if r > 1:
        reps = np.resize(np.arange(r - 1), k) if r - 1 < k else np.arange(k)
        out[:r] = order[:, reps]
    return out


def _gather_rows(features: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
    if features.dim() == 2:
        return features[neighbors]
    b = torch.arange(features.shape[0], device=features.device)[:, None, None]
    return features[b, neighbors]


def edgeconv(features: torch.Tensor, mask: torch.Tensor, neighbors: torch.Tensor, mlp) -> torch.Tensor:
    """``out_i = max_j mlp(f_i, f_i - f_j)`` over the neighbours of ``i``; virtual rows are zero."""
    neighbors = torch.as_tensor(neighbors, dtype=torch.long, device=features.device)
    mask = torch.as_tensor(mask, dtype=torch.bool, device=features.device)
    f_j = _gather_rows(features, neighbors)
    f_i = features.unsqueeze(-2).expand_as(f_j)
    h = mlp(f_i, f_i - f_j)
    out = h.amax(dim=-2)
    return out * mask.unsqueeze(-1).to(out.dtype)


class EdgeMLP(nn.Module):
    """Two-layer perceptron applied to ``concat(f_i, f_i - f_j)``."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or out_dim
        self.fc1 = nn.Linear(2 * in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, center, diff):
        return self.fc2(torch.relu(self.fc1(torch.cat([center, diff], dim=-1))))


class PoolResult(NamedTuple):
    context: torch.Tensor  # g, (..., D)
    scores: torch.Tensor  # attention per slot, (..., C); zero on virtual slots
    whole: torch.Tensor  # F_whole, (..., D)
    degenerate: torch.Tensor  # True where the graph has no real node


def attention_pool(features: torch.Tensor, mask: torch.Tensor, M: torch.Tensor) -> PoolResult:
    """Attention readout with learnable context matrix ``M``.

    ``g = mean over real i of (n_i M)``; ``a_i = sigmoid(n_i . tanh(g))``;
    ``F_whole = sum over real i of a_i n_i``.
    """
    if features.shape[-1] != M.shape[0] or M.shape[0] != M.shape[1]:
        raise ConfigError(f"feature dim {features.shape[-1]} incompatible with M {tuple(M.shape)}")
    mask = torch.as_tensor(mask, dtype=torch.bool, device=features.device)
    if features.dim() == 2:
        # single graph: reduce over the real rows only so padding cannot
        # change the result in any bit
        real = features[mask]
        n = real.shape[0]
        scores = features.new_zeros(features.shape[0])
        if n == 0:
            zero = features.new_zeros(features.shape[1])
            return PoolResult(zero, scores, zero, torch.tensor(True))
        g = (real @ M).sum(0) / n
        att = torch.sigmoid(real @ torch.tanh(g))
        scores = scores.masked_scatter(mask, att)
        whole = (att.unsqueeze(-1) * real).sum(0)
        return PoolResult(g, scores, whole, torch.tensor(False))

    m = mask.to(features.dtype)
    n = m.sum(-1, keepdim=True)
    g = ((features @ M) * m.unsqueeze(-1)).sum(-2) / n.clamp(min=1)
    att = torch.sigmoid((features @ torch.tanh(g).unsqueeze(-1)).squeeze(-1)) * m
    whole = (att.unsqueeze(-1) * features).sum(-2)
    return PoolResult(g, att, whole, n.squeeze(-1) == 0)


class GraphBranch(nn.Module):
    """Embedding + two EdgeConv layers + attention pooling for one graph modality.

    Class ids index an embedding table with two extra rows: ``num_classes``
    for virtual slots and ``num_classes + 1`` for the shared dummy class used
    when semantics are ablated away.
    """

    def __init__(self, num_classes: int, dim: int = 64, class_dim: int | None = None):
        super().__init__()
        class_dim = class_dim or dim // 2
        if not 0 < class_dim < dim:
            raise ConfigError(f"class embedding dim {class_dim} must lie in (0, {dim})")
        self.num_classes = num_classes
        self.dim = dim
        self.class_embed = nn.Embedding(num_classes + 2, class_dim)
        self.pos_proj = nn.ModuleDict({
            "lidar": nn.Linear(3, dim - class_dim),
            "image": nn.Linear(2, dim - class_dim),
        })
        self.edge1 = EdgeMLP(dim, dim)
        self.edge2 = EdgeMLP(dim, dim)
        self.M = nn.Parameter(torch.eye(dim) + 0.01 * torch.randn(dim, dim))

    @property
    def void_index(self) -> int:
        return self.num_classes

    @property
    def dummy_index(self) -> int:
        return self.num_classes + 1

    def class_index(self, class_ids: torch.Tensor, semantic: bool = True) -> torch.Tensor:
        bad = (class_ids != VOID) & ((class_ids < 0) | (class_ids >= self.num_classes))
        if bool(bad.any()):
            raise ConfigError(f"class id {int(class_ids[bad][0])} has no embedding row "
                              f"(num_classes={self.num_classes})")
        idx = torch.where(class_ids == VOID, torch.full_like(class_ids, self.void_index), class_ids)
        if not semantic:
            idx = torch.where(class_ids == VOID, idx, torch.full_like(idx, self.dummy_index))
        return idx

    def embed_nodes(self, class_ids, positions, modality: str, semantic: bool = True):
        """``(..., C, D)`` features; ``positions`` must already be normalised."""
        emb = self.class_embed(self.class_index(class_ids, semantic))
        return torch.cat([emb, self.pos_proj[modality](positions)], dim=-1)

    def encode(self, features, mask, neighbors):
        x = edgeconv(features, mask, neighbors, self.edge1)
        return edgeconv(x, mask, neighbors, self.edge2)

    def forward(self, class_ids, positions, mask, neighbors, modality: str, semantic: bool = True):
        f = self.embed_nodes(class_ids, positions, modality, semantic)
        return attention_pool(self.encode(f, mask, neighbors), mask, self.M).whole


def normalized_positions(graph: SemanticGraph, range_scale: float = 50.0, image_size=None) -> np.ndarray:
    """LiDAR positions divided by ``range_scale``; image centroids by ``(width, height)``."""
    pos = graph.positions
    if graph.modality == "lidar":
        return pos / range_scale
    if image_size is None:
        raise ConfigError("image graphs need the image size for normalisation")
    w, h = image_size
    return pos / np.array([w, h], dtype=np.float64)
