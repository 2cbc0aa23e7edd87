"""Point and image encoders, attention fusion, classification head and loss.

The encoders are deliberately small: a two-level set-abstraction network for
points and a two-block residual CNN for images.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from semgraph_reloc.errors import ConfigError, DegenerateInputError

BCE_EPS = 1e-7
# set-abstraction sampling in normalised coordinates (range scale 50 m)
DEFAULT_GROUPING = dict(n1=64, r1=0.1, k1=16, n2=16, r2=0.2, k2=16)


# ---------------------------------------------------------------------------
# point encoder


class GroupingPlan(NamedTuple):
    """Index tensors for both set-abstraction levels (no gradient flows through them)."""

    centers1: torch.Tensor  # (B, S1) indices into the N input points
    groups1: torch.Tensor  # (B, S1, K1) indices into the N input points
    centers2: torch.Tensor  # (B, S2) indices into the S1 level-1 centres
    groups2: torch.Tensor  # (B, S2, K2) indices into the S1 level-1 centres


def _batch_take(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    b = torch.arange(x.shape[0], device=x.device).view(-1, *([1] * (idx.dim() - 1)))
    return x[b, idx]


@torch.no_grad()
def farthest_point_sample(xyz: torch.Tensor, n_samples: int) -> torch.Tensor:
    """Farthest-point sampling seeded at the point farthest from the centroid.

    Using the centroid instead of index 0 makes the selected set independent
    of the input point order.
    """
    bsz, n, _ = xyz.shape
    n_samples = min(n_samples, n)
    out = torch.empty(bsz, n_samples, dtype=torch.long, device=xyz.device)
    center = xyz.mean(1, keepdim=True)
    cur = ((xyz - center) ** 2).sum(-1).argmax(-1)
    best = torch.full((bsz, n), float("inf"), dtype=xyz.dtype, device=xyz.device)
    rows = torch.arange(bsz, device=xyz.device)
    for s in range(n_samples):
        out[:, s] = cur
        d = ((xyz - xyz[rows, cur].unsqueeze(1)) ** 2).sum(-1)
        best = torch.minimum(best, d)
        cur = best.argmax(-1)
    return out


@torch.no_grad()
def ball_group(xyz: torch.Tensor, centers: torch.Tensor, radius: float, k: int) -> torch.Tensor:
    """The ``k`` nearest points within ``radius`` of each centre, padded with the nearest."""
    k = min(k, xyz.shape[1])
    d = ((centers.unsqueeze(2) - xyz.unsqueeze(1)) ** 2).sum(-1)
    dist, idx = torch.topk(d, k, dim=-1, largest=False, sorted=True)
    outside = dist > radius ** 2
    return torch.where(outside, idx[..., :1].expand_as(idx), idx)


def make_grouping_plan(xyz: torch.Tensor, n1=64, r1=0.1, k1=16, n2=16, r2=0.2, k2=16) -> GroupingPlan:
    c1 = farthest_point_sample(xyz, n1)
    p1 = _batch_take(xyz, c1)
    g1 = ball_group(xyz, p1, r1, k1)
    c2 = farthest_point_sample(p1, n2)
    g2 = ball_group(p1, _batch_take(p1, c2), r2, k2)
    return GroupingPlan(c1, g1, c2, g2)


def _mlp(*dims) -> nn.Sequential:
    layers = []
    for a, b in zip(dims[:-1], dims[1:]):
        layers += [nn.Linear(a, b), nn.ReLU()]
    return nn.Sequential(*layers)


class PointEncoder(nn.Module):
    """Two set-abstraction levels then a global max-pool.

    Per-point input is the normalised xyz concatenated with a learned class
    embedding.  ``forward`` returns ``(F_p, level2_features)``, the latter
    being the per-centroid features of the second level.
    """

    def __init__(self, num_classes: int, out_dim: int = 128, class_dim: int = 8,
                 widths=(32, 64, 64, 128), grouping=None):
        super().__init__()
        self.num_classes = num_classes
        self.grouping = dict(DEFAULT_GROUPING, **(grouping or {}))
        self.radii = (self.grouping["r1"], self.grouping["r2"])
        self.class_embed = nn.Embedding(num_classes + 2, class_dim)
        w1a, w1b, w2a, w2b = widths
        self.sa1 = _mlp(3 + class_dim, w1a, w1b)
        self.sa2 = _mlp(3 + w1b, w2a, w2b)
        self.glob = nn.Linear(3 + w2b, out_dim)

    def forward(self, xyz, class_idx, plan: GroupingPlan | None = None):
        if xyz.shape[-2] == 0:
            raise DegenerateInputError("point encoder needs at least one point")
        if plan is None:
            plan = make_grouping_plan(xyz, **self.grouping)
        feats = torch.cat([xyz, self.class_embed(class_idx)], dim=-1)

        p1 = _batch_take(xyz, plan.centers1)
        rel = (_batch_take(xyz, plan.groups1) - p1.unsqueeze(2)) / self.radii[0]
        grouped = torch.cat([rel, _batch_take(feats, plan.groups1)[..., 3:]], dim=-1)
        f1 = self.sa1(grouped).amax(dim=2)

        p2 = _batch_take(p1, plan.centers2)
        rel = (_batch_take(p1, plan.groups2) - p2.unsqueeze(2)) / self.radii[1]
        f2 = self.sa2(torch.cat([rel, _batch_take(f1, plan.groups2)], dim=-1)).amax(dim=2)

        global_feat = self.glob(torch.cat([p2, f2], dim=-1)).amax(dim=1)
        return global_feat, f2


# ---------------------------------------------------------------------------
# image encoder


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, padding_mode="replicate")
        self.skip = nn.Conv2d(cin, cout, 1, stride)

    def forward(self, x):
        return torch.relu(self.conv2(torch.relu(self.conv1(x))) + self.skip(x))


def palette_rgb(label_map: np.ndarray) -> np.ndarray:
    """Fixed pseudo-colour rendering of a label raster, used when no RGB exists."""
    ids = np.asarray(label_map, dtype=np.int64)
    return np.stack([((ids * m) % 251) / 250.0 for m in (67, 131, 199)], axis=-1)


class ImageEncoder(nn.Module):
    """Residual stack over ``concat(rgb, class embedding)``; replicate padding throughout."""

    def __init__(self, num_classes: int, out_dim: int = 128, map_dim: int = 128,
                 class_dim: int = 8, widths=(16, 32)):
        super().__init__()
        self.num_classes = num_classes
        self.class_embed = nn.Embedding(num_classes + 2, class_dim)
        w0, w1 = widths
        self.stem = nn.Conv2d(3 + class_dim, w0, 3, 1, 1, padding_mode="replicate")
        self.block1 = ResidualBlock(w0, w1, 2)
        self.block2 = ResidualBlock(w1, map_dim, 2)
        self.proj = nn.Linear(map_dim, out_dim)

    def forward(self, rgb, class_idx):
        """``rgb`` is ``(B, 3, H, W)``; returns ``(F_i, F_h)`` with ``F_h`` ``(B, D_h, h, w)``."""
        if rgb.shape[-1] == 0 or rgb.shape[-2] == 0:
            raise DegenerateInputError("image encoder needs a non-empty image")
        emb = self.class_embed(class_idx).permute(0, 3, 1, 2)
        x = torch.relu(self.stem(torch.cat([rgb, emb], dim=1)))
        fh = self.block2(self.block1(x))
        return self.proj(fh.mean(dim=(2, 3))), fh


# ---------------------------------------------------------------------------
# fusion and head


class AttentionFusion(nn.Module):
    """Gate the image feature map by a score computed from both global features.

    ``multiply``: ``F_wi = pool(sigmoid(W [F_p, F_i] + b) * F_h)``;
    ``add``: ``F_wi = pool(F_h) + sigmoid(W [F_p, F_i] + b)``.
    """

    def __init__(self, global_dim: int = 128, map_dim: int = 128, mode: str = "multiply"):
        super().__init__()
        if mode not in ("multiply", "add"):
            raise ConfigError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.global_dim = global_dim
        self.map_dim = map_dim
        self.score = nn.Linear(2 * global_dim, map_dim)

    def gate(self, fp, fi):
        return torch.sigmoid(self.score(torch.cat([fp, fi], dim=-1)))

    def forward(self, fp, fi, fh):
        if fp.shape[-1] != self.global_dim or fi.shape[-1] != self.global_dim or fh.shape[1] != self.map_dim:
            raise ConfigError(
                f"fusion expects global dim {self.global_dim} and map dim {self.map_dim}, got "
                f"F_p {tuple(fp.shape)}, F_i {tuple(fi.shape)}, F_h {tuple(fh.shape)}")
        satt = self.gate(fp, fi)
        if self.mode == "multiply":
            return (satt[..., None, None] * fh).mean(dim=(2, 3))
        return fh.mean(dim=(2, 3)) + satt


class ClassifierHead(nn.Module):
    """Shared perceptron per branch, concatenation, FC stack to two logits.

    Branch features narrower than the shared input width are zero-padded on
    the right so one set of weights serves every branch.
    """

    n_branches = 4

    def __init__(self, in_dim: int = 128, shared_dim: int = 64, fc=(128, 64)):
        super().__init__()
        self.in_dim = in_dim
        self.shared = _mlp(in_dim, shared_dim, shared_dim)
        dims = (self.n_branches * shared_dim, *fc)
        self.fc = nn.Sequential(_mlp(*dims), nn.Linear(dims[-1], 2))

    def logits(self, *branches):
        padded = [F.pad(b, (0, self.in_dim - b.shape[-1])) for b in branches]
        return self.fc(torch.cat([self.shared(b) for b in padded], dim=-1))

    def forward(self, f_wi, f_p, whole_image, whole_lidar):
        """Match probability ``y`` in [0, 1]."""
        return torch.softmax(self.logits(f_wi, f_p, whole_image, whole_lidar), dim=-1)[..., 1]


def bce_loss(y, label, eps: float = BCE_EPS):
    """Mean two-class cross-entropy of match probabilities ``y`` against 0/1 labels."""
    y = torch.as_tensor(y, dtype=torch.get_default_dtype()) if not torch.is_tensor(y) else y
    label = torch.as_tensor(label, dtype=y.dtype, device=y.device)
    if bool(((label != 0) & (label != 1)).any()):
        raise ValueError("labels must be 0 or 1")
    q = y.clamp(eps, 1 - eps)
    return -(label * torch.log(q) + (1 - label) * torch.log(1 - q)).mean()
