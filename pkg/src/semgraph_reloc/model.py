"""Full matching network and the per-scene tensors it consumes."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from torch import nn

from semgraph_reloc.config import ModelConfig
from semgraph_reloc.encoders import (
    DEFAULT_GROUPING,
    AttentionFusion,
    ClassifierHead,
    GroupingPlan,
    ImageEncoder,
    PointEncoder,
    make_grouping_plan,
    palette_rgb,
)
from semgraph_reloc.errors import ConfigError
from semgraph_reloc.graph import VOID, SemanticGraph, build_graph
from semgraph_reloc.graphnet import GraphBranch, knn_neighbors, normalized_positions
from semgraph_reloc.ingest import LabeledPointCloud, SemanticImage
from semgraph_reloc.nodes import ClusterConfig, cluster_cloud, image_nodes


@dataclass(frozen=True)
class BranchMask:
    semantic: bool = True
    graph: bool = True


def apply_ablation(name: str) -> BranchMask:
    if name == "full":
        return BranchMask(semantic=True, graph=True)
    if name == "base+semantic":
        return BranchMask(semantic=True, graph=False)
    if name == "base":
        return BranchMask(semantic=False, graph=False)
    raise ConfigError(f"unknown ablation {name!r}; expected base, base+semantic or full")


def scene_seed(seed: int, scene) -> int:
    return zlib.crc32(f"{scene[0]}:{int(scene[1])}".encode()) ^ (seed & 0xFFFFFFFF)


# ---------------------------------------------------------------------------
# per-scene features


def _graph_tensors(graph: SemanticGraph, k: int, range_scale: float, image_size=None) -> dict:
    if graph.real_count:
        nbr = knn_neighbors(graph, k)
    else:
        nbr = np.repeat(np.arange(graph.capacity)[:, None], k, axis=1)
    return {
        "cls": torch.as_tensor(graph.class_ids),
        "pos": torch.as_tensor(normalized_positions(graph, range_scale, image_size), dtype=torch.float32),
        "mask": torch.as_tensor(graph.mask),
        "nbr": torch.as_tensor(nbr),
    }


def cloud_features(cloud: LabeledPointCloud, cfg: ModelConfig, cluster: ClusterConfig,
                   seed: int, graph: SemanticGraph | None = None) -> dict:
    """Tensors for the LiDAR side of a pair: sampled points, grouping plan, graph."""
    rng = np.random.default_rng(seed)
    n = len(cloud)
    if n == 0:
        raise ConfigError(f"scene {cloud.scene_id}: empty point cloud")
    idx = rng.choice(n, cfg.n_points, replace=n < cfg.n_points)
    idx = np.sort(idx)
    xyz = torch.as_tensor(cloud.points[idx] / cfg.range_scale, dtype=torch.float32)
    plan = make_grouping_plan(xyz.unsqueeze(0), **DEFAULT_GROUPING)
    if graph is None:
        graph = build_graph(cluster_cloud(cloud, cluster), cfg.capacity, seed, "lidar",
                            cfg.size_weighted_sampling)
    return {
        "xyz": xyz,
        "pcls": torch.as_tensor(cloud.labels[idx]),
        "plan": [p.squeeze(0) for p in plan],
        "graph": _graph_tensors(graph, cfg.k, cfg.range_scale),
    }


def image_features(image: SemanticImage, cfg: ModelConfig, cluster: ClusterConfig,
                   seed: int, graph: SemanticGraph | None = None) -> dict:
    """Tensors for the camera side: encoder raster and image graph."""
    rgb = image.rgb if image.rgb is not None else palette_rgb(image.label_map)
    labels = image.label_map
    if cfg.encoder_image_size is not None:
        w, h = cfg.encoder_image_size
        labels = np.asarray(Image.fromarray(labels.astype(np.int32)).resize((w, h), Image.NEAREST),
                            dtype=np.int64)
        rgb8 = Image.fromarray(np.round(rgb * 255).astype(np.uint8), mode="RGB")
        rgb = np.asarray(rgb8.resize((w, h), Image.BILINEAR), dtype=np.float64) / 255.0
    if graph is None:
        graph = build_graph(image_nodes(image, cluster), cfg.capacity, seed, "image",
                            cfg.size_weighted_sampling)
    return {
        "rgb": torch.as_tensor(rgb, dtype=torch.float32).permute(2, 0, 1).contiguous(),
        "icls": torch.as_tensor(labels),
        "graph": _graph_tensors(graph, cfg.k, cfg.range_scale, (image.width, image.height)),
    }


def collate(cloud_feats: list[dict], image_feats: list[dict]) -> dict:
    def stack_graph(items):
        return {k: torch.stack([g["graph"][k] for g in items]) for k in items[0]["graph"]}

    return {
        "xyz": torch.stack([c["xyz"] for c in cloud_feats]),
        "pcls": torch.stack([c["pcls"] for c in cloud_feats]),
        "plan": GroupingPlan(*[torch.stack([c["plan"][i] for c in cloud_feats]) for i in range(4)]),
        "lidar_graph": stack_graph(cloud_feats),
        "rgb": torch.stack([f["rgb"] for f in image_feats]),
        "icls": torch.stack([f["icls"] for f in image_feats]),
        "image_graph": stack_graph(image_feats),
    }


# ---------------------------------------------------------------------------
# model


class MatchModel(nn.Module):
    """Point/image encoders with attention fusion plus one graph branch per modality."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        nc = cfg.num_classes
        self.point_encoder = PointEncoder(nc, cfg.global_dim, cfg.point_class_dim, tuple(cfg.point_widths))
        self.image_encoder = ImageEncoder(nc, cfg.global_dim, cfg.map_dim, cfg.image_class_dim,
                                          tuple(cfg.image_widths))
        self.fusion = AttentionFusion(cfg.global_dim, cfg.map_dim, cfg.fusion_mode)
        self.graph_lidar = GraphBranch(nc, cfg.graph_dim)
        self.graph_image = self.graph_lidar if cfg.share_graph_weights else GraphBranch(nc, cfg.graph_dim)
        self.head = ClassifierHead(max(cfg.global_dim, cfg.map_dim, cfg.graph_dim), cfg.shared_dim)

    def _class_index(self, ids: torch.Tensor, semantic: bool) -> torch.Tensor:
        nc = self.cfg.num_classes
        if bool(((ids < 0) | (ids >= nc)).any()):
            bad = int(ids[(ids < 0) | (ids >= nc)][0])
            raise ConfigError(f"class id {bad} has no embedding row (num_classes={nc})")
        return ids if semantic else torch.full_like(ids, nc + 1)

    def branch_features(self, batch: dict, mask: BranchMask = BranchMask()):
        fp, _ = self.point_encoder(batch["xyz"], self._class_index(batch["pcls"], mask.semantic),
                                   batch["plan"])
        fi, fh = self.image_encoder(batch["rgb"], self._class_index(batch["icls"], mask.semantic))
        fwi = self.fusion(fp, fi, fh)
        bsz = fp.shape[0]
        if mask.graph:
            lg, ig = batch["lidar_graph"], batch["image_graph"]
            whole_l = self.graph_lidar(lg["cls"], lg["pos"], lg["mask"], lg["nbr"], "lidar", mask.semantic)
            whole_i = self.graph_image(ig["cls"], ig["pos"], ig["mask"], ig["nbr"], "image", mask.semantic)
        else:
            whole_l = whole_i = fp.new_zeros(bsz, self.cfg.graph_dim)
        return fwi, fp, whole_i, whole_l

    def forward(self, batch: dict, mask: BranchMask = BranchMask()) -> torch.Tensor:
        return self.head(*self.branch_features(batch, mask))


def graph_parameters(model: MatchModel):
    seen = set()
    for branch in (model.graph_lidar, model.graph_image):
        for p in branch.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                yield p


__all__ = ["BranchMask", "MatchModel", "apply_ablation", "cloud_features", "image_features",
           "collate", "scene_seed", "graph_parameters", "VOID"]
