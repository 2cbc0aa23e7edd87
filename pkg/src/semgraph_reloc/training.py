"""Adam training loop, scene feature caching and checkpoint container."""

from __future__ import annotations

import io
import json
import logging
import time
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from semgraph_reloc.config import ModelConfig, RunConfig
from semgraph_reloc.encoders import bce_loss
from semgraph_reloc.errors import CheckpointError, ConfigError, TrainingError
from semgraph_reloc.model import (
    BranchMask,
    MatchModel,
    apply_ablation,
    cloud_features,
    collate,
    image_features,
    scene_seed,
)
from semgraph_reloc.nodes import ClusterConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_META_KEY = "__meta__"


def cluster_configs(cfg: RunConfig) -> tuple[ClusterConfig, ClusterConfig]:
    c = cfg.cluster
    lidar = ClusterConfig(c.alpha, c.lidar_min_members, c.connectivity, tuple(c.ignore_classes))
    image = ClusterConfig(c.alpha, c.image_min_members, c.connectivity, tuple(c.ignore_classes))
    return lidar, image


class PairFeatures:
    """Per-scene model inputs, computed once and reused across epochs.

    ``source`` is anything exposing ``cloud(scene)`` and ``image(scene)``
    (a :class:`~semgraph_reloc.ingest.KittiRoot` or a synthetic dataset).
    """

    def __init__(self, source, cfg: RunConfig):
        self.source = source
        self.cfg = cfg
        self.lidar_cluster, self.image_cluster = cluster_configs(cfg)
        self._clouds: dict = {}
        self._images: dict = {}

    def cloud(self, scene):
        scene = (scene[0], int(scene[1]))
        if scene not in self._clouds:
            self._clouds[scene] = cloud_features(self.source.cloud(scene), self.cfg.model,
                                                 self.lidar_cluster, scene_seed(self.cfg.rng_seed, scene))
        return self._clouds[scene]

    def image(self, scene):
        scene = (scene[0], int(scene[1]))
        if scene not in self._images:
            self._images[scene] = image_features(self.source.image(scene), self.cfg.model,
                                                 self.image_cluster, scene_seed(self.cfg.rng_seed, scene))
        return self._images[scene]

    def batch(self, pairs) -> dict:
        return collate([self.cloud(p.cloud_scene) for p in pairs],
                       [self.image(p.image_scene) for p in pairs])


def set_determinism(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True, warn_only=True)


@torch.no_grad()
def predict(model: MatchModel, features: PairFeatures, pairs, mask: BranchMask, batch_size: int = 64):
    model.eval()
    out = []
    for start in range(0, len(pairs), batch_size):
        out.append(model(features.batch(pairs[start:start + batch_size]), mask))
    return torch.cat(out).numpy().astype(np.float64) if out else np.zeros(0)


def train(pairs, source, config: RunConfig, val_pairs=None, val_source=None, progress=None,
          features: PairFeatures | None = None):
    """Optimise every parameter with Adam; returns ``(model, epoch_log)``.

    ``epoch_log`` holds one dict per epoch with ``epoch``, ``train_loss`` and
    ``val_f1`` (``None`` without validation pairs).  Pass ``features`` to
    reuse a scene cache across runs over the same source.
    """
    from semgraph_reloc.evaluation import f1_score

    tc = config.train
    tc.validate()
    if not pairs:
        raise ConfigError("training needs at least one pair")
    mask = apply_ablation(tc.ablation)
    set_determinism(tc.rng_seed)
    model = MatchModel(config.model)
    if features is None:
        features = PairFeatures(source, config)
    val_features = None
    if val_pairs:
        val_features = features if val_source is None or val_source is source \
            else PairFeatures(val_source, config)

    t0 = time.perf_counter()
    for p in pairs:
        features.cloud(p.cloud_scene)
        features.image(p.image_scene)
    log.info("prepared %d training pairs in %.1fs", len(pairs), time.perf_counter() - t0)

    opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate, betas=(tc.beta1, tc.beta2))
    sched = None
    if tc.decay_every > 0:
        sched = torch.optim.lr_scheduler.StepLR(opt, tc.decay_every, tc.decay_gamma)
    gen = torch.Generator().manual_seed(tc.rng_seed)
    labels = torch.tensor([p.label for p in pairs], dtype=torch.float32)
    history = []
    for epoch in range(tc.epochs):
        model.train()
        order = torch.randperm(len(pairs), generator=gen).tolist()
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            batch_pairs = [pairs[i] for i in idx]
            y = model(features.batch(batch_pairs), mask)
            loss = bce_loss(y, labels[idx])
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b} "
                    f"(first pair {batch_pairs[0].image_scene} / {batch_pairs[0].cloud_scene})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        if sched is not None:
            sched.step()
        entry = {"epoch": epoch, "train_loss": total / seen, "val_f1": None}
        if val_features is not None:
            scores = predict(model, val_features, val_pairs, mask)
            entry["val_f1"] = f1_score(scores, [p.label for p in val_pairs]).f1
        history.append(entry)
        log.info("epoch %d train_loss %.4f val_f1 %s (%.0fs)", epoch, entry["train_loss"],
                 entry["val_f1"], time.perf_counter() - t0)
        if progress is not None:
            progress(entry)
    return model, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MatchModel, path, config: RunConfig | None = None):
    """Write every parameter tensor plus a JSON header into one zip archive."""
    state = model.state_dict()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config.digest() if config is not None else None,
        "model": asdict(model.cfg),
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
                    for k, v in state.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_META_KEY + ".json", json.dumps(meta, sort_keys=True))
        for name, tensor in state.items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(name + ".npy", buf.getvalue())


def load_checkpoint(path, model_config: ModelConfig | None = None) -> MatchModel:
    """Rebuild the model stored at ``path``.

    When ``model_config`` is given its structural fields must agree with the
    checkpoint; any disagreement raises :class:`CheckpointError` naming the field.
    """
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"corrupt container {path}: {exc}") from None
    with zf:
        try:
            meta = json.loads(zf.read(_META_KEY + ".json"))
        except (KeyError, ValueError, zipfile.BadZipFile) as exc:
            raise CheckpointError(f"corrupt container {path}: unreadable header ({exc})") from None
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"format_version: checkpoint has {meta.get('format_version')!r}, "
                f"reader supports {CHECKPOINT_VERSION}")
        try:
            stored = ModelConfig(**meta["model"])
        except TypeError as exc:
            raise CheckpointError(f"model: unrecognised model config in header ({exc})") from None
        if model_config is not None:
            for field_name, want in model_config.structure().items():
                have = getattr(stored, field_name)
                if have != want:
                    raise CheckpointError(f"{field_name}: checkpoint has {have!r}, config has {want!r}")
        model = MatchModel(stored)
        expected = model.state_dict()
        state = {}
        for name, ref in expected.items():
            info = meta["tensors"].get(name)
            if info is None:
                raise CheckpointError(f"{name}: tensor missing from checkpoint")
            if list(ref.shape) != info["shape"]:
                raise CheckpointError(f"{name}: shape {info['shape']} in checkpoint, model needs "
                                      f"{list(ref.shape)}")
            try:
                arr = np.load(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)
            except (KeyError, ValueError, OSError, zipfile.BadZipFile) as exc:
                raise CheckpointError(f"{name}: corrupt tensor data ({exc})") from None
            if list(arr.shape) != list(ref.shape):
                raise CheckpointError(f"{name}: stored array has shape {list(arr.shape)}")
            state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model


def checkpoint_meta(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read(_META_KEY + ".json"))
    except (zipfile.BadZipFile, OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt container {path}: {exc}") from None
