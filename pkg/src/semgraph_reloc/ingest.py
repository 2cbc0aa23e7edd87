"""KITTI odometry / SemanticKITTI readers and the distance-based pair protocol.

On-disk layout under a data root::

    poses/<seq>.txt                       12 floats per line, row-major 3x4
    sequences/<seq>/velodyne/<frame>.bin  float32 x, y, z, reflectance
    sequences/<seq>/labels/<frame>.label  uint32, class in the low 16 bits
    sequences/<seq>/semantic_2/<frame>.png  label raster, one class id per pixel
    sequences/<seq>/image_2/<frame>.png   optional RGB raster
    pairs.tsv                             optional precomputed pair list
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from semgraph_reloc.errors import ConfigError, ParseError

log = logging.getLogger(__name__)

SceneId = tuple  # (sequence id: str, frame index: int)

POSITIVE = 1
NEGATIVE = 0

_SCAN_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<u4")
_ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class LabeledPointCloud:
    points: np.ndarray  # (N, 3) float
    labels: np.ndarray  # (N,) int64
    scene_id: SceneId = ("", 0)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(pts) != len(lab):
            raise ParseError(f"point/label count mismatch: {len(pts)} points vs {len(lab)} labels")
        if not np.all(np.isfinite(pts)):
            raise ParseError("point cloud contains non-finite coordinates")
        if np.any(lab < 0):
            raise ParseError("semantic class ids must be non-negative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class SemanticImage:
    label_map: np.ndarray  # (H, W) int64
    rgb: np.ndarray | None = None  # (H, W, 3) in [0, 1]
    scene_id: SceneId = ("", 0)

    def __post_init__(self):
        lab = np.asarray(self.label_map, dtype=np.int64)
        if lab.ndim != 2:
            raise ParseError(f"label map must be 2-D, got shape {lab.shape}")
        object.__setattr__(self, "label_map", lab)
        if self.rgb is not None:
            rgb = np.asarray(self.rgb, dtype=np.float64)
            if rgb.shape != (*lab.shape, 3):
                raise ParseError(f"rgb shape {rgb.shape} does not match label map {lab.shape}")
            object.__setattr__(self, "rgb", rgb)

    @property
    def height(self) -> int:
        return self.label_map.shape[0]

    @property
    def width(self) -> int:
        return self.label_map.shape[1]


@dataclass(frozen=True)
class PoseRecord:
    scene_id: SceneId
    rotation: np.ndarray
    translation: np.ndarray

    def matrix(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])


@dataclass(frozen=True)
class SamplePair:
    image_scene: SceneId
    cloud_scene: SceneId
    label: int
    distance: float

    @property
    def is_positive(self) -> bool:
        return self.label == POSITIVE


# ---------------------------------------------------------------------------
# velodyne / labels


def load_velodyne_scan(scan_path, label_path, scene_id: SceneId = ("", 0)) -> LabeledPointCloud:
    scan_bytes = Path(scan_path).read_bytes()
    label_bytes = Path(label_path).read_bytes()
    stride = 4 * _SCAN_DTYPE.itemsize
    if len(scan_bytes) % stride:
        raise ParseError(
            f"truncated scan {scan_path}: {len(scan_bytes)} bytes is not a multiple of {stride}"
        )
    if len(label_bytes) % _LABEL_DTYPE.itemsize:
        raise ParseError(
            f"truncated label file {label_path}: {len(label_bytes)} bytes is not a multiple of 4"
        )
    scan = np.frombuffer(scan_bytes, dtype=_SCAN_DTYPE).reshape(-1, 4)
    raw = np.frombuffer(label_bytes, dtype=_LABEL_DTYPE)
    if len(scan) != len(raw):
        raise ParseError(f"scan has {len(scan)} records but label file has {len(raw)}")
    return LabeledPointCloud(
        points=scan[:, :3].astype(np.float64),
        labels=(raw & 0xFFFF).astype(np.int64),
        scene_id=scene_id,
    )


def write_velodyne_scan(scan_path, label_path, cloud: LabeledPointCloud, reflectance=None):
    n = len(cloud)
    rec = np.zeros((n, 4), dtype=_SCAN_DTYPE)
    rec[:, :3] = cloud.points
    if reflectance is not None:
        rec[:, 3] = reflectance
    Path(scan_path).parent.mkdir(parents=True, exist_ok=True)
    Path(label_path).parent.mkdir(parents=True, exist_ok=True)
    Path(scan_path).write_bytes(rec.tobytes())
    Path(label_path).write_bytes(cloud.labels.astype(_LABEL_DTYPE).tobytes())


# ---------------------------------------------------------------------------
# poses


def parse_poses(text: str, sequence: str = "") -> list[PoseRecord]:
    poses = []
    frame = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise ParseError(f"line {lineno}: expected 12 values, got {len(tokens)}")
        try:
            values = np.array([float(t) for t in tokens])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        mat = values.reshape(3, 4)
        rot = mat[:, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=_ROTATION_TOL, rtol=0):
            raise ParseError(f"line {lineno}: rotation is not orthonormal")
        poses.append(PoseRecord((sequence, frame), rot.copy(), mat[:, 3].copy()))
        frame += 1
    return poses


def load_poses(poses_path, sequence: str | None = None) -> list[PoseRecord]:
    path = Path(poses_path)
    if sequence is None:
        sequence = path.stem
    return parse_poses(path.read_text(), sequence)


def write_poses(poses_path, poses: Iterable[PoseRecord]):
    lines = []
    for p in poses:
        lines.append(" ".join(repr(float(v)) for v in p.matrix().reshape(-1)))
    Path(poses_path).parent.mkdir(parents=True, exist_ok=True)
    Path(poses_path).write_text("\n".join(lines) + "\n")


def pose_distance(a: PoseRecord, b: PoseRecord) -> float:
    return float(np.linalg.norm(np.asarray(a.translation) - np.asarray(b.translation)))


# ---------------------------------------------------------------------------
# images


def load_semantic_image(label_path, rgb_path=None, scene_id: SceneId = ("", 0)) -> SemanticImage:
    with Image.open(label_path) as im:
        label_map = np.array(im).astype(np.int64)
    if label_map.ndim == 3:
        # palette-free RGB label files: class id stored in the first channel
        label_map = label_map[..., 0]
    rgb = None
    if rgb_path is not None and Path(rgb_path).exists():
        with Image.open(rgb_path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return SemanticImage(label_map=label_map, rgb=rgb, scene_id=scene_id)


def write_semantic_image(label_path, image: SemanticImage, rgb_path=None):
    lab = image.label_map
    if lab.max(initial=0) > 0xFFFF:
        raise ValueError("class ids above 65535 cannot be stored in a PNG label raster")
    mode_dtype = np.uint8 if lab.max(initial=0) < 256 else np.uint16
    Path(label_path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(lab.astype(mode_dtype)).save(label_path)
    if rgb_path is not None and image.rgb is not None:
        Path(rgb_path).parent.mkdir(parents=True, exist_ok=True)
        rgb8 = np.clip(np.round(image.rgb * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb8, mode="RGB").save(rgb_path)


# ---------------------------------------------------------------------------
# pair protocol


def generate_pairs(
    poses: Sequence[PoseRecord],
    pos_threshold: float = 2.0,
    neg_threshold: float = 20.0,
    neg_per_pos: float = 1.0,
    rng_seed: int = 0,
) -> list[SamplePair]:
    """Label (image frame, cloud frame) pairs by translation distance.

    Positives are every ordered pair closer than ``pos_threshold``; negatives
    are drawn uniformly without replacement from pairs farther than
    ``neg_threshold``, ``round(neg_per_pos * n_pos)`` of them.  Pairs in
    between are never emitted.  Emits a ``UserWarning`` and returns an empty
    list when no positive pair exists.
    """
    if not pos_threshold < neg_threshold:
        raise ConfigError(
            f"pos_threshold ({pos_threshold}) must be smaller than neg_threshold ({neg_threshold})"
        )
    if neg_per_pos < 0:
        raise ConfigError("neg_per_pos must be non-negative")
    n = len(poses)
    if n == 0:
        warnings.warn("no poses given; no positive pairs", UserWarning, stacklevel=2)
        return []
    xyz = np.stack([np.asarray(p.translation, dtype=np.float64) for p in poses])
    dist = np.sqrt(((xyz[:, None, :] - xyz[None, :, :]) ** 2).sum(-1))

    pos_i, pos_j = np.nonzero(dist < pos_threshold)
    if len(pos_i) == 0:
        warnings.warn("no positive pairs found", UserWarning, stacklevel=2)
        return []
    neg_i, neg_j = np.nonzero(dist > neg_threshold)
    n_neg = min(int(round(neg_per_pos * len(pos_i))), len(neg_i))
    rng = np.random.default_rng(rng_seed)
    chosen = np.sort(rng.choice(len(neg_i), size=n_neg, replace=False))

    pairs = [
        SamplePair(poses[i].scene_id, poses[j].scene_id, POSITIVE, float(dist[i, j]))
        for i, j in zip(pos_i, pos_j)
    ]
    pairs += [
        SamplePair(poses[neg_i[c]].scene_id, poses[neg_j[c]].scene_id, NEGATIVE,
                   float(dist[neg_i[c], neg_j[c]]))
        for c in chosen
    ]
    return pairs


def leave_one_out_splits(sequence_ids) -> list[tuple[list, object]]:
    ids = list(dict.fromkeys(sequence_ids))
    if len(ids) < 2:
        raise ConfigError(f"leave-one-out needs at least 2 sequences, got {len(ids)}")
    return [([s for s in ids if s != test], test) for test in ids]


# ---------------------------------------------------------------------------
# pair files and dataset roots


_PAIR_HEADER = "image_seq\timage_frame\tcloud_seq\tcloud_frame\tlabel\tdistance"


def write_pairs(path, pairs: Iterable[SamplePair]):
    rows = [_PAIR_HEADER]
    for p in pairs:
        rows.append(
            f"{p.image_scene[0]}\t{p.image_scene[1]}\t{p.cloud_scene[0]}\t{p.cloud_scene[1]}"
            f"\t{p.label}\t{p.distance!r}"
        )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(rows) + "\n")


def read_pairs(path) -> list[SamplePair]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _PAIR_HEADER:
        raise ParseError(f"{path}: missing pair-file header")
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 6:
            raise ParseError(f"{path} line {lineno}: expected 6 columns, got {len(cols)}")
        try:
            pairs.append(SamplePair((cols[0], int(cols[1])), (cols[2], int(cols[3])),
                                    int(cols[4]), float(cols[5])))
        except ValueError as exc:
            raise ParseError(f"{path} line {lineno}: {exc}") from None
    return pairs


@dataclass
class KittiRoot:
    """Lazy access to scenes under a KITTI-style data root."""

    root: Path
    _poses: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.root = Path(self.root)

    def sequences(self) -> list[str]:
        seq_dir = self.root / "sequences"
        if not seq_dir.is_dir():
            raise ConfigError(f"no sequences/ directory under {self.root}")
        return sorted(p.name for p in seq_dir.iterdir() if p.is_dir())

    def poses(self, seq: str) -> list[PoseRecord]:
        if seq not in self._poses:
            self._poses[seq] = load_poses(self.root / "poses" / f"{seq}.txt", seq)
        return self._poses[seq]

    def _frame(self, seq, frame, sub, ext):
        return self.root / "sequences" / seq / sub / f"{int(frame):06d}{ext}"

    def cloud(self, scene: SceneId) -> LabeledPointCloud:
        seq, frame = scene
        return load_velodyne_scan(self._frame(seq, frame, "velodyne", ".bin"),
                                  self._frame(seq, frame, "labels", ".label"),
                                  scene_id=(seq, int(frame)))

    def image(self, scene: SceneId) -> SemanticImage:
        seq, frame = scene
        return load_semantic_image(self._frame(seq, frame, "semantic_2", ".png"),
                                   self._frame(seq, frame, "image_2", ".png"),
                                   scene_id=(seq, int(frame)))

    def write_scene(self, scene: SceneId, cloud: LabeledPointCloud, image: SemanticImage):
        seq, frame = scene
        write_velodyne_scan(self._frame(seq, frame, "velodyne", ".bin"),
                            self._frame(seq, frame, "labels", ".label"), cloud)
        write_semantic_image(self._frame(seq, frame, "semantic_2", ".png"), image,
                             self._frame(seq, frame, "image_2", ".png"))

    def pairs(self, pos_threshold=2.0, neg_threshold=20.0, neg_per_pos=1.0, rng_seed=0):
        """Pairs from ``pairs.tsv`` when present, otherwise per-sequence from poses."""
        pair_file = self.root / "pairs.tsv"
        if pair_file.exists():
            return read_pairs(pair_file)
        out = []
        for k, seq in enumerate(self.sequences()):
            out += generate_pairs(self.poses(seq), pos_threshold, neg_threshold,
                                  neg_per_pos, rng_seed + k)
        return out
