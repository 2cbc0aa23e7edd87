"""Deterministic synthetic paired scenes with exact match labels.

A world is a set of vertical objects (cylinders and boxes) placed in the
region ahead of a sensor at the local origin.  ``render_pair`` samples each
object's lateral surface on a jittered grid (the labeled point cloud, in the
sensor frame) and rasterises object silhouettes through a pinhole camera
(the semantic image).  Worlds of one synthetic sequence sit 1 km apart in a
shared global frame, so the distance-based pair protocol applies unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from semgraph_reloc.errors import ConfigError, GenerationError
from semgraph_reloc.ingest import (
    NEGATIVE,
    POSITIVE,
    KittiRoot,
    LabeledPointCloud,
    PoseRecord,
    SamplePair,
    SemanticImage,
    pose_distance,
    write_pairs,
    write_poses,
)

BACKGROUND = 0
WORLD_SPACING = 1000.0
DEFAULT_SEQUENCES = ("00", "02", "05", "06", "07", "08")


@dataclass(frozen=True)
class ObjectClass:
    name: str
    class_id: int
    count: tuple  # inclusive (min, max) objects per world
    shape: str  # "cylinder" or "box"
    size: tuple  # radius (cylinder) or half-extent (box) range, metres
    height: tuple
    points: int  # LiDAR samples per object


DEFAULT_CLASSES = (
    ObjectClass("pole", 1, (0, 3), "cylinder", (0.15, 0.3), (5.0, 8.0), 40),
    ObjectClass("trunk", 2, (0, 3), "cylinder", (0.3, 0.6), (3.0, 5.0), 60),
    ObjectClass("vehicle", 3, (0, 2), "box", (0.9, 2.0), (1.4, 1.8), 120),
    ObjectClass("building", 4, (0, 2), "box", (2.0, 3.5), (6.0, 10.0), 300),
    ObjectClass("sign", 5, (0, 2), "box", (0.3, 0.6), (2.0, 3.0), 30),
    ObjectClass("kiosk", 6, (0, 2), "cylinder", (1.0, 1.5), (2.5, 3.5), 80),
)
NUM_SYNTH_CLASSES = 7  # background + the six object classes


@dataclass(frozen=True)
class SceneSpec:
    rng_seed: int = 0
    extent: tuple = (40.0, 60.0)  # (depth ahead of sensor, lateral width), metres
    clearance: float = 6.0  # objects start this far ahead of the sensor
    min_gap: float = 3.0
    classes: tuple = DEFAULT_CLASSES
    sensor_height: float = 1.7
    image_size: tuple = (256, 96)  # (width, height) pixels
    fov_deg: float = 110.0
    yaw_jitter_deg: float = 5.0
    # objects keep their azimuth interval this far inside the field of view,
    # apart from each other, and no wider than max_angular_deg, so every
    # object is seen unoccluded by the camera from the base pose
    view_margin_deg: float = 8.0
    angle_gap_deg: float = 2.0
    max_angular_deg: float = 25.0
    max_retries: int = 200

    def __post_init__(self):
        if min(self.extent) <= 0 or self.clearance >= self.extent[0]:
            raise ConfigError("world extent must be positive and exceed the clearance")
        for c in self.classes:
            if c.points < 1:
                raise ConfigError(f"class {c.name}: density must be >= 1 point per object")
            if not 0 <= c.count[0] <= c.count[1]:
                raise ConfigError(f"class {c.name}: bad count range {c.count}")
        if min(self.image_size) < 1:
            raise ConfigError("image size must be positive")
        if not 0 <= self.view_margin_deg < self.fov_deg / 2:
            raise ConfigError("view margin must lie inside half the field of view")

    @property
    def focal(self) -> float:
        return self.image_size[0] / 2 / math.tan(math.radians(self.fov_deg) / 2)


@dataclass(frozen=True)
class WorldObject:
    class_id: int
    shape: str
    center: tuple  # (x, y) local world frame
    half: tuple  # (hx, hy); equal for cylinders
    height: float
    points: int
    albedo: float
    seed: int

    @property
    def footprint_radius(self) -> float:
        return self.half[0] if self.shape == "cylinder" else math.hypot(*self.half)


@dataclass(frozen=True)
class World:
    spec: SceneSpec
    objects: tuple
    seed: int = 0


def generate_world(spec: SceneSpec, seed=None) -> World:
    """Rejection-sample non-overlapping objects; ``seed`` defaults to ``spec.rng_seed``."""
    seed = spec.rng_seed if seed is None else seed
    rng = np.random.default_rng(seed)
    depth, width = spec.extent
    gap = math.radians(spec.angle_gap_deg)
    placed: list[WorldObject] = []
    # largest footprints first so rejection sampling rarely fails
    for cls in sorted(spec.classes, key=lambda c: -c.size[1]):
        n = int(rng.integers(cls.count[0], cls.count[1] + 1))
        for _ in range(n):
            if cls.shape == "cylinder":
                r = float(rng.uniform(*cls.size))
                half = (r, r)
            else:
                half = (float(rng.uniform(*cls.size)), float(rng.uniform(*cls.size)))
            height = float(rng.uniform(*cls.height))
            albedo = float(rng.uniform(0.2, 0.9))
            obj_seed = int(rng.integers(2**31))
            rad = half[0] if cls.shape == "cylinder" else math.hypot(*half)
            lo_x, hi_x = spec.clearance + rad, depth - rad
            lo_y, hi_y = -width / 2 + rad, width / 2 - rad
            if lo_x >= hi_x or lo_y >= hi_y:
                raise GenerationError(f"object of class {cls.name} does not fit the extent")
            for _attempt in range(spec.max_retries):
                cx, cy = float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y))
                view = _azimuth_interval(cx, cy, rad)
                if view is None or not _in_view(view, spec):
                    continue
                if all(math.hypot(cx - o.center[0], cy - o.center[1])
                       >= rad + o.footprint_radius + spec.min_gap
                       and _apart(view, _azimuth_interval(*o.center, o.footprint_radius), gap)
                       for o in placed):
                    break
            else:
                raise GenerationError(
                    f"could not place a {cls.name} after {spec.max_retries} tries; "
                    "lower the object counts or enlarge the extent")
            placed.append(WorldObject(cls.class_id, cls.shape, (cx, cy), half, height,
                                      cls.points, albedo, obj_seed))
    return World(spec, tuple(placed), seed)


def _azimuth_interval(cx, cy, rad):
    """Bearing range covered by a footprint of radius ``rad`` seen from the origin."""
    d = math.hypot(cx, cy)
    if d <= rad:
        return None
    mid, half = math.atan2(cy, cx), math.asin(rad / d)
    return mid - half, mid + half


def _in_view(view, spec: SceneSpec) -> bool:
    lo, hi = view
    limit = math.radians(spec.fov_deg / 2 - spec.view_margin_deg)
    return -limit <= lo and hi <= limit and hi - lo <= math.radians(spec.max_angular_deg)


def _apart(a, b, gap) -> bool:
    return a[1] + gap <= b[0] or b[1] + gap <= a[0]


def _surface_points(obj: WorldObject) -> np.ndarray:
    """``obj.points`` samples on the lateral surface, jittered grid, world frame."""
    rng = np.random.default_rng(obj.seed)
    if obj.shape == "cylinder":
        perimeter = 2 * math.pi * obj.half[0]
    else:
        perimeter = 4 * (obj.half[0] + obj.half[1])
    n = obj.points
    cols = max(1, round(math.sqrt(n * perimeter / obj.height)))
    rows = max(1, math.ceil(n / cols))
    # fill whole rows bottom-up; skipping cells instead can line up into a
    # seam wider than the clustering radius and split the object
    cells = np.arange(n)
    ci, ri = cells % cols, cells // cols
    s = (ci + 0.5 + rng.uniform(-0.2, 0.2, n)) / cols * perimeter
    z = (ri + 0.5 + rng.uniform(-0.2, 0.2, n)) / rows * obj.height
    cx, cy = obj.center
    if obj.shape == "cylinder":
        ang = s / obj.half[0]
        x = cx + obj.half[0] * np.cos(ang)
        y = cy + obj.half[0] * np.sin(ang)
    else:
        hx, hy = obj.half
        corners = np.array([[hx, -hy], [hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        edges = np.linalg.norm(np.diff(corners, axis=0), axis=1)
        start = np.concatenate([[0.0], np.cumsum(edges)])
        e = np.clip(np.searchsorted(start, s, side="right") - 1, 0, 3)
        t = (s - start[e]) / edges[e]
        xy = corners[e] + t[:, None] * (corners[e + 1] - corners[e])
        x, y = cx + xy[:, 0], cy + xy[:, 1]
    return np.stack([x, y, z], axis=1)


def _outline(obj: WorldObject) -> np.ndarray:
    cx, cy = obj.center
    if obj.shape == "cylinder":
        a = np.linspace(0, 2 * math.pi, 24, endpoint=False)
        xy = np.stack([cx + obj.half[0] * np.cos(a), cy + obj.half[0] * np.sin(a)], axis=1)
    else:
        hx, hy = obj.half
        xy = np.array([[cx + sx * hx, cy + sy * hy] for sx in (-1, 1) for sy in (-1, 1)])
    n = len(xy)
    return np.concatenate([np.c_[xy, np.zeros(n)], np.c_[xy, np.full(n, obj.height)]])


def planar_pose(x: float, y: float, yaw: float, z: float = 0.0, scene_id=("", 0)) -> PoseRecord:
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return PoseRecord(scene_id, rot, np.array([x, y, z], dtype=np.float64))


def render_pair(world: World, pose: PoseRecord, scene_id=("", 0)):
    """Point cloud and semantic image seen from ``pose`` (local world frame).

    The sensor frame is x forward, y left, z up, with the sensor
    ``spec.sensor_height`` above the ground; the camera shares its origin.
    """
    spec = world.spec
    rot = np.asarray(pose.rotation)
    origin = np.asarray(pose.translation, dtype=np.float64) + np.array([0, 0, spec.sensor_height])

    pts, labels = [], []
    for obj in world.objects:
        p = _surface_points(obj)
        pts.append((p - origin) @ rot)
        labels.append(np.full(len(p), obj.class_id, dtype=np.int64))
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    # float32-representable so the velodyne round trip is exact
    points = points.astype(np.float32).astype(np.float64)
    cloud = LabeledPointCloud(points, np.concatenate(labels) if labels else np.zeros(0, np.int64),
                              scene_id)

    w, h = spec.image_size
    f = spec.focal
    label_map = np.full((h, w), BACKGROUND, dtype=np.int64)
    rgb = np.empty((h, w, 3))
    rgb[: h // 2] = (0.55, 0.65, 0.85)
    rgb[h // 2:] = (0.35, 0.35, 0.33)
    drawn = []
    for obj in world.objects:
        local = (_outline(obj) - origin) @ rot
        depth = local[:, 0]
        if depth.min() <= 0.5:
            continue
        u = f * (-local[:, 1]) / depth + w / 2
        v = f * (-local[:, 2]) / depth + h / 2
        c0, c1 = max(0, math.ceil(u.min() - 0.5)), min(w - 1, math.floor(u.max() - 0.5))
        r0, r1 = max(0, math.ceil(v.min() - 0.5)), min(h - 1, math.floor(v.max() - 0.5))
        if c0 > c1 or r0 > r1:
            continue
        dist = math.hypot(obj.center[0] - origin[0], obj.center[1] - origin[1])
        drawn.append((dist, obj, r0, r1, c0, c1))
    for dist, obj, r0, r1, c0, c1 in sorted(drawn, key=lambda t: -t[0]):
        label_map[r0:r1 + 1, c0:c1 + 1] = obj.class_id
        shade = obj.albedo * (1.0 - 0.5 * min(dist / 60.0, 1.0))
        rgb[r0:r1 + 1, c0:c1 + 1] = shade
    rgb = np.round(rgb * 255) / 255
    return cloud, SemanticImage(label_map, rgb, scene_id)


@dataclass
class SynthDataset:
    pairs: list
    scenes: dict  # scene_id -> (LabeledPointCloud, SemanticImage)
    poses: dict = field(default_factory=dict)  # sequence -> [PoseRecord]

    def cloud(self, scene):
        return self.scenes[tuple(scene)][0]

    def image(self, scene):
        return self.scenes[tuple(scene)][1]

    def write(self, root) -> KittiRoot:
        kr = KittiRoot(root)
        for scene, (cloud, image) in sorted(self.scenes.items()):
            kr.write_scene(scene, cloud, image)
        for seq, poses in sorted(self.poses.items()):
            write_poses(kr.root / "poses" / f"{seq}.txt", poses)
        write_pairs(kr.root / "pairs.tsv", self.pairs)
        return kr


def _draw_world(spec: SceneSpec, index: int, attempts: int = 20) -> World:
    # crowded draws are redrawn from the next sub-seed, deterministically
    for a in range(attempts):
        seed = int(np.random.SeedSequence([spec.rng_seed, index, a]).generate_state(1)[0])
        try:
            return generate_world(spec, seed=seed)
        except GenerationError:
            if a == attempts - 1:
                raise
    raise AssertionError("unreachable")


def make_dataset(spec: SceneSpec, n_worlds: int, pos_offset: float = 1.5, neg_offset: float = 25.0,
                 negatives: str = "cross_world", sequences=DEFAULT_SEQUENCES) -> SynthDataset:
    """One positive and one negative pair per world, labels exact by construction.

    Positive: image rendered within ``pos_offset`` of the cloud pose.
    Negative: image from the next world of the same sequence
    (``cross_world``) or from ``neg_offset`` to the side (``far_offset``).
    """
    if not 0 <= pos_offset < 2.0:
        raise ConfigError(f"pos_offset must lie in [0, 2) m, got {pos_offset}")
    if negatives not in ("cross_world", "far_offset"):
        raise ConfigError(f"unknown negative mode {negatives!r}")
    if negatives == "far_offset":
        if neg_offset <= 20.0:
            raise ConfigError(f"neg_offset must exceed 20 m, got {neg_offset}")
        if neg_offset > spec.extent[1] / 2:
            raise ConfigError("neg_offset places the camera outside the world extent")
    sequences = list(sequences)
    if negatives == "cross_world":
        if n_worlds < 2:
            raise ConfigError("cross-world negatives need at least 2 worlds")
        sequences = sequences[: max(1, min(len(sequences), n_worlds // 2))]
    n_seq = len(sequences)
    frames_per_world = 2 if negatives == "cross_world" else 3
    members = {s: [w for w in range(n_worlds) if w % n_seq == k] for k, s in enumerate(sequences)}

    scenes, poses, pairs = {}, {}, []
    for seq in sequences:
        seq_poses = []
        for j, w in enumerate(members[seq]):
            rng = np.random.default_rng([spec.rng_seed, w, 1])
            world = _draw_world(spec, w)
            r = pos_offset * math.sqrt(rng.uniform())
            phi = rng.uniform(0, 2 * math.pi)
            jitter = math.radians(spec.yaw_jitter_deg)
            local = [(0.0, 0.0, 0.0),
                     (r * math.cos(phi), r * math.sin(phi), float(rng.uniform(-jitter, jitter)))]
            if frames_per_world == 3:
                side = 1.0 if rng.uniform() < 0.5 else -1.0
                local.append((0.0, side * neg_offset, 0.0))
            for f_off, (x, y, yaw) in enumerate(local):
                frame = frames_per_world * j + f_off
                sid = (seq, frame)
                cloud, image = render_pair(world, planar_pose(x, y, yaw), sid)
                scenes[sid] = (cloud, image)
                seq_poses.append(planar_pose(x + j * WORLD_SPACING, y, yaw, scene_id=sid))
        poses[seq] = seq_poses
        n_here = len(members[seq])
        for j in range(n_here):
            base = seq_poses[frames_per_world * j]
            pos = seq_poses[frames_per_world * j + 1]
            pairs.append(SamplePair(pos.scene_id, base.scene_id, POSITIVE, pose_distance(pos, base)))
            if frames_per_world == 3:
                neg = seq_poses[frames_per_world * j + 2]
            else:
                neg = seq_poses[frames_per_world * ((j + 1) % n_here) + 1]
            pairs.append(SamplePair(neg.scene_id, base.scene_id, NEGATIVE, pose_distance(neg, base)))
    return SynthDataset(pairs, scenes, poses)
