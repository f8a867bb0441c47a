"""Synthetic two-vehicle driving scenes with occlusion.

Rectangular vehicle objects are rejection-sampled into a planar scene;
per-viewpoint visibility comes from 2-D ray casting against box edges,
and visible boundary points rasterize into a pillar-style occupancy
feature map (hit count, mean in-cell offsets).

Objects cluster in a few angular sectors around the ego vehicle so
occlusion chains form naturally; generation retries until at least
`min_hidden_objects` objects are invisible to the ego vehicle yet
visible to the sender.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor
from .boxes import DetectionBox, boxes_overlap
from .errors import SceneGenerationError
from .geometry import GridSpec, Pose2D

DEFAULT_MAX_RANGE = 200.0


@dataclass
class SceneConfig:
    n_objects: tuple[int, int] = (8, 16)
    x_range: tuple[float, float] = (-56.0, 56.0)
    y_range: tuple[float, float] = (-28.0, 28.0)
    width_range: tuple[float, float] = (1.7, 2.4)
    length_range: tuple[float, float] = (3.8, 5.2)
    sector_count: int = 4
    sector_spread_deg: float = 14.0
    radius_range: tuple[float, float] = (6.0, 48.0)
    sender_distance: tuple[float, float] = (10.0, 28.0)
    min_hidden_objects: int = 1
    min_ego_visible: int = 3
    clearance: float = 0.5
    sensor_clearance: float = 3.0
    n_rays: int = 720
    max_attempts: int = 100


@dataclass
class SceneObject:
    box: DetectionBox
    id: int


@dataclass
class SyntheticScene:
    ego_pose: Pose2D
    sender_pose: Pose2D
    objects: list[SceneObject]
    seed: int

    def ground_truth(self) -> list[DetectionBox]:
        return [o.box for o in self.objects]

    def to_record(self) -> dict:
        return {
            "seed": int(self.seed),
            "ego_pose": [self.ego_pose.x, self.ego_pose.y, self.ego_pose.yaw],
            "sender_pose": [self.sender_pose.x, self.sender_pose.y, self.sender_pose.yaw],
            "objects": [
                {"id": o.id, "box": [o.box.x, o.box.y, o.box.w, o.box.l, o.box.theta]}
                for o in self.objects
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SyntheticScene":
        return cls(
            ego_pose=Pose2D(*rec["ego_pose"]),
            sender_pose=Pose2D(*rec["sender_pose"]),
            objects=[SceneObject(box=DetectionBox(*o["box"]), id=int(o["id"]))
                     for o in rec["objects"]],
            seed=int(rec["seed"]),
        )


@dataclass
class PointSet:
    """Boundary samples visible from one sensor, in that sensor's frame."""
    points: np.ndarray                 # (N, 2)
    object_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.object_ids = np.asarray(self.object_ids, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return self.points.shape[0]


def _point_box_distance(px: float, py: float, box: DetectionBox) -> float:
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = px - box.x, py - box.y
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    ex = max(abs(lx) - box.l / 2.0, 0.0)
    ey = max(abs(ly) - box.w / 2.0, 0.0)
    return math.hypot(ex, ey)


def _corners_inside(box: DetectionBox, cfg: SceneConfig) -> bool:
    corners = box.corners()
    return (corners[:, 0].min() >= cfg.x_range[0] and corners[:, 0].max() <= cfg.x_range[1]
            and corners[:, 1].min() >= cfg.y_range[0] and corners[:, 1].max() <= cfg.y_range[1])


def generate_scene(cfg: SceneConfig, seed: int) -> SyntheticScene:
    """Rejection-sample a scene satisfying the occlusion guarantees."""
    rng = np.random.default_rng(seed)
    ego = Pose2D(0.0, 0.0, 0.0)
    lo, hi = cfg.n_objects
    if hi == 0:
        return SyntheticScene(ego, _sample_sender(rng, cfg), [], seed)

    for _ in range(cfg.max_attempts):
        sender = _sample_sender(rng, cfg)
        n = int(rng.integers(lo, hi + 1))
        sectors = rng.uniform(-math.pi, math.pi, size=cfg.sector_count)
        spread = math.radians(cfg.sector_spread_deg)
        objects: list[SceneObject] = []
        for obj_id in range(n):
            for _ in range(60):
                az = sectors[int(rng.integers(cfg.sector_count))] + spread * rng.normal()
                r = rng.uniform(*cfg.radius_range)
                x, y = r * math.cos(az), r * math.sin(az)
                box = DetectionBox(
                    x=x, y=y,
                    w=rng.uniform(*cfg.width_range),
                    l=rng.uniform(*cfg.length_range),
                    theta=rng.uniform(-math.pi, math.pi),
                )
                if not _corners_inside(box, cfg):
                    continue
                if _point_box_distance(ego.x, ego.y, box) < cfg.sensor_clearance:
                    continue
                if _point_box_distance(sender.x, sender.y, box) < cfg.sensor_clearance:
                    continue
                if any(boxes_overlap(box, o.box, margin=cfg.clearance / 2) for o in objects):
                    continue
                objects.append(SceneObject(box=box, id=obj_id))
                break
        if len(objects) < lo:
            continue

        scene = SyntheticScene(ego, sender, objects, seed)
        ego_counts = visible_counts(scene, ego, cfg.n_rays)
        sender_counts = visible_counts(scene, sender, cfg.n_rays)
        hidden = sum(1 for o in objects
                     if ego_counts.get(o.id, 0) == 0 and sender_counts.get(o.id, 0) > 0)
        ego_visible = sum(1 for o in objects if ego_counts.get(o.id, 0) > 0)
        if hidden >= cfg.min_hidden_objects and ego_visible >= cfg.min_ego_visible:
            return scene

    raise SceneGenerationError(
        f"could not satisfy scene constraints after {cfg.max_attempts} attempts "
        f"(seed={seed}); try fewer objects or a smaller min_hidden_objects")


def _sample_sender(rng: np.random.Generator, cfg: SceneConfig) -> Pose2D:
    dist = rng.uniform(*cfg.sender_distance)
    ang = rng.uniform(-math.pi, math.pi)
    yaw = rng.uniform(-math.pi, math.pi)
    return Pose2D(dist * math.cos(ang), dist * math.sin(ang), yaw)


def _scene_segments(scene: SyntheticScene) -> tuple[np.ndarray, np.ndarray]:
    """All box edges as (M, 2, 2) segments plus their object ids."""
    segs = []
    ids = []
    for obj in scene.objects:
        corners = obj.box.corners()
        for k in range(4):
            segs.append((corners[k], corners[(k + 1) % 4]))
            ids.append(obj.id)
    if not segs:
        return np.zeros((0, 2, 2)), np.zeros(0, dtype=np.int64)
    return np.asarray(segs), np.asarray(ids, dtype=np.int64)


def raycast_visible_points(scene: SyntheticScene, sensor: Pose2D,
                           n_rays: int = 720,
                           max_range: float = DEFAULT_MAX_RANGE) -> PointSet:
    """Nearest box-edge hit along each of n_rays equally spaced azimuths.

    Farther intersections along a ray are occluded. Points are returned
    in the sensor's local frame.
    """
    if n_rays < 36:
        raise ValueError(f"n_rays must be >= 36, got {n_rays}")
    segs, seg_ids = _scene_segments(scene)
    if segs.shape[0] == 0:
        return PointSet(np.zeros((0, 2)))

    angles = sensor.yaw + 2.0 * math.pi * np.arange(n_rays) / n_rays
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)     # (n, 2)
    origin = np.array([sensor.x, sensor.y])
    p = segs[:, 0]                                                # (M, 2)
    s = segs[:, 1] - segs[:, 0]                                   # (M, 2)
    qp = p - origin                                               # (M, 2)

    denom = dirs[:, 0, None] * s[None, :, 1] - dirs[:, 1, None] * s[None, :, 0]
    cross_qp_s = qp[:, 0] * s[:, 1] - qp[:, 1] * s[:, 0]          # (M,)
    cross_qp_r = qp[None, :, 0] * dirs[:, 1, None] - qp[None, :, 1] * dirs[:, 0, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross_qp_s[None, :] / denom
        u = cross_qp_r / denom
    valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (t <= max_range) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    best = np.argmin(t, axis=1)
    t_best = t[np.arange(n_rays), best]
    hit = np.isfinite(t_best)
    if not hit.any():
        return PointSet(np.zeros((0, 2)))

    world = origin + dirs[hit] * t_best[hit, None]
    ids = seg_ids[best[hit]]
    c, si = math.cos(sensor.yaw), math.sin(sensor.yaw)
    rel = world - origin
    local = np.stack([c * rel[:, 0] + si * rel[:, 1],
                      -si * rel[:, 0] + c * rel[:, 1]], axis=1)
    return PointSet(local, ids)


def visible_counts(scene: SyntheticScene, sensor: Pose2D, n_rays: int = 720,
                   max_range: float = DEFAULT_MAX_RANGE) -> dict[int, int]:
    pts = raycast_visible_points(scene, sensor, n_rays, max_range)
    counts: dict[int, int] = {}
    for oid in pts.object_ids:
        counts[int(oid)] = counts.get(int(oid), 0) + 1
    return counts


def rasterize_bev(points: PointSet, grid: GridSpec, dtype=np.float64) -> Tensor:
    """Pillar-style raster: (log1p(count), mean dx, mean dy) per cell.

    Offsets are measured from the cell center in cell units. Points are
    sorted before accumulation so the result does not depend on input
    order.
    """
    h, w, res = grid.h, grid.w, grid.resolution
    count = np.zeros((h, w), dtype=np.float64)
    sum_dx = np.zeros((h, w), dtype=np.float64)
    sum_dy = np.zeros((h, w), dtype=np.float64)

    if len(points) > 0:
        fx = points.points[:, 0] / res + h / 2.0
        fy = points.points[:, 1] / res + w / 2.0
        i = np.floor(fx).astype(np.int64)
        j = np.floor(fy).astype(np.int64)
        ok = (i >= 0) & (i < h) & (j >= 0) & (j < w)
        i, j = i[ok], j[ok]
        dx = fx[ok] - i - 0.5
        dy = fy[ok] - j - 0.5
        order = np.lexsort((dy, dx, i * w + j))
        i, j, dx, dy = i[order], j[order], dx[order], dy[order]
        np.add.at(count, (i, j), 1.0)
        np.add.at(sum_dx, (i, j), dx)
        np.add.at(sum_dy, (i, j), dy)

    occupied = count > 0
    mean_dx = np.where(occupied, sum_dx / np.maximum(count, 1.0), 0.0)
    mean_dy = np.where(occupied, sum_dy / np.maximum(count, 1.0), 0.0)
    raster = np.stack([np.log1p(count), mean_dx, mean_dy]).astype(dtype)
    return Tensor(raster)
