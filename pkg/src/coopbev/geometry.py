"""Planar pose algebra, affine feature-map warping, and overlap masks.

Grid convention: a vehicle's BEV grid is anchored at that vehicle's
pose, rows (i) run along the vehicle's forward x axis and columns (j)
along its left y axis. Cell (i, j) has its center at local coordinates
x = (i + 0.5 - H/2) * res, y = (j + 0.5 - W/2) * res.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DegenerateAffineError, ShapeMismatchError


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return -((-a + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.yaw)):
            raise ValueError(f"pose must be finite, got {self}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 local->world transform."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([
            [c, s, -(c * self.x + s * self.y)],
            [-s, c, s * self.x - c * self.y],
            [0.0, 0.0, 1.0],
        ])

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def relative_pose(source: Pose2D, target: Pose2D) -> Pose2D:
    """Pose of the source frame expressed in the target frame."""
    m = target.inverse_matrix() @ source.matrix()
    return Pose2D(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))


def transform_point(p: Pose2D, x: float, y: float) -> tuple[float, float]:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return c * x - s * y + p.x, s * x + c * y + p.y


@dataclass(frozen=True)
class GridSpec:
    h: int
    w: int
    resolution: float
    origin: Pose2D = field(default_factory=Pose2D)

    def __post_init__(self):
        if self.h <= 0 or self.w <= 0:
            raise ValueError(f"grid dims must be positive, got {self.h}x{self.w}")
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.h, self.w

    @property
    def x_extent(self) -> float:
        return 0.5 * self.h * self.resolution

    @property
    def y_extent(self) -> float:
        return 0.5 * self.w * self.resolution

    @property
    def diagonal(self) -> float:
        return math.hypot(self.h * self.resolution, self.w * self.resolution)

    def downsampled(self, factor: int) -> "GridSpec":
        if self.h % factor or self.w % factor:
            raise ValueError(f"grid {self.h}x{self.w} not divisible by {factor}")
        return GridSpec(self.h // factor, self.w // factor,
                        self.resolution * factor, self.origin)

    def with_origin(self, origin: Pose2D) -> "GridSpec":
        return GridSpec(self.h, self.w, self.resolution, origin)

    def cells_to_local(self) -> np.ndarray:
        """3x3 matrix sending (i, j, 1) cell coords to local metric coords."""
        r = self.resolution
        return np.array([
            [r, 0.0, (0.5 - self.h / 2.0) * r],
            [0.0, r, (0.5 - self.w / 2.0) * r],
            [0.0, 0.0, 1.0],
        ])

    def local_to_cells(self) -> np.ndarray:
        r = self.resolution
        return np.array([
            [1.0 / r, 0.0, self.h / 2.0 - 0.5],
            [0.0, 1.0 / r, self.w / 2.0 - 0.5],
            [0.0, 0.0, 1.0],
        ])


@dataclass
class OverlapMask:
    """Boolean (H, W) map of cells whose warped sampling footprint is valid."""
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def any(self) -> bool:
        return bool(self.mask.any())

    @property
    def true_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class BEVFeatureMap:
    """A (C, H, W) feature grid tied to a vehicle pose and grid geometry."""
    data: Tensor
    pose: Pose2D
    grid: GridSpec
    source_id: int = -1

    def __post_init__(self):
        if self.data.data.ndim != 3:
            raise ShapeMismatchError(f"feature map must be 3-D, got {self.data.shape}")
        if self.data.shape[1:] != (self.grid.h, self.grid.w):
            raise ShapeMismatchError(
                f"feature map {self.data.shape} does not match grid {self.grid.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def relative_transform(sender: Pose2D, ego: Pose2D, grid: GridSpec,
                       sender_grid: GridSpec | None = None) -> np.ndarray:
    """2x3 affine sending sender-grid cell coords to ego-grid cell coords."""
    gs = sender_grid if sender_grid is not None else grid
    m = grid.local_to_cells() @ ego.inverse_matrix() @ sender.matrix() @ gs.cells_to_local()
    return m[:2, :]


def invert_affine(a: np.ndarray) -> np.ndarray:
    """Invert a 2x3 affine; raises on a numerically singular linear part."""
    a = np.asarray(a, dtype=np.float64)
    lin = a[:, :2]
    det = lin[0, 0] * lin[1, 1] - lin[0, 1] * lin[1, 0]
    if abs(det) < 1e-12:
        raise DegenerateAffineError(f"affine determinant {det} too small")
    inv = np.array([[lin[1, 1], -lin[0, 1]], [-lin[1, 0], lin[0, 0]]]) / det
    t = -inv @ a[:, 2]
    return np.hstack([inv, t[:, None]])


def _sampling_lattice(a: np.ndarray, out_hw: tuple[int, int],
                      src_hw: tuple[int, int]):
    """Inverse-map each output cell to source coords; bilinear footprint.

    Returns (i0, j0, fi, fj, mask) where the footprint corners are
    (floor, floor+1) per axis and mask marks cells whose floor/ceil
    corners all land inside the source grid.
    """
    ainv = invert_affine(a)
    ho, wo = out_hw
    hs, ws = src_hw
    ii, jj = np.meshgrid(np.arange(ho, dtype=np.float64),
                         np.arange(wo, dtype=np.float64), indexing="ij")
    si = ainv[0, 0] * ii + ainv[0, 1] * jj + ainv[0, 2]
    sj = ainv[1, 0] * ii + ainv[1, 1] * jj + ainv[1, 2]
    i0 = np.floor(si)
    j0 = np.floor(sj)
    fi = si - i0
    fj = sj - j0
    mask = ((i0 >= 0) & (np.ceil(si) <= hs - 1)
            & (j0 >= 0) & (np.ceil(sj) <= ws - 1))
    return i0.astype(np.int64), j0.astype(np.int64), fi, fj, mask


def warp_tensor(t: Tensor, a: np.ndarray,
                out_hw: tuple[int, int] | None = None) -> tuple[Tensor, np.ndarray]:
    """Differentiable inverse-mapping bilinear warp of a (C, H, W) tensor.

    Cells sampling outside the source are zero-filled; the returned
    boolean mask is false there.
    """
    c, hs, ws = t.shape
    ho, wo = out_hw if out_hw is not None else (hs, ws)
    i0, j0, fi, fj, mask = _sampling_lattice(a, (ho, wo), (hs, ws))

    corners = []
    for di, dj, wgt in (
        (0, 0, (1 - fi) * (1 - fj)),
        (0, 1, (1 - fi) * fj),
        (1, 0, fi * (1 - fj)),
        (1, 1, fi * fj),
    ):
        ci = i0 + di
        cj = j0 + dj
        valid = (ci >= 0) & (ci <= hs - 1) & (cj >= 0) & (cj <= ws - 1)
        w = (wgt * valid).astype(t.dtype)
        flat = (np.clip(ci, 0, hs - 1) * ws + np.clip(cj, 0, ws - 1)).reshape(-1)
        corners.append((flat, w))

    src_flat = t.data.reshape(c, -1)
    out_data = np.zeros((c, ho, wo), dtype=t.dtype)
    for flat, w in corners:
        out_data += src_flat[:, flat].reshape(c, ho, wo) * w[None]

    def backward(g):
        gsrc = np.zeros_like(src_flat)
        for flat, w in corners:
            contrib = (g * w[None]).reshape(c, -1)
            np.add.at(gsrc, (slice(None), flat), contrib)
        t._accum(gsrc.reshape(t.shape))

    out = Tensor._node(out_data, (t,), backward)
    return out, mask


def warp_feature_map(f: BEVFeatureMap, a: np.ndarray,
                     out_grid: GridSpec | None = None,
                     out_pose: Pose2D | None = None,
                     source_id: int | None = None) -> tuple[BEVFeatureMap, OverlapMask]:
    """Warp a sender feature map into the frame described by the affine."""
    grid = out_grid if out_grid is not None else f.grid
    pose = out_pose if out_pose is not None else f.pose
    data, mask = warp_tensor(f.data, a, grid.shape)
    fmap = BEVFeatureMap(
        data=data, pose=pose, grid=grid,
        source_id=f.source_id if source_id is None else source_id)
    return fmap, OverlapMask(mask)


def overlap_mask(ego_grid: GridSpec, sender_grid: GridSpec, a: np.ndarray) -> OverlapMask:
    """True where every bilinear source corner lies inside the sender grid."""
    _, _, _, _, mask = _sampling_lattice(a, ego_grid.shape, sender_grid.shape)
    return OverlapMask(mask)
