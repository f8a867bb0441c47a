"""Rotated BEV boxes: geometry, exact IoU, and non-maximum suppression.

Boxes are (x, y, w, l, theta): center in meters, width across the
heading, length along it, heading in radians. A rectangle is invariant
under a half-turn, so headings are normalized into (-pi/2, pi/2].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateBoxError
from .geometry import Pose2D


def normalize_half_angle(theta: float) -> float:
    """Wrap a rectangle heading into (-pi/2, pi/2]."""
    t = theta % math.pi
    if t > math.pi / 2:
        t -= math.pi
    # map the open lower endpoint onto the closed upper one
    if t <= -math.pi / 2:
        t += math.pi
    return t


@dataclass(frozen=True)
class DetectionBox:
    x: float
    y: float
    w: float
    l: float
    theta: float
    score: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_half_angle(self.theta))

    @property
    def area(self) -> float:
        return self.w * self.l

    def corners(self) -> np.ndarray:
        """(4, 2) corner array in counter-clockwise order."""
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.theta), math.sin(self.theta)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def transformed(self, rel: Pose2D) -> "DetectionBox":
        """Express this box (given in the source frame) in the target frame.

        rel is the pose of the source frame within the target frame.
        """
        c, s = math.cos(rel.yaw), math.sin(rel.yaw)
        return replace(
            self,
            x=c * self.x - s * self.y + rel.x,
            y=s * self.x + c * self.y + rel.y,
            theta=normalize_half_angle(self.theta + rel.yaw),
        )


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise vertices)."""
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by a convex CCW clip polygon."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for k in range(n):
        if not output:
            break
        a = clip[k]
        b = clip[(k + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def inside(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0]) >= 0.0

        def intersect(p, q):
            dx, dy = q[0] - p[0], q[1] - p[1]
            denom = ex * dy - ey * dx
            t = (ex * (a[1] - p[1]) - ey * (a[0] - p[0])) / denom
            return (p[0] + t * dx, p[1] + t * dy)

        current, output = output, []
        for i, q in enumerate(current):
            p = current[i - 1]
            pin, qin = inside(p), inside(q)
            if qin:
                if not pin:
                    output.append(intersect(p, q))
                output.append(q)
            elif pin:
                output.append(intersect(p, q))
    return np.array(output) if output else np.zeros((0, 2))


def rotated_iou(a: DetectionBox, b: DetectionBox) -> float:
    """Exact intersection-over-union of two rotated rectangles."""
    if a.area <= 0 or b.area <= 0:
        raise DegenerateBoxError(f"zero-area box in IoU: {a} / {b}")
    # cheap reject: farther apart than the sum of circumradii
    ra = 0.5 * math.hypot(a.w, a.l)
    rb = 0.5 * math.hypot(b.w, b.l)
    if math.hypot(a.x - b.x, a.y - b.y) > ra + rb:
        return 0.0
    inter_poly = clip_polygon(a.corners(), b.corners())
    inter = abs(polygon_area(inter_poly)) if len(inter_poly) >= 3 else 0.0
    union = a.area + b.area - inter
    return float(min(max(inter / union, 0.0), 1.0))


def boxes_overlap(a: DetectionBox, b: DetectionBox, margin: float = 0.0) -> bool:
    """Separating-axis test for two rotated rectangles, with optional margin."""
    if margin:
        a = replace(a, w=a.w + 2 * margin, l=a.l + 2 * margin)
    ca, cb = a.corners(), b.corners()
    for corners in (ca, cb):
        for k in range(2):
            edge = corners[(k + 1) % 4] - corners[k]
            axis = np.array([-edge[1], edge[0]])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def rotated_nms(boxes: list[DetectionBox], iou_threshold: float) -> list[DetectionBox]:
    """Greedy suppression of lower-scoring boxes overlapping a kept one.

    Ties in score are broken by input order (earlier wins).
    """
    order = sorted(range(len(boxes)),
                   key=lambda i: (-(boxes[i].score if boxes[i].score is not None else 1.0), i))
    kept: list[DetectionBox] = []
    for i in order:
        cand = boxes[i]
        if all(rotated_iou(cand, k) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept
