"""2D rigid poses, homogeneous transforms and heatmap grid coordinates.

Angles are counter-clockwise positive, in radians. Grid cells are indexed
``(column, row)`` = ``(x, y)``; value arrays built on a grid are stored with
shape ``(height, width)`` so that ``values[row, col]`` addresses a cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ROT_TOL = 1e-9
SNAP_TOL = 1e-9


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    t = math.fmod(theta, 2 * math.pi)
    if t <= -math.pi:
        t += 2 * math.pi
    elif t > math.pi:
        t -= 2 * math.pi
    return t


@dataclass(frozen=True)
class Pose2D:
    tx: float
    ty: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.tx) and math.isfinite(self.ty) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite pose {self}")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def as_tuple(self):
        return (self.tx, self.ty, self.theta)


class EuclideanTransform2D:
    """A 3x3 homogeneous rigid transform (rotation + translation)."""

    __slots__ = ("m",)

    def __init__(self, m):
        m = np.array(m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"expected 3x3 matrix, got {m.shape}")
        if not np.array_equal(m[2], [0.0, 0.0, 1.0]):
            raise ValueError("last row must be (0, 0, 1)")
        r = m[:2, :2]
        if np.abs(r.T @ r - np.eye(2)).max() > ROT_TOL or abs(np.linalg.det(r) - 1.0) > ROT_TOL:
            raise ValueError("upper-left block is not a rotation")
        m.setflags(write=False)
        self.m = m

    @property
    def rotation(self):
        return self.m[:2, :2]

    @property
    def translation(self):
        return self.m[:2, 2]

    def to_pose(self) -> Pose2D:
        return Pose2D(float(self.m[0, 2]), float(self.m[1, 2]), math.atan2(self.m[1, 0], self.m[0, 0]))

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        return f"EuclideanTransform2D({self.m.tolist()})"


IDENTITY = EuclideanTransform2D(np.eye(3))


def pose_to_transform(p: Pose2D) -> EuclideanTransform2D:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return EuclideanTransform2D([[c, -s, p.tx], [s, c, p.ty], [0.0, 0.0, 1.0]])


def invert(t: EuclideanTransform2D) -> EuclideanTransform2D:
    rt = t.rotation.T
    m = np.eye(3)
    m[:2, :2] = rt
    m[:2, 2] = -rt @ t.translation
    return EuclideanTransform2D(m)


def apply(t: EuclideanTransform2D, p):
    """Transform one point ``(x, y)`` or an ``(N, 2)`` array of points."""
    p = np.asarray(p, dtype=np.float64)
    out = p @ t.rotation.T + t.translation
    return out


def compose(a: EuclideanTransform2D, b: EuclideanTransform2D) -> EuclideanTransform2D:
    m = a.m @ b.m
    # keep the homogeneous row exact so the invariant check cannot drift
    m[2] = (0.0, 0.0, 1.0)
    return EuclideanTransform2D(m)


def relative_pose(ref: Pose2D, other: Pose2D) -> Pose2D:
    """Pose of ``other`` expressed in the frame of ``ref``."""
    return compose(invert(pose_to_transform(ref)), pose_to_transform(other)).to_pose()


@dataclass(frozen=True)
class GridSpec:
    width_cells: int = 25
    height_cells: int = 25
    origin: tuple = (0.0, 0.0)
    cell_size: float = 0.24

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.width_cells < 2 or self.height_cells < 2:
            raise ValueError("grid needs at least 2x2 cells")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self):
        """Array shape ``(rows, cols)`` of values laid on this grid."""
        return (self.height_cells, self.width_cells)

    @property
    def extent(self):
        ox, oy = self.origin
        return (ox, ox + self.width_cells * self.cell_size, oy, oy + self.height_cells * self.cell_size)

    def cell_centers(self):
        """World coordinates of all cell centers, shape ``(rows, cols, 2)``."""
        cols = np.arange(self.width_cells)
        rows = np.arange(self.height_cells)
        cx, cy = np.meshgrid(cols, rows)
        return grid_to_world(self, np.stack([cx, cy], axis=-1))

    def contains(self, p, margin: float = 0.0) -> bool:
        x0, x1, y0, y1 = self.extent
        x, y = p
        return x0 + margin <= x <= x1 - margin and y0 + margin <= y <= y1 - margin


def world_to_grid(g: GridSpec, p):
    """Continuous grid coordinate; integer values sit on cell centers."""
    p = np.asarray(p, dtype=np.float64)
    c = (p - np.asarray(g.origin)) / g.cell_size - 0.5
    # snap float noise so cell centers map back to exact integer indices
    r = np.round(c)
    return np.where(np.abs(c - r) < SNAP_TOL, r, c)


def grid_to_world(g: GridSpec, c):
    c = np.asarray(c, dtype=np.float64)
    return (c + 0.5) * g.cell_size + np.asarray(g.origin)


ROOM_GRID = GridSpec()
# array-local frame: the array sits on the center cell
ARRAY_GRID = GridSpec(origin=(-3.0, -3.0))
