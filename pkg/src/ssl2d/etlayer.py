"""Explicit transformation layer.

Warps feature maps computed in the frame of one microphone array into the
frame of another, given their known relative pose. For every output cell
centre the corresponding point in the source frame is found with the inverse
pose; its value is bilinearly interpolated from the 4 surrounding source
cells, with zeros outside the source grid. For a fixed pose the layer is a
sparse linear map, so the backward pass is its transpose and no gradient
flows to the pose.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import geom
from .geom import ARRAY_GRID, GridSpec, Pose2D


@dataclass
class FeatureMapStack:
    values: np.ndarray  # (rows, cols, channels)
    grid: GridSpec = ARRAY_GRID

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[..., None]
        if self.values.shape[:2] != self.grid.shape:
            raise ValueError(f"feature maps {self.values.shape[:2]} do not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature maps must be finite")

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def channels(self):
        return self.values.shape[2]


def _as_transform(pose):
    if isinstance(pose, geom.EuclideanTransform2D):
        return pose
    if not isinstance(pose, Pose2D):
        pose = Pose2D(*pose)
    return geom.pose_to_transform(pose)


def sample_points(rel_pose, grid: GridSpec = ARRAY_GRID):
    """Continuous source-grid coordinates ``(col, row)`` for every output
    cell, shape ``(rows * cols, 2)`` in row-major cell order."""
    back = geom.invert(_as_transform(rel_pose))
    centers = grid.cell_centers().reshape(-1, 2)
    return geom.world_to_grid(grid, geom.apply(back, centers))


def bilinear_taps(coords, grid: GridSpec = ARRAY_GRID):
    """The 4 neighbour cells and weights of each sampling point.

    Returns ``(index, weight)``, both ``(points, 4)``; taps outside the grid
    get weight 0 and index 0.
    """
    u, v = coords[:, 0], coords[:, 1]
    c0, r0 = np.floor(u), np.floor(v)
    fu, fv = u - c0, v - r0
    c0, r0 = c0.astype(np.int64), r0.astype(np.int64)
    cols = np.stack([c0, c0 + 1, c0, c0 + 1], axis=1)
    rows = np.stack([r0, r0, r0 + 1, r0 + 1], axis=1)
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    ok = (cols >= 0) & (cols < grid.width_cells) & (rows >= 0) & (rows < grid.height_cells)
    idx = np.where(ok, rows * grid.width_cells + cols, 0)
    return idx, np.where(ok, w, 0.0)


def warp_matrix(rel_pose, grid: GridSpec = ARRAY_GRID):
    """Sparse ``(cells, cells)`` matrix ``M`` with ``out = M @ flat(input)``."""
    idx, w = bilinear_taps(sample_points(rel_pose, grid), grid)
    n = grid.width_cells * grid.height_cells
    rows = np.repeat(np.arange(n), 4)
    m = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, n))
    m.eliminate_zeros()
    m.sort_indices()
    return m


def batch_warp_matrix(rel_poses, grid: GridSpec = ARRAY_GRID):
    """Block-diagonal warp for a batch of poses, one block per sample."""
    return sp.block_diag([warp_matrix(p, grid) for p in rel_poses], format="csr")


def et_forward(z: FeatureMapStack, rel_pose) -> FeatureMapStack:
    """Map ``z`` (frame of array 2) into the frame of array 1, where
    ``rel_pose`` is the pose of array 2 seen from array 1."""
    m = warp_matrix(rel_pose, z.grid)
    flat = z.values.reshape(-1, z.channels)
    return FeatureMapStack((m @ flat).reshape(z.values.shape), z.grid)


def et_backward(upstream: FeatureMapStack, rel_pose) -> FeatureMapStack:
    """Gradient w.r.t. the input maps: the transposed warp."""
    m = warp_matrix(rel_pose, upstream.grid)
    flat = upstream.values.reshape(-1, upstream.channels)
    return FeatureMapStack((m.T @ flat).reshape(upstream.values.shape), upstream.grid)


def et_layer(z, rel_poses, grid: GridSpec = ARRAY_GRID):
    """Differentiable batched warp of ``z`` with shape ``(B, rows, cols, C)``."""
    z = ad.as_tensor(z)
    B, H, W, C = z.shape
    if (H, W) != grid.shape:
        raise ValueError(f"et_layer: maps {(H, W)} do not match grid {grid.shape}")
    if len(rel_poses) != B:
        raise ValueError(f"et_layer: {len(rel_poses)} poses for a batch of {B}")
    m = batch_warp_matrix(rel_poses, grid)
    mt = m.T.tocsr()
    y = (m @ z.data.reshape(B * H * W, C)).reshape(z.shape)

    def bw(g):
        z._accumulate((mt @ g.reshape(B * H * W, C)).reshape(z.shape))

    return ad._make(y, (z,), bw, "et")
