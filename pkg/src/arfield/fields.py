"""Radiance-segmentation field contract and the non-neural backends.

A field maps (position, view direction, optional conditioning feature) to
(density, RGB color, part-segmentation logits). Three implementations ship:
the closed-form procedural oracle (scenes module), a trilinear voxel grid,
and a small trainable MLP (mlp module).

Class indexing is 0-based everywhere in memory: part i occupies index i-1
and the background class occupies index P (the last column of the logits).
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from .scenes import ProceduralScene

# logit magnitude used by oracle backends for their winning class
PART_LOGIT = 12.0


class ConditioningError(ValueError):
    """Conditioning features were required but missing, or vice versa."""


@dataclass
class FieldValues:
    """Batched field outputs: sigma (N,), color (N, 3), logits (N, P+1)."""

    sigma: np.ndarray
    color: np.ndarray
    logits: np.ndarray


@dataclass(frozen=True)
class RadianceSample:
    """Single-point field output."""

    sigma: float
    color: np.ndarray
    seg_logits: np.ndarray


class RadianceField(abc.ABC):
    """Field contract shared by oracle, voxel, and MLP backends.

    Evaluation is pure: same inputs give identical outputs, and instances
    may be shared freely across parallel workers.
    """

    num_parts: int
    cond_dim: int = 0

    @property
    def num_classes(self) -> int:
        return self.num_parts + 1

    @abc.abstractmethod
    def evaluate(self, x: np.ndarray, d: np.ndarray,
                 cond: np.ndarray | None = None) -> FieldValues:
        """Evaluate at positions x (N,3) with unit view directions d (N,3)."""

    def _check_cond(self, n: int, cond: np.ndarray | None) -> None:
        if self.cond_dim == 0:
            if cond is not None:
                raise ConditioningError(
                    f"{type(self).__name__} takes no conditioning features")
        else:
            if cond is None:
                raise ConditioningError(
                    f"{type(self).__name__} requires conditioning features "
                    f"of dim {self.cond_dim}")
            if cond.shape != (n, self.cond_dim):
                raise ConditioningError(
                    f"conditioning shape {cond.shape} != ({n}, {self.cond_dim})")


def eval_field(field: RadianceField, x: np.ndarray, d: np.ndarray,
               cond: np.ndarray | None = None) -> RadianceSample:
    """Single-point convenience wrapper around RadianceField.evaluate."""
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("view direction must be unit-norm")
    c = None if cond is None else np.asarray(cond)[None, :]
    out = field.evaluate(np.asarray(x, dtype=np.float64)[None, :], d[None, :], c)
    return RadianceSample(float(out.sigma[0]), out.color[0], out.logits[0])


@dataclass(frozen=True)
class PositionalEncoding:
    """Fourier feature encoding [x?, sin(2^0 pi x), cos(2^0 pi x), ...].

    Band-major layout: the optional raw input first, then sin/cos pairs of
    every component per frequency band 2^j pi, j = 0..L-1.
    """

    num_bands: int
    include_input: bool = True

    def __post_init__(self):
        if self.num_bands < 0:
            raise ValueError("num_bands must be nonnegative")

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (2 * self.num_bands + (1 if self.include_input else 0))

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        parts = [x] if self.include_input else []
        for j in range(self.num_bands):
            arg = (2.0 ** j * np.pi) * x
            parts.append(np.sin(arg))
            parts.append(np.cos(arg))
        if not parts:
            return x[..., :0]
        return np.concatenate(parts, axis=-1)


class ProceduralField(RadianceField):
    """Closed-form oracle field backed by a ProceduralScene.

    Interior points return the owning primitive's density and color with
    one-hot class logits scaled by PART_LOGIT; exterior points are empty
    with background one-hot logits. sigma never depends on d.
    """

    def __init__(self, scene: ProceduralScene):
        self.scene = scene
        self.num_parts = scene.num_parts

    def evaluate(self, x: np.ndarray, d: np.ndarray,
                 cond: np.ndarray | None = None) -> FieldValues:
        x = np.asarray(x, dtype=np.float64)
        self._check_cond(x.shape[0], cond)
        sigma, color, index = self.scene.classify(x)
        logits = np.zeros((x.shape[0], self.num_classes))
        logits[np.arange(x.shape[0]), index] = PART_LOGIT
        return FieldValues(sigma=sigma, color=color, logits=logits)


class VoxelGrid(RadianceField):
    """Trilinearly interpolated dense grid of (sigma, color, logits).

    Values live at voxel centers; queries outside the grid's bounding box
    are empty space with background logits, and the outer half-voxel ring
    inside the box clamps to the border centers.
    """

    def __init__(self, aabb_min, aabb_max, sigma: np.ndarray, color: np.ndarray,
                 logits: np.ndarray):
        self.aabb_min = np.asarray(aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(aabb_max, dtype=np.float64)
        if np.any(self.aabb_max <= self.aabb_min):
            raise ValueError("degenerate bounding box")
        self.sigma = np.asarray(sigma, dtype=np.float64)
        self.color = np.asarray(color, dtype=np.float64)
        self.logits = np.asarray(logits, dtype=np.float64)
        res = self.sigma.shape
        if len(res) != 3 or min(res) < 2:
            raise ValueError("grid needs at least 2 voxels per axis")
        if self.color.shape != res + (3,) or self.logits.ndim != 4 \
                or self.logits.shape[:3] != res:
            raise ValueError("mismatched grid array shapes")
        self.resolution = res
        self.num_parts = self.logits.shape[3] - 1
        self.cell = (self.aabb_max - self.aabb_min) / np.asarray(res)

    def evaluate(self, x: np.ndarray, d: np.ndarray,
                 cond: np.ndarray | None = None) -> FieldValues:
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        self._check_cond(n, cond)
        inside = np.all((x >= self.aabb_min) & (x <= self.aabb_max), axis=-1)

        g = (x - self.aabb_min) / self.cell - 0.5
        res = np.asarray(self.resolution)
        i0 = np.clip(np.floor(g).astype(np.int64), 0, res - 2)
        w = np.clip(g - i0, 0.0, 1.0)

        sigma = np.zeros(n)
        color = np.zeros((n, 3))
        logits = np.zeros((n, self.num_parts + 1))
        logits[:, -1] = PART_LOGIT
        if np.any(inside):
            ii = i0[inside]
            ww = w[inside]
            s_acc = 0.0
            c_acc = 0.0
            l_acc = 0.0
            for dx in (0, 1):
                wx = ww[:, 0] if dx else 1.0 - ww[:, 0]
                for dy in (0, 1):
                    wy = ww[:, 1] if dy else 1.0 - ww[:, 1]
                    for dz in (0, 1):
                        wz = ww[:, 2] if dz else 1.0 - ww[:, 2]
                        wt = wx * wy * wz
                        ix, iy, iz = ii[:, 0] + dx, ii[:, 1] + dy, ii[:, 2] + dz
                        s_acc = s_acc + wt * self.sigma[ix, iy, iz]
                        c_acc = c_acc + wt[:, None] * self.color[ix, iy, iz]
                        l_acc = l_acc + wt[:, None] * self.logits[ix, iy, iz]
            sigma[inside] = s_acc
            color[inside] = c_acc
            logits[inside] = l_acc
        return FieldValues(sigma=sigma, color=color, logits=logits)

    def voxel_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        axes = [self.aabb_min[a] + (np.arange(self.resolution[a]) + 0.5) * self.cell[a]
                for a in range(3)]
        return tuple(axes)


def voxel_sample(grid: VoxelGrid, x: np.ndarray) -> RadianceSample:
    """Single-point trilinear sample (direction-independent)."""
    return eval_field(grid, x, np.array([0.0, 0.0, 1.0]))


def bake_procedural_to_voxel(scene: ProceduralScene, resolution,
                             margin: float = 0.05) -> VoxelGrid:
    """Sample a procedural scene onto a voxel grid over its bounding box.

    resolution is an int or (nx, ny, nz); the box is the scene's primitive
    bounds expanded by `margin` on every side.
    """
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,)).copy()
    if np.any(res < 2):
        raise ValueError("resolution must be at least 2 per axis")
    if scene.primitives:
        pts = np.concatenate([p.corners() for p in scene.primitives], axis=0)
        lo, hi = pts.min(axis=0) - margin, pts.max(axis=0) + margin
    else:
        lo, hi = np.full(3, -margin), np.full(3, margin)

    cell = (hi - lo) / res
    xs, ys, zs = (lo[a] + (np.arange(res[a]) + 0.5) * cell[a] for a in range(3))
    grid_pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    sigma, color, index = scene.classify(grid_pts)
    logits = np.zeros((grid_pts.shape[0], scene.num_classes))
    logits[np.arange(grid_pts.shape[0]), index] = PART_LOGIT
    shape = tuple(res)
    return VoxelGrid(lo, hi, sigma.reshape(shape), color.reshape(shape + (3,)),
                     logits.reshape(shape + (scene.num_classes,)))
