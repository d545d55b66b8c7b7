"""Procedural solid-primitive scenes with ground-truth part labels and joints.

A ProceduralScene is a closed-form stand-in for a captured articulated
object: every primitive carries a part id, a solid color, and a uniform
interior density, so density / color / part label at any 3D point can be
computed exactly, independently of any renderer. Scenes double as the
ground-truth oracle for every downstream module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .articulation import JointAttributes
from .geometry import RigidTransform, rotation_about_axis, vec3

SCENE_FORMAT = "arfield-scene"
SCENE_VERSION = 1


@dataclass(frozen=True)
class Primitive:
    """Solid primitive owned by one part.

    part ids are 1..P; the background class is P+1 and owns no primitives.
    """

    part: int
    color: np.ndarray
    density: float

    def __post_init__(self):
        c = np.asarray(self.color, dtype=np.float64)
        if c.shape != (3,) or np.any(c < 0) or np.any(c > 1):
            raise ValueError("color must be an RGB triple in [0,1]")
        if self.density <= 0:
            raise ValueError("primitive density must be positive")
        if self.part < 1:
            raise ValueError("part ids start at 1")
        object.__setattr__(self, "color", c)

    def contains(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def transformed(self, t: RigidTransform) -> "Primitive":
        raise NotImplementedError

    def corners(self) -> np.ndarray:
        """World-frame points whose hull bounds the primitive (for radii)."""
        raise NotImplementedError


@dataclass(frozen=True)
class Box(Primitive):
    half_extents: np.ndarray = None
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        super().__post_init__()
        he = np.asarray(self.half_extents, dtype=np.float64)
        if he.shape != (3,) or np.any(he <= 0):
            raise ValueError("half_extents must be 3 positive reals")
        object.__setattr__(self, "half_extents", he)

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = self.pose.inverse().apply(points)
        return np.all(np.abs(local) <= self.half_extents, axis=-1)

    def transformed(self, t: RigidTransform) -> "Box":
        return replace(self, pose=t.compose(self.pose))

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=np.float64)
        return self.pose.apply(signs * self.half_extents)


@dataclass(frozen=True)
class Sphere(Primitive):
    center: np.ndarray = None
    radius: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        c = np.asarray(self.center, dtype=np.float64)
        if c.shape != (3,) or self.radius <= 0:
            raise ValueError("sphere needs a 3-vector center and positive radius")
        object.__setattr__(self, "center", c)

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = np.asarray(points, dtype=np.float64) - self.center
        return np.einsum("...i,...i->...", d, d) <= self.radius * self.radius

    def transformed(self, t: RigidTransform) -> "Sphere":
        return replace(self, center=t.apply(self.center))

    def corners(self) -> np.ndarray:
        offs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                        dtype=np.float64) * self.radius
        return self.center + offs


@dataclass(frozen=True)
class Cylinder(Primitive):
    """Solid cylinder along the local z axis."""

    radius: float = 0.0
    half_height: float = 0.0
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        super().__post_init__()
        if self.radius <= 0 or self.half_height <= 0:
            raise ValueError("cylinder needs positive radius and half_height")

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = self.pose.inverse().apply(points)
        radial = local[..., 0] ** 2 + local[..., 1] ** 2
        return (radial <= self.radius * self.radius) & (np.abs(local[..., 2]) <= self.half_height)

    def transformed(self, t: RigidTransform) -> "Cylinder":
        return replace(self, pose=t.compose(self.pose))

    def corners(self) -> np.ndarray:
        r, h = self.radius, self.half_height
        offs = np.array([[sx * r, sy * r, sz * h] for sx in (-1, 1) for sy in (-1, 1)
                         for sz in (-1, 1)], dtype=np.float64)
        return self.pose.apply(offs)


@dataclass(frozen=True)
class ProceduralScene:
    """Articulated arrangement of primitives with ground-truth joints.

    Primitives are stored at the scene's rest articulation (`rest_angles`,
    radians, one per joint). Exactly one part is the root; every other part
    must be the child of exactly one revolute joint.
    """

    primitives: tuple
    num_parts: int
    root_part: int
    joints: tuple
    rest_angles: np.ndarray
    background_color: np.ndarray = None

    def __post_init__(self):
        if self.num_parts < 1:
            raise ValueError("need at least one part")
        if not (1 <= self.root_part <= self.num_parts):
            raise ValueError("root part out of range")
        parts_seen = {p.part for p in self.primitives}
        if any(p > self.num_parts for p in parts_seen):
            raise ValueError("primitive part id exceeds num_parts")
        children = [j.child_part for j in self.joints]
        expected = sorted(p for p in range(1, self.num_parts + 1) if p != self.root_part)
        if sorted(children) != expected:
            raise ValueError("joints must cover every non-root part exactly once")
        rest = np.asarray(self.rest_angles, dtype=np.float64)
        if rest.shape != (len(self.joints),):
            raise ValueError("need one rest angle per joint")
        bg = (np.zeros(3) if self.background_color is None
              else np.asarray(self.background_color, dtype=np.float64))
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "rest_angles", rest)
        object.__setattr__(self, "background_color", bg)

    @property
    def num_classes(self) -> int:
        return self.num_parts + 1

    def bounding_radius(self) -> float:
        pts = np.concatenate([p.corners() for p in self.primitives], axis=0)
        return float(np.max(np.linalg.norm(pts, axis=-1)))

    def posed(self, angles) -> "ProceduralScene":
        """Scene with each joint physically moved to the given angles (radians).

        Children rotate about their joint by (angle - rest_angle); joint
        axes stay attached to the root.
        """
        angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
        if angles.shape != self.rest_angles.shape:
            raise ValueError("need one angle per joint")
        moves = {}
        for j, a_new, a_rest in zip(self.joints, angles, self.rest_angles):
            moves[j.child_part] = rotation_about_axis(j.axis, j.pivot, a_new - a_rest)
        prims = tuple(p.transformed(moves[p.part]) if p.part in moves else p
                      for p in self.primitives)
        return replace(self, primitives=prims, rest_angles=angles)

    def transformed(self, t: RigidTransform) -> "ProceduralScene":
        """Rigidly move the whole object, joints included."""
        prims = tuple(p.transformed(t) for p in self.primitives)
        joints = tuple(JointAttributes(t.apply_direction(j.axis), t.apply(j.pivot), j.child_part)
                       for j in self.joints)
        return replace(self, primitives=prims, joints=joints)

    def classify(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact (density, color, part index) at world points (..., 3).

        Part index is 0-based: part i -> i-1, background -> num_parts.
        Overlaps resolve to the highest part id; density is the max over
        containing primitives.
        """
        points = np.asarray(points, dtype=np.float64)
        shape = points.shape[:-1]
        sigma = np.zeros(shape, dtype=np.float64)
        color = np.zeros(shape + (3,), dtype=np.float64)
        index = np.full(shape, self.num_parts, dtype=np.int64)
        for prim in sorted(self.primitives, key=lambda p: p.part):
            m = prim.contains(points)
            sigma[m] = np.maximum(sigma[m], prim.density)
            color[m] = prim.color
            index[m] = prim.part - 1
        return sigma, color, index

    def to_json_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            d = {"part": p.part, "color": p.color.tolist(), "density": p.density}
            if isinstance(p, Box):
                d.update(kind="box", half_extents=p.half_extents.tolist(),
                         pose=p.pose.matrix().tolist())
            elif isinstance(p, Sphere):
                d.update(kind="sphere", center=p.center.tolist(), radius=p.radius)
            elif isinstance(p, Cylinder):
                d.update(kind="cylinder", radius=p.radius, half_height=p.half_height,
                         pose=p.pose.matrix().tolist())
            else:
                raise TypeError(f"unknown primitive {type(p).__name__}")
            prims.append(d)
        joints = [{"child_part": j.child_part, "axis": j.axis.tolist(),
                   "pivot": j.pivot.tolist(), "rest_angle_deg": float(np.degrees(a))}
                  for j, a in zip(self.joints, self.rest_angles)]
        return {"format": SCENE_FORMAT, "version": SCENE_VERSION,
                "num_parts": self.num_parts, "root_part": self.root_part,
                "background_color": self.background_color.tolist(),
                "primitives": prims, "joints": joints}

    @staticmethod
    def from_json_dict(data: dict) -> "ProceduralScene":
        if data.get("format") != SCENE_FORMAT:
            raise ValueError(f"not a {SCENE_FORMAT} file (format={data.get('format')!r})")
        prims = []
        for d in data["primitives"]:
            kind = d["kind"]
            common = dict(part=int(d["part"]), color=np.asarray(d["color"]),
                          density=float(d["density"]))
            if kind == "box":
                prims.append(Box(half_extents=np.asarray(d["half_extents"]),
                                 pose=RigidTransform.from_matrix(np.asarray(d["pose"])),
                                 **common))
            elif kind == "sphere":
                prims.append(Sphere(center=np.asarray(d["center"]), radius=float(d["radius"]),
                                    **common))
            elif kind == "cylinder":
                prims.append(Cylinder(radius=float(d["radius"]),
                                      half_height=float(d["half_height"]),
                                      pose=RigidTransform.from_matrix(np.asarray(d["pose"])),
                                      **common))
            else:
                raise ValueError(f"unknown primitive kind {kind!r}")
        joints = tuple(JointAttributes(np.asarray(j["axis"]), np.asarray(j["pivot"]),
                                       int(j["child_part"]))
                       for j in data["joints"])
        rest = np.array([np.radians(float(j["rest_angle_deg"])) for j in data["joints"]])
        return ProceduralScene(primitives=tuple(prims), num_parts=int(data["num_parts"]),
                               root_part=int(data["root_part"]), joints=joints,
                               rest_angles=rest,
                               background_color=np.asarray(data.get("background_color", [0, 0, 0])))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2)

    @staticmethod
    def load(path) -> "ProceduralScene":
        with open(path) as f:
            return ProceduralScene.from_json_dict(json.load(f))


def hinge_scene(opening_deg: float = 90.0,
                base_half_extents=(0.5, 0.35, 0.04),
                panel_half_extents=(0.48, 0.33, 0.03),
                base_color=(0.85, 0.15, 0.1),
                panel_color=(0.1, 0.55, 0.9),
                density: float = 300.0) -> ProceduralScene:
    """Two-part hinge: a flat base (root) and a panel on a revolute joint.

    The hinge line runs along x at the base's top back edge. At 0 deg the
    panel lies flat on the base (parts flush); positive angles swing it up,
    90 deg is fully upright. The panel's bottom back edge coincides with
    the hinge, so open configurations touch only along the axis line.
    """
    bhe = np.asarray(base_half_extents, dtype=np.float64)
    phe = np.asarray(panel_half_extents, dtype=np.float64)
    pivot = vec3(0.0, bhe[1], bhe[2])
    axis = vec3(-1.0, 0.0, 0.0)

    base = Box(part=1, color=np.asarray(base_color), density=density,
               half_extents=bhe, pose=RigidTransform.identity())
    closed_center = vec3(0.0, bhe[1] - phe[1], bhe[2] + phe[2])
    open_pose = rotation_about_axis(axis, pivot, np.radians(opening_deg))
    panel = Box(part=2, color=np.asarray(panel_color), density=density,
                half_extents=phe,
                pose=open_pose.compose(RigidTransform(np.eye(3), closed_center)))

    joint = JointAttributes(axis, pivot, child_part=2)
    return ProceduralScene(primitives=(base, panel), num_parts=2, root_part=1,
                           joints=(joint,), rest_angles=np.array([np.radians(opening_deg)]))


def random_hinge_scene(rng: np.random.Generator, opening_deg: float = 90.0,
                       density: float = 300.0) -> ProceduralScene:
    """Hinge instance with randomized proportions and colors.

    Used for category-level experiments: same topology and joint layout,
    varied geometry/appearance.
    """
    base = np.array([0.5, 0.35, 0.04]) * rng.uniform(0.8, 1.2, size=3)
    panel = np.array([base[0] * rng.uniform(0.88, 0.98),
                      base[1] * rng.uniform(0.85, 0.98),
                      0.03 * rng.uniform(0.8, 1.3)])

    def saturated():
        c = rng.uniform(0.0, 1.0, size=3)
        c[rng.integers(0, 3)] = rng.uniform(0.75, 1.0)
        return c

    return hinge_scene(opening_deg=opening_deg, base_half_extents=base,
                       panel_half_extents=panel, base_color=saturated(),
                       panel_color=saturated(), density=density)
