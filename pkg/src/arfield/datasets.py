"""Dataset files: scene/manifest schemas, synthetic generation, image I/O.

Datasets on disk hold 8-bit images; degrees in every file, radians in all
code, with conversion at this boundary only. Part-segmentation maps store
part ids directly (1..P) with 0 for background; in-memory label arrays use
0-based class indices with the background last.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .articulation import JointAttributes
from .fields import ProceduralField
from .geometry import Camera, RigidTransform, look_at_camera
from .rendering import RenderConfig, render_image
from .scenes import ProceduralScene

MANIFEST_FORMAT = "arfield-dataset"
MANIFEST_VERSION = 1
CAMERA_CONVENTION = "+z forward, +x right, +y down; world-to-camera; pixel centers at integers"


class SchemaError(ValueError):
    """A dataset or camera file is malformed; the message names the field."""


# ---------------------------------------------------------------- image I/O

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def save_rgb(path, img: np.ndarray) -> None:
    """Write an RGB image as PNG or PPM (by extension). Floats are quantized."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    path = os.fspath(path)
    if path.lower().endswith(".ppm"):
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
            f.write(arr.tobytes())
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_rgb(path) -> np.ndarray:
    """Read PNG or PPM into a uint8 (H, W, 3) array."""
    path = os.fspath(path)
    if path.lower().endswith(".ppm"):
        with open(path, "rb") as f:
            data = f.read()
        if not data.startswith(b"P6"):
            raise ValueError(f"{path}: not a binary PPM file")
        parts = data.split(maxsplit=4)
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
        if maxval != 255:
            raise ValueError(f"{path}: only 8-bit PPM supported")
        return np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def label_index_to_png(label: np.ndarray, num_parts: int) -> np.ndarray:
    """0-based class indices -> on-disk values (part i -> i, background -> 0)."""
    label = np.asarray(label)
    out = (label + 1).astype(np.uint8)
    out[label == num_parts] = 0
    return out


def png_to_label_index(values: np.ndarray, num_parts: int) -> np.ndarray:
    """On-disk segmentation values -> 0-based class indices, validated."""
    values = np.asarray(values)
    if values.max(initial=0) > num_parts:
        raise SchemaError(f"segmentation value {int(values.max())} exceeds the "
                          f"part count {num_parts}")
    idx = values.astype(np.int64) - 1
    idx[values == 0] = num_parts
    return idx


def save_seg(path, label: np.ndarray, num_parts: int) -> None:
    Image.fromarray(label_index_to_png(label, num_parts), mode="L").save(path)


def load_seg(path, num_parts: int) -> np.ndarray:
    with Image.open(path) as im:
        values = np.asarray(im.convert("L"), dtype=np.uint8)
    return png_to_label_index(values, num_parts)


# ------------------------------------------------------------ camera files

def camera_to_dict(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "world_to_camera": cam.world_to_camera.matrix().tolist(),
            "convention": CAMERA_CONVENTION}


def camera_from_dict(d: dict, where: str = "camera") -> Camera:
    for key in ("fx", "fy", "cx", "cy", "width", "height", "world_to_camera"):
        if key not in d:
            raise SchemaError(f"{where}: missing required key {key!r}")
    try:
        extr = RigidTransform.from_matrix(np.asarray(d["world_to_camera"], dtype=np.float64))
    except ValueError as e:
        raise SchemaError(f"{where}: bad world_to_camera matrix ({e})") from e
    return Camera(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                  cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]),
                  world_to_camera=extr)


def save_camera(path, cam: Camera) -> None:
    with open(path, "w") as f:
        json.dump(camera_to_dict(cam), f, indent=2)


def load_camera(path) -> Camera:
    with open(path) as f:
        return camera_from_dict(json.load(f), where=os.fspath(path))


# --------------------------------------------------------------- manifests

@dataclass
class Frame:
    image_path: str
    seg_path: str
    camera: Camera
    articulation_deg: np.ndarray
    view: int


@dataclass
class SceneManifest:
    root: str
    num_parts: int
    rest_articulation_deg: np.ndarray
    frames: list
    background_color: np.ndarray
    bounds: tuple
    joints: list = field(default_factory=list)   # ground truth, optional
    provenance: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.num_parts + 1

    def frame_paths(self, frame: Frame) -> tuple[str, str]:
        return (os.path.join(self.root, frame.image_path),
                os.path.join(self.root, frame.seg_path))

    def load_frame_arrays(self, frame: Frame) -> tuple[np.ndarray, np.ndarray]:
        """(float RGB in [0,1], 0-based label indices) for one frame."""
        img_path, seg_path = self.frame_paths(frame)
        return to_float(load_rgb(img_path)), load_seg(seg_path, self.num_parts)

    def rest_frames(self, atol_deg: float = 1e-6) -> list:
        """Frames captured at the dataset's rest articulation."""
        return [f for f in self.frames
                if np.allclose(f.articulation_deg, self.rest_articulation_deg,
                               atol=atol_deg)]


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise SchemaError(f"{where}: missing required key {key!r}")
    return d[key]


def load_manifest(path) -> SceneManifest:
    path = os.fspath(path)
    with open(path) as f:
        data = json.load(f)
    where = path
    if data.get("format") != MANIFEST_FORMAT:
        raise SchemaError(f"{where}: format is {data.get('format')!r}, "
                          f"expected {MANIFEST_FORMAT!r}")
    num_parts = int(_require(data, "num_parts", where))
    intrinsics = _require(data, "intrinsics", where)
    rest = np.atleast_1d(np.asarray(_require(data, "rest_articulation_deg", where),
                                    dtype=np.float64))
    bounds = _require(data, "bounds", where)
    root = os.path.dirname(os.path.abspath(path))

    frames = []
    for i, fr in enumerate(_require(data, "frames", where)):
        fwhere = f"{where}: frames[{i}]"
        cam_dict = dict(intrinsics)
        cam_dict["world_to_camera"] = _require(fr, "world_to_camera", fwhere)
        cam = camera_from_dict(cam_dict, where=fwhere)
        frames.append(Frame(image_path=_require(fr, "image", fwhere),
                            seg_path=_require(fr, "seg", fwhere),
                            camera=cam,
                            articulation_deg=np.atleast_1d(np.asarray(
                                fr.get("articulation_deg", rest), dtype=np.float64)),
                            view=int(fr.get("view", i))))
    joints = [JointAttributes(np.asarray(j["axis"], dtype=np.float64),
                              np.asarray(j["pivot"], dtype=np.float64),
                              int(j["child_part"]))
              for j in data.get("joints", [])]
    manifest = SceneManifest(root=root, num_parts=num_parts,
                             rest_articulation_deg=rest, frames=frames,
                             background_color=np.asarray(
                                 data.get("background_color", [0, 0, 0]), dtype=np.float64),
                             bounds=(float(bounds[0]), float(bounds[1])),
                             joints=joints, provenance=data.get("provenance", {}))
    for fr in manifest.frames:
        for p in manifest.frame_paths(fr):
            if not os.path.exists(p):
                raise SchemaError(f"{where}: referenced file does not exist: {p}")
    return manifest


# -------------------------------------------------------------- generation

def sphere_cameras(n_views: int, radius: float, rng: np.random.Generator,
                   fov_deg: float, width: int, height: int) -> list[Camera]:
    """Cameras uniformly distributed on a sphere, all looking at the origin."""
    fy = (height / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    cams = []
    for _ in range(n_views):
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        while n < 1e-9:
            v = rng.normal(size=3)
            n = np.linalg.norm(v)
        eye = v / n * radius
        cams.append(look_at_camera(eye, np.zeros(3), fy, fy,
                                   (width - 1) / 2.0, (height - 1) / 2.0,
                                   width, height))
    return cams


def generate_dataset(scene: ProceduralScene, n_views: int, articulations_deg,
                     resolution: int, seed: int, out_dir,
                     k_samples: int = 160, fov_deg: float = 50.0,
                     radius_factor: float = 2.5) -> str:
    """Render a procedural scene into an on-disk dataset; returns manifest path.

    Cameras are seeded-random on a sphere of radius_factor times the scene
    bounding radius; every (view, articulation) pair is rendered by the
    oracle renderer to rgb/VVV_AAA.png and seg/VVV_AAA.png. Regeneration
    with identical inputs reproduces the files bit for bit.
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    articulations_deg = [np.atleast_1d(np.asarray(a, dtype=np.float64))
                         for a in np.atleast_1d(articulations_deg)]
    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "seg"), exist_ok=True)

    rng = np.random.default_rng(seed)
    r_obj = scene.bounding_radius()
    radius = radius_factor * r_obj
    cams = sphere_cameras(n_views, radius, rng, fov_deg, resolution, resolution)
    bounds = (radius - 1.4 * r_obj, radius + 1.4 * r_obj)

    frames = []
    for ai, art in enumerate(articulations_deg):
        posed = scene.posed(np.radians(art))
        fieldobj = ProceduralField(posed)
        cfg = RenderConfig(t_near=bounds[0], t_far=bounds[1], k_coarse=k_samples,
                           jitter=False, background=scene.background_color)
        for vi, cam in enumerate(cams):
            res = render_image(fieldobj, cam, cfg)
            img_rel = f"rgb/{vi:03d}_{ai:03d}.png"
            seg_rel = f"seg/{vi:03d}_{ai:03d}.png"
            save_rgb(os.path.join(out_dir, img_rel), res.color)
            save_seg(os.path.join(out_dir, seg_rel), res.label, scene.num_parts)
            frames.append({"image": img_rel, "seg": seg_rel,
                           "world_to_camera": cam.world_to_camera.matrix().tolist(),
                           "articulation_deg": art.tolist(), "view": vi})

    intrinsics = {"fx": cams[0].fx, "fy": cams[0].fy, "cx": cams[0].cx,
                  "cy": cams[0].cy, "width": resolution, "height": resolution}
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "num_parts": scene.num_parts,
        "background_color": scene.background_color.tolist(),
        "rest_articulation_deg": np.degrees(scene.rest_angles).tolist(),
        "bounds": [bounds[0], bounds[1]],
        "intrinsics": intrinsics,
        "convention": CAMERA_CONVENTION,
        "joints": [{"child_part": j.child_part, "axis": j.axis.tolist(),
                    "pivot": j.pivot.tolist()} for j in scene.joints],
        "frames": frames,
        "provenance": {"scene": scene.to_json_dict(), "seed": seed,
                       "render": {"k_samples": k_samples, "fov_deg": fov_deg,
                                  "radius_factor": radius_factor,
                                  "resolution": resolution, "n_views": n_views}},
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest_path
