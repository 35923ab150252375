"""Procedural shape collections with analytic SDF ground truth, rendered to
posed RGB + silhouette single-view training samples.

Shapes are min-unions of rigidly placed primitives (sphere, box, torus,
capsule), so the signed distance is exact for single primitives and
sign-exact everywhere. Two families: a genus-0 family (sphere body plus
attachments) and a genus-1 family built around a torus whose axis is
oriented toward its camera, which keeps the hole image-evident in the
single-view regime. Albedo is a seeded 3-color stripe pattern; shading is
Lambertian with a fixed directional light.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, PngImagePlugin

from .losses import distance_transform
from .renderer import CameraPose, RayBatch, generate_rays, look_at
from .rng import substream

TRACE_MAX_ITERS = 256
TRACE_TOL = 1e-5
TRACE_FAR = 6.0
LIGHT_DIR = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
AMBIENT = 0.2


# ---------------------------------------------------------------------------
# primitive signed distances (numpy, vectorized over (...,3))
# ---------------------------------------------------------------------------

def sd_sphere(p, r):
    return np.linalg.norm(p, axis=-1) - r


def sd_box(p, half):
    q = np.abs(p) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def sd_torus(p, ring_r, tube_r):
    """Torus around the local z axis."""
    q = np.stack([np.linalg.norm(p[..., :2], axis=-1) - ring_r, p[..., 2]],
                 axis=-1)
    return np.linalg.norm(q, axis=-1) - tube_r


def sd_capsule(p, a, b, r):
    a, b = np.asarray(a), np.asarray(b)
    pa = p - a
    ba = b - a
    t = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - t[..., None] * ba, axis=-1) - r


def rotation_between(src, dst) -> np.ndarray:
    """Rotation matrix taking unit vector src to unit vector dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    v = np.cross(src, dst)
    c = float(src @ dst)
    if np.linalg.norm(v) < 1e-12:
        if c > 0:
            return np.eye(3)
        # opposite: rotate pi around any perpendicular axis
        perp = np.array([1.0, 0.0, 0.0])
        if abs(src[0]) > 0.9:
            perp = np.array([0.0, 1.0, 0.0])
        v = np.cross(src, perp)
        v /= np.linalg.norm(v)
        return 2.0 * np.outer(v, v) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * (1.0 / (1.0 + c))


@dataclass
class Leaf:
    kind: str                 # sphere | box | torus | capsule
    params: dict
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def sdf(self, p: np.ndarray) -> np.ndarray:
        local = (p - self.translation) @ self.rotation  # R^T (p - t), row-wise
        if self.kind == "sphere":
            return sd_sphere(local, self.params["r"])
        if self.kind == "box":
            return sd_box(local, self.params["half"])
        if self.kind == "torus":
            return sd_torus(local, self.params["ring_r"], self.params["tube_r"])
        if self.kind == "capsule":
            return sd_capsule(local, self.params["a"], self.params["b"],
                              self.params["r"])
        raise ValueError(f"unknown primitive {self.kind}")


@dataclass
class Albedo:
    palette: np.ndarray       # (3,3) colors
    direction: np.ndarray     # (3,) stripe normal
    band: float
    phase: float

    def __call__(self, p: np.ndarray) -> np.ndarray:
        idx = np.floor((p @ self.direction + self.phase) / self.band)
        idx = np.mod(idx, 3).astype(int)
        return self.palette[idx]


@dataclass
class ShapeSpec:
    leaves: list[Leaf]
    genus: int
    albedo: Albedo

    def __post_init__(self):
        has_torus = any(l.kind == "torus" for l in self.leaves)
        if has_torus != (self.genus == 1):
            raise ValueError("genus label must match torus presence")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        values = [leaf.sdf(p) for leaf in self.leaves]
        return np.min(values, axis=0) if len(values) > 1 else values[0]


def analytic_sdf(spec: ShapeSpec, x) -> np.ndarray:
    """Signed distance of the min-union; exact for single primitives,
    sign-exact (and a lower bound outside) for unions."""
    return spec.sdf(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# shape families
# ---------------------------------------------------------------------------

def _random_albedo(rng) -> Albedo:
    palette = rng.uniform(0.25, 1.0, (3, 3))
    # make the three stripe colors clearly distinct
    palette[0, 0] = 1.0
    palette[1, 1] = 1.0
    palette[2, 2] = 1.0
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return Albedo(palette=palette, direction=d,
                  band=float(rng.uniform(0.18, 0.3)),
                  phase=float(rng.uniform(0.0, 1.0)))


def sample_shape(rng, genus: int, toward_azimuth_deg: float) -> ShapeSpec:
    """One category instance; genus-1 shapes orient their hole roughly
    toward the given camera azimuth."""
    albedo = _random_albedo(rng)
    if genus == 1:
        ring = float(rng.uniform(0.42, 0.55))
        tube = float(rng.uniform(0.13, 0.19))
        az = math.radians(toward_azimuth_deg + rng.uniform(-20.0, 20.0))
        el = math.radians(rng.uniform(-10.0, 10.0))
        axis = np.array([math.cos(el) * math.cos(az),
                         math.cos(el) * math.sin(az),
                         math.sin(el)])
        rot = rotation_between(np.array([0.0, 0.0, 1.0]), axis)
        leaves = [Leaf("torus", {"ring_r": ring, "tube_r": tube}, rotation=rot)]
        if rng.uniform() < 0.5:
            bump_r = float(rng.uniform(0.08, 0.13))
            spot = rot @ np.array([ring, 0.0, 0.0])
            leaves.append(Leaf("sphere", {"r": bump_r}, translation=spot))
        return ShapeSpec(leaves=leaves, genus=1, albedo=albedo)

    body_r = float(rng.uniform(0.38, 0.5))
    leaves = [Leaf("sphere", {"r": body_r})]
    if rng.uniform() < 0.7:
        half = rng.uniform(0.1, 0.2, 3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = direction * (body_r * 0.9)
        leaves.append(Leaf("box", {"half": half}, translation=center))
    if rng.uniform() < 0.5:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        a = direction * body_r * 0.5
        b = direction * min(body_r + 0.3, 0.78)
        leaves.append(Leaf("capsule",
                           {"a": a, "b": b, "r": float(rng.uniform(0.07, 0.12))}))
    return ShapeSpec(leaves=leaves, genus=0, albedo=albedo)


# ---------------------------------------------------------------------------
# ground-truth rendering
# ---------------------------------------------------------------------------

def sphere_trace(spec: ShapeSpec, origins, directions):
    """Vectorized sphere tracing. Returns (hit, depth, points, normals)."""
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    n = origins.shape[0]
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(TRACE_MAX_ITERS):
        if not active.any():
            break
        pts = origins[active] + t[active, None] * directions[active]
        s = analytic_sdf(spec, pts)
        idx = np.flatnonzero(active)
        converged = s < TRACE_TOL
        hit[idx[converged]] = True
        active[idx[converged]] = False
        t[idx[~converged]] += s[~converged]
        escaped = t[idx] > TRACE_FAR
        active[idx[escaped]] = False
    points = origins + t[:, None] * directions
    normals = np.zeros_like(points)
    if hit.any():
        normals[hit] = _sdf_normal(spec, points[hit])
    return hit, t, points, normals


def _sdf_normal(spec, pts, h=1e-4):
    g = np.zeros_like(pts)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        g[:, axis] = analytic_sdf(spec, pts + e) - analytic_sdf(spec, pts - e)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(norms, 1e-12)


@dataclass
class TrainingSample:
    instance_id: str
    view: int
    rgb: np.ndarray           # (H,W,3) in [0,1]
    silhouette: np.ndarray    # (H,W) bool
    dt: np.ndarray            # (H,W) pixels
    camera: CameraPose
    genus: int
    spec: ShapeSpec | None = None   # analytic GT, test/eval only


class EmptySilhouetteError(RuntimeError):
    pass


def render_sample(spec: ShapeSpec, cam: CameraPose,
                  instance_id: str = "inst", view: int = 0) -> TrainingSample:
    """Shade the shape from one camera; background is black, silhouette is
    the sphere-tracing hit mask."""
    H, W = cam.height, cam.width
    px = [(u, v) for v in range(H) for u in range(W)]
    rays = generate_rays(cam, px)
    hit, depth, points, normals = sphere_trace(spec, rays.origins,
                                               rays.directions)
    if not hit.any():
        raise EmptySilhouetteError(f"{instance_id}: no pixel hits the shape")
    shade = AMBIENT + (1.0 - AMBIENT) * np.maximum(normals @ LIGHT_DIR, 0.0)
    rgb = np.zeros((H * W, 3))
    rgb[hit] = np.clip(spec.albedo(points[hit]) * shade[hit, None], 0.0, 1.0)
    sil = hit.reshape(H, W)
    return TrainingSample(
        instance_id=instance_id, view=view,
        rgb=rgb.reshape(H, W, 3), silhouette=sil,
        dt=distance_transform(sil), camera=cam, genus=spec.genus, spec=spec)


def sample_camera(rng, distance=2.5, fov_deg=50.0, width=64, height=64
                  ) -> tuple[CameraPose, float]:
    azim = float(rng.uniform(0.0, 360.0))
    elev = float(rng.uniform(-10.0, 40.0))
    eye = distance * np.array([
        math.cos(math.radians(elev)) * math.cos(math.radians(azim)),
        math.cos(math.radians(elev)) * math.sin(math.radians(azim)),
        math.sin(math.radians(elev)),
    ])
    cam = look_at(eye, fov_deg=fov_deg, width=width, height=height)
    return cam, azim


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

def _png_info(config_hash):
    if not config_hash:
        return None
    info = PngImagePlugin.PngInfo()
    info.add_text("config_hash", config_hash)
    return info


def _save_png(path, array_u8, config_hash=None):
    tmp = str(path) + ".tmp"
    img = Image.fromarray(array_u8)
    img.save(tmp, format="PNG", pnginfo=_png_info(config_hash))
    os.replace(tmp, path)


def _write_json(path, obj):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def spec_to_json(spec: ShapeSpec) -> dict:
    return {
        "genus": spec.genus,
        "leaves": [{
            "kind": l.kind,
            "params": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                       for k, v in l.params.items()},
            "rotation": l.rotation.reshape(-1).tolist(),
            "translation": l.translation.tolist(),
        } for l in spec.leaves],
        "albedo": {
            "palette": spec.albedo.palette.tolist(),
            "direction": spec.albedo.direction.tolist(),
            "band": spec.albedo.band,
            "phase": spec.albedo.phase,
        },
    }


def spec_from_json(d: dict) -> ShapeSpec:
    leaves = [Leaf(kind=ld["kind"],
                   params={k: (np.asarray(v) if isinstance(v, list) else v)
                           for k, v in ld["params"].items()},
                   rotation=np.asarray(ld["rotation"]).reshape(3, 3),
                   translation=np.asarray(ld["translation"]))
              for ld in d["leaves"]]
    alb = Albedo(palette=np.asarray(d["albedo"]["palette"]),
                 direction=np.asarray(d["albedo"]["direction"]),
                 band=d["albedo"]["band"], phase=d["albedo"]["phase"])
    return ShapeSpec(leaves=leaves, genus=d["genus"], albedo=alb)


def camera_to_json(cam: CameraPose) -> dict:
    return {"rotation": cam.rotation.reshape(-1).tolist(),
            "translation": cam.translation.tolist(),
            "fov_deg": cam.fov_deg, "width": cam.width, "height": cam.height}


def camera_from_json(d: dict) -> CameraPose:
    return CameraPose(rotation=np.asarray(d["rotation"]).reshape(3, 3),
                      translation=np.asarray(d["translation"]),
                      fov_deg=d["fov_deg"], width=d["width"], height=d["height"])


def _view_names(view: int) -> tuple[str, str, str]:
    if view == 0:
        return "rgb.png", "mask.png", "camera.json"
    return f"rgb_v{view:03d}.png", f"mask_v{view:03d}.png", f"camera_v{view:03d}.json"


def generate_dataset(seed: int, count: int, genus_mix: float, resolution: int,
                     out_dir, views_per_instance: int = 1,
                     camera_distance: float = 2.5, fov_deg: float = 50.0,
                     config_hash: str | None = None) -> dict:
    """Write `count` instances (each `views_per_instance` posed samples) and
    a manifest; byte-identical for identical arguments."""
    if count < 1:
        raise ValueError("generate_dataset: count must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    n_genus1 = round(count * genus_mix)
    instance_ids = []
    genus_labels = {}
    for i in range(count):
        inst = f"inst_{i:04d}"
        genus = 1 if i < n_genus1 else 0
        cam_rng = substream(seed, "camera", i)
        cams = []
        azim0 = None
        for v in range(views_per_instance):
            cam, azim = sample_camera(cam_rng, camera_distance, fov_deg,
                                      resolution, resolution)
            if azim0 is None:
                azim0 = azim
            cams.append(cam)
        spec = sample_shape(substream(seed, "shape", i), genus, azim0)
        inst_dir = os.path.join(out_dir, inst)
        os.makedirs(inst_dir, exist_ok=True)
        for v, cam in enumerate(cams):
            sample = None
            for _ in range(10):
                try:
                    sample = render_sample(spec, cam, inst, v)
                    break
                except EmptySilhouetteError:
                    cam, _ = sample_camera(cam_rng, camera_distance, fov_deg,
                                           resolution, resolution)
            if sample is None:
                raise EmptySilhouetteError(
                    f"{inst}: empty silhouette after 10 camera retries")
            rgb_name, mask_name, cam_name = _view_names(v)
            rgb_u8 = np.round(sample.rgb * 255.0).astype(np.uint8)
            _save_png(os.path.join(inst_dir, rgb_name), rgb_u8, config_hash)
            mask_u8 = sample.silhouette.astype(np.uint8) * 255
            _save_png(os.path.join(inst_dir, mask_name), mask_u8, config_hash)
            _write_json(os.path.join(inst_dir, cam_name), camera_to_json(cam))
        _write_json(os.path.join(inst_dir, "meta.json"),
                    {"genus": genus, "spec": spec_to_json(spec)})
        instance_ids.append(inst)
        genus_labels[inst] = genus
    manifest = {
        "seed": seed, "count": count, "resolution": resolution,
        "genus_mix": genus_mix, "views_per_instance": views_per_instance,
        "camera_distance": camera_distance, "fov_deg": fov_deg,
        "instances": instance_ids, "genus": genus_labels,
    }
    if config_hash:
        manifest["config_hash"] = config_hash
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


class Dataset:
    """Loader for the on-disk layout; images decode once and cache, the
    distance transform is computed at load time."""

    def __init__(self, root, max_views: int | None = None):
        self.root = root
        with open(os.path.join(root, "manifest.json")) as fh:
            self.manifest = json.load(fh)
        self.instances = self.manifest["instances"]
        views = self.manifest.get("views_per_instance", 1)
        if max_views is not None:
            views = min(views, max_views)
        self.views = views
        self._cache: dict[tuple[str, int], TrainingSample] = {}

    def __len__(self):
        return len(self.instances) * self.views

    @property
    def resolution(self) -> int:
        return self.manifest["resolution"]

    def sample_index(self, flat: int) -> tuple[str, int]:
        return self.instances[flat // self.views], flat % self.views

    def load(self, instance_id: str, view: int = 0) -> TrainingSample:
        key = (instance_id, view)
        if key in self._cache:
            return self._cache[key]
        inst_dir = os.path.join(self.root, instance_id)
        rgb_name, mask_name, cam_name = _view_names(view)
        rgb = np.asarray(Image.open(os.path.join(inst_dir, rgb_name)),
                         dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(os.path.join(inst_dir, mask_name))) > 127
        with open(os.path.join(inst_dir, cam_name)) as fh:
            cam = camera_from_json(json.load(fh))
        with open(os.path.join(inst_dir, "meta.json")) as fh:
            meta = json.load(fh)
        sample = TrainingSample(
            instance_id=instance_id, view=view, rgb=rgb, silhouette=mask,
            dt=distance_transform(mask), camera=cam, genus=meta["genus"],
            spec=spec_from_json(meta["spec"]))
        self._cache[key] = sample
        return sample

    def load_flat(self, flat: int) -> TrainingSample:
        inst, view = self.sample_index(flat)
        return self.load(inst, view)
