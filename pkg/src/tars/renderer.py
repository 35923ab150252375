"""Pinhole cameras, ray generation, and the learned recurrent ray marcher.

The marcher walks each camera ray with steps predicted by an LSTM from the
features of the current 3D point; every step is positive (softplus + floor)
and clamped above, so a trace is always n strictly forward moves. The whole
march is recorded on the tape, which is what couples the 2.5D depth picture
to the SDF through the consistency losses.

Camera convention: x_cam = R @ x_world + t with +x right, +y down,
+z forward; vertical field of view; pixel (u, v) rays pass through the
pixel center (u + 0.5, v + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import positional_encode


@dataclass
class CameraPose:
    rotation: np.ndarray      # (3,3) world -> camera
    translation: np.ndarray   # (3,)
    fov_deg: float            # vertical field of view
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("camera rotation must have det +1")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def focal_px(self) -> float:
        return (self.height / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    def distance_to_origin(self) -> float:
        return float(np.linalg.norm(self.center))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0),
            fov_deg=50.0, width=64, height=64) -> CameraPose:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    x = np.cross(fwd, upv)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(fwd, x)
    rot = np.stack([x, y, fwd])
    return CameraPose(rotation=rot, translation=-rot @ eye,
                      fov_deg=fov_deg, width=width, height=height)


@dataclass
class RayBatch:
    origins: np.ndarray            # (N,3)
    directions: np.ndarray         # (N,3) unit
    pixels: np.ndarray             # (N,2) integer (u,v)
    on_silhouette: np.ndarray | None = None   # (N,) bool
    gt_rgb: np.ndarray | None = None          # (N,3)
    dt_value: np.ndarray | None = None        # (N,) pixels

    def __len__(self):
        return self.origins.shape[0]


def generate_rays(cam: CameraPose, pixels) -> RayBatch:
    """World-space rays through the given pixel centers."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.int64))
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any((u < 0) | (u >= cam.width) | (v < 0) | (v >= cam.height)):
        raise ValueError("generate_rays: pixel out of image bounds")
    f = cam.focal_px
    d_cam = np.stack([
        (u + 0.5 - cam.width / 2.0) / f,
        (v + 0.5 - cam.height / 2.0) / f,
        np.ones(len(u)),
    ], axis=1)
    d_world = d_cam @ cam.rotation        # R^T applied row-wise
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.center, d_world.shape).copy()
    return RayBatch(origins=origins, directions=d_world, pixels=pixels)


@dataclass
class MarchTrace:
    points: list[ad.Tensor]       # n+1 tensors of shape (N,3)
    steps: list[ad.Tensor]        # n tensors of shape (N,1)
    depth: ad.Tensor              # (N,1)

    @property
    def num_steps(self):
        return len(self.steps)

    def last(self) -> ad.Tensor:
        return self.points[-1]


def lstm_step(p: dict[str, ad.Tensor], inp: ad.Tensor,
              h: ad.Tensor, c: ad.Tensor, d_min: float = 0.01):
    """One LSTM cell update plus the positive march distance
    softplus(linear(hidden)) + d_min. Clamping happens in march_rays."""
    hd = h.shape[-1]
    gates = ad.add(ad.add(ad.matmul(inp, p["lstm/wx"]),
                          ad.matmul(h, p["lstm/wh"])), p["lstm/b"])
    i = ad.sigmoid(ad.slice_last(gates, 0, hd))
    f = ad.sigmoid(ad.slice_last(gates, hd, 2 * hd))
    g = ad.tanh(ad.slice_last(gates, 2 * hd, 3 * hd))
    o = ad.sigmoid(ad.slice_last(gates, 3 * hd, 4 * hd))
    c2 = ad.add(ad.mul(f, c), ad.mul(i, g))
    h2 = ad.mul(o, ad.tanh(c2))
    raw = ad.add(ad.matmul(h2, p["step/w"]), p["step/b"])
    d = ad.add(ad.softplus(raw), ad.Tensor(d_min))
    return h2, c2, d


def march_rays(rays: RayBatch, feature_fn, n: int, t_near: float,
               p: dict[str, ad.Tensor] | None = None,
               lstm_dim: int = 32, freq_point: int = 6,
               d_min: float = 0.01, d_max: float = 0.5,
               cell_fn=None) -> MarchTrace:
    """March every ray n steps; the full trace stays on the tape.

    feature_fn maps a (N,3) point tensor to the active stage's trunk
    features. `cell_fn(inp, h, c) -> (h, c, d)` may replace the LSTM cell
    (stub for tests); by default the cell reads the `p` parameter map.
    """
    if n < 2:
        raise ValueError("march_rays: need at least 2 steps")
    N = len(rays)
    dirs = ad.Tensor(rays.directions)
    x = ad.Tensor(rays.origins + t_near * rays.directions)
    h = ad.Tensor(np.zeros((N, lstm_dim)))
    c = ad.Tensor(np.zeros((N, lstm_dim)))
    if cell_fn is None:
        if p is None:
            raise ValueError("march_rays: need parameters or a cell_fn")
        cell_fn = lambda inp, hh, cc: lstm_step(p, inp, hh, cc, d_min)
    points = [x]
    steps = []
    depth = ad.Tensor(np.full((N, 1), float(t_near)))
    for _ in range(n):
        feats = feature_fn(points[-1])
        if not np.all(np.isfinite(feats.data)):
            bad = int(np.argwhere(~np.isfinite(feats.data))[0][0])
            raise FloatingPointError(f"non-finite march feature at ray {bad}")
        inp = ad.concat([feats, positional_encode(points[-1], freq_point)])
        h, c, d = cell_fn(inp, h, c)
        d = ad.min_const(d, d_max)
        steps.append(d)
        depth = ad.add(depth, d)
        points.append(ad.add(points[-1], ad.mul(d, dirs)))
    return MarchTrace(points=points, steps=steps, depth=depth)


def depth_to_png(path, depth: np.ndarray, hit: np.ndarray,
                 near: float, far: float) -> None:
    """8-bit grayscale depth image, linear between near and far; misses are
    written as 0."""
    from PIL import Image
    norm = np.clip((depth - near) / max(far - near, 1e-9), 0.0, 1.0)
    img = np.where(hit, (1.0 - norm) * 255.0, 0.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
