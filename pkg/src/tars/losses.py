"""Training objective: color, renderer/SDF consistency, mask distance
transform, and the two field regularizers.

Spatial gradients inside the regularizers are central finite differences of
extra forward passes recorded on the live tape, so parameter gradients flow
without second-order autodiff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad

_NORM_EPS = 1e-12  # inside sqrt so a zero gradient field stays differentiable


@dataclass
class LossWeights:
    rgb: float = 1.0
    sdf: float = 1.0
    dt: float = 0.5
    eik: float = 0.1
    deform: float = 0.01

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be >= 0")

    def as_dict(self):
        return {"rgb": self.rgb, "sdf": self.sdf, "dt": self.dt,
                "eik": self.eik, "def": self.deform}


TERM_ORDER = ("rgb", "sdf", "dt", "eik", "def")


@dataclass
class LossReport:
    parts: dict[str, float]
    total: float
    total_tensor: ad.Tensor
    rgb_warning: bool = False

    def as_dict(self):
        d = dict(self.parts)
        d["total"] = self.total
        return d


def total_loss(parts: dict[str, ad.Tensor], weights: LossWeights) -> LossReport:
    """Weighted sum in fixed term order; raises on non-finite parts."""
    w = weights.as_dict()
    total = None
    values = {}
    for name in TERM_ORDER:
        term = parts.get(name)
        if term is None:
            term = ad.Tensor(0.0)
        v = term.item()
        if not math.isfinite(v):
            raise FloatingPointError(f"loss term {name!r} is non-finite: {v}")
        values[name] = v
        weighted = ad.scale(term, w[name])
        total = weighted if total is None else ad.add(total, weighted)
    return LossReport(parts=values, total=total.item(), total_tensor=total)


# ---------------------------------------------------------------------------
# image-space terms
# ---------------------------------------------------------------------------

def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact per-pixel Euclidean distance (in pixels) to the nearest
    foreground pixel; zero on the foreground itself."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("distance_transform: mask has no foreground")
    return ndimage.distance_transform_edt(~mask)


def rgb_loss(trace, rgb_fn, rays) -> tuple[ad.Tensor, bool]:
    """Mean squared color error at the final marched point, on-silhouette
    rays only. Returns (loss, warned); warned is set when the batch has no
    on-silhouette rays and the loss is an exact zero."""
    on = np.asarray(rays.on_silhouette, dtype=bool)
    n_on = int(on.sum())
    if n_on == 0:
        return ad.Tensor(0.0), True
    pred = rgb_fn(trace.last())
    err = ad.tsum(ad.square(ad.sub(pred, ad.Tensor(rays.gt_rgb))), axis=-1)
    masked = ad.mul(err, ad.Tensor(on[:, None].astype(np.float64)))
    return ad.scale(ad.tsum(masked), 1.0 / n_on), False


def dt_bound_scale(fov_deg: float, camera_distance: float, width: int) -> float:
    """Pixels-to-world conversion for the distance-transform lower bound."""
    return 2.0 * math.tan(math.radians(fov_deg) / 2.0) * camera_distance / width


def _hinge_sums(sdf_steps, rays, eps, dt_scale):
    """Sum of on-silhouette hinge terms and off-silhouette lower-bound hinge
    terms, plus their term counts."""
    on = np.asarray(rays.on_silhouette, dtype=bool)
    mask_on = ad.Tensor(on[:, None].astype(np.float64))
    mask_off = ad.Tensor((~on)[:, None].astype(np.float64))
    n_pts = len(sdf_steps)
    n_on = int(on.sum())
    n_off = len(on) - n_on

    on_sum = ad.Tensor(0.0)
    off_sum = ad.Tensor(0.0)
    if rays.dt_value is not None:
        bound = ad.Tensor(dt_scale * np.asarray(rays.dt_value)[:, None])
    else:
        bound = ad.Tensor(np.zeros((len(on), 1)))
    for j, s in enumerate(sdf_steps):
        if j < n_pts - 1:
            term_on = ad.hinge(ad.sub(ad.Tensor(eps), s))      # want s > eps
        else:
            term_on = ad.hinge(ad.add(ad.Tensor(eps), s))      # want s < -eps
        on_sum = ad.add(on_sum, ad.tsum(ad.mul(term_on, mask_on)))
        term_off = ad.hinge(ad.sub(bound, s))                  # want s >= bound
        off_sum = ad.add(off_sum, ad.tsum(ad.mul(term_off, mask_off)))
    return on_sum, off_sum, n_on * n_pts, n_off * n_pts


def sdf_consistency_loss(sdf_steps, rays, eps: float = 0.01,
                         dt_scale: float = 1.0) -> ad.Tensor:
    """Mean over all contributing hinge terms: on-silhouette rays must be
    outside (sdf > eps) at every point but the last and inside (sdf < -eps)
    at the last; off-silhouette rays must clear the distance-transform
    lower bound everywhere. `sdf_steps` holds one (N,1) tensor per marched
    point, in order."""
    on_sum, off_sum, n_on, n_off = _hinge_sums(sdf_steps, rays, eps, dt_scale)
    count = n_on + n_off
    if count == 0:
        return ad.Tensor(0.0)
    return ad.scale(ad.add(on_sum, off_sum), 1.0 / count)


def sdf_and_dt_losses(sdf_steps, rays, eps: float = 0.01,
                      dt_scale: float = 1.0) -> tuple[ad.Tensor, ad.Tensor]:
    """The same hinge terms split into separately weightable means:
    renderer consistency (on-silhouette) and DT lower bound (off)."""
    on_sum, off_sum, n_on, n_off = _hinge_sums(sdf_steps, rays, eps, dt_scale)
    sdf_part = ad.scale(on_sum, 1.0 / n_on) if n_on else ad.Tensor(0.0)
    dt_part = ad.scale(off_sum, 1.0 / n_off) if n_off else ad.Tensor(0.0)
    return sdf_part, dt_part


# ---------------------------------------------------------------------------
# field regularizers
# ---------------------------------------------------------------------------

def _axis_offset(h: float, axis: int) -> ad.Tensor:
    e = np.zeros(3)
    e[axis] = h
    return ad.Tensor(e)


def eikonal_loss(deform_fn, f_fn, samples: np.ndarray,
                 h: float = 1e-3) -> ad.Tensor:
    """Mean (|grad f| - 1)^2 at the canonical images of uniform cube samples.

    The spatial gradient is a central difference over the three canonical
    coordinates with the point features pinned at their unperturbed value;
    all six extra field evaluations stay on the tape.
    """
    x = ad.Tensor(np.asarray(samples, dtype=np.float64))
    can = deform_fn(x)
    comps = []
    for axis in range(3):
        off = _axis_offset(h, axis)
        s_plus = f_fn(ad.add(can.xyz, off), can.feat)
        s_minus = f_fn(ad.sub(can.xyz, off), can.feat)
        comps.append(ad.scale(ad.sub(s_plus, s_minus), 1.0 / (2.0 * h)))
    grad = ad.concat(comps)
    norm = ad.sqrt(ad.add(ad.tsum(ad.square(grad), axis=-1),
                          ad.Tensor(_NORM_EPS)))
    return ad.tmean(ad.square(ad.sub(norm, ad.Tensor(1.0))))


def deformation_smoothness_loss(delta_fn, samples: np.ndarray,
                                h: float = 1e-3) -> ad.Tensor:
    """Mean squared norm of the component-summed deformation Jacobian,
    column j estimated from delta(x + h e_j) - delta(x - h e_j)."""
    samples = np.asarray(samples, dtype=np.float64)
    cols = []
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        d_plus = delta_fn(ad.Tensor(samples + e))
        d_minus = delta_fn(ad.Tensor(samples - e))
        diff = ad.tsum(ad.sub(d_plus, d_minus), axis=-1)
        cols.append(ad.scale(diff, 1.0 / (2.0 * h)))
    v = ad.concat(cols)
    return ad.tmean(ad.tsum(ad.square(v), axis=-1))
