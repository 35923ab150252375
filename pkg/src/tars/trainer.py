"""Four-phase training curriculum and checkpointing.

Phases, in required order:
  0a  regress the (hypernetwork-generated) shape field to an analytic
      sphere SDF under a fixed random latent,
  1   single-view fitting of the direct field: encoder -> hypernetwork ->
      field, marched and supervised by color, renderer/SDF consistency,
      the mask distance transform, and the eikonal term,
  0b  overfit the deformation network so displaced points reproduce the
      initial canonical field's values against a sphere SDF,
  2   joint training of deformation + canonical field, with the canonical
      latent (initialized to the mean stage-1 latent) receiving gradients.

Every stochastic choice draws from a named, iteration-indexed substream,
so a resumed run replays the uninterrupted one bit for bit.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import losses as ls
from .nets import CanonicalPoints, FieldNetworks, ModelConfig, compose_canonical
from .renderer import RayBatch, generate_rays, march_rays
from .rng import substream
from .synthdata import Dataset, TrainingSample

PHASES = ("0a", "1", "0b", "2")

TRAINABLE = {
    "0a": {"shape_hyper", "uncond"},
    "1": {"shape_hyper", "uncond", "encoder", "renderer"},
    "0b": {"deform_hyper"},
    "2": {"deform_hyper", "encoder", "shape_hyper", "renderer", "canonical"},
}


class MissingPrerequisiteError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    iters_0a: int = 2000
    iters_1: int = 20000
    iters_0b: int = 2000
    iters_2: int = 30000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rays_per_iter: int = 512
    omega_samples: int = 128
    batch_0a: int = 512
    march_steps: int = 10
    on_sil_fraction: float = 0.5
    max_views: int | None = None
    d_min: float = 0.01
    d_max: float = 0.5
    t_near_margin: float = 1.0
    hinge_eps: float = 0.01
    h_fd: float = 1e-3
    sphere_radius: float = 0.5
    sphere_mae_target: float = 0.015
    sphere_mae_fail: float = 0.05
    deform_residual_fail: float = 0.05
    checkpoint_every: int = 1000
    weights: ls.LossWeights = field(default_factory=ls.LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("iters_0a", "iters_1", "iters_0b", "iters_2",
                     "rays_per_iter", "omega_samples", "batch_0a",
                     "march_steps", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be >= 1")

    def phase_iters(self, phase: str) -> int:
        return {"0a": self.iters_0a, "1": self.iters_1,
                "0b": self.iters_0b, "2": self.iters_2}[phase]


@dataclass
class TrainState:
    nets: FieldNetworks
    phase_done: list[str]
    phase: str
    iteration: int
    latent_cache: dict[str, np.ndarray]
    config_hash: str = ""

    def require(self, *phases):
        missing = [ph for ph in phases if ph not in self.phase_done]
        if missing:
            raise MissingPrerequisiteError(
                f"phase(s) {missing} must complete first "
                f"(done: {self.phase_done or 'none'})")


def fresh_state(cfg: TrainConfig, config_hash: str = "") -> TrainState:
    return TrainState(nets=FieldNetworks(cfg.model, cfg.seed), phase_done=[],
                      phase="0a", iteration=0, latent_cache={},
                      config_hash=config_hash)


# ---------------------------------------------------------------------------
# checkpoint IO: parameter container + JSON sidecar
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, base_path) -> None:
    base = str(base_path)
    stores = dict(state.nets.stores)
    cache = ad.ParamStore()
    for key, vec in state.latent_cache.items():
        cache.add(key, vec)
    stores["latent_cache"] = cache
    ad.save_param_stores(stores, base + ".tarsckpt")
    meta = {"phase_done": state.phase_done, "phase": state.phase,
            "iteration": state.iteration, "config_hash": state.config_hash,
            "seed": state.nets.seed}
    with open(base + ".json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_checkpoint(cfg: TrainConfig, base_path) -> TrainState:
    base = str(base_path)
    if not os.path.exists(base + ".tarsckpt"):
        raise MissingPrerequisiteError(f"checkpoint {base}.tarsckpt not found")
    stores = ad.load_param_stores(base + ".tarsckpt")
    with open(base + ".json") as fh:
        meta = json.load(fh)
    nets = FieldNetworks(cfg.model, meta.get("seed", cfg.seed))
    for name in nets.stores:
        if name not in stores:
            raise ValueError(f"checkpoint missing store {name!r}")
        nets.stores[name] = stores[name]
    cache = {name: e.value.copy()
             for name, e in stores["latent_cache"].entries.items()}
    return TrainState(nets=nets, phase_done=list(meta["phase_done"]),
                      phase=meta["phase"], iteration=int(meta["iteration"]),
                      latent_cache=cache,
                      config_hash=meta.get("config_hash", ""))


class TrainLogger:
    """Newline-delimited JSON loss log."""

    def __init__(self, path=None):
        self.path = path
        self.rows: list[dict] = []
        if path:
            os.makedirs(os.path.dirname(str(path)) or ".", exist_ok=True)

    def log(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# shared field plumbing
# ---------------------------------------------------------------------------

class _CachedField:
    """Memoizes forward outputs per input tensor so the march's feature
    queries and the consistency losses share one evaluation."""

    def __init__(self, forward):
        self.forward = forward
        self.outs: dict[int, object] = {}

    def output_for(self, pts):
        key = id(pts)
        if key not in self.outs:
            self.outs[key] = self.forward(pts)
        return self.outs[key]

    def features(self, pts):
        return self.output_for(pts).trunk


def _sphere_sdf_tensor(xyz: ad.Tensor, radius: float) -> ad.Tensor:
    n = ad.sqrt(ad.add(ad.tsum(ad.square(xyz), axis=-1), ad.Tensor(1e-12)))
    return ad.sub(n, ad.Tensor(radius))


def direct_field_forward(nets: FieldNetworks, p, gw, pts: ad.Tensor):
    """Stage-0a/1 field: shape generator at the un-deformed point with
    unconditioned features."""
    return nets.shape_forward(gw, pts, nets.uncond_features(p, pts))


def sample_pixel_rays(sample: TrainingSample, count: int, frac_on: float,
                      rng) -> RayBatch:
    """Silhouette-stratified pixel sampling (with replacement)."""
    H, W = sample.silhouette.shape
    on_idx = np.flatnonzero(sample.silhouette.reshape(-1))
    off_idx = np.flatnonzero(~sample.silhouette.reshape(-1))
    n_on = min(int(round(count * frac_on)), count)
    if len(off_idx) == 0:
        n_on = count
    if len(on_idx) == 0:
        n_on = 0
    chosen_on = rng.choice(on_idx, size=n_on, replace=True) if n_on else \
        np.empty(0, dtype=np.int64)
    chosen_off = rng.choice(off_idx, size=count - n_on, replace=True) \
        if count - n_on else np.empty(0, dtype=np.int64)
    flat = np.concatenate([chosen_on, chosen_off])
    uv = np.stack([flat % W, flat // W], axis=1)
    rays = generate_rays(sample.camera, uv)
    rays.on_silhouette = sample.silhouette.reshape(-1)[flat]
    rays.gt_rgb = sample.rgb.reshape(-1, 3)[flat]
    rays.dt_value = sample.dt.reshape(-1)[flat]
    return rays


def _march_and_sdf(cfg: TrainConfig, rays: RayBatch, p, cache: _CachedField,
                   sdf_of_output, t_near: float):
    trace = march_rays(
        rays, cache.features, n=cfg.march_steps, t_near=t_near, p=p,
        lstm_dim=cfg.model.lstm_dim, freq_point=cfg.model.freq_point,
        d_min=cfg.d_min, d_max=cfg.d_max)
    sdf_steps = [sdf_of_output(cache.output_for(pt), pt)
                 for pt in trace.points]
    return trace, sdf_steps


def _adam_all(nets: FieldNetworks, cfg: TrainConfig, names):
    for sname in names:
        ad.adam_step(nets.stores[sname], cfg.lr, cfg.beta1, cfg.beta2,
                     cfg.adam_eps)


# ---------------------------------------------------------------------------
# phase 0a: sphere pretrain
# ---------------------------------------------------------------------------

def sphere_pretrain_mae(nets: FieldNetworks, radius: float,
                        n_samples: int = 10000, seed_tag: str = "omega0a_eval"
                        ) -> float:
    """MAE of the direct field against the analytic sphere on fresh uniform
    cube samples (detached)."""
    rng = substream(nets.seed, seed_tag)
    x = rng.uniform(-1, 1, (n_samples, 3))
    p = nets.constants()
    gw = nets.shape_weights(p, ad.Tensor(nets.pretrain_latent))
    pred = direct_field_forward(nets, p, gw, ad.Tensor(x)).sdf.data[:, 0]
    true = np.linalg.norm(x, axis=1) - radius
    return float(np.abs(pred - true).mean())


def _enter_phase(state: TrainState, phase: str) -> None:
    if state.phase != phase:
        state.phase = phase
        state.iteration = 0


def run_phase_0a(cfg: TrainConfig, state: TrainState, logger: TrainLogger,
                 on_checkpoint=None) -> None:
    _enter_phase(state, "0a")
    nets = state.nets
    trainable = TRAINABLE["0a"]
    for it in range(state.iteration, cfg.iters_0a):
        t0 = time.perf_counter()
        x = substream(cfg.seed, "omega0a", it).uniform(-1, 1, (cfg.batch_0a, 3))
        tape = ad.Tape()
        p = nets.watch(tape, trainable)
        gw = nets.shape_weights(p, ad.Tensor(nets.pretrain_latent))
        xt = ad.Tensor(x)
        out = direct_field_forward(nets, p, gw, xt)
        target = np.linalg.norm(x, axis=1, keepdims=True) - cfg.sphere_radius
        loss = ad.tmean(ad.square(ad.sub(out.sdf, ad.Tensor(target))))
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"phase 0a: non-finite loss at iteration {it}")
        nets.accumulate(p, tape.backward(loss), trainable)
        _adam_all(nets, cfg, trainable)
        state.iteration = it + 1
        logger.log({"phase": "0a", "iter": it, "total": value,
                    "ms": (time.perf_counter() - t0) * 1e3})
        if on_checkpoint and state.iteration % cfg.checkpoint_every == 0:
            on_checkpoint(state)
        if state.iteration % 100 == 0:
            if sphere_pretrain_mae(nets, cfg.sphere_radius, 2048) \
                    < cfg.sphere_mae_target:
                break
    mae = sphere_pretrain_mae(nets, cfg.sphere_radius)
    if mae >= cfg.sphere_mae_fail:
        raise NumericalError(
            f"phase 0a failed: sphere MAE {mae:.4f} >= {cfg.sphere_mae_fail} "
            f"after {state.iteration} iterations")
    state.phase_done.append("0a")


# ---------------------------------------------------------------------------
# phase 1: direct single-view fitting
# ---------------------------------------------------------------------------

def _stage1_iteration(cfg: TrainConfig, nets: FieldNetworks,
                      sample: TrainingSample, it: int) -> ls.LossReport:
    trainable = TRAINABLE["1"]
    tape = ad.Tape()
    p = nets.watch(tape, trainable)
    latent = nets.encode(p, sample.rgb)
    gw = nets.shape_weights(p, latent)
    cache = _CachedField(lambda pts: direct_field_forward(nets, p, gw, pts))
    rays = sample_pixel_rays(sample, cfg.rays_per_iter, cfg.on_sil_fraction,
                             substream(cfg.seed, "pixels1", it))
    t_near = sample.camera.distance_to_origin() - cfg.t_near_margin
    trace, sdf_steps = _march_and_sdf(
        cfg, rays, p, cache, lambda out, pt: out.sdf, t_near)
    l_rgb, _ = ls.rgb_loss(trace, lambda pts: cache.output_for(pts).rgb, rays)
    scale = ls.dt_bound_scale(sample.camera.fov_deg,
                              sample.camera.distance_to_origin(),
                              sample.camera.width)
    l_sdf, l_dt = ls.sdf_and_dt_losses(sdf_steps, rays, cfg.hinge_eps, scale)
    omega = substream(cfg.seed, "omega1", it).uniform(
        -1, 1, (cfg.omega_samples, 3))
    deform_fn = lambda x: CanonicalPoints(
        xyz=x, feat=nets.uncond_features(p, x))
    f_fn = lambda xyz, feat: nets.shape_forward(gw, xyz, feat).sdf
    l_eik = ls.eikonal_loss(deform_fn, f_fn, omega, cfg.h_fd)
    report = ls.total_loss(
        {"rgb": l_rgb, "sdf": l_sdf, "dt": l_dt, "eik": l_eik,
         "def": ad.Tensor(0.0)}, cfg.weights)
    nets.accumulate(p, tape.backward(report.total_tensor), trainable)
    _adam_all(nets, cfg, trainable)
    return report


def compute_latent_cache(nets: FieldNetworks, dataset: Dataset
                         ) -> dict[str, np.ndarray]:
    p = nets.constants()
    cache = {}
    for flat in range(len(dataset)):
        s = dataset.load_flat(flat)
        cache[f"{s.instance_id}/v{s.view:03d}"] = \
            nets.encode(p, s.rgb).data.copy()
    return cache


def init_canonical_latent(latent_cache: dict[str, np.ndarray]) -> np.ndarray:
    """Mean of all cached per-image latents."""
    if not latent_cache:
        raise ValueError("init_canonical_latent: empty latent cache")
    return np.mean(list(latent_cache.values()), axis=0)


def run_phase_1(cfg: TrainConfig, state: TrainState, dataset: Dataset,
                logger: TrainLogger, on_checkpoint=None) -> None:
    state.require("0a")
    _enter_phase(state, "1")
    nets = state.nets
    for it in range(state.iteration, cfg.iters_1):
        t0 = time.perf_counter()
        flat = int(substream(cfg.seed, "image1", it).integers(len(dataset)))
        sample = dataset.load_flat(flat)
        try:
            report = _stage1_iteration(cfg, nets, sample, it)
        except FloatingPointError as err:
            raise NumericalError(f"phase 1 aborted at iteration {it}: {err}")
        state.iteration = it + 1
        row = {"phase": "1", "iter": it, **report.as_dict(),
               "ms": (time.perf_counter() - t0) * 1e3}
        logger.log(row)
        if on_checkpoint and state.iteration % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    state.latent_cache = compute_latent_cache(nets, dataset)
    state.phase_done.append("1")


# ---------------------------------------------------------------------------
# phase 0b: deformation overfit to the initial canonical field
# ---------------------------------------------------------------------------

def _frozen_canonical_field(nets: FieldNetworks):
    """Detached evaluator of the canonical field (canonical latent +
    generated shape net + unconditioned features)."""
    p = nets.constants()
    gw = nets.shape_weights(p, p["canonical_latent"])

    def f_init(x: np.ndarray) -> np.ndarray:
        out = direct_field_forward(nets, p, gw, ad.Tensor(x))
        return out.sdf.data.copy()

    return f_init


def deform_pretrain_residual(cfg: TrainConfig, nets: FieldNetworks,
                             latent_cache, n: int = 4096) -> float:
    """Mean |sphere_sdf(x + g(x)) - f_init(x)| on fresh samples."""
    f_init = _frozen_canonical_field(nets)
    rng = substream(cfg.seed, "omega0b_eval")
    x = rng.uniform(-1, 1, (n, 3))
    latents = list(latent_cache.values())
    latent = latents[0]
    p = nets.constants()
    dw = nets.deform_weights(p, ad.Tensor(latent))
    out = nets.deform_forward(dw, ad.Tensor(x))
    can3 = x + out.delta.data
    pred = np.linalg.norm(can3, axis=1, keepdims=True) - cfg.sphere_radius
    return float(np.abs(pred - f_init(x)).mean())


def run_phase_0b(cfg: TrainConfig, state: TrainState, logger: TrainLogger,
                 on_checkpoint=None) -> None:
    state.require("0a", "1")
    _enter_phase(state, "0b")
    nets = state.nets
    if "0b" not in state.phase_done and state.iteration == 0:
        latent0 = init_canonical_latent(state.latent_cache)
        nets.stores["canonical"]["canonical_latent"].value[...] = latent0
    f_init = _frozen_canonical_field(nets)
    latents = list(state.latent_cache.values())
    trainable = TRAINABLE["0b"]
    for it in range(state.iteration, cfg.iters_0b):
        t0 = time.perf_counter()
        rng = substream(cfg.seed, "omega0b", it)
        x = rng.uniform(-1, 1, (cfg.batch_0a, 3))
        latent = latents[int(substream(cfg.seed, "latent0b", it)
                             .integers(len(latents)))]
        tape = ad.Tape()
        p = nets.watch(tape, trainable)
        dw = nets.deform_weights(p, ad.Tensor(latent))
        xt = ad.Tensor(x)
        out = nets.deform_forward(dw, xt)
        can3 = ad.add(xt, out.delta)
        pred = _sphere_sdf_tensor(can3, cfg.sphere_radius)
        data_loss = ad.tmean(ad.square(ad.sub(pred, ad.Tensor(f_init(x)))))
        delta_fn = lambda q: nets.deform_forward(dw, q).delta
        omega = substream(cfg.seed, "omega0b_smooth", it).uniform(
            -1, 1, (cfg.omega_samples, 3))
        l_def = ls.deformation_smoothness_loss(delta_fn, omega, cfg.h_fd)
        loss = ad.add(data_loss, ad.scale(l_def, cfg.weights.deform))
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"phase 0b: non-finite loss at iteration {it}")
        nets.accumulate(p, tape.backward(loss), trainable)
        _adam_all(nets, cfg, trainable)
        state.iteration = it + 1
        logger.log({"phase": "0b", "iter": it, "total": value,
                    "def": l_def.item(),
                    "ms": (time.perf_counter() - t0) * 1e3})
        if on_checkpoint and state.iteration % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    residual = deform_pretrain_residual(cfg, nets, state.latent_cache)
    if residual >= cfg.deform_residual_fail:
        raise NumericalError(
            f"phase 0b failed: residual MAE {residual:.4f} >= "
            f"{cfg.deform_residual_fail}")
    state.phase_done.append("0b")


# ---------------------------------------------------------------------------
# phase 2: joint deformation + canonical shape
# ---------------------------------------------------------------------------

def _stage2_iteration(cfg: TrainConfig, nets: FieldNetworks,
                      sample: TrainingSample, it: int) -> ls.LossReport:
    trainable = TRAINABLE["2"]
    tape = ad.Tape()
    p = nets.watch(tape, trainable)
    latent = nets.encode(p, sample.rgb)
    dw = nets.deform_weights(p, latent)
    gw = nets.shape_weights(p, p["canonical_latent"])
    cache = _CachedField(lambda pts: nets.deform_forward(dw, pts))

    def sdf_of(out, pt):
        can = compose_canonical(pt, out)
        return nets.shape_forward(gw, can.xyz, can.feat).sdf

    rays = sample_pixel_rays(sample, cfg.rays_per_iter, cfg.on_sil_fraction,
                             substream(cfg.seed, "pixels2", it))
    t_near = sample.camera.distance_to_origin() - cfg.t_near_margin
    trace, sdf_steps = _march_and_sdf(cfg, rays, p, cache, sdf_of, t_near)
    l_rgb, _ = ls.rgb_loss(trace, lambda pts: cache.output_for(pts).rgb, rays)
    scale = ls.dt_bound_scale(sample.camera.fov_deg,
                              sample.camera.distance_to_origin(),
                              sample.camera.width)
    l_sdf, l_dt = ls.sdf_and_dt_losses(sdf_steps, rays, cfg.hinge_eps, scale)
    omega = substream(cfg.seed, "omega2", it).uniform(
        -1, 1, (cfg.omega_samples, 3))
    deform_fn = lambda x: compose_canonical(x, nets.deform_forward(dw, x))
    f_fn = lambda xyz, feat: nets.shape_forward(gw, xyz, feat).sdf
    l_eik = ls.eikonal_loss(deform_fn, f_fn, omega, cfg.h_fd)
    delta_fn = lambda x: nets.deform_forward(dw, x).delta
    l_def = ls.deformation_smoothness_loss(delta_fn, omega, cfg.h_fd)
    report = ls.total_loss(
        {"rgb": l_rgb, "sdf": l_sdf, "dt": l_dt, "eik": l_eik, "def": l_def},
        cfg.weights)
    nets.accumulate(p, tape.backward(report.total_tensor), trainable)
    _adam_all(nets, cfg, trainable)
    return report


def run_phase_2(cfg: TrainConfig, state: TrainState, dataset: Dataset,
                logger: TrainLogger, on_checkpoint=None) -> None:
    state.require("0a", "1", "0b")
    _enter_phase(state, "2")
    nets = state.nets
    for it in range(state.iteration, cfg.iters_2):
        t0 = time.perf_counter()
        flat = int(substream(cfg.seed, "image2", it).integers(len(dataset)))
        sample = dataset.load_flat(flat)
        try:
            report = _stage2_iteration(cfg, nets, sample, it)
        except FloatingPointError as err:
            raise NumericalError(f"phase 2 aborted at iteration {it}: {err}")
        state.iteration = it + 1
        logger.log({"phase": "2", "iter": it, **report.as_dict(),
                    "ms": (time.perf_counter() - t0) * 1e3})
        if on_checkpoint and state.iteration % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    state.latent_cache = compute_latent_cache(nets, dataset)
    state.phase_done.append("2")


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def run_phases(cfg: TrainConfig, state: TrainState, dataset: Dataset | None,
               phases, out_dir=None, logger: TrainLogger | None = None
               ) -> TrainState:
    """Run the requested phases in curriculum order, checkpointing at the
    configured cadence and at every phase boundary."""
    logger = logger or TrainLogger(
        os.path.join(out_dir, "train_log.ndjson") if out_dir else None)

    def checkpoint_cb(st: TrainState):
        if out_dir:
            save_checkpoint(st, os.path.join(out_dir, "ckpt_latest"))

    runner = {"0a": lambda: run_phase_0a(cfg, state, logger, checkpoint_cb),
              "1": lambda: run_phase_1(cfg, state, dataset, logger,
                                       checkpoint_cb),
              "0b": lambda: run_phase_0b(cfg, state, logger, checkpoint_cb),
              "2": lambda: run_phase_2(cfg, state, dataset, logger,
                                       checkpoint_cb)}
    for phase in phases:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        if phase in state.phase_done:
            continue
        if phase in ("1", "2") and dataset is None:
            raise MissingPrerequisiteError(f"phase {phase} needs a dataset")
        try:
            runner[phase]()
        except NumericalError:
            if out_dir:
                save_checkpoint(state, os.path.join(out_dir, "ckpt_abort"))
            raise
        state.iteration = 0
        if out_dir:
            save_checkpoint(state, os.path.join(out_dir, f"ckpt_{phase}"))
            save_checkpoint(state, os.path.join(out_dir, "ckpt_latest"))
    return state


# ---------------------------------------------------------------------------
# trained-model evaluation helpers (detached)
# ---------------------------------------------------------------------------

def reconstruction_field(nets: FieldNetworks, image: np.ndarray,
                         stage: str = "2"):
    """(B,3) -> (B,) SDF of the reconstruction for one image.

    Stage "1" evaluates the direct field; stage "2" deforms into the
    canonical field conditioned on the learned canonical latent.
    """
    p = nets.constants()
    latent = nets.encode(p, image)
    if stage == "1":
        gw = nets.shape_weights(p, latent)

        def field(pts):
            out = direct_field_forward(nets, p, gw, ad.Tensor(pts))
            return out.sdf.data[:, 0].copy()
        return field

    dw = nets.deform_weights(p, latent)
    gw = nets.shape_weights(p, p["canonical_latent"])

    def field(pts):
        xt = ad.Tensor(pts)
        can = compose_canonical(xt, nets.deform_forward(dw, xt))
        return nets.shape_forward(gw, can.xyz, can.feat).sdf.data[:, 0].copy()
    return field


def canonical_map(nets: FieldNetworks, image: np.ndarray):
    """(B,3) object points -> (B,3) canonical 3D coordinates."""
    p = nets.constants()
    latent = nets.encode(p, image)
    dw = nets.deform_weights(p, latent)

    def mapper(pts):
        xt = ad.Tensor(pts)
        return compose_canonical(xt, nets.deform_forward(dw, xt)).xyz.data.copy()
    return mapper


def render_depth_map(cfg: TrainConfig, nets: FieldNetworks,
                     sample: TrainingSample, stage: str = "2",
                     chunk: int = 1024):
    """Full-image march with the trained model: per-pixel depth plus the
    hit mask (final-point SDF < 0)."""
    p = nets.constants()
    latent = nets.encode(p, sample.rgb)
    if stage == "1":
        gw = nets.shape_weights(p, latent)
        cache_fwd = lambda pts: direct_field_forward(nets, p, gw, pts)
        sdf_of = lambda out, pt: out.sdf
    else:
        dw = nets.deform_weights(p, latent)
        gw = nets.shape_weights(p, p["canonical_latent"])
        cache_fwd = lambda pts: nets.deform_forward(dw, pts)

        def sdf_of(out, pt):
            can = compose_canonical(pt, out)
            return nets.shape_forward(gw, can.xyz, can.feat).sdf

    H, W = sample.silhouette.shape
    uv = np.stack(np.meshgrid(np.arange(W), np.arange(H)), axis=-1
                  ).reshape(-1, 2)
    t_near = sample.camera.distance_to_origin() - cfg.t_near_margin
    depth = np.empty(H * W)
    hit = np.empty(H * W, dtype=bool)
    for lo in range(0, H * W, chunk):
        hi = min(lo + chunk, H * W)
        rays = generate_rays(sample.camera, uv[lo:hi])
        cache = _CachedField(cache_fwd)
        trace, sdf_steps = _march_and_sdf(cfg, rays, p, cache, sdf_of, t_near)
        depth[lo:hi] = trace.depth.data[:, 0]
        hit[lo:hi] = sdf_steps[-1].data[:, 0] < 0.0
    return depth.reshape(H, W), hit.reshape(H, W)


def silhouette_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    return float(inter) / float(union) if union else 1.0
