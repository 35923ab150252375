"""Command-line entry point: dataset generation, curriculum training,
reconstruction, evaluation, and texture transfer.

One JSON run configuration drives everything; command-line flags override
individual values (flags win), unknown config keys are rejected, and the
hash of the merged configuration is embedded in every output artifact.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 missing
prerequisite.

Heavy imports happen inside main() so the TARS_THREADS cap can reach the
numerics libraries before they initialize their thread pools.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_MISSING_PREREQ = 4

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": "data/default",
    "out_dir": "runs/default",
    "data": {
        "count": 16,
        "genus_mix": 0.5,
        "resolution": 64,
        "views_per_instance": 1,
        "camera_distance": 2.5,
        "fov_deg": 50.0,
    },
    "model": {
        "latent_dim": 128,
        "k": 4,
        "hidden_dim": 128,
        "trunk_layers": 4,
        "freq_point": 6,
        "freq_feat": 2,
        "lstm_dim": 32,
        "hyper_hidden": 64,
        "uncond_hidden": 32,
        "image_size": 64,
    },
    "train": {
        "iters_0a": 2000,
        "iters_1": 20000,
        "iters_0b": 2000,
        "iters_2": 30000,
        "lr": 1e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "rays_per_iter": 512,
        "omega_samples": 128,
        "batch_0a": 512,
        "march_steps": 10,
        "on_sil_fraction": 0.5,
        "max_views": None,
        "checkpoint_every": 1000,
        "sphere_mae_target": 0.015,
        "sphere_mae_fail": 0.05,
        "deform_residual_fail": 0.05,
    },
    "loss": {
        "rgb": 1.0,
        "sdf": 1.0,
        "dt": 0.5,
        "eik": 0.1,
        "def": 0.01,
        "hinge_eps": 0.01,
        "h_fd": 1e-3,
    },
    "render": {
        "d_min": 0.01,
        "d_max": 0.5,
        "t_near_margin": 1.0,
    },
}


class UsageError(RuntimeError):
    pass


def _merge_checked(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise UsageError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where} must be a section")
            out[key] = _merge_checked(base[key], value, where)
        else:
            out[key] = value
    return out


def load_run_config(path=None, sets=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path) as fh:
            cfg = _merge_checked(cfg, json.load(fh))
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = {}
        leaf = node
        for k in keys[:-1]:
            leaf[k] = {}
            leaf = leaf[k]
        leaf[keys[-1]] = value
        cfg = _merge_checked(cfg, node)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def build_train_config(cfg: dict):
    from .losses import LossWeights
    from .nets import ModelConfig
    from .trainer import TrainConfig

    loss = cfg["loss"]
    weights = LossWeights(rgb=loss["rgb"], sdf=loss["sdf"], dt=loss["dt"],
                          eik=loss["eik"], deform=loss["def"])
    model = ModelConfig(**cfg["model"])
    t = cfg["train"]
    r = cfg["render"]
    return TrainConfig(
        seed=cfg["seed"], model=model, weights=weights,
        hinge_eps=loss["hinge_eps"], h_fd=loss["h_fd"],
        d_min=r["d_min"], d_max=r["d_max"], t_near_margin=r["t_near_margin"],
        **{k: t[k] for k in (
            "iters_0a", "iters_1", "iters_0b", "iters_2", "lr", "beta1",
            "beta2", "adam_eps", "rays_per_iter", "omega_samples", "batch_0a",
            "march_steps", "on_sil_fraction", "max_views", "checkpoint_every",
            "sphere_mae_target", "sphere_mae_fail", "deform_residual_fail")})


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synthdata import generate_dataset

    cfg = load_run_config(args.config, args.set or [])
    for flag, key in (("seed", "seed"),):
        if getattr(args, flag) is not None:
            cfg[key] = getattr(args, flag)
    data = cfg["data"]
    for flag, key in (("count", "count"), ("genus_mix", "genus_mix"),
                      ("res", "resolution"),
                      ("views_per_instance", "views_per_instance")):
        if getattr(args, flag) is not None:
            data[key] = getattr(args, flag)
    out = args.out or cfg["dataset"]
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    generate_dataset(
        seed=cfg["seed"], count=data["count"], genus_mix=data["genus_mix"],
        resolution=data["resolution"], out_dir=out,
        views_per_instance=data["views_per_instance"],
        camera_distance=data["camera_distance"], fov_deg=data["fov_deg"],
        config_hash=config_hash(cfg))
    print(f"wrote {data['count']} instances to {out}")
    return EXIT_OK


def _load_state_for_stage(cfg_t, out_dir, stage: str, resume: bool,
                          chash: str):
    from .trainer import fresh_state, load_checkpoint

    latest = os.path.join(out_dir, "ckpt_latest")
    if resume:
        state = load_checkpoint(cfg_t, latest)
        if state.config_hash and state.config_hash != chash:
            raise UsageError(
                f"checkpoint config hash {state.config_hash} does not match "
                f"current config {chash}")
        return state
    if stage in ("all", "0a"):
        return fresh_state(cfg_t, chash)
    prev = {"1": "0a", "0b": "1", "2": "0b"}[stage]
    return load_checkpoint(cfg_t, os.path.join(out_dir, f"ckpt_{prev}"))


def cmd_train(args) -> int:
    from .synthdata import Dataset
    from .trainer import PHASES, run_phases

    cfg = load_run_config(args.config, args.set or [])
    if args.dataset:
        cfg["dataset"] = args.dataset
    if args.out:
        cfg["out_dir"] = args.out
    chash = config_hash(cfg)
    cfg_t = build_train_config(cfg)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump({**cfg, "config_hash": chash}, fh, indent=1, sort_keys=True)
    dataset = None
    if os.path.exists(os.path.join(cfg["dataset"], "manifest.json")):
        dataset = Dataset(cfg["dataset"], max_views=cfg_t.max_views)
    state = _load_state_for_stage(cfg_t, out_dir, args.stage, args.resume,
                                  chash)
    state.config_hash = chash
    phases = list(PHASES) if args.stage == "all" else [args.stage]
    run_phases(cfg_t, state, dataset, phases, out_dir=out_dir)
    print(f"training complete: phases {state.phase_done} -> {out_dir}")
    return EXIT_OK


def _resolve_sample(args, cfg, image_ref: str):
    from .synthdata import Dataset

    if os.path.isdir(image_ref):
        root, inst = os.path.split(image_ref.rstrip("/"))
        return Dataset(root).load(inst)
    ds = Dataset(args.dataset or cfg["dataset"])
    return ds.load(image_ref)


def _load_trained(args, sets):
    from .trainer import load_checkpoint

    cfg = load_run_config(args.config, sets or [])
    cfg_t = build_train_config(cfg)
    state = load_checkpoint(cfg_t, args.ckpt)
    return cfg, cfg_t, state


def _reconstruct_mesh(cfg_t, state, sample, res: int):
    from .extraction import marching_cubes, sample_grid
    from .trainer import reconstruction_field

    stage = "2" if "2" in state.phase_done else "1"
    field = reconstruction_field(state.nets, sample.rgb, stage)
    return marching_cubes(sample_grid(field, res)), stage


def cmd_reconstruct(args) -> int:
    from . import extraction as ex
    from .renderer import depth_to_png
    from .trainer import canonical_map, render_depth_map

    cfg, cfg_t, state = _load_trained(args, args.set)
    sample = _resolve_sample(args, cfg, args.image)
    os.makedirs(args.out, exist_ok=True)
    chash = state.config_hash or config_hash(cfg)
    mesh, stage = _reconstruct_mesh(cfg_t, state, sample, args.res)
    base = os.path.join(args.out, sample.instance_id)
    ex.export_mesh(mesh, base + "_mesh.obj", header_comment=f"config {chash}")
    if args.ply:
        ex.export_mesh(mesh, base + "_mesh.ply", header_comment=f"config {chash}")
    if args.canonical_colors:
        mapper = (canonical_map(state.nets, sample.rgb) if stage == "2"
                  else (lambda v: v))
        colored = ex.canonical_colors(mesh, mapper)
        ex.export_mesh(colored, base + "_canonical.obj",
                       header_comment=f"config {chash}")
    depth, hit = render_depth_map(cfg_t, state.nets, sample, stage)
    near = sample.camera.distance_to_origin() - cfg_t.t_near_margin
    far = near + cfg_t.march_steps * cfg_t.d_max
    depth_to_png(base + "_depth.png", depth, hit, near, far)
    print(f"reconstructed {sample.instance_id} (stage {stage}) -> "
          f"{base}_mesh.obj ({len(mesh.vertices)} vertices)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import extraction as ex
    from .metrics import evaluate_meshes, write_reports
    from .synthdata import Dataset, analytic_sdf

    cfg, cfg_t, state = _load_trained(args, args.set)
    ds = Dataset(args.dataset or cfg["dataset"])
    os.makedirs(args.out, exist_ok=True)
    reports = {}
    for inst in ds.instances:
        sample = ds.load(inst)
        mesh, _ = _reconstruct_mesh(cfg_t, state, sample, args.res)
        gt_grid = ex.sample_grid(lambda p: analytic_sdf(sample.spec, p),
                                 args.res)
        gt_mesh = ex.marching_cubes(gt_grid)
        if mesh.is_empty():
            print(f"warning: empty reconstruction for {inst}")
            continue
        reports[inst] = evaluate_meshes(mesh, gt_mesh, seed=cfg["seed"])
    chash = state.config_hash or config_hash(cfg)
    write_reports(reports, os.path.join(args.out, "metrics.json"),
                  os.path.join(args.out, "metrics.csv"), config_hash=chash)
    print(f"evaluated {len(reports)} instances -> {args.out}/metrics.csv")
    return EXIT_OK


def cmd_texture_transfer(args) -> int:
    from . import extraction as ex
    from .trainer import canonical_map

    cfg, cfg_t, state = _load_trained(args, args.set)
    if "2" not in state.phase_done:
        from .trainer import MissingPrerequisiteError
        raise MissingPrerequisiteError("texture transfer needs a stage-2 "
                                       "checkpoint")
    src = _resolve_sample(args, cfg, args.source)
    tgt = _resolve_sample(args, cfg, args.target)
    os.makedirs(args.out, exist_ok=True)
    chash = state.config_hash or config_hash(cfg)
    axis = {"x": 0, "y": 1, "z": 2}[args.paint]
    src_mesh, _ = _reconstruct_mesh(cfg_t, state, src, args.res)
    tgt_mesh, _ = _reconstruct_mesh(cfg_t, state, tgt, args.res)
    painted = ex.paint_axis_stripes(src_mesh, axis=axis)
    out_mesh = ex.texture_transfer(
        painted, canonical_map(state.nets, src.rgb),
        tgt_mesh, canonical_map(state.nets, tgt.rgb))
    sp = os.path.join(args.out, f"{src.instance_id}_painted.obj")
    tp = os.path.join(args.out, f"{tgt.instance_id}_transfer.obj")
    ex.export_mesh(painted, sp, header_comment=f"config {chash}")
    ex.export_mesh(out_mesh, tp, header_comment=f"config {chash}")
    print(f"transferred {src.instance_id} -> {tgt.instance_id}: {tp}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tars",
        description="Single-view 3D reconstruction via deformation into a "
                    "canonical signed distance field (synthetic desk-scale "
                    "pipeline).")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON run configuration file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    add_common(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--genus-mix", dest="genus_mix", type=float)
    g.add_argument("--res", type=int)
    g.add_argument("--views-per-instance", dest="views_per_instance", type=int)
    g.add_argument("--out", help="output dataset directory")
    g.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run the training curriculum")
    add_common(t)
    t.add_argument("--dataset", help="dataset directory override")
    t.add_argument("--out", help="run output directory override")
    t.add_argument("--stage", default="all",
                   choices=["all", "0a", "1", "0b", "2"])
    t.add_argument("--resume", action="store_true",
                   help="continue from ckpt_latest in the output directory")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("reconstruct", help="extract a mesh for one image")
    add_common(r)
    r.add_argument("--ckpt", required=True, help="checkpoint base path "
                   "(without extension)")
    r.add_argument("--dataset", help="dataset directory (for instance ids)")
    r.add_argument("--image", required=True,
                   help="instance id or instance directory")
    r.add_argument("--res", type=int, default=64, choices=[32, 64, 128])
    r.add_argument("--canonical-colors", dest="canonical_colors",
                   action="store_true")
    r.add_argument("--ply", action="store_true", help="also export PLY")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_reconstruct)

    e = sub.add_parser("eval", help="evaluate reconstructions against GT")
    add_common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset")
    e.add_argument("--res", type=int, default=64)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("texture-transfer",
                       help="paint one reconstruction, transfer through "
                            "canonical space")
    add_common(x)
    x.add_argument("--ckpt", required=True)
    x.add_argument("--dataset")
    x.add_argument("--source", required=True)
    x.add_argument("--target", required=True)
    x.add_argument("--paint", default="x", choices=["x", "y", "z"],
                   help="stripe axis for painting the source")
    x.add_argument("--res", type=int, default=64)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_texture_transfer)
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("TARS_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .trainer import MissingPrerequisiteError, NumericalError
    try:
        return args.fn(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except MissingPrerequisiteError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING_PREREQ
    except (NumericalError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
