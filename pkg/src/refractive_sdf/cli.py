"""Command line entry point: gen-data, train, extract, eval, trace.

Every option can also come from a flat ``key = value`` TOML file passed with
``--config``; command-line flags win over the file, the file over built-in
defaults. Each command writes the fully resolved configuration next to its
output as ``<output>.config.toml`` (or ``config.toml`` inside output
directories).

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, EmptyFieldError, FormatError

SHAPES = ("sphere", "torus", "rounded_box", "barbell", "two_cylinders")

GEN_DEFAULTS = {
    "shape": "sphere", "views": 8, "res": 64, "distance": 3.0, "elevation": 30.0, "fov": 40.0,
    "monitor_distance": 2.5, "monitor_max_half_extent": 6.0, "ior_outside": 1.0003, "ior_inside": 1.4723,
    "seed": 0, "corrupt_multibounce_q": False, "gt_res": 256, "out": None,
}
TRAIN_DEFAULTS = {
    "data": None, "out": None, "iters": 5000, "seed": 0, "batch_size": 64, "lr": 3e-5, "mix": 0.25,
    "checkpoint_every": 1000, "depth": 4, "width": 128, "freqs": 5, "init_radius": 0.5, "init_sharpness": 100.0,
    "w_refraction": 1e-4, "w_eikonal": 0.1, "w_mask": 0.1,
    "refraction": True, "eikonal": True, "mask": True, "occlusion_check": True,
    "mode": "volume", "n_coarse": 32, "n_importance_rounds": 4, "n_importance_per_round": 8,
    "jitter": True, "interior_step_offset": 5e-3, "opacity_threshold": 0.5,
    "n_segment_samples": 32, "occlusion_sdf_threshold": 1e-3, "resume": False,
}
EXTRACT_DEFAULTS = {"checkpoint": None, "res": 128, "bound": 1.0, "out": None, "force": False}
EVAL_DEFAULTS = {"recon": None, "gt": None, "tau": 0.01, "n": 100000, "seed": 0, "nn": "kdtree", "out": None}
TRACE_DEFAULTS = {"checkpoint": None, "shape": None, "data": None, "view": 0, "pixel": None,
                  "n_coarse": 64, "n_importance_rounds": 4, "n_importance_per_round": 16}


class UsageError(Exception):
    pass


def _bool_flag(p, name, help_text):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, action="store_true", default=None, help=help_text)
    p.add_argument(f"--no-{name.replace('_', '-')}", dest=name, action="store_false", help=f"disable: {help_text}")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="refractive-sdf", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None, help="cap on CPU worker threads (default: all cores)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="flat key = value TOML config file")
        return p

    g = common(sub.add_parser("gen-data", help="simulate a correspondence dataset"))
    g.add_argument("--shape", choices=SHAPES, default=None)
    g.add_argument("--views", type=int, default=None, help="number of turntable views (8)")
    g.add_argument("--res", type=int, default=None, help="image width = height in pixels (64)")
    g.add_argument("--distance", type=float, default=None, help="camera distance from the origin (3.0)")
    g.add_argument("--elevation", type=float, default=None, help="camera elevation in degrees (30)")
    g.add_argument("--fov", type=float, default=None, help="horizontal field of view in degrees (40)")
    g.add_argument("--monitor-distance", dest="monitor_distance", type=float, default=None)
    g.add_argument("--monitor-max-half-extent", dest="monitor_max_half_extent", type=float, default=None)
    g.add_argument("--ior-outside", dest="ior_outside", type=float, default=None)
    g.add_argument("--ior-inside", dest="ior_inside", type=float, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--gt-res", dest="gt_res", type=int, default=None, help="ground-truth mesh resolution; 0 skips")
    _bool_flag(g, "corrupt_multibounce_q", "store the wrong multi-bounce landing point as Q")
    g.add_argument("--out", type=Path, default=None, help="output dataset directory (required)")

    t = common(sub.add_parser("train", help="fit a neural SDF to a dataset"))
    t.add_argument("--data", type=Path, default=None, help="dataset directory (required)")
    t.add_argument("--out", type=Path, default=None, help="run directory (required)")
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--seed", type=int, default=None, help="falls back to $NETO_SEED, then 0")
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--mix", type=float, default=None, help="fraction of rays drawn outside the silhouette")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    t.add_argument("--depth", type=int, default=None)
    t.add_argument("--width", type=int, default=None)
    t.add_argument("--freqs", type=int, default=None)
    t.add_argument("--init-radius", dest="init_radius", type=float, default=None)
    t.add_argument("--init-sharpness", dest="init_sharpness", type=float, default=None,
                   help="starting density sharpness s (trainable afterwards)")
    t.add_argument("--w-refraction", dest="w_refraction", type=float, default=None)
    t.add_argument("--w-eikonal", dest="w_eikonal", type=float, default=None)
    t.add_argument("--w-mask", dest="w_mask", type=float, default=None)
    for name in ("refraction", "eikonal", "mask"):
        _bool_flag(t, name, f"{name} loss term")
    _bool_flag(t, "occlusion_check", "self-occlusion filter")
    t.add_argument("--mode", choices=("volume", "surface"), default=None)
    t.add_argument("--n-coarse", dest="n_coarse", type=int, default=None)
    t.add_argument("--n-importance-rounds", dest="n_importance_rounds", type=int, default=None)
    t.add_argument("--n-importance-per-round", dest="n_importance_per_round", type=int, default=None)
    _bool_flag(t, "jitter", "random jitter of sample positions")
    t.add_argument("--interior-step-offset", dest="interior_step_offset", type=float, default=None)
    t.add_argument("--opacity-threshold", dest="opacity_threshold", type=float, default=None)
    t.add_argument("--n-segment-samples", dest="n_segment_samples", type=int, default=None)
    t.add_argument("--occlusion-sdf-threshold", dest="occlusion_sdf_threshold", type=float, default=None)
    t.add_argument("--resume", action="store_true", default=None, help="continue from the newest checkpoint")

    e = common(sub.add_parser("extract", help="marching cubes on a checkpoint"))
    e.add_argument("--checkpoint", type=Path, default=None)
    e.add_argument("--res", type=int, default=None, help="grid cells per axis (>= 8)")
    e.add_argument("--bound", type=float, default=None)
    e.add_argument("--out", type=Path, default=None, help="output OBJ path")
    e.add_argument("--force", action="store_true", default=None, help="overwrite an existing output")

    v = common(sub.add_parser("eval", help="mesh metrics against ground truth"))
    v.add_argument("recon", nargs="?", type=Path, default=None)
    v.add_argument("gt", nargs="?", type=Path, default=None)
    v.add_argument("--tau", type=float, default=None)
    v.add_argument("--n", type=int, default=None, help="surface samples per mesh")
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--nn", choices=("kdtree", "brute"), default=None)
    v.add_argument("--out", type=Path, default=None, help="write the metrics JSON here too")

    r = common(sub.add_parser("trace", help="dump one traced pixel path"))
    r.add_argument("--checkpoint", type=Path, default=None)
    r.add_argument("--shape", choices=SHAPES, default=None, help="trace an analytic shape instead")
    r.add_argument("--data", type=Path, default=None, help="dataset supplying the rig (default rig otherwise)")
    r.add_argument("--view", type=int, default=None)
    r.add_argument("--pixel", type=int, nargs=2, default=None, metavar=("U", "V"))
    return ap


def _resolve(defaults: dict, args: argparse.Namespace) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None) is not None:
        try:
            with open(args.config, "rb") as fh:
                loaded = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys in {args.config}: {', '.join(unknown)}")
        cfg.update(loaded)
    for k in defaults:
        val = getattr(args, k, None)
        if val is not None:
            cfg[k] = val
    return cfg


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def write_config(path: Path, cfg: dict) -> None:
    lines = [f"{k} = {_toml_value(v)}" for k, v in cfg.items() if v is not None]
    Path(path).write_text("\n".join(lines) + "\n")


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"missing required option --{k.replace('_', '-')}")


def _shape(name: str):
    from .shapes import AnalyticShape

    return getattr(AnalyticShape, name)()


def _rig(cfg):
    from .capture import RigSpec

    return RigSpec(n_views=int(cfg["views"]), distance=float(cfg["distance"]), elevation_deg=float(cfg["elevation"]),
                   width=int(cfg["res"]), height=int(cfg["res"]), fov_deg=float(cfg["fov"]),
                   monitor_distance=float(cfg["monitor_distance"]),
                   monitor_max_half_extent=float(cfg["monitor_max_half_extent"]),
                   ior_outside=float(cfg["ior_outside"]), ior_inside=float(cfg["ior_inside"]))


def cmd_gen_data(cfg) -> int:
    from .capture import generate_dataset

    _require(cfg, "out")
    out = Path(cfg["out"])
    ds = generate_dataset(_shape(cfg["shape"]), _rig(cfg), seed=int(cfg["seed"]), out_dir=out,
                          corrupt_multibounce_q=bool(cfg["corrupt_multibounce_q"]), gt_resolution=int(cfg["gt_res"]))
    write_config(out / "config.toml", cfg)
    counts = ds.tag_counts()
    print(f"wrote {out} ({len(ds.views)} views)")
    for name, c in counts.items():
        print(f"  {name:<12} {c}")
    return 0


def _sampling(cfg, full=False):
    from .tracer import SamplingConfig

    kw = dict(n_coarse=int(cfg["n_coarse"]), n_importance_rounds=int(cfg["n_importance_rounds"]),
              n_importance_per_round=int(cfg["n_importance_per_round"]))
    if not full:
        kw.update(mode=cfg["mode"], jitter=bool(cfg["jitter"]), interior_step_offset=float(cfg["interior_step_offset"]),
                  opacity_threshold=float(cfg["opacity_threshold"]))
    return SamplingConfig(**kw)


def cmd_train(cfg) -> int:
    from .capture import load_dataset
    from .field import NeuralField, init_sphere, with_sharpness
    from .losses import LossWeights
    from .training import TrainConfig, train

    _require(cfg, "data", "out")
    if cfg["seed"] is None:
        cfg["seed"] = 0
    ds = load_dataset(cfg["data"])
    field = NeuralField(int(cfg["depth"]), int(cfg["width"]), int(cfg["freqs"]))
    params = init_sphere(field, int(cfg["seed"]), float(cfg["init_radius"]), bound=ds.rig.bound)
    params = with_sharpness(params, float(cfg["init_sharpness"]))
    tc = TrainConfig(batch_size=int(cfg["batch_size"]), iterations=int(cfg["iters"]), seed=int(cfg["seed"]),
                     lr=float(cfg["lr"]), mix=float(cfg["mix"]), checkpoint_every=int(cfg["checkpoint_every"]),
                     enable_refraction=bool(cfg["refraction"]), enable_eikonal=bool(cfg["eikonal"]),
                     enable_mask=bool(cfg["mask"]), enable_occlusion_check=bool(cfg["occlusion_check"]),
                     n_segment_samples=int(cfg["n_segment_samples"]),
                     occlusion_sdf_threshold=float(cfg["occlusion_sdf_threshold"]))
    weights = LossWeights(float(cfg["w_refraction"]), float(cfg["w_eikonal"]), float(cfg["w_mask"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    resolved = dict(cfg, resume=False)
    write_config(out / "config.toml", resolved)
    res = train(ds, field, params, tc, _sampling(cfg), weights, out_dir=out, resume=bool(cfg["resume"]))
    last = res.history[-1] if res.history else None
    if last:
        print(f"iter {last[0]}: total {last[1]:.6g}  refraction {last[2]:.6g}  eikonal {last[3]:.6g}  "
              f"mask {last[4]:.6g}  valid {last[5]}  occluded {last[6]}")
    if res.n_skipped:
        print(f"{res.n_skipped} non-finite steps skipped")
    print(f"final checkpoint {res.final_checkpoint}")
    return 0


def cmd_extract(cfg) -> int:
    from .field import field_values, load_checkpoint
    from .mesh import marching_cubes, write_obj

    _require(cfg, "checkpoint", "out")
    if int(cfg["res"]) < 8:
        raise UsageError(f"--res must be >= 8 (got {cfg['res']})")
    out = Path(cfg["out"])
    if out.exists() and not cfg["force"]:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    field, params = load_checkpoint(cfg["checkpoint"])
    mesh = marching_cubes(lambda x: field_values(field, params, x), float(cfg["bound"]), int(cfg["res"]))
    write_obj(out, mesh)
    write_config(out.with_name(out.name + ".config.toml"), dict(cfg, force=False))
    print(f"wrote {out}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles, "
          f"watertight={mesh.is_watertight()}, euler={mesh.euler_characteristic()}")
    return 0


def cmd_eval(cfg) -> int:
    from .mesh import evaluate, read_obj

    _require(cfg, "recon", "gt")
    rep = evaluate(read_obj(cfg["recon"]), read_obj(cfg["gt"]), float(cfg["tau"]), int(cfg["n"]), int(cfg["seed"]),
                   cfg["nn"])
    text = rep.to_json()
    print(text)
    if cfg["out"] is not None:
        out = Path(cfg["out"])
        out.write_text(text + "\n")
        write_config(out.with_name(out.name + ".config.toml"), cfg)
    return 0


def cmd_trace(cfg) -> int:
    import numpy as np

    from .capture import RigSpec, load_dataset
    from .field import AnalyticField, load_checkpoint
    from .tracer import Status, check_self_occlusion, format_trace, trace_two_bounce

    if (cfg["checkpoint"] is None) == (cfg["shape"] is None):
        raise UsageError("give exactly one of --checkpoint or --shape")
    _require(cfg, "pixel")
    if cfg["data"] is not None:
        ds = load_dataset(cfg["data"])
        rig, planes = ds.rig, ds.planes
    else:
        rig = RigSpec()
        planes = [rig.monitor(k) for k in range(rig.n_views)]
    k = int(cfg["view"])
    if not 0 <= k < rig.n_views:
        raise UsageError(f"--view must lie in [0, {rig.n_views})")
    if cfg["checkpoint"] is not None:
        field, params = load_checkpoint(cfg["checkpoint"], dtype=np.float64)
    else:
        field = AnalyticField(_shape(cfg["shape"]))
        params = field.init_params()
    from .geometry_optics import pixel_ray

    u, v = (int(x) for x in cfg["pixel"])
    if not (0 <= u < rig.width and 0 <= v < rig.height):
        raise UsageError(f"--pixel {u} {v} outside the {rig.width}x{rig.height} image")
    # same pixel-centre ray the capture simulator records
    ray = pixel_ray(rig.camera(k), (u + 0.5, v + 0.5))
    scfg = _sampling(cfg, full=True)
    path = trace_two_bounce(field, params, ray.origin, ray.direction, planes[k].point, planes[k].normal,
                            rig.constants, scfg)
    status = int(path.status[0])
    if status != Status.MISS:
        occ = check_self_occlusion(field, params, path.entry.point, path.dir_interior, scfg)
        if bool(occ.occluded[0]):
            status = Status.SELF_OCCLUDED
    sys.stdout.write(format_trace(path, 0, status))
    return 0


COMMANDS = {
    "gen-data": (GEN_DEFAULTS, cmd_gen_data),
    "train": (TRAIN_DEFAULTS, cmd_train),
    "extract": (EXTRACT_DEFAULTS, cmd_extract),
    "eval": (EVAL_DEFAULTS, cmd_eval),
    "trace": (TRACE_DEFAULTS, cmd_trace),
}


def _set_threads(n: int | None):
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    flags = os.environ.get("XLA_FLAGS", "")
    os.environ["XLA_FLAGS"] = f"{flags} --xla_cpu_multi_thread_eigen={'true' if n > 1 else 'false'} " \
                              f"intra_op_parallelism_threads={n}".strip()
    os.environ.setdefault("OMP_NUM_THREADS", str(n))


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    defaults, fn = COMMANDS[args.command]
    try:
        _set_threads(args.threads)
        cfg = _resolve(defaults, args)
        if "seed" in cfg and getattr(args, "seed", None) is None and os.environ.get("NETO_SEED"):
            file_has_seed = args.config is not None and "seed" in tomllib.loads(Path(args.config).read_text())
            if not file_has_seed:
                try:
                    cfg["seed"] = int(os.environ["NETO_SEED"])
                except ValueError:
                    raise UsageError(f"NETO_SEED must be an integer, got {os.environ['NETO_SEED']!r}") from None
        return fn(cfg)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"refractive-sdf: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FormatError, EmptyFieldError, OSError, ValueError, FloatingPointError) as exc:
        print(f"refractive-sdf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
