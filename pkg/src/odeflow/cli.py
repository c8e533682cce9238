"""Command-line interface.

Experiments are described by a JSON run config (see ``odeflow schema``);
flags cover only paths, seeds and overrides.  Relative paths inside a config
are resolved against the config file's directory.

Exit codes: 0 success, 2 invalid config or arguments, 3 missing or unreadable
input file, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, container, data, distill, integrator, models, stability
from .container import atomic_write_bytes, atomic_write_text
from .diffcore import ContractError
from .dynamics import OdeBlockParams, attention_maps, load_params
from .integrator import DivergenceError

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


# ---------------------------------------------------------------- run config


@dataclass
class DataSection:
    train: str = "data/train.bin"
    eval: str = "data/eval.bin"
    num_classes: int = 4


@dataclass
class ModelSection:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    heads: int = 4
    depth: int = 4  # teacher blocks
    teacher_mlp_ratio: int = 2
    mlp_ratio: int = 2  # student MLP width factor r
    register_count: int = 0
    N: int = 24
    T: float = 1.0
    target_norm: float = 1.0
    share_embedder: bool = True  # student aliases the teacher's embedder and head


def _teacher_defaults() -> distill.TrainConfig:
    return distill.TrainConfig(epochs=30, lr=1e-3)


def _free_defaults() -> distill.TrainConfig:
    return distill.TrainConfig(epochs=60, lr=2e-3)


def _distill_defaults() -> distill.DistillConfig:
    return distill.DistillConfig(epochs=60, lr=2e-3)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    teacher_checkpoint: str = "runs/default/teacher.odev"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    teacher: distill.TrainConfig = field(default_factory=_teacher_defaults)
    train: distill.TrainConfig = field(default_factory=_free_defaults)
    distill: distill.DistillConfig = field(default_factory=_distill_defaults)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(text: str, path: str) -> str:
    line = _line_of(text, path.rsplit(".", 1)[-1]) if text else None
    return f"{path} (line {line})" if line else path


def _build(cls, obj: Any, path: str, text: str, default=None):
    if not isinstance(obj, dict):
        raise ConfigError(f"{_where(text, path)}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [k for k in obj if k not in known]
    if unknown:
        k = unknown[0]
        raise ConfigError(f"{_where(text, f'{path}.{k}' if path else k)}: unknown key {k!r}")
    # missing keys keep the enclosing default, not the bare class default
    default = cls() if default is None else default
    kwargs = {}
    for name, f in known.items():
        key = f"{path}.{name}" if path else name
        if name not in obj:
            continue
        val, ref = obj[name], getattr(default, name)
        if dataclasses.is_dataclass(ref):
            kwargs[name] = _build(type(ref), val, key, text, ref)
        elif isinstance(ref, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{_where(text, key)}: expected true/false, got {val!r}")
            kwargs[name] = val
        elif isinstance(ref, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{_where(text, key)}: expected an integer, got {val!r}")
            kwargs[name] = val
        elif isinstance(ref, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{_where(text, key)}: expected a number, got {val!r}")
            kwargs[name] = float(val)
        elif isinstance(ref, str):
            if not isinstance(val, str):
                raise ConfigError(f"{_where(text, key)}: expected a string, got {val!r}")
            kwargs[name] = val
        else:
            kwargs[name] = val
    try:
        return dataclasses.replace(default, **kwargs)
    except (ContractError, TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def parse_config(text: str) -> RunConfig:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno} column {e.colno}: {e.msg}") from None
    return _build(RunConfig, obj, "", text)


def load_config(path: str | None) -> tuple[RunConfig, Path]:
    if path is None:
        return RunConfig(), Path.cwd()
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"config not found: {path}")
    return parse_config(p.read_text()), p.resolve().parent


def default_config_json() -> str:
    return json.dumps(RunConfig().to_dict(), indent=2) + "\n"


# ---------------------------------------------------------------- helpers


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _need(path: Path) -> Path:
    if not path.is_file():
        raise MissingInput(f"file not found: {path}")
    return path


def worker_count() -> int:
    """Worker cap from ``ODEFLOW_THREADS`` (default 1)."""
    raw = os.environ.get("ODEFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ODEFLOW_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, os.cpu_count() or 1))


def write_manifest(out_dir: Path, command: str, cfg: RunConfig | None, seed: int,
                   artifacts: dict[str, Path], extra: dict | None = None) -> Path:
    m = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.hash() if cfg is not None else None,
        "seed": seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        m.update(extra)
    path = out_dir / "manifest.json"
    atomic_write_text(path, json.dumps(m, indent=2) + "\n")
    return path


def _load_splits(cfg: RunConfig, base: Path) -> tuple[data.DatasetSplit, data.DatasetSplit]:
    tr = data.load_cifar10_binary(_need(_resolve(base, cfg.data.train)), "train", cfg.data.num_classes)
    ev = data.load_cifar10_binary(_need(_resolve(base, cfg.data.eval)), "eval", cfg.data.num_classes)
    for s in (tr, ev):
        if len(s) and s.labels.max() >= cfg.data.num_classes:
            raise ConfigError(f"data.num_classes: {cfg.data.num_classes} but labels reach {s.labels.max()}")
    return tr, ev.with_stats(tr)


def _load_model(path: Path):
    return models.load_model(_need(path))


def _out_dir(cfg: RunConfig, base: Path, override: str | None) -> Path:
    d = Path(override) if override else _resolve(base, cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _student_from(teacher: models.TeacherViT, cfg: RunConfig) -> models.OdeViT:
    m = cfg.model
    return models.OdeViT.from_teacher(teacher, mlp_ratio=m.mlp_ratio, N=m.N, T=m.T,
                                      target_norm=m.target_norm, seed=cfg.seed,
                                      copy=not m.share_embedder)


def _apply_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    cfg = dataclasses.replace(cfg, seed=seed)
    cfg.teacher = dataclasses.replace(cfg.teacher, seed=seed)
    cfg.train = dataclasses.replace(cfg.train, seed=seed)
    cfg.distill = dataclasses.replace(cfg.distill, seed=seed)
    return cfg


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.size != data.CIFAR_SIZE:
        raise ConfigError("--size: the binary layout stores 32x32 images only")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_eval = args.n // 4 if args.n_eval is None else args.n_eval
    tr = data.gen_synthetic(args.n, args.classes, args.size, args.seed, "train", args.noise)
    ev = data.gen_synthetic(n_eval, args.classes, args.size, args.seed + 1, "eval", args.noise)
    paths = {"train": out / "train.bin", "eval": out / "eval.bin"}
    data.save_cifar10_binary(paths["train"], tr)
    data.save_cifar10_binary(paths["eval"], ev)
    write_manifest(out, "gen-data", None, args.seed, paths,
                   {"n": args.n, "n_eval": n_eval, "classes": args.classes, "noise": args.noise})
    return 0


def cmd_train_teacher(args) -> int:
    cfg, base = load_config(args.config)
    cfg = _apply_seed(cfg, args.seed)
    tr, ev = _load_splits(cfg, base)
    m = cfg.model
    teacher = models.TeacherViT.create(m.image_size, m.patch_size, m.channels, m.dim, m.heads,
                                       m.depth, m.teacher_mlp_ratio, cfg.data.num_classes,
                                       m.register_count, seed=cfg.seed)
    out = _out_dir(cfg, base, args.out)
    ckpt = out / "teacher.odev"
    log = distill.train_teacher(teacher, tr, cfg.teacher, ev, checkpoint_path=ckpt, callback=_progress(args))
    models.save_model(ckpt, teacher)
    distill.write_log(out / "teacher_log.jsonl", log)
    write_manifest(out, "train-teacher", cfg, cfg.seed, {"checkpoint": ckpt, "log": out / "teacher_log.jsonl"})
    return 0


def cmd_train_ode(args) -> int:
    cfg, base = load_config(args.config)
    cfg = _apply_seed(cfg, args.seed)
    tr, ev = _load_splits(cfg, base)
    m = cfg.model
    model = models.OdeViT.create(m.image_size, m.patch_size, m.channels, m.dim, m.heads, m.mlp_ratio,
                                 cfg.data.num_classes, m.register_count, m.N, m.T, m.target_norm,
                                 seed=cfg.seed)
    out = _out_dir(cfg, base, args.out)
    ckpt = out / "student_free.odev"
    log = distill.train_free(model, tr, cfg.train, ev, checkpoint_path=ckpt, callback=_progress(args))
    models.save_model(ckpt, model)
    distill.write_log(out / "free_log.jsonl", log)
    write_manifest(out, "train-ode", cfg, cfg.seed, {"checkpoint": ckpt, "log": out / "free_log.jsonl"})
    return 0


def cmd_distill(args) -> int:
    cfg, base = load_config(args.config)
    cfg = _apply_seed(cfg, args.seed)
    tr, ev = _load_splits(cfg, base)
    tpath = Path(args.teacher) if args.teacher else _resolve(base, cfg.teacher_checkpoint)
    teacher = _load_model(tpath)
    if not isinstance(teacher, models.TeacherViT):
        raise ConfigError(f"teacher_checkpoint: {tpath} does not hold a teacher")
    student = _student_from(teacher, cfg)
    out = _out_dir(cfg, base, args.out)
    ckpt = out / "student.odev"
    res = distill.train_distill(student, teacher, tr, cfg.distill, ev, checkpoint_path=ckpt,
                                callback=_progress(args))
    models.save_model(ckpt, student)
    paths = {
        "checkpoint": ckpt,
        "log": out / "distill_log.jsonl",
        "contraction": out / "contraction.csv",
        "contraction_table": out / "contraction_table.json",
    }
    distill.write_log(paths["log"], res.log)
    atomic_write_text(paths["contraction"], distill.records_csv(res.records))
    table = distill.contraction_analysis(res.records) if res.records else None
    atomic_write_text(paths["contraction_table"], json.dumps(table.to_dict() if table else None, indent=2) + "\n")
    write_manifest(out, "distill", cfg, cfg.seed, paths, {
        "teacher": str(tpath),
        "schedule": dataclasses.asdict(res.schedule),
        "early_stop_epoch": res.stopped_epoch,
    })
    return 0


def _analysis_input(model, cfg: RunConfig, base: Path, index: int):
    """Initial state and block for analysis commands."""
    if isinstance(model, OdeBlockParams):
        m = cfg.model
        n = (m.image_size // m.patch_size) ** 2 + 1 + m.register_count
        x0 = np.random.default_rng(cfg.seed).standard_normal((n, model.dim))
        return model, x0, None
    if not isinstance(model, models.OdeViT):
        raise ConfigError("checkpoint must hold an ODE block or an ODE-ViT student")
    _, ev = _load_splits(cfg, base)
    if not 0 <= index < len(ev):
        raise ConfigError(f"--image {index} outside the eval split of {len(ev)}")
    x0 = models.patchify(ev.normalized([index]), model.embedder).data[0]
    return model.block, x0, ev


def _load_any(path: Path):
    c = container.load(_need(path))
    if c.kind == container.KIND_BLOCK:
        return load_params(path)[0]
    return models.model_from_container(c)


def cmd_analyze(args) -> int:
    cfg, base = load_config(args.config)
    model = _load_any(Path(args.checkpoint))
    block, x0, ev = _analysis_input(model, cfg, base, args.image)
    N = args.N or (model.N if isinstance(model, models.OdeViT) else cfg.model.N)
    T = args.T or (model.T if isinstance(model, models.OdeViT) else cfg.model.T)
    rep = stability.stability_report(block, x0, N=N, T=T, R=cfg.distill.R, L_assumed=cfg.distill.L_assumed,
                                     seed=cfg.seed)
    out = _out_dir(cfg, base, args.out)
    paths = {"report": out / "stability.json"}
    atomic_write_text(paths["report"], rep.to_json() + "\n")
    if ev is not None:
        n = min(args.samples, len(ev))
        x0s = models.patchify(ev.normalized(np.arange(n)), model.embedder).data
        preds = models.predict(distill.head_logits(model.head, distill.student_final(model, x0s)[:, 0]))
        rows = stability.per_class_lyapunov(block, x0s, ev.labels[:n], preds, N, T,
                                            ev.num_classes, seed=cfg.seed, workers=worker_count())
        paths["per_class"] = out / "per_class_lyapunov.csv"
        atomic_write_text(paths["per_class"], stability.per_class_csv(rows))
    write_manifest(out, "analyze", cfg, cfg.seed, paths, {"checkpoint": args.checkpoint})
    return 0


def _floats(s: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated numbers, got {s!r}") from None


def cmd_sweep(args) -> int:
    cfg, base = load_config(args.config)
    model = _load_any(Path(args.checkpoint))
    if not isinstance(model, models.OdeViT):
        raise ConfigError("sweep needs an ODE-ViT student checkpoint")
    _, ev = _load_splits(cfg, base)
    n = min(args.samples, len(ev)) if args.samples else len(ev)
    x0 = np.concatenate([models.patchify(ev.normalized(idx), model.embedder).data
                         for idx in data.batch_indices(n, distill.EVAL_BATCH, None)])
    if args.steps and args.horizons:
        raise ConfigError("give --steps or --horizons, not both")
    if args.horizons:
        rows = integrator.horizon_sweep(x0, model.block, _floats(args.horizons, "--horizons"),
                                        N_per_T=[int(v) for v in _floats(args.horizon_steps, "--horizon-steps")], head=model.head.logits,
                                        ref=(model.N, model.T), labels=ev.labels[:n])
    else:
        steps = [int(v) for v in _floats(args.steps or "18,20,22,24,26,28,30", "--steps")]
        rows = integrator.step_sweep(x0, model.block, steps, model.T, model.head.logits, N_ref=model.N,
                                     labels=ev.labels[:n])
    out = _out_dir(cfg, base, args.out)
    path = out / "sweep.csv"
    atomic_write_text(path, integrator.sweep_csv(rows))
    write_manifest(out, "sweep", cfg, cfg.seed, {"sweep": path}, {"checkpoint": args.checkpoint})
    return 0


def pgm_bytes(img: np.ndarray) -> bytes:
    """8-bit binary PGM of a 2-D array, min-max scaled (a constant image maps to 0)."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    px = np.rint(scaled * 255).astype(np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode() + px.tobytes()


def cmd_export_attn(args) -> int:
    cfg, base = load_config(args.config)
    model = _load_any(Path(args.checkpoint))
    if not isinstance(model, models.OdeViT):
        raise ConfigError("export-attn needs an ODE-ViT student checkpoint")
    _, ev = _load_splits(cfg, base)
    if not 0 <= args.image < len(ev):
        raise ConfigError(f"--image {args.image} outside the eval split of {len(ev)}")
    x0 = models.patchify(ev.normalized([args.image]), model.embedder).data
    xf = integrator.euler_integrate(x0, model.block, model.N, model.T, record=False).final
    P = attention_maps(xf, model.block).P.data[0]  # (H, n, n)
    grid = model.embedder.image_size // model.embedder.patch_size
    out = _out_dir(cfg, base, args.out)
    paths = {}
    for h in range(P.shape[0]):
        row = P[h, 0, 1:1 + grid * grid].reshape(grid, grid)
        paths[f"head_{h}"] = out / f"attn_{args.image}_head{h}.pgm"
        atomic_write_bytes(paths[f"head_{h}"], pgm_bytes(row))
    write_manifest(out, "export-attn", cfg, cfg.seed, paths, {"checkpoint": args.checkpoint, "image": args.image})
    return 0


def cmd_export_traj(args) -> int:
    cfg, base = load_config(args.config)
    model = _load_any(Path(args.checkpoint))
    if not isinstance(model, models.OdeViT):
        raise ConfigError("export-traj needs an ODE-ViT student checkpoint")
    _, ev = _load_splits(cfg, base)
    if not 0 <= args.image < len(ev):
        raise ConfigError(f"--image {args.image} outside the eval split of {len(ev)}")
    x0 = models.patchify(ev.normalized([args.image]), model.embedder).data
    traj = integrator.euler_integrate(x0, model.block, args.N or model.N, model.T, record=True)
    out = _out_dir(cfg, base, args.out)
    path = out / f"trajectory_{args.image}.csv"
    integrator.write_trajectory_csv(path, traj)
    write_manifest(out, "export-traj", cfg, cfg.seed, {"trajectory": path},
                   {"checkpoint": args.checkpoint, "image": args.image})
    return 0


def cmd_schema(args) -> int:
    sys.stdout.write(default_config_json())
    return 0


def _progress(args):
    if not getattr(args, "verbose", False):
        return None
    return lambda row: print(json.dumps(row), file=sys.stderr, flush=True)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="odeflow",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Default run config:\n" + default_config_json(),
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic train/eval splits in the CIFAR-10 binary layout")
    g.add_argument("--n", type=int, default=2000, help="training samples (default 2000)")
    g.add_argument("--n-eval", type=int, default=None, help="eval samples (default n/4)")
    g.add_argument("--classes", type=int, default=4, help="number of classes, 2..10 (default 4)")
    g.add_argument("--size", type=int, default=32, help="image side (default 32)")
    g.add_argument("--noise", type=float, default=0.05, help="pixel noise std (default 0.05)")
    g.add_argument("--seed", type=int, default=0, help="generator seed; eval uses seed+1 (default 0)")
    g.add_argument("--out", default="data", help="output directory (default ./data)")
    g.set_defaults(func=cmd_gen_data)

    def run_cmd(name, func, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", help="run config JSON (defaults when omitted)")
        c.add_argument("--out", help="output directory (overrides out_dir)")
        c.add_argument("--seed", type=int, help="override the config seed")
        c.add_argument("-v", "--verbose", action="store_true", help="print log rows to stderr")
        c.set_defaults(func=func)
        return c

    run_cmd("train-teacher", cmd_train_teacher, "train the layered teacher with cross-entropy")
    run_cmd("train-ode", cmd_train_ode, "train an ODE-ViT from scratch with cross-entropy")
    d = run_cmd("distill", cmd_distill, "distill a teacher checkpoint into an ODE-ViT student")
    d.add_argument("--teacher", help="teacher checkpoint (overrides teacher_checkpoint)")

    def ckpt_cmd(name, func, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", help="run config JSON (for data paths and seed)")
        c.add_argument("--checkpoint", required=True, help="model or block container")
        c.add_argument("--out", help="output directory (overrides out_dir)")
        c.set_defaults(func=func)
        return c

    a = ckpt_cmd("analyze", cmd_analyze, "stability report and per-class Lyapunov exponents")
    a.add_argument("--image", type=int, default=0, help="eval sample used for the report (default 0)")
    a.add_argument("--samples", type=int, default=100, help="eval samples for per-class exponents (default 100)")
    a.add_argument("--N", type=int, default=None, help="integration steps (default: checkpoint's)")
    a.add_argument("--T", type=float, default=None, help="horizon (default: checkpoint's)")

    s = ckpt_cmd("sweep", cmd_sweep, "agreement with the reference solve across step counts or horizons")
    s.add_argument("--steps", help="comma-separated step counts (default 18,20,...,30)")
    s.add_argument("--horizons", help="comma-separated horizons T")
    s.add_argument("--horizon-steps", default="24", help="comma-separated step counts used with --horizons (default 24)")
    s.add_argument("--samples", type=int, default=None, help="limit eval samples")

    e = ckpt_cmd("export-attn", cmd_export_attn, "CLS attention row of every head as PGM images")
    e.add_argument("--image", type=int, required=True, help="eval sample index")

    t = ckpt_cmd("export-traj", cmd_export_traj, "CLS trajectory of one eval sample as CSV")
    t.add_argument("--image", type=int, required=True, help="eval sample index")
    t.add_argument("--N", type=int, default=None, help="integration steps (default: checkpoint's)")

    sc = sub.add_parser("schema", help="print the default run config")
    sc.set_defaults(func=cmd_schema)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as e:
        print(f"odeflow: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, container.FormatError, data.FormatError) as e:
        print(f"odeflow: {e}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as e:
        print(f"odeflow: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
