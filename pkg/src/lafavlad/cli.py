"""Command-line entry point: ``lafavlad {gen,train,eval,ablate,bench}``.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 missing file,
4 invalid config or input data, 5 non-finite values during training,
6 unreadable checkpoint.  Failures print one ``error: ...`` line to stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import statistics
import sys
import time
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .config import PRESETS, RunConfig, format_config, load_config, miniature_config, resolve_presets, toy_config
from .errors import CheckpointError, NonFiniteError, UsageError, ValidationError
from .losses_metrics import format_report, report_csv
from .network import SegmentationNet
from .pointcloud_io import PointCloud, SyntheticSceneSpec, generate_synthetic_scene, read_ascii_cloud, write_ascii_cloud
from .training import epochs_to_reach, evaluate, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_NONFINITE, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5, 6

BASES = {"full": RunConfig, "toy": toy_config, "miniature": miniature_config}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def base_config(name: str, path: Optional[str]) -> RunConfig:
    if name not in BASES:
        raise UsageError(f"unknown base {name!r}; choose from {', '.join(BASES)}")
    base = BASES[name]()
    return load_config(path, base) if path else base


def load_dataset(cfg: RunConfig, path: Optional[str] = None, seed: Optional[int] = None) -> PointCloud:
    """The cloud named by ``path`` or the data section of ``cfg``."""
    data = cfg.data
    path = path or (data.path if data.source == "ascii" else None)
    if path:
        return read_ascii_cloud(path, True, cfg.network.classes)
    spec = SyntheticSceneSpec(class_count=cfg.network.classes, n_points=data.points, noise=data.noise,
                              color_noise=data.color_noise, seed=data.seed if seed is None else seed,
                              instances=data.instances)
    return generate_synthetic_scene(spec)


def parse_sizes(text: str) -> list:
    """``"1k,10k,100k"`` -> ``[1000, 10000, 100000]``."""
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        if not part:
            continue
        mult = {"k": 1000, "m": 1000000}.get(part[-1], 1)
        digits = part[:-1] if mult > 1 else part
        try:
            value = int(float(digits) * mult)
        except ValueError:
            raise UsageError(f"bad size {part!r}") from None
        if value < 1:
            raise UsageError(f"size must be positive, got {part!r}")
        out.append(value)
    if not out:
        raise UsageError("no sizes given")
    return out


# ---------------------------------------------------------------- subcommands

def cmd_gen(args, out) -> int:
    spec = SyntheticSceneSpec(class_count=args.classes, n_points=args.points, noise=args.noise,
                              color_noise=args.color_noise, seed=args.seed, instances=args.instances)
    cloud = generate_synthetic_scene(spec)
    write_ascii_cloud(cloud, args.out)
    print(f"wrote {len(cloud)} points, {cloud.class_count} classes to {args.out}", file=out)
    return EXIT_OK


def cmd_train(args, out) -> int:
    cfg = base_config(args.base, args.config)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    cloud = load_dataset(cfg, args.data)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    model = SegmentationNet(cfg.network)
    report = (lambda r: print(f"epoch {r.epoch} loss {r.loss:.4f} oa {r.oa:.4f}", file=out)) if args.verbose else None
    result = train(model, cloud, cfg.train, log_path=os.path.join(args.out_dir, "runlog.csv"),
                   checkpoint_dir=os.path.join(args.out_dir, "checkpoints"), on_epoch=report)
    ckpt = os.path.join(args.out_dir, "model.ckpt")
    model.save(ckpt)
    last = result.log.records[-1] if result.log.records else None
    summary = f"epochs {len(result.log)}"
    if last is not None:
        summary += f", final loss {last.loss:.4f}, train OA {last.oa:.4f}"
    print(f"{summary}; checkpoint {ckpt}", file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(args.checkpoint)
    cfg_path = args.config or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.ini")
    if not os.path.exists(cfg_path):
        raise FileNotFoundError(cfg_path)
    cfg = base_config(args.base, cfg_path)
    model = SegmentationNet(cfg.network)
    model.load(args.checkpoint)
    cloud = load_dataset(cfg, args.data)
    rep = evaluate(model, cloud, args.points or cfg.train.points, args.seed)
    out.write(format_report(rep.confusion))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report_csv(rep.confusion))
    return EXIT_OK


ABLATE_HEADER = ["preset", "description", "miou", "oa", "convergence_epoch", "final_loss"]


def run_ablation(presets, cfg: RunConfig, cloud: PointCloud, converge_oa: float) -> list:
    """Train and evaluate every preset on the same data and seed."""
    rows = []
    for preset in presets:
        run = preset.apply(cfg)
        model = SegmentationNet(run.network)
        result = train(model, cloud, run.train)
        rep = evaluate(model, cloud, run.train.points, run.train.seed)
        oas = [1.0 - r.oa for r in result.log.records]
        conv = epochs_to_reach(oas, 1.0 - converge_oa)
        final = result.log.records[-1].loss if result.log.records else float("nan")
        rows.append({"preset": preset.id, "description": preset.description, "miou": rep.miou,
                     "oa": rep.oa, "convergence_epoch": conv, "final_loss": final})
    return rows


def format_ablation(rows) -> str:
    head = ["preset", "mIoU(%)", "OA(%)", "conv.epoch", "final loss", "description"]
    body = [[r["preset"], f"{100 * r['miou']:.1f}", f"{100 * r['oa']:.1f}",
             "-" if r["convergence_epoch"] is None else str(r["convergence_epoch"]),
             f"{r['final_loss']:.4f}", r["description"]] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.ljust(w) if i == len(head) - 1 else c.rjust(w)
                       for i, (c, w) in enumerate(zip(line, widths))).rstrip() for line in [head] + body]
    return "\n".join(lines) + "\n"


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATE_HEADER)
    for r in rows:
        writer.writerow([r["preset"], r["description"], repr(r["miou"]), repr(r["oa"]),
                         "" if r["convergence_epoch"] is None else r["convergence_epoch"], repr(r["final_loss"])])
    return buf.getvalue()


def cmd_ablate(args, out) -> int:
    cfg = base_config(args.base, args.config)
    ids = args.presets.split(",") if args.presets is not None else list(cfg.ablation.presets)
    presets = resolve_presets(ids)
    cloud = load_dataset(cfg, args.data)
    rows = run_ablation(presets, cfg, cloud, cfg.ablation.converge_oa)
    out.write(format_ablation(rows))
    text = ablation_csv(rows)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- micro-benchmarks

def _bench_setup(kernel: str, n: int, rng: np.random.Generator):
    from .cvlad import init_vlad_layer, vlad_layer
    from .lafa import LAFA
    from .neighborhood import build_hierarchy, knn, random_subsample
    from .numerics import DiffArray, ParamStore, no_grad

    pos = rng.uniform(0, 10, (n, 3))
    if kernel == "knn":
        return lambda: knn(pos, pos, 16)
    if kernel == "subsample":
        return lambda: random_subsample(n, 4, 0)
    if kernel == "hierarchy":
        return lambda: build_hierarchy(pos, 2, 16, 4, 0)
    store = ParamStore()
    if kernel == "vlad":
        layer = init_vlad_layer(store, "v", 32, 16, rng)
        feats = DiffArray(rng.normal(size=(n, 32)))

        def run():
            with no_grad():
                vlad_layer(feats, layer)
        return run
    if kernel == "lafa":
        unit = LAFA(store, "u", 16, 32, rng)
        nbr = knn(pos, pos, 16)
        feats = DiffArray(rng.normal(size=(n, 16)))
        cols = DiffArray(rng.uniform(size=(n, 3)))
        p = DiffArray(pos)

        def run():
            with no_grad():
                unit(p, cols, feats, nbr, False)
        return run
    raise UsageError(f"unknown kernel {kernel!r}; choose from {', '.join(BENCH_KERNELS)}")


BENCH_KERNELS = ("knn", "subsample", "hierarchy", "vlad", "lafa")


def bench(kernel: str, sizes: Sequence[int], repeat: int = 5, warmup: int = 1, seed: int = 0) -> list:
    """``(points, median_seconds)`` per size after ``warmup`` untimed calls."""
    if repeat < 5:
        raise UsageError("at least 5 repetitions are required")
    rows = []
    for n in sorted(sizes):
        fn = _bench_setup(kernel, n, np.random.default_rng(seed))
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        rows.append((n, statistics.median(times)))
    return rows


def cmd_bench(args, out) -> int:
    rows = bench(args.kernel, parse_sizes(args.sizes), args.repeat, args.warmup)
    lines = ["kernel,points,median_seconds,repetitions"]
    lines += [f"{args.kernel},{n},{t:.6e},{args.repeat}" for n, t in rows]
    text = "\n".join(lines) + "\n"
    out.write(text)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lafavlad", description="Point cloud segmentation experiments.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic labeled scene")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--points", type=int, default=16384)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--noise", type=float, default=0.01)
    g.add_argument("--color-noise", type=float, default=0.08)
    g.add_argument("--instances", type=int, default=4)
    g.add_argument("--out", default="scene.txt")
    g.set_defaults(func=cmd_gen)

    def config_args(sp):
        sp.add_argument("--config", help="INI run config, applied over --base")
        sp.add_argument("--base", default="full", choices=sorted(BASES))
        sp.add_argument("--data", help="ASCII cloud; overrides the config's data section")

    t = sub.add_parser("train", help="train a model, writing a checkpoint and run log")
    config_args(t)
    t.add_argument("--out-dir", default="run")
    t.add_argument("--epochs", type=int)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    config_args(e)
    e.add_argument("checkpoint")
    e.add_argument("--points", type=int, help="crop size (default: the config's train.points)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--csv", help="also write per-class IoU as CSV")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate ablation presets")
    config_args(a)
    a.add_argument("--presets", help=f"comma-separated ids from {','.join(PRESETS)}")
    a.add_argument("--csv", help="also write the table as CSV")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="time a kernel at several sizes")
    b.add_argument("kernel", choices=BENCH_KERNELS)
    b.add_argument("--sizes", default="1k,10k,100k")
    b.add_argument("--repeat", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--csv")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("a subcommand is required: gen, train, eval, ablate, bench")
        return args.func(args, out)
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING, f"file not found: {exc.filename or exc}"
    except CheckpointError as exc:
        code, msg = EXIT_CHECKPOINT, str(exc)
    except NonFiniteError as exc:
        code, msg = EXIT_NONFINITE, str(exc)
    except ValidationError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except Exception as exc:  # noqa: BLE001 - last-resort one-line report
        code, msg = EXIT_FAIL, f"{type(exc).__name__}: {exc}"
    print(f"error: {msg}".splitlines()[0], file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
