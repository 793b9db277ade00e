"""Command-line entry point: gen, train, eval, bench-knn, inspect.

Exit codes: 0 success, 2 configuration/usage error, 3 data error.  Every
error is printed on one line prefixed with ``ERROR <code>:``.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import io
from .adapter import adapter_forward
from .experiment import parse_sweep, test_scenes, train_scenes
from .learner import evaluate_dataset, fit, init_state, predict
from .neighbors import GridIndex, bench_knn, format_bench
from .weather import WEATHER_KINDS, generate_scene

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fail(code: int, msg: str) -> int:
    print(f"ERROR {code}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def _settings(args, cfg: dict | None = None) -> dict:
    if cfg is None:
        cfg = C.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = C.set_value(cfg, "run", "seed", args.seed)
    if getattr(args, "severity", None) is not None:
        if not 0.0 <= args.severity <= 1.0:
            raise C.ConfigError("--severity must lie in [0, 1]")
        cfg = C.set_value(cfg, "data", "severity", args.severity)
    if getattr(args, "weather", None):
        cfg = C.set_value(cfg, "data", "weather", args.weather)
        C.weather_kinds(cfg)
    return cfg


def _run_id(cfg: dict, command: str) -> str:
    return hashlib.sha256(f"{command}:{C.config_hash(cfg)}".encode()).hexdigest()[:12]


def _epoch_summary(epoch: int, log: list[dict]) -> dict:
    keys = ("loss", "before", "after", "ent", "reward", "gt_ratio", "td_loss", "n_dropped")
    out = {"epoch": epoch, "frames": len(log)}
    for k in keys:
        vals = [r[k] for r in log if r.get(k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    out["actions"] = [[r.get("k"), r.get("b")] for r in log]
    return out


def _load_train(path):
    clouds, manifest = io.load_dataset(path)
    if manifest.get("corrupted") or any(c.corrupted for c in clouds):
        raise io.DataError(f"{path} holds weather-corrupted scans; training accepts clean data only")
    if any(c.labels is None for c in clouds):
        raise io.DataError(f"{path} has scans without labels")
    if not clouds:
        raise io.DataError(f"{path} holds no scans")
    return clouds


def _load_eval(path):
    clouds, _ = io.load_dataset(path)
    if not clouds or any(c.labels is None for c in clouds):
        raise io.DataError(f"{path} needs labelled scans for evaluation")
    return clouds


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = _settings(args)
    bench = C.benchmark_spec(cfg)
    out = Path(args.out)
    meta = {"config_hash": C.config_hash(cfg), "scene_seed": bench.scene.seed}
    if args.split in ("train", "both"):
        io.save_dataset(train_scenes(bench), out / "train" if args.split == "both" else out,
                        {**meta, "split": "train"})
    if args.split in ("test", "both"):
        meta.update(split="test", weather=list(bench.weather), severity=bench.severity)
        io.save_dataset(test_scenes(bench), out / "test" if args.split == "both" else out, meta)
    print(f"wrote {args.split} scenes to {out}")
    return EXIT_OK


def _train_one(cfg: dict, tc, train, out: Path, test=None) -> dict:
    writer = io.MetricsWriter(out / "metrics.jsonl", _run_id(cfg, "train"), C.config_hash(cfg))
    writer.write("config", config=cfg, train_frames=len(train))

    def on_epoch(state, log):
        writer.write("epoch", **_epoch_summary(state.epoch, log))

    state, tc_eff, _ = fit(train, tc, on_epoch=on_epoch)
    io.save_checkpoint(state, out / "checkpoint",
                       {"config_hash": C.config_hash(cfg), "seed": tc.seed, "mode": tc.mode,
                        "class_weights": list(tc_eff.loss.w_c), "epochs": state.epoch, "steps": state.step})
    io.atomic_write_text(out / "config.ini", C.dump_config(cfg))
    result = {}
    if test is not None:
        rep = evaluate_dataset(test, state, tc_eff)
        writer.write("eval", W=2 * tc.half_w, K=tc.K, report=rep.to_dict())
        result["miou"] = rep.miou
    return result


def cmd_train(args) -> int:
    cfg = _settings(args)
    tc = C.train_config(cfg)
    train = _load_train(args.data)
    test = _load_eval(args.test) if args.test else None
    out = Path(args.out)
    if args.sweep:
        try:
            cells = parse_sweep(args.sweep)
        except ValueError as exc:
            raise C.ConfigError(str(exc)) from exc
        rows = []
        for w, k in cells:
            cell_cfg = C.set_value(C.set_value(cfg, "knn", "window", w), "knn", "k", k)
            res = _train_one(cell_cfg, C.train_config(cell_cfg), train, out / f"W{w}_K{k}", test)
            rows.append({"W": w, "K": k, "miou": res.get("miou")})
            score = "n/a" if res.get("miou") is None else f"{100 * res['miou']:.2f}"
            print(f"W={w} K={k} mIoU={score}")
        writer = io.MetricsWriter(out / "sweep.jsonl", _run_id(cfg, "sweep"), C.config_hash(cfg))
        for r in rows:
            writer.write("sweep", **r)
        return EXIT_OK
    res = _train_one(cfg, tc, train, out, test)
    print(f"trained {tc.epochs} epochs on {len(train)} scans -> {out}"
          + (f"; test mIoU {100 * res['miou']:.2f}" if "miou" in res else ""))
    return EXIT_OK


def _restore(cfg: dict, ckpt: Path):
    tc = C.train_config(cfg)
    state = init_state(tc)
    manifest = io.load_checkpoint(ckpt, state)
    w = manifest.get("class_weights")
    if w:
        tc = replace(tc, loss=replace(tc.loss, w_c=tuple(w)))
    return state, tc


def cmd_eval(args) -> int:
    run = Path(args.checkpoint)
    cfg = _settings(args, C.load_config(args.config if args.config else run / "config.ini"))
    ckpt = run / "checkpoint" if (run / "checkpoint").is_dir() else run
    state, tc = _restore(cfg, ckpt)
    if args.data:
        clouds = _load_eval(args.data)
    else:
        clouds = test_scenes(C.benchmark_spec(cfg))
    rep = evaluate_dataset(clouds, state, tc)
    out = Path(args.out) if args.out else run / "eval.jsonl"
    writer = io.MetricsWriter(out, _run_id(cfg, "eval"), C.config_hash(cfg))
    writer.write("eval", scans=len(clouds), report=rep.to_dict())
    print(f"mIoU {100 * rep.miou:.2f} over {len(clouds)} scans")
    return EXIT_OK


def cmd_bench_knn(args) -> int:
    cfg = _settings(args)
    if args.data:
        clouds, _ = io.load_dataset(args.data)
        if not clouds:
            raise io.DataError(f"{args.data} holds no scans")
        cloud = clouds[0]
    else:
        cloud = generate_scene(C.scene_spec(cfg, seed=cfg["data"]["scene_seed"]), frame_id=0)
    index = GridIndex.build(cloud, C.grid_spec(cfg))
    if args.sweep:
        try:
            cells = parse_sweep(args.sweep)
        except ValueError as exc:
            raise C.ConfigError(str(exc)) from exc
    else:
        cells = [(cfg["knn"]["window"], cfg["knn"]["k"])]
    reports = []
    for w, k in cells:
        rep = bench_knn(index, k, C.half_width(w), cfg["knn"]["half_h"])
        rep["W"] = w
        reports.append(rep)
        print(f"W={w} " + format_bench(rep))
    if args.out:
        writer = io.MetricsWriter(args.out, _run_id(cfg, "bench-knn"), C.config_hash(cfg))
        for rep in reports:
            writer.write("bench_knn", **rep)
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _settings(args)
    clouds, _ = io.load_dataset(args.data)
    by_id = {str(c.frame_id): c for c in clouds}
    if args.frame is None:
        cloud = clouds[0]
    elif str(args.frame) in by_id:
        cloud = by_id[str(args.frame)]
    else:
        raise io.DataError(f"frame {args.frame} not in {args.data}")
    if args.checkpoint:
        run = Path(args.checkpoint)
        state, tc = _restore(cfg, run / "checkpoint" if (run / "checkpoint").is_dir() else run)
    else:
        tc = C.train_config(cfg)
        state = init_state(tc)
    index = GridIndex.build(cloud, tc.grid)
    cues = adapter_forward(cloud, index, state.adapter, tc.K, (tc.half_w, tc.half_h), tc.voxel_size)
    scalars = {"intensity": cloud.intensity}
    if cloud.labels is not None:
        scalars["label"] = cloud.labels
    scalars.update(s=cues.s, d1=cues.d1, d2=cues.d2, pred=predict(cloud, state, tc))
    io.write_ply(cloud, scalars, args.out)
    print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geodrop", description="Geometry-guided point drop for weather-robust LiDAR segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="INI configuration file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--out", required=out_required, help="output path")

    def weather(sp):
        sp.add_argument("--weather", help=f"comma-separated kinds from {','.join(WEATHER_KINDS)}")
        sp.add_argument("--severity", type=float, help="weather severity in [0, 1]")

    g = sub.add_parser("gen", help="write synthetic scenes")
    common(g)
    weather(g)
    g.add_argument("--split", choices=("train", "test", "both"), default="both")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train on clean scans (corrupted data is refused)")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory of clean training scans")
    t.add_argument("--test", help="optional held-out dataset scored after training")
    t.add_argument("--sweep", help='grid over window and neighbours, e.g. "W=256,512 K=8,16"')
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a trained run on weather-corrupted held-out scans")
    common(e, out_required=False)
    weather(e)
    e.add_argument("--checkpoint", required=True, help="run directory written by train")
    e.add_argument("--data", help="dataset directory; synthetic held-out scenes when omitted")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-knn", help="distance-evaluation cost of windowed versus global search")
    common(b, out_required=False)
    b.add_argument("--data", help="dataset directory (first scan is used)")
    b.add_argument("--sweep", help='e.g. "W=256,512 K=8,16"')
    b.set_defaults(func=cmd_bench_knn)

    i = sub.add_parser("inspect", help="export one scan with cues and predictions as PLY")
    common(i)
    i.add_argument("--data", required=True)
    i.add_argument("--frame", help="frame id (first scan when omitted)")
    i.add_argument("--checkpoint", help="run directory; untrained weights when omitted")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_CONFIG, exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except C.ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (io.DataError, FileNotFoundError, NotADirectoryError) as exc:
        return _fail(EXIT_DATA, exc)
    except ValueError as exc:
        return _fail(EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
