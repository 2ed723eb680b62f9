"""Command-line pipeline: demos -> references -> keypoints -> policy -> eval.

Every subcommand resolves its arguments, runs, and writes a run.json
echoing the full configuration next to its outputs, so any artifact can
be regenerated byte-for-byte with ``dvk --config <run.json>``.  Outputs
are written atomically; a failed run leaves no partial artifact.

Exit codes: 0 success, 2 validation or I/O error, 1 internal error.

The DVK_THREADS environment variable is accepted and echoed into
run.json, but execution is sequential by design, so artifacts never
depend on it.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._util import atomic_write_text
from .bench import BenchConfig, METHODS, collect_demos, evaluate, make_agent, run_benchmark
from .errors import BadConfig, DvkError
from .formats import (
    GRID_SUFFIX,
    read_demos,
    read_grid,
    read_references,
    write_references,
)
from .keypoints import extract_keypoints, write_overlay
from .policy import TrainConfig, load_policy, save_policy, train
from .references import InitConfig, init_references
from .world import CATALOG, DEFAULT_SIGMA, World


def _write_run_json(out_dir: Path, command: str, args: dict) -> None:
    payload = {
        "tool": "dvk",
        "version": __version__,
        "command": command,
        "args": args,
        "threads": os.environ.get("DVK_THREADS", "1"),
    }
    atomic_write_text(out_dir / "run.json", json.dumps(payload, indent=2) + "\n")


def _parse_objects(spec: str) -> list:
    names = [s.strip() for s in spec.split(",") if s.strip()]
    if not names:
        raise BadConfig("no object classes given")
    unknown = [n for n in names if n not in CATALOG]
    if unknown:
        raise BadConfig(f"unknown object classes {unknown}; known: {sorted(CATALOG)}")
    return names


def _parse_hidden(spec: str) -> tuple:
    try:
        dims = tuple(int(x) for x in spec.split(",") if x.strip())
    except ValueError as exc:
        raise BadConfig(f"bad hidden spec {spec!r}") from exc
    if not dims or any(d < 1 for d in dims):
        raise BadConfig(f"bad hidden spec {spec!r}")
    return dims


def cmd_gen_demos(args: dict) -> int:
    world = World(sigma=args["sigma"], seed=args["world_seed"])
    out = Path(args["out"])
    dataset = collect_demos(
        world,
        _parse_objects(args["objects"]),
        per_object=args["per_object"],
        seed=args["seed"],
        out_dir=out,
        overwrite=args["overwrite"],
    )
    _write_run_json(out, "gen-demos", args)
    print(f"wrote {dataset.num_demos} demos ({dataset.num_steps} steps) to {out}")
    return 0


def cmd_init_refs(args: dict) -> int:
    dataset = read_demos(args["demos"])
    out = Path(args["out"])
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {}
    refs = init_references(
        dataset,
        InitConfig(
            clusters=args["clusters"],
            keep=args["keep"],
            tau=args["tau"],
            seed=args["seed"],
            stride=args["stride"],
            max_iter=args["max_iter"],
            tol=args["tol"],
        ),
        report=report,
    )
    write_references(out / "refs.dvkref", refs)
    atomic_write_text(out / "clusters.json", json.dumps(report, indent=2) + "\n")
    _write_run_json(out, "init-refs", args)
    if refs.all_votes_zero:
        print("warning: no cluster got any vote; kept centroids by tie-break order",
              file=sys.stderr)
    print(f"kept {refs.keep}/{refs.config.clusters} references -> {out / 'refs.dvkref'}")
    return 0


def _iter_grid_paths(paths) -> list:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(p.rglob(f"*{GRID_SUFFIX}")))
        else:
            found.append(p)
    return found


def cmd_extract(args: dict) -> int:
    refs = read_references(args["refs"])
    paths = _iter_grid_paths(args["grids"])
    if not paths:
        raise BadConfig("no grid files found")
    out = Path(args["out"]) if args["out"] else None
    lines = []
    for path in paths:
        grid = read_grid(path)
        kv = extract_keypoints(grid, refs)
        record = {
            "frame": grid.frame_id,
            "points": [
                {"row": p.row, "col": p.col, "u": p.u, "v": p.v,
                 "sim": p.similarity}
                for p in kv.points
            ],
        }
        lines.append(json.dumps(record))
        if out and args["overlay"]:
            write_overlay(out / "overlays" / f"{grid.frame_id}.ppm", grid, kv)
    text = "".join(l + "\n" for l in lines)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "keypoints.jsonl", text)
        _write_run_json(out, "extract", {**args, "grids": [str(p) for p in paths]})
        print(f"extracted keypoints for {len(paths)} frames -> {out / 'keypoints.jsonl'}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args: dict) -> int:
    dataset = read_demos(args["demos"])
    refs = read_references(args["refs"])
    out = Path(args["out"])
    out.mkdir(parents=True, exist_ok=True)
    config = TrainConfig(
        epochs=args["epochs"],
        batch_size=args["batch_size"],
        learning_rate=args["learning_rate"],
        seed=args["seed"],
        eval_every=args["eval_every"],
        optimizer=args["optimizer"],
        hidden=_parse_hidden(args["hidden"]),
        activation=args["activation"],
    )
    report = train(dataset, refs, config)
    save_policy(out / "policy.dvkpol", report.policy)
    atomic_write_text(
        out / "train.json",
        json.dumps(
            {
                "loss_curve": report.loss_curve,
                "best_epoch": report.best_epoch,
                "final_loss": report.loss_curve[-1],
            },
            indent=2,
        )
        + "\n",
    )
    _write_run_json(out, "train", args)
    print(
        f"trained {args['epochs']} epochs on {dataset.num_steps} steps, "
        f"best epoch {report.best_epoch}, -> {out / 'policy.dvkpol'}"
    )
    return 0


def cmd_eval(args: dict) -> int:
    world = World(sigma=args["sigma"], seed=args["world_seed"])
    objects = _parse_objects(args["objects"])
    if args["method"] == "expert":
        agent = None
    else:
        if not args["policy"] or not args["refs"]:
            raise BadConfig(f"--policy and --refs are required for method {args['method']!r}")
        policy = load_policy(args["policy"])
        refs = read_references(args["refs"]) if args["refs"] else None
        agent = make_agent(args["method"], policy, refs)
    rates = {
        cid: evaluate(world, cid, agent, args["episodes"], seed=args["seed"])
        for cid in objects
    }
    result = {
        "method": args["method"],
        "episodes": args["episodes"],
        "success": rates,
        "mean": float(np.mean(list(rates.values()))),
    }
    if args["out"]:
        out = Path(args["out"])
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "eval.json", json.dumps(result, indent=2) + "\n")
        _write_run_json(out, "eval", args)
    print(json.dumps(result, indent=2))
    return 0


def cmd_bench(args: dict) -> int:
    config = BenchConfig(
        suite=args["suite"],
        methods=tuple(m.strip() for m in args["methods"].split(",") if m.strip()),
        seeds=tuple(range(args["seeds"])),
        episodes=args["episodes"],
        demos_per_object=args["demos_per_object"],
        world_seed=args["world_seed"],
        sigma=args["sigma"],
        clusters=args["clusters"],
        keep=args["keep"],
        tau=args["tau"],
        stride=args["stride"],
        epochs=args["epochs"],
        batch_size=args["batch_size"],
        learning_rate=args["learning_rate"],
        hidden=_parse_hidden(args["hidden"]),
        activation=args["activation"],
        optimizer=args["optimizer"],
        voted_refs_only=not args["all_refs"],
        rollout_select=not args["no_rollout_select"],
        hook_episodes=args["hook_episodes"],
        workdir=args["workdir"],
        keep_workdir=bool(args["workdir"]),
    )
    report = run_benchmark(config)
    out = Path(args["out"])
    if out.suffix == ".json":
        report_path = out
        run_dir = out.parent
    else:
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / "report.json"
        run_dir = out
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(report_path, json.dumps(report, indent=2) + "\n")
    _write_run_json(run_dir, "bench", args)
    for method, stats in report["methods"].items():
        print(
            f"{method}: train {stats['train_mean']:.3f} +/- {stats['train_std']:.3f}, "
            f"ood {stats['ood_mean']:.3f} +/- {stats['ood_std']:.3f}"
        )
    print(f"report -> {report_path}")
    return 0


_HANDLERS = {
    "gen-demos": cmd_gen_demos,
    "init-refs": cmd_init_refs,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="dvk",
        description="Semantic keypoint pipeline over patch-embedding grids.",
    )
    parser.add_argument("--version", action="version", version=f"dvk {__version__}")
    parser.add_argument(
        "--config",
        metavar="RUN_JSON",
        help="replay a recorded run.json instead of giving a subcommand",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-demos", help="roll the scripted expert into a demo dataset",
                       formatter_class=fmt)
    p.add_argument("--objects", required=True, help="comma list of object classes")
    p.add_argument("--per-object", type=int, default=60, dest="per_object")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--world-seed", type=int, default=7, dest="world_seed")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--out", required=True, help="dataset directory to create")

    p = sub.add_parser("init-refs", help="cluster demo features and keep top-voted centroids",
                       formatter_class=fmt)
    p.add_argument("--demos", required=True)
    p.add_argument("--clusters", type=int, default=100)
    p.add_argument("--keep", type=int, default=50)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=100, dest="max_iter")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("extract", help="match references to grid frames",
                       formatter_class=fmt)
    p.add_argument("--refs", required=True)
    p.add_argument("grids", nargs="+", help="grid files or directories")
    p.add_argument("--overlay", action="store_true", help="also write PPM overlays")
    p.add_argument("--out", default=None, help="output directory (stdout when omitted)")

    p = sub.add_parser("train", help="behaviour-clone a policy on keypoint inputs",
                       formatter_class=fmt)
    p.add_argument("--demos", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=64, dest="batch_size")
    p.add_argument("--lr", type=float, default=1e-3, dest="learning_rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=20, dest="eval_every")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--hidden", default="128,128")
    p.add_argument("--activation", choices=("relu", "tanh"), default="relu")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="success rate of a policy (or the expert) in the world",
                       formatter_class=fmt)
    p.add_argument("--policy", default=None)
    p.add_argument("--refs", default=None)
    p.add_argument("--method", choices=METHODS, default="dvk")
    p.add_argument("--objects", required=True)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--world-seed", type=int, default=7, dest="world_seed")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--out", default=None, help="output directory (stdout only when omitted)")

    p = sub.add_parser("bench", help="run a full benchmark suite",
                       formatter_class=fmt)
    p.add_argument("--suite", choices=("intra", "inter"), default="inter")
    p.add_argument("--methods", default="dvk,pooled")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (0..n-1)")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--demos-per-object", type=int, default=60, dest="demos_per_object")
    p.add_argument("--world-seed", type=int, default=7, dest="world_seed")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--clusters", type=int, default=100)
    p.add_argument("--keep", type=int, default=50)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--epochs", type=int, default=600)
    p.add_argument("--batch", type=int, default=64, dest="batch_size")
    p.add_argument("--lr", type=float, default=0.03, dest="learning_rate")
    p.add_argument("--hidden", default="16,16")
    p.add_argument("--activation", choices=("relu", "tanh"), default="tanh")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="sgd")
    p.add_argument("--all-refs", action="store_true",
                   help="feed the policy every kept reference,vote or not")
    p.add_argument("--no-rollout-select", action="store_true",
                   help="checkpoint by lowest training loss instead of rollouts")
    p.add_argument("--hook-episodes", type=int, default=32, dest="hook_episodes")
    p.add_argument("--workdir", default=None, help="keep demo datasets here")
    p.add_argument("--out", required=True, help="report path (.json) or directory")
    return parser


def _args_dict(ns: argparse.Namespace) -> dict:
    skip = {"command", "config"}
    return {k: v for k, v in vars(ns).items() if k not in skip}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        if ns.config:
            if ns.command:
                raise BadConfig("--config replaces the subcommand; give one or the other")
            recorded = json.loads(Path(ns.config).read_text(encoding="utf-8"))
            command = recorded.get("command")
            if command not in _HANDLERS or not isinstance(recorded.get("args"), dict):
                raise BadConfig(f"{ns.config}: not a dvk run.json")
            return _HANDLERS[command](recorded["args"])
        if not ns.command:
            parser.print_help()
            return 2
        return _HANDLERS[ns.command](_args_dict(ns))
    except DvkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
