"""Command-line entry point: ``glam {train,eval,ablate,plot,scores,config}``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

from .config import ABLATIONS, PRESETS, apply_overrides, dump_config, load_config, make_config
from .training import (
    Trainer,
    TrainingAborted,
    aggregate_scores,
    evaluate,
    human_normalized,
    latest_checkpoint,
    load_reference,
)
from .training.plots import emit_plots

EXIT_ERROR = 1
EXIT_ABORTED = 3


def data_dir() -> Path:
    return Path(os.environ.get("GLAM_DATA_DIR", "glam_data"))


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (overrides preset and ablation)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: default)")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), help="ablation cell (default: full)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value by dotted path, e.g. --set agent.gamma=0.99")


def _explicit_config(args) -> bool:
    return bool(args.config or args.preset or args.ablation or args.overrides)


def _build_config(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = make_config(args.preset or "default", args.ablation or "full")
    return apply_overrides(cfg, args.overrides)


def _resolve_checkpoint(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        found = latest_checkpoint(p / "checkpoints" if (p / "checkpoints").is_dir() else p)
        if found is None:
            raise FileNotFoundError(f"no checkpoints under {p}")
        return found
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found")
    return p


def _finite_summary(rec: dict | None) -> bool:
    if not rec:
        return True
    return all(math.isfinite(v) for v in rec.values() if isinstance(v, float))


def cmd_train(args) -> dict:
    cfg = _build_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else data_dir() / "runs" / f"{cfg.env.name}-{cfg.hash()}-s{cfg.train.seed}"
    if args.resume:
        ckpt = _resolve_checkpoint(run_dir if args.resume == "latest" else args.resume)
        # without explicit config flags the checkpoint's own config is used
        tr = Trainer.from_checkpoint(ckpt, cfg if _explicit_config(args) else None, force=args.force,
                                     run_dir=run_dir)
    else:
        tr = Trainer(cfg, run_dir)
    counters = tr.run(args.steps)
    return {"run_dir": str(run_dir), "config_hash": tr.cfg.hash(), **vars(counters),
            "last_metrics": getattr(tr, "last_record", None)}


def cmd_eval(args) -> dict:
    ckpt = _resolve_checkpoint(args.checkpoint)
    tr = Trainer.from_checkpoint(ckpt, log_episodes=False)
    res = evaluate(tr, args.episodes, greedy=True if args.greedy else None, env_name=args.env)
    return {"checkpoint": str(ckpt), "mean": res.mean, "scores": res.scores}


def cmd_ablate(args) -> dict:
    cells = args.cells or list(ABLATIONS)
    out = Path(args.out) if args.out else data_dir() / "ablations"
    results = {}
    for cell in cells:
        for seed in range(args.seeds):
            cfg = apply_overrides(make_config(args.preset, cell), args.overrides + [f"train.seed={seed}"])
            tr = Trainer(cfg, out / cell / f"seed{seed}")
            tr.run(args.steps)
            rec = getattr(tr, "last_record", None)
            results[f"{cell}/seed{seed}"] = {"env_steps": tr.counters.env_step,
                                             "wm_updates": tr.counters.wm_updates,
                                             "finite": _finite_summary(rec),
                                             "wm_loss_total": None if rec is None else rec["wm_loss_total"]}
    return {"out": str(out), "results": results}


def cmd_plot(args) -> dict:
    paths = emit_plots(args.metrics, args.out, tuple(args.keys))
    return {"plots": [str(p) for p in paths]}


def cmd_scores(args) -> dict:
    ref = load_reference(args.reference)
    scores: dict[str, float] = {}
    if args.file:
        with open(args.file) as fh:
            if args.file.endswith(".json"):
                scores = {k: float(v) for k, v in json.load(fh).items()}
            else:
                scores = {row["game"]: float(row["score"]) for row in csv.DictReader(fh)}
    for item in args.score:
        game, _, val = item.rpartition("=")
        if not game:
            raise ValueError(f"--score expects GAME=VALUE, got {item!r}")
        scores[game] = float(val)
    if args.random is not None or args.human is not None:
        if args.random is None or args.human is None or len(scores) != 1:
            raise ValueError("--random/--human need exactly one --score")
        (game, s), = scores.items()
        return {"game": game, "normalized": human_normalized(s, args.random, args.human)}
    mean, med, per_game = aggregate_scores(scores, ref)
    return {"mean": mean, "median": med, "per_game": per_game}


def cmd_config(args) -> str:
    return dump_config(_build_config(args))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glam", description="Train and evaluate the GLAM world model on toy pixel games.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a world model and agent")
    _add_config_args(p)
    p.add_argument("--run-dir", help="output directory (default: $GLAM_DATA_DIR/runs/<env>-<hash>-s<seed>)")
    p.add_argument("--steps", type=int, help="env steps to reach (default: run.total_steps)")
    p.add_argument("--resume", help="checkpoint path, or 'latest' in the run directory")
    p.add_argument("--force", action="store_true", help="resume even if the config hash differs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint", help="checkpoint file or run directory (latest checkpoint)")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--greedy", action="store_true", help="argmax actions and latents")
    p.add_argument("--env", help="expected environment name; mismatch is an error")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a grid of ablation presets")
    p.add_argument("--cells", nargs="*", choices=sorted(ABLATIONS))
    p.add_argument("--preset", default="smoke", choices=sorted(PRESETS))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render training curves from metrics files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", default="plots")
    p.add_argument("--keys", nargs="+", default=["mean_episode_return", "wm_loss_total"])
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("scores", help="human-normalized scores and their mean/median")
    p.add_argument("--score", action="append", default=[], metavar="GAME=VALUE")
    p.add_argument("--file", help="CSV with game,score columns or a JSON object")
    p.add_argument("--reference", help="CSV with game,random,human columns (default: bundled table)")
    p.add_argument("--random", type=float, help="random reference for a single ad-hoc score")
    p.add_argument("--human", type=float, help="human reference for a single ad-hoc score")
    p.set_defaults(func=cmd_scores)

    p = sub.add_parser("config", help="configuration utilities")
    csub = p.add_subparsers(dest="action", required=True)
    d = csub.add_parser("dump", help="print the full resolved config as YAML")
    _add_config_args(d)
    d.set_defaults(func=cmd_config)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except TrainingAborted as exc:
        print(json.dumps({"error": "TrainingAborted", "message": str(exc), "diagnostic": exc.diagnostic},
                         default=str), file=sys.stderr)
        return EXIT_ABORTED
    except Exception as exc:  # every other failure is reported as one JSON line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR
    if isinstance(result, str):
        sys.stdout.write(result)
    else:
        print(json.dumps(result, indent=1, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
