"""Command-line front end: ``fedpruner run | inspect | compare``.

Exit codes: 0 success, 2 invalid invocation or config, 3 runtime failure.
Every file a command writes goes under its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .federation import Federation, with_strategy
from .similarity import similarity_to_csv

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
INSPECT_WHAT = ("similarity", "grouping", "plan", "frequency")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _fail(code: int, msg: str) -> int:
    print(f"fedpruner: {msg}", file=sys.stderr)
    return code


def _load(path) -> RunConfig:
    try:
        return load_config(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc


def _meta(fed: Federation) -> dict:
    return {
        "config": fed.run_cfg.to_json(),
        "round": len(fed.records),
        "frequency": fed.summary(0.0, 1.0)["frequency"],
    }


def execute_run(cfg: RunConfig, out: Path, checkpoints: bool = True) -> tuple[dict, list[str]]:
    """Run one experiment, streaming metrics into ``out``; returns (summary, files written)."""
    out.mkdir(parents=True, exist_ok=True)
    files = ["metrics.jsonl", "summary.json"]
    fed = Federation(cfg)
    every = cfg.output.checkpoint_every
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics:

        def on_round(rec, f):
            metrics.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
            metrics.flush()
            done = rec.round + 1
            if checkpoints and every and done % every == 0 and done < cfg.experiment.rounds:
                name = f"checkpoint_round{done:04d}.ckpt"
                checkpoint.save(out / name, f.server.model, _meta(f))
                files.append(name)

        summary = fed.run(on_round)
    (out / "summary.json").write_text(_dump(summary), encoding="utf-8")
    if checkpoints:
        checkpoint.save(out / "checkpoint.ckpt", fed.server.model, _meta(fed))
        files.append("checkpoint.ckpt")
    return summary, files


def cmd_run(args) -> int:
    try:
        cfg = _load(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        if args.workers is not None:
            cfg = cfg.with_overrides(workers=args.workers)
    except (ConfigError, ValueError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    out = Path(args.out)
    try:
        summary, files = execute_run(cfg, out, checkpoints=cfg.output.save_checkpoint)
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 3
        return _fail(EXIT_RUNTIME, f"run failed: {type(exc).__name__}: {exc}")
    manifest = {"command": "run", "config": cfg.to_json(), "files": sorted(files + ["manifest.json"])}
    (out / "manifest.json").write_text(_dump(manifest), encoding="utf-8")
    print(f"final eval loss {summary['final_eval_loss']:.6f} "
          f"(perplexity {summary['final_eval_perplexity']:.4f}) after {summary['rounds']} rounds")
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        model, meta = checkpoint.load(args.checkpoint)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_USAGE, f"cannot read checkpoint: {exc}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "frequency":
        if "frequency" not in meta:
            return _fail(EXIT_RUNTIME, "checkpoint carries no frequency report")
        (out / "frequency.json").write_text(_dump(meta["frequency"]), encoding="utf-8")
        return EXIT_OK
    try:
        fed = Federation(parse_config(meta["config"]))
        device = fed.eligible[0] if args.device is None else args.device
        rnd = int(meta.get("round", 0))
        view = fed.preview(model, device, rnd, units=args.k)
    except KeyError:
        return _fail(EXIT_RUNTIME, "checkpoint carries no experiment config")
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_RUNTIME, f"inspect failed: {type(exc).__name__}: {exc}")
    labels = fed.unit_labels()
    if args.what == "similarity":
        (out / "similarity.csv").write_text(similarity_to_csv(view["similarity"]), encoding="utf-8")
    elif args.what == "grouping":
        g = view["grouping"]
        doc = {"device": device, "round": rnd, "k": g.k, "groups": [list(x) for x in g.groups], "labels": labels}
        (out / "grouping.json").write_text(_dump(doc), encoding="utf-8")
    else:
        sel = view["selection"]
        doc = {
            "device": device,
            "round": rnd,
            "strategy": fed.cfg.strategy,
            "k": view["units"],
            "plan": view["plan"].labels(),
            "probabilities": [list(g.probabilities) for g in sel.groups] if sel else None,
        }
        (out / "plan.json").write_text(_dump(doc), encoding="utf-8")
    return EXIT_OK


def _split(values) -> list[str]:
    return [v for item in values for v in str(item).split(",") if v]


def _stats(xs):
    if not xs:
        return None, None
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def compare_matrix(cfg: RunConfig, strategies: list[str], seeds: list[int], out: Path, jobs: int = 1) -> dict:
    cells_in = [(s, seed) for s in strategies for seed in seeds]

    def one(cell):
        strategy, seed = cell
        row = {"strategy": strategy, "seed": seed, "initial_eval_loss": None,
               "final_eval_loss": None, "final_eval_perplexity": None, "error": None}
        try:
            summary, _ = execute_run(with_strategy(cfg, strategy, seed), out / "runs" / f"{strategy}-seed{seed}",
                                     checkpoints=False)
            row.update(initial_eval_loss=summary["initial_eval_loss"], final_eval_loss=summary["final_eval_loss"],
                       final_eval_perplexity=summary["final_eval_perplexity"])
        except Exception as exc:  # noqa: BLE001 - recorded per cell, matrix continues
            row["error"] = f"{type(exc).__name__}: {exc}"
        return row

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(one, cells_in))
    else:
        cells = [one(c) for c in cells_in]
    table = []
    for strategy in strategies:
        ok = [c for c in cells if c["strategy"] == strategy and c["error"] is None]
        ml, sl = _stats([c["final_eval_loss"] for c in ok])
        mp, sp = _stats([c["final_eval_perplexity"] for c in ok])
        table.append({"strategy": strategy, "runs": len(ok), "failures": len(seeds) - len(ok),
                      "mean_loss": ml, "std_loss": sl, "mean_perplexity": mp, "std_perplexity": sp})
    return {"strategies": strategies, "seeds": seeds, "cells": cells, "table": table}


def format_table(result: dict) -> str:
    def pm(m, s):
        return "n/a" if m is None else f"{m:.6f} ± {s:.6f}"

    rows = [("strategy", "runs", "final loss", "final perplexity", "failures")]
    for r in result["table"]:
        rows.append((r["strategy"], str(r["runs"]), pm(r["mean_loss"], r["std_loss"]),
                     pm(r["mean_perplexity"], r["std_perplexity"]), str(r["failures"])))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_compare(args, parser) -> int:
    strategies = _split(args.strategies)
    if len(strategies) < 2:
        parser.error("compare needs at least two strategies")
    try:
        seeds = [int(s) for s in _split(args.seeds)]
        cfg = _load(args.config)
        for s in strategies:
            with_strategy(cfg, s)
    except (ConfigError, ValueError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = compare_matrix(cfg, strategies, seeds, out, jobs=args.jobs)
    text = format_table(result)
    (out / "comparison.json").write_text(_dump(result), encoding="utf-8")
    (out / "comparison.txt").write_text(text, encoding="utf-8")
    manifest = {"command": "compare", "config": cfg.to_json(),
                "files": sorted(["comparison.json", "comparison.txt", "manifest.json"]
                                + [f"runs/{c['strategy']}-seed{c['seed']}" for c in result["cells"]])}
    (out / "manifest.json").write_text(_dump(manifest), encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpruner", description="Desk-scale federated LoRA pruning simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="threads for parallel device training")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("inspect", help="export similarity, grouping, plan or frequency from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--what", required=True, choices=INSPECT_WHAT)
    p.add_argument("--device", type=int, help="device id (default: first eligible)")
    p.add_argument("--k", type=int, help="override the device's unit count")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("compare", help="run a strategy x seed matrix")
    p.add_argument("config")
    p.add_argument("--strategies", nargs="+", required=True, help="space or comma separated")
    p.add_argument("--seeds", nargs="+", default=["0"], help="space or comma separated")
    p.add_argument("--jobs", type=int, default=1, help="cells run concurrently")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "inspect":
        return cmd_inspect(args)
    return cmd_compare(args, parser)


if __name__ == "__main__":
    sys.exit(main())
