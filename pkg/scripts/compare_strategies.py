#!/usr/bin/env python3
"""Matched-budget strategy comparison over several seeds.

Every device gets the same budget (``--units`` whole layers, default N/2),
so strategies differ only in which layers they pick. Writes the same
comparison.json / comparison.txt as ``fedpruner compare``.

    python3 scripts/compare_strategies.py --out runs/cmp --seeds 0 1 2 3 4
"""

import argparse
import json
from pathlib import Path

from fedpruner.cli import compare_matrix, format_table
from fedpruner.config import ExperimentConfig, OutputOptions, RunConfig, load_config, memory_for

DEFAULT_STRATEGIES = ["fedpruner", "random", "middle", "norm", "rm", "bi", "deep"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="base JSON config (defaults used if omitted)")
    ap.add_argument("--strategies", nargs="+", default=DEFAULT_STRATEGIES)
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    ap.add_argument("--units", type=float, help="per-device budget in whole layers (default N/2)")
    ap.add_argument("--rounds", type=int)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    if args.config:
        cfg = load_config(args.config)
    else:
        exp = ExperimentConfig()
        cfg = RunConfig(exp, memory_for(exp), OutputOptions(save_checkpoint=False))
    units = args.units if args.units is not None else cfg.experiment.model.n_layers / 2
    cfg = cfg.with_overrides(budget_units=units)
    if args.rounds is not None:
        cfg = cfg.with_overrides(rounds=args.rounds)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = compare_matrix(cfg, args.strategies, args.seeds, out, jobs=args.jobs)
    (out / "comparison.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    text = format_table(result)
    (out / "comparison.txt").write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
