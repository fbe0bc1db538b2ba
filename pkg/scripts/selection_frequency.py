#!/usr/bin/env python3
"""Layer selection frequency and similarity snapshots over one run.

Writes, under --out:
  frequency.json            fleet-wide and per-device selection counts
  frequency.csv             unit,count (fleet-wide), ready for a bar chart
  similarity_roundNNNN.csv  CKA matrix seen by the first participant at each --snapshot round
  grouping_roundNNNN.json   that participant's grouping and selection probabilities
"""

import argparse
import json
from pathlib import Path

from fedpruner.config import ExperimentConfig, OutputOptions, RunConfig, load_config, memory_for
from fedpruner.federation import Federation, layer_frequency_report
from fedpruner.similarity import similarity_to_csv


def main():
    ap = argparse.ArgumentParser(description="selection frequency / similarity snapshots")
    ap.add_argument("--config")
    ap.add_argument("--strategy", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--rounds", type=int, default=None)
    ap.add_argument("--snapshot", type=int, nargs="*", default=[0, 9, 19, 29])
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    if args.config:
        cfg = load_config(args.config)
    else:
        exp = ExperimentConfig()
        cfg = RunConfig(exp, memory_for(exp), OutputOptions())
    overrides = {k: v for k, v in (("strategy", args.strategy), ("seed", args.seed), ("rounds", args.rounds))
                 if v is not None}
    cfg = cfg.with_overrides(**overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snaps = set(args.snapshot)

    def on_round(rec, fed):
        if rec.round not in snaps or not rec.devices:
            return
        dev = rec.devices[0]
        tag = f"round{rec.round:04d}"
        if dev.similarity is not None:
            (out / f"similarity_{tag}.csv").write_text(similarity_to_csv(dev.similarity))
        (out / f"grouping_{tag}.json").write_text(json.dumps(dev.to_json(), indent=2) + "\n")

    fed = Federation(cfg)
    fed.run(on_round)
    report = layer_frequency_report(fed.records, fed.unit_labels())
    (out / "frequency.json").write_text(json.dumps(report, indent=2) + "\n")
    lines = ["unit,count"] + [f"{k},{v}" for k, v in report["fleet"].items()]
    (out / "frequency.csv").write_text("\n".join(lines) + "\n")
    for k, v in report["fleet"].items():
        print(f"{k:>7} {'#' * v} {v}")


if __name__ == "__main__":
    main()
