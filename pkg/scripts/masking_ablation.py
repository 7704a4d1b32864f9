"""Dev MTWV as a function of the transition-masking width on the synthetic benchmark."""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from gcnstd.experiments import BenchmarkConfig, masking_ablation
from gcnstd.synth import gen_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-o", "--out", type=Path, default=Path("runs/masking_ablation.json"))
    ap.add_argument("--widths", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = BenchmarkConfig()
    if args.steps is not None:
        cfg = replace(cfg, hyper=replace(cfg.hyper, steps=args.steps))
    rows = masking_ablation(cfg, args.widths, gen_corpus(cfg.synth))
    table = {f"+-{n}": {**res.summary(), "train_seconds": res.seconds["train"]} for n, res in rows.items()}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    print(f"{'masking':>8s} {'dev MTWV':>9s} {'held-out':>9s} {'in-lex':>7s}")
    for n, res in rows.items():
        print(f"{'+-' + str(n):>8s} {res.dev.mtwv:9.4f} {res.dev_heldout.mtwv:9.4f} {res.dev_in_lexicon.mtwv:7.4f}")


if __name__ == "__main__":
    main()
