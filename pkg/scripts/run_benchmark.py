"""Train and evaluate on the synthetic benchmark; write hits, reports and a summary."""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

from gcnstd.experiments import BenchmarkConfig, run_benchmark
from gcnstd.nn import save_model
from gcnstd.search import write_hits


def write_reports(res, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_hits(out / "dev_hits.tsv", res.dev_hits)
    write_hits(out / "test_hits.tsv", res.test_hits)
    reports = {"dev": res.dev, "test": res.test, "dev_heldout": res.dev_heldout,
               "dev_in_lexicon": res.dev_in_lexicon, "baseline_dev": res.baseline_dev}
    for name, rep in reports.items():
        (out / f"{name}_report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-o", "--out", type=Path, default=Path("runs/benchmark"))
    ap.add_argument("--steps", type=int)
    ap.add_argument("--masking-n", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--log-every", type=int, default=250)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = BenchmarkConfig()
    hyper = {k: v for k, v in (("steps", args.steps), ("masking_n", args.masking_n), ("seed", args.seed)) if v is not None}
    cfg = replace(cfg, hyper=replace(cfg.hyper, **hyper))
    if args.seed is not None:
        cfg = replace(cfg, synth=replace(cfg.synth, seed=args.seed))

    res = run_benchmark(cfg, log_every=args.log_every)
    write_reports(res, args.out)
    save_model(res.model, args.out / "model")
    summary = {**res.summary(), "seconds": res.seconds,
               "config": {"synth": cfg.synth.to_dict(), "model": asdict(cfg.model), "train": cfg.hyper.to_dict(),
                          "detect_threshold": cfg.detect_threshold}}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(res.summary(), indent=2))


if __name__ == "__main__":
    main()
