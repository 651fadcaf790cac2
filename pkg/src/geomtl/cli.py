"""``geomtl`` command line: gen-data, train, eval, case-study, run-all.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Log verbosity comes from ``GEOMTL_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .pipeline import VARIANTS, ExperimentConfig


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geomtl", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["gen-data", "train", "eval", "case-study", "run-all"])
    p.add_argument("--config", help="experiment JSON (sections: world, train, model, eval)")
    p.add_argument("--model", help=f"variant to train: {', '.join(VARIANTS)} (default: all)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    return p


def _load_config(args, parser) -> ExperimentConfig:
    raw = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            parser.error(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            parser.error(f"config file {path} is not valid JSON: {exc}")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out_dir"] = args.out
    try:
        return ExperimentConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        parser.error(f"invalid config: {exc}")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GEOMTL_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _parser()
    args = parser.parse_args(argv)
    cfg = _load_config(args, parser)
    if args.model is not None and args.model not in VARIANTS:
        parser.error(f"unknown model {args.model!r}; choose from {', '.join(VARIANTS)}")
    try:
        if args.command == "gen-data":
            man = pipeline.gen_data(cfg)
            print(f"dataset {man['dataset_id']}: {man['total_rows']} rows -> {cfg.out_dir}/data")
        elif args.command == "train":
            for v in [args.model] if args.model else list(VARIANTS):
                man = pipeline.train_variant(cfg, v)
                print(f"trained {v}: final loss {man.epoch_means()[-1] if man.loss_curve else float('nan'):.4f}")
        elif args.command == "eval":
            rows = pipeline.evaluate(cfg)
            print(f"wrote {len(rows)} gain rows -> {cfg.out_dir}/eval/gains.csv")
        elif args.command == "case-study":
            rep = pipeline.case_study(cfg)
            print(f"case study over {len(rep.picks)} titles -> {cfg.out_dir}/case_study")
        else:
            pipeline.run_all(cfg)
            print(f"run-all complete -> {cfg.out_dir}")
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logging.getLogger("geomtl").debug("failure", exc_info=True)
        print(f"geomtl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
