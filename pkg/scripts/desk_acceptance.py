#!/usr/bin/env python3
"""
Desk-scale acceptance run on the synthetic corpus.

Trains the full capsule network (r = 3, decoder on) and the baseline CNN on
8 speakers x 8 utterances x 9 repetitions x 6 emotions (seed 7), ESD-style
split, and checks neutral >= 95% and overall >= 80% for the capsule model.

Exit code 0 when the accuracy targets are met, 1 when they are not, 2 on a
configuration error. Going over the 30 min budget only logs a warning; see
docs/adr/0005-desk-scale-runtime.md for measured times.

Example:
	CAPSID_LOG=info scripts/desk_acceptance.py --epochs 40 --workers 4
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from capsid.core.errors import CapsidError, ConfigError  # noqa: E402
from capsid.core.logs import configure_logging  # noqa: E402
from capsid.core.runner import get_runner  # noqa: E402
from capsid.services.acceptance import desk_check  # noqa: E402
from capsid.services.trainer import CAPSULE_EPOCHS, TrainConfig  # noqa: E402


def build_parser() -> argparse.ArgumentParser:
	parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
	parser.add_argument("--epochs", type=int, default=CAPSULE_EPOCHS, help="epochs for both models")
	parser.add_argument("--workers", type=int, default=1, help="trial/extraction workers")
	parser.add_argument("--seed", type=int, default=0, help="training seed (the corpus seed stays 7)")
	parser.add_argument("--skip-cnn", action="store_true", help="train the capsule network only")
	return parser


def main(argv: list[str]) -> int:
	args = build_parser().parse_args(argv)
	configure_logging()
	train_cfg = TrainConfig(max_epochs=args.epochs, trials=1, seed=args.seed)
	problems = train_cfg.validate()
	if problems:
		print(f"error: {ConfigError.code}: {'; '.join(problems)}", file=sys.stderr)
		return 2
	kwargs = {"train_cfg": train_cfg, "runner": get_runner(args.workers)}
	if args.skip_cnn:
		kwargs["cnn_cfg"] = None
	try:
		check = desk_check(**kwargs)
	except CapsidError as exc:
		print(f"error: {exc.code}: {exc}", file=sys.stderr)
		return 1
	for line in check.summary_lines():
		print(line)
	print("PASS" if check.accuracy_met else "FAIL")
	return 0 if check.accuracy_met else 1


if __name__ == "__main__":
	raise SystemExit(main(sys.argv[1:]))
