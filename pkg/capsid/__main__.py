import argparse
import sys

from .core.errors import CapsidError, ConfigError
from .core.logs import configure_logging
from .corpus.types import ACTED_EMOTIONS, Emotion
from .services import pipeline

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# argparse dest -> config key; only flags actually given are applied
FLAG_KEYS = {
	"seed": "run.seed",
	"out": "run.out",
	"workers": "run.workers",
	"skip_errors": "run.skip_errors",
	"run_id": "run.run_id",
	"manifest": "run.manifest",
	"archive": "run.archive",
	"corpus_kind": "run.corpus_kind",
	"protocol": "run.protocol",
	"speaker_subset": "run.speakers",
	"architecture": "model.architecture",
	"routing": "model.routing_iterations",
	"no_decoder": "model.decoder_enabled",
	"epochs": "train.max_epochs",
	"trials": "train.trials",
	"cv_folds": "train.cv_folds",
	"batch_size": "train.batch_size",
	"noise_ratio": "run.noise_ratio",
}


def _parse_set(text: str) -> tuple[str, str, str]:
	if "=" not in text or "." not in text.split("=", 1)[0]:
		raise argparse.ArgumentTypeError(f"expected section.key=value, got {text!r}")
	name, value = text.split("=", 1)
	section, key = name.strip().split(".", 1)
	return section, key, value.strip()


def flag_layer(args: argparse.Namespace) -> dict[str, dict[str, str]]:
	"""Config overrides from ``--set`` and the named flags, flags last."""
	layer: dict[str, dict[str, str]] = {}
	for section, key, value in getattr(args, "set", None) or []:
		layer.setdefault(section, {})[key] = value
	for dest, target in FLAG_KEYS.items():
		value = getattr(args, dest, None)
		if value is None:
			continue
		if dest == "no_decoder":
			value = "false"
		elif isinstance(value, bool):
			value = "true" if value else "false"
		section, key = target.split(".", 1)
		layer.setdefault(section, {})[key] = str(value)
	return layer


def resolve_config(args: argparse.Namespace) -> pipeline.RunConfig:
	layers = []
	if getattr(args, "config", None):
		layers.append(pipeline.load_config_layers(args.config))
	layers.append(flag_layer(args))
	return pipeline.RunConfig.resolve(*layers)


def cmd_extract(cfg: pipeline.RunConfig, args: argparse.Namespace) -> int:
	result = pipeline.cmd_extract(cfg)
	print(f"extracted {result.records} records ({len(result.skipped)} skipped) -> {result.archive_path}")
	return EXIT_OK


def cmd_synth(cfg: pipeline.RunConfig, args: argparse.Namespace) -> int:
	emotions = tuple(Emotion.parse(e) for e in args.emotions.split(",")) if args.emotions else ACTED_EMOTIONS
	result = pipeline.cmd_synth(cfg, args.speakers, args.utterances, args.reps, emotions)
	print(f"synthesised {result.clips} clips -> {result.manifest_path}")
	return EXIT_OK


def cmd_train(cfg: pipeline.RunConfig, args: argparse.Namespace) -> int:
	result = pipeline.cmd_train(cfg)
	for outcome in result.trials:
		print(f"trial {outcome.plan.trial_index}: accuracy {outcome.report.overall_accuracy:.2f}%")
	print(f"average accuracy {result.average.overall_accuracy:.2f}% -> {cfg.run_dir('train')}")
	return EXIT_OK


def cmd_eval(cfg: pipeline.RunConfig, args: argparse.Namespace) -> int:
	result = pipeline.cmd_eval(cfg, args.model_dir, args.split, args.noise_ratio)
	print(f"accuracy {result.report.overall_accuracy:.2f}% on {result.report.n_test_items} items")
	if result.noise is not None:
		print(f"distorted accuracy {result.noise.distorted.overall_accuracy:.2f}% at ratio {result.noise.amplitude_ratio:g}")
	return EXIT_OK


def cmd_noise(cfg: pipeline.RunConfig, args: argparse.Namespace) -> int:
	comparison = pipeline.cmd_noise(cfg, args.model_dir, args.split)
	print(
		f"normal {comparison.clean.overall_accuracy:.2f}% / distorted {comparison.distorted.overall_accuracy:.2f}% "
		f"at ratio {comparison.amplitude_ratio:g}"
	)
	return EXIT_OK


def cmd_ablate(cfg: pipeline.RunConfig, args: argparse.Namespace) -> int:
	cells = pipeline.cmd_ablate(cfg)
	for cell in cells:
		decoder = "on" if cell.decoder else "off"
		print(f"r={cell.routing_iterations} decoder={decoder}: {cell.report.overall_accuracy:.2f}%")
	return EXIT_OK


def cmd_report(cfg: pipeline.RunConfig, args: argparse.Namespace) -> int:
	names = args.names.split(",") if args.names else ()
	result = pipeline.cmd_report(cfg, args.reports, names, args.reference, args.alternative)
	sys.stdout.write(result.emotion_table)
	for row in result.pvalues:
		p = "n/a" if row.p_value is None else f"{row.p_value:.4f}"
		print(f"{row.reference} vs {row.other}: p = {p} {row.note}".rstrip())
	return EXIT_OK


def _common(parser: argparse.ArgumentParser, default) -> None:
	parser.add_argument("--config", default=default, help="Config file (section.key = value) or a previous run.json")
	parser.add_argument("--seed", type=int, default=default, help="Global seed")
	parser.add_argument("--out", default=default, help="Output root directory")
	parser.add_argument("--workers", type=int, default=default, help="Worker threads (never changes results)")
	parser.add_argument("--skip-errors", action="store_true", default=default, help="Skip unreadable audio instead of aborting")
	parser.add_argument("--run-id", default=default, help="Run directory name under --out")
	parser.add_argument(
		"--set", action="append", type=_parse_set, default=default, metavar="SECTION.KEY=VALUE", help="Override any config key"
	)


def _data(parser: argparse.ArgumentParser) -> None:
	parser.add_argument("--manifest", help="Manifest CSV")
	parser.add_argument("--archive", help="Feature archive (CAPF)")
	parser.add_argument("--corpus-kind", help="generic, ravdess, susas_words or synthetic")
	parser.add_argument("--speakers", dest="speaker_subset", help="Comma-separated speaker subset")


def _training(parser: argparse.ArgumentParser) -> None:
	parser.add_argument("--protocol", help="esd_style, ravdess_style or susas_style")
	parser.add_argument("--architecture", help="capsnet_m, caps9, caps15, caps19 or baseline_cnn")
	parser.add_argument("--routing", type=int, help="Routing iterations")
	parser.add_argument("--no-decoder", action="store_true", default=None, help="Disable the reconstruction decoder")
	parser.add_argument("--epochs", type=int, help="Maximum epochs")
	parser.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
	parser = argparse.ArgumentParser(prog="capsid", description="Capsule-network speaker identification under emotional speech")
	_common(parser, None)
	sub = parser.add_subparsers(dest="command", required=True)

	def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
		p = sub.add_parser(name, help=help_text)
		_common(p, argparse.SUPPRESS)
		p.set_defaults(handler=handler)
		return p

	p = add("extract", cmd_extract, "Extract MFCC + delta features for a manifest")
	_data(p)

	p = add("synth", cmd_synth, "Generate the synthetic emotional corpus")
	p.add_argument("--speakers", type=int, default=8)
	p.add_argument("--utterances", type=int, default=8)
	p.add_argument("--reps", type=int, default=9)
	p.add_argument("--emotions", default=None, help="Comma-separated emotions (default: the six acted ones)")

	p = add("train", cmd_train, "Train and evaluate over utterance-rotation trials")
	_data(p)
	_training(p)
	p.add_argument("--trials", type=int)
	p.add_argument("--cv-folds", type=int, help="Cross-validate over repetitions instead of rotating utterances")

	p = add("eval", cmd_eval, "Evaluate a saved trial")
	_data(p)
	p.add_argument("--model-dir", required=True, help="trial<k> directory from a train run")
	p.add_argument("--split", default=None, help="Split plan JSON (default: the one saved with the model)")
	p.add_argument("--noise-ratio", type=float, default=None, help="Also evaluate with noise at this speech:noise RMS ratio")

	p = add("noise", cmd_noise, "Clean vs noisy evaluation of a saved trial")
	_data(p)
	p.add_argument("--model-dir", required=True)
	p.add_argument("--split", default=None)
	p.add_argument("--noise-ratio", type=float, default=None)

	p = add("ablate", cmd_ablate, "Routing iterations 1-5 x decoder on/off grid")
	_data(p)
	_training(p)

	p = add("report", cmd_report, "Re-render tables from saved report JSON files")
	p.add_argument("reports", nargs="+", help="Report JSON files (e.g. <run>/average.json)")
	p.add_argument("--names", default=None, help="Comma-separated system names")
	p.add_argument("--reference", default=None, help="Reference system for the Wilcoxon tests")
	p.add_argument("--alternative", default="two-sided", choices=("two-sided", "greater", "less"))
	return parser


def main(argv=None) -> int:
	parser = build_parser()
	args = parser.parse_args(argv)
	configure_logging()
	try:
		cfg = resolve_config(args)
		return args.handler(cfg, args)
	except ConfigError as exc:
		print(f"error: {exc.code}: {exc}", file=sys.stderr)
		return EXIT_USAGE
	except CapsidError as exc:
		print(f"error: {exc.code}: {exc}", file=sys.stderr)
		return EXIT_FAILURE


if __name__ == "__main__":
	raise SystemExit(main())
