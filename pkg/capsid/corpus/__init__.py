from capsid.corpus.manifest import (
	load_manifest_csv,
	parse_manifest_csv,
	parse_ravdess_name,
	parse_susas_path,
	scan_ravdess,
	scan_susas,
	write_manifest_csv,
)
from capsid.corpus.splits import load_split_plan, make_split_plan, save_split_plan, trial_plans
from capsid.corpus.synthetic import generate_synthetic_corpus
from capsid.corpus.types import (
	ACTED_EMOTIONS,
	AudioClip,
	CorpusKind,
	CorpusManifest,
	Emotion,
	ManifestEntry,
	SplitPlan,
	SplitProtocol,
	check_split,
)
from capsid.corpus.wav import load_wav, write_wav

__all__ = [
	"ACTED_EMOTIONS",
	"AudioClip",
	"CorpusKind",
	"CorpusManifest",
	"Emotion",
	"ManifestEntry",
	"SplitPlan",
	"SplitProtocol",
	"check_split",
	"generate_synthetic_corpus",
	"load_manifest_csv",
	"load_split_plan",
	"load_wav",
	"make_split_plan",
	"parse_manifest_csv",
	"parse_ravdess_name",
	"parse_susas_path",
	"save_split_plan",
	"scan_ravdess",
	"scan_susas",
	"trial_plans",
	"write_manifest_csv",
	"write_wav",
]
