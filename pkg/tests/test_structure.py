from pathlib import Path
import re

ROOT = Path(__file__).resolve().parents[1]


def _sources():
	return sorted(ROOT.glob("capsid/**/*.py"))


def test_thread_pools_only_in_runner():
	allowed = {ROOT / "capsid" / "core" / "runner.py"}
	pattern = re.compile(r"^\s*(import\s+concurrent\b|from\s+concurrent(\.futures)?\s+import\b)", re.MULTILINE)
	violations = [str(path) for path in _sources() if path not in allowed and pattern.search(path.read_text())]
	assert violations == [], f"concurrent import found in: {violations}"


def test_no_global_random_state():
	# every draw goes through a seeded Generator
	pattern = re.compile(r"np\.random\.(?!default_rng\b|Generator\b|PCG64\b)\w+|^\s*import\s+random\b", re.MULTILINE)
	violations = [str(path) for path in _sources() if pattern.search(path.read_text())]
	assert violations == [], f"global random state used in: {violations}"
