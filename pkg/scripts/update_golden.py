"""Regenerate the golden-master detection outputs under ``tests/golden``.

Run after an intentional change to the bundled sample data or to a method:

    python scripts/update_golden.py
"""

from importlib import resources
from pathlib import Path

from scanguard.cli import main

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden"
ARGS = ["--store", "S01", "--train-filter", "weeks=1-52", "--test-filter", "weeks=53-104", "--drop-unchanged"]


def run() -> None:
    GOLDEN.mkdir(parents=True, exist_ok=True)
    data = str(resources.files("scanguard") / "data" / "sample_scanner.csv")
    code = main(["detect", "--data", data, *ARGS,
                 "--out", str(GOLDEN / "detect_sample.json"),
                 "--chart", str(GOLDEN / "chart_sample.csv")])
    if code != 0:
        raise SystemExit(code)


if __name__ == "__main__":
    run()
