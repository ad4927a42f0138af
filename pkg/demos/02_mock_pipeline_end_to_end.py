#!/usr/bin/env python3
"""Walkthrough: the four prompting stages over a scripted mock backend.

Runs ingest + generate/classify/aggregate/prevalence through the CLI
entry point against the bundled synthetic fixture, then re-runs to show
checkpointed idempotency (the second pass performs zero backend calls).
"""

import json
import tempfile
from collections import Counter
from pathlib import Path

from quallm.cli import main as quallm
from quallm.fixtures import build_demo_fixture


def main() -> None:
    scratch = Path(tempfile.mkdtemp(prefix="quallm-demo-pipeline-"))
    fixture = build_demo_fixture(scratch, thread_count=50)
    print(f"study directory: {scratch}")
    print(f"planted theme counts: {fixture.theme_counts}\n")

    print("=== ingest ===")
    quallm([
        "ingest",
        "--config", str(fixture.config_path),
        "--submissions", str(fixture.submissions_path),
        "--comments", str(fixture.comments_path),
    ])

    for stage in ("generate", "classify", "aggregate", "prevalence"):
        print(f"\n=== {stage} ===")
        quallm([stage, "--config", str(fixture.config_path)])

    assigned = Counter(
        json.loads(line)["code"]
        for line in (fixture.run_dir / "theme_assignments.ndjson")
        .read_text().splitlines()
    )
    print(f"\nrecovered theme counts: {dict(sorted(assigned.items()))}")
    print("matches planted counts:",
          dict(assigned) == {k: v for k, v in fixture.theme_counts.items() if v})

    print("\n=== re-run (resumability) ===")
    log_lines = len((fixture.run_dir / "llm_log.ndjson").read_text().splitlines())
    quallm(["run-all", "--config", str(fixture.config_path)])
    log_lines_after = len(
        (fixture.run_dir / "llm_log.ndjson").read_text().splitlines()
    )
    print(f"\nbackend calls during re-run: {log_lines_after - log_lines}"
          " (completed units are skipped via checkpoints)")

    print("\nrun directory contents:")
    for path in sorted(fixture.run_dir.iterdir()):
        print(f"  {path.name}")


if __name__ == "__main__":
    main()
