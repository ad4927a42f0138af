"""Checkpointed execution of the four prompting stages over a run directory.

Layout under the run directory:

    groups.ndjson                  ingest output (batch groups)
    concerns.ndjson                generation output, sorted by concern_id
    theme_assignments.ndjson       classification output
    subthemes_<L>.json             aggregation output, one file per theme
    subtheme_assignments.ndjson    prevalence output
    checkpoints/<stage>.ndjson     per-unit progress (append-only)
    checkpoints/<stage>.meta.json  fingerprint of the stage's inputs
    summaries/<stage>.json         deterministic stage summary
    llm_log.ndjson                 one line per backend call

Units (groups, chunks, themes) checkpoint as they complete; a resumed
run skips completed units, and a finished stage re-invocation performs
no backend calls and rewrites identical outputs. If a stage's inputs
changed since its checkpoint was written (for example after
retry-failed added concerns upstream), the stale checkpoint is
discarded and the stage re-runs from scratch.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from . import ndjson
from .gateway import Gateway, GatewayFailure
from .ingest import read_groups
from .models import (
    BatchGroup,
    Concern,
    StudyConfig,
    SubThemeAssignment,
    SubThemeSet,
    ThemeAssignment,
)
from .stages import (
    ChunkOutcome,
    chunk_slices,
    classify_chunk,
    generate_for_group,
    prevalence_chunk,
    run_aggregation,
)

logger = logging.getLogger(__name__)

STAGE_GENERATE = "generate"
STAGE_CLASSIFY = "classify"
STAGE_AGGREGATE = "aggregate"
STAGE_PREVALENCE = "prevalence"
STAGES = (STAGE_GENERATE, STAGE_CLASSIFY, STAGE_AGGREGATE, STAGE_PREVALENCE)


class PipelineOrderError(RuntimeError):
    """A stage was invoked before its predecessor completed."""

    def __init__(self, stage: str, missing: str):
        super().__init__(
            f"stage '{stage}' requires completed '{missing}' output; run it first"
        )
        self.stage = stage
        self.missing = missing


class RunPaths:
    """All file locations derived from one run directory."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)

    @property
    def groups(self) -> Path:
        return self.run_dir / "groups.ndjson"

    @property
    def concerns(self) -> Path:
        return self.run_dir / "concerns.ndjson"

    @property
    def theme_assignments(self) -> Path:
        return self.run_dir / "theme_assignments.ndjson"

    def subthemes(self, theme: str) -> Path:
        return self.run_dir / f"subthemes_{theme}.json"

    def subtheme_files(self) -> list[Path]:
        return sorted(self.run_dir.glob("subthemes_*.json"))

    @property
    def subtheme_assignments(self) -> Path:
        return self.run_dir / "subtheme_assignments.ndjson"

    @property
    def llm_log(self) -> Path:
        return self.run_dir / "llm_log.ndjson"

    def checkpoint(self, stage: str) -> Path:
        return self.run_dir / "checkpoints" / f"{stage}.ndjson"

    def quarantine(self, stage: str) -> Path:
        return self.run_dir / "checkpoints" / f"{stage}.quarantine.ndjson"

    def meta(self, stage: str) -> Path:
        return self.run_dir / "checkpoints" / f"{stage}.meta.json"

    def summary(self, stage: str) -> Path:
        return self.run_dir / "summaries" / f"{stage}.json"


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class Checkpoint:
    """Append-only per-unit progress log; the last entry per key wins."""

    def __init__(self, path: Path, quarantine_path: Path):
        self.path = path
        self.quarantine_path = quarantine_path
        self._lock = threading.Lock()

    def load(self) -> dict[str, dict]:
        """Read entries, quarantining corrupt lines so their units re-run."""
        if not self.path.exists():
            return {}
        entries: dict[str, dict] = {}
        good_lines: list[str] = []
        bad_lines: list[str] = []
        with self.path.open("r", encoding="utf-8") as fh:
            for line in fh:
                stripped = line.strip()
                if not stripped:
                    continue
                try:
                    record = json.loads(stripped)
                    key = record["key"]
                    status = record["status"]
                    if status not in ("ok", "failed"):
                        raise ValueError(f"bad status {status!r}")
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    bad_lines.append(stripped)
                    continue
                good_lines.append(stripped)
                entries[key] = record
        if bad_lines:
            logger.warning(
                "%s: quarantined %d corrupt checkpoint line(s)",
                self.path.name, len(bad_lines),
            )
            with self.quarantine_path.open("a", encoding="utf-8") as fh:
                for line in bad_lines:
                    fh.write(line + "\n")
            tmp = self.path.with_suffix(".tmp")
            tmp.write_text(
                "".join(line + "\n" for line in good_lines), encoding="utf-8"
            )
            tmp.replace(self.path)
        return entries

    def append(self, record: dict) -> None:
        with self._lock:
            ndjson.append_record(self.path, record)

    def discard(self) -> None:
        if self.path.exists():
            self.path.unlink()


def _fingerprint(paths: Iterable[Path]) -> str:
    digest = hashlib.sha256()
    for path in paths:
        digest.update(path.name.encode())
        digest.update(path.read_bytes() if path.exists() else b"<missing>")
    return digest.hexdigest()


@dataclass
class UnitResult:
    key: str
    status: str  # "ok" | "failed"
    payload: dict = field(default_factory=dict)
    category: str = ""
    detail: str = ""
    attempts: int = 0

    def to_record(self) -> dict:
        record: dict = {"key": self.key, "status": self.status}
        if self.status == "ok":
            record["payload"] = self.payload
        else:
            record.update(
                {
                    "category": self.category,
                    "detail": self.detail,
                    "attempts": self.attempts,
                    "payload": self.payload,
                }
            )
        return record


@dataclass
class StageReport:
    stage: str
    units_total: int
    executed: int
    skipped: int
    ok: int
    failed: int
    failed_by_category: dict[str, int]
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "units_total": self.units_total,
            "ok": self.ok,
            "failed": self.failed,
            "failed_by_category": self.failed_by_category,
            **self.extras,
        }


def _failure_unit(key: str, failure: GatewayFailure, payload: dict) -> UnitResult:
    return UnitResult(
        key=key,
        status="failed",
        payload=payload,
        category=failure.category,
        detail=failure.detail,
        attempts=failure.attempts,
    )


class PipelineRunner:
    """Executes stages with a bounded worker pool and per-unit checkpoints."""

    def __init__(
        self,
        paths: RunPaths,
        study: StudyConfig,
        gateway: Gateway,
        workers: int = 8,
        template_dir: Optional[Path] = None,
    ):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.paths = paths
        self.study = study
        self.gateway = gateway
        self.workers = workers
        self.template_dir = template_dir

    # -- generic unit execution ------------------------------------------

    def _run_units(
        self,
        stage: str,
        units: Sequence[tuple[str, Callable[[], UnitResult]]],
        input_files: Sequence[Path],
        retry_failed: bool = False,
    ) -> tuple[dict[str, dict], StageReport]:
        checkpoint = Checkpoint(self.paths.checkpoint(stage),
                                self.paths.quarantine(stage))
        checkpoint.path.parent.mkdir(parents=True, exist_ok=True)

        fingerprint = _fingerprint(input_files)
        meta_path = self.paths.meta(stage)
        if meta_path.exists():
            recorded = json.loads(meta_path.read_text(encoding="utf-8"))
            if recorded.get("input_fingerprint") != fingerprint:
                logger.warning(
                    "stage %s: inputs changed since last run; discarding checkpoint",
                    stage,
                )
                checkpoint.discard()
        meta_path.parent.mkdir(parents=True, exist_ok=True)
        meta_path.write_text(
            json.dumps({"input_fingerprint": fingerprint}) + "\n", encoding="utf-8"
        )

        done = checkpoint.load()
        pending = [
            (key, fn)
            for key, fn in units
            if key not in done or (retry_failed and done[key]["status"] == "failed")
        ]

        executed = 0
        if pending:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                futures = {pool.submit(fn): key for key, fn in pending}
                try:
                    for future in as_completed(futures):
                        result = future.result()
                        checkpoint.append(result.to_record())
                        done[result.key] = result.to_record()
                        executed += 1
                except KeyboardInterrupt:
                    # Completed units are already checkpointed; drop the rest.
                    pool.shutdown(wait=True, cancel_futures=True)
                    raise

        failed_by_category: dict[str, int] = {}
        ok = 0
        for key, _ in units:
            entry = done.get(key)
            if entry is None:
                continue
            if entry["status"] == "ok":
                ok += 1
            else:
                category = entry.get("category", "other")
                failed_by_category[category] = failed_by_category.get(category, 0) + 1
        report = StageReport(
            stage=stage,
            units_total=len(units),
            executed=executed,
            skipped=len(units) - len(pending),
            ok=ok,
            failed=sum(failed_by_category.values()),
            failed_by_category=failed_by_category,
        )
        return done, report

    def _write_summary(self, report: StageReport) -> None:
        path = self.paths.summary(report.stage)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    # -- stage: generate ---------------------------------------------------

    def stage_generate(self, retry_failed: bool = False) -> StageReport:
        if not self.paths.groups.exists():
            raise PipelineOrderError(STAGE_GENERATE, "ingest")
        groups = read_groups(self.paths.groups)

        def make_unit(group: BatchGroup) -> Callable[[], UnitResult]:
            def run() -> UnitResult:
                outcome = generate_for_group(
                    self.gateway, group, self.study, self.template_dir
                )
                if outcome.ok:
                    return UnitResult(
                        key=group.group_key,
                        status="ok",
                        payload={
                            "concerns": [c.to_dict() for c in outcome.concerns],
                            "description_warnings": outcome.description_warnings,
                        },
                    )
                assert outcome.failure is not None
                return _failure_unit(group.group_key, outcome.failure, {})

            return run

        units = [(g.group_key, make_unit(g)) for g in groups]
        done, report = self._run_units(
            STAGE_GENERATE, units, [self.paths.groups], retry_failed
        )

        concerns: list[dict] = []
        empty_groups = 0
        for key, _ in units:
            entry = done.get(key)
            if entry and entry["status"] == "ok":
                got = entry["payload"]["concerns"]
                if not got:
                    empty_groups += 1
                concerns.extend(got)
        concerns.sort(key=lambda c: c["concern_id"])
        ndjson.write_records(self.paths.concerns, concerns)

        report.extras = {
            "concerns": len(concerns),
            "no_concern_groups": empty_groups,
            "quote_checks": _count_values(concerns, "quote_check"),
        }
        self._write_summary(report)
        return report

    # -- stage: classify ----------------------------------------------------

    def stage_classify(self, retry_failed: bool = False) -> StageReport:
        if not self.paths.concerns.exists():
            raise PipelineOrderError(STAGE_CLASSIFY, STAGE_GENERATE)
        concerns = load_concerns(self.paths.concerns)

        slices = chunk_slices(len(concerns), self.study.classification_chunk_size)

        def make_unit(index: int, start: int, end: int) -> Callable[[], UnitResult]:
            chunk = concerns[start:end]

            def run() -> UnitResult:
                outcome = classify_chunk(
                    self.gateway, chunk, self.study, index, self.template_dir
                )
                return _chunk_unit_result(str(index), chunk, outcome)

            return run

        units = [
            (str(index), make_unit(index, start, end))
            for index, (start, end) in enumerate(slices, start=1)
        ]
        done, report = self._run_units(
            STAGE_CLASSIFY, units, [self.paths.concerns], retry_failed
        )

        assignments: list[dict] = []
        failed_concerns = 0
        remapped = 0
        for key, _ in units:
            entry = done.get(key)
            if entry is None:
                continue
            if entry["status"] == "ok":
                assignments.extend(entry["payload"]["assignments"])
                remapped += entry["payload"].get("remapped", 0)
            else:
                failed_concerns += len(entry["payload"].get("concern_ids", []))
        assignments.sort(key=lambda a: a["concern_id"])
        ndjson.write_records(self.paths.theme_assignments, assignments)

        report.extras = {
            "concerns_in": len(concerns),
            "assigned": len(assignments),
            "failed_concerns": failed_concerns,
            "remapped_to_catch_all": remapped,
        }
        self._write_summary(report)
        return report

    # -- stage: aggregate ----------------------------------------------------

    def stage_aggregate(self, retry_failed: bool = False) -> StageReport:
        if not self.paths.theme_assignments.exists():
            raise PipelineOrderError(STAGE_AGGREGATE, STAGE_CLASSIFY)
        theme_concerns = self._themed_concerns()

        units = []
        for category in self.study.taxonomy.active:
            concerns = theme_concerns.get(category.code, [])
            if not concerns:
                continue

            def make_unit(cat, cat_concerns) -> Callable[[], UnitResult]:
                def run() -> UnitResult:
                    outcome = run_aggregation(
                        self.gateway, cat, cat_concerns, self.study, self.template_dir
                    )
                    if outcome.ok:
                        assert outcome.subthemes is not None
                        return UnitResult(
                            key=cat.code,
                            status="ok",
                            payload={
                                "subthemes": outcome.subthemes.to_dict(),
                                "map_calls": outcome.plan.map_calls if outcome.plan else 1,
                                "merge_calls": outcome.plan.merge_calls if outcome.plan else 0,
                            },
                        )
                    assert outcome.failure is not None
                    return _failure_unit(cat.code, outcome.failure, {})

                return run

            units.append((category.code, make_unit(category, concerns)))

        done, report = self._run_units(
            STAGE_AGGREGATE,
            units,
            [self.paths.theme_assignments, self.paths.concerns],
            retry_failed,
        )

        written = []
        for key, _ in units:
            entry = done.get(key)
            if entry and entry["status"] == "ok":
                path = self.paths.subthemes(key)
                path.write_text(
                    json.dumps(entry["payload"]["subthemes"], sort_keys=True,
                               indent=2, ensure_ascii=False) + "\n",
                    encoding="utf-8",
                )
                written.append(key)

        report.extras = {
            "themes_with_concerns": len(units),
            "subtheme_files": written,
        }
        self._write_summary(report)
        return report

    # -- stage: prevalence ----------------------------------------------------

    def stage_prevalence(self, retry_failed: bool = False) -> StageReport:
        subtheme_files = self.paths.subtheme_files()
        if not subtheme_files:
            raise PipelineOrderError(STAGE_PREVALENCE, STAGE_AGGREGATE)
        theme_concerns = self._themed_concerns()

        units = []
        per_theme_counts: dict[str, int] = {}
        for path in subtheme_files:
            subthemes = SubThemeSet.from_dict(
                json.loads(path.read_text(encoding="utf-8"))
            )
            concerns = theme_concerns.get(subthemes.theme, [])
            per_theme_counts[subthemes.theme] = len(concerns)
            slices = chunk_slices(len(concerns), self.study.prevalence_chunk_size)
            for index, (start, end) in enumerate(slices, start=1):
                chunk = concerns[start:end]

                def make_unit(sub, chk, idx) -> Callable[[], UnitResult]:
                    def run() -> UnitResult:
                        outcome = prevalence_chunk(
                            self.gateway, sub, chk, self.study, idx, self.template_dir
                        )
                        return _chunk_unit_result(
                            f"{sub.theme}:{idx}", chk, outcome, theme=sub.theme
                        )

                    return run

                units.append((f"{subthemes.theme}:{index}",
                              make_unit(subthemes, chunk, index)))

        inputs = [self.paths.theme_assignments, self.paths.concerns] + subtheme_files
        done, report = self._run_units(STAGE_PREVALENCE, units, inputs, retry_failed)

        assignments: list[dict] = []
        failed_concerns = 0
        remapped = 0
        for key, _ in units:
            entry = done.get(key)
            if entry is None:
                continue
            if entry["status"] == "ok":
                assignments.extend(entry["payload"]["assignments"])
                remapped += entry["payload"].get("remapped", 0)
            else:
                failed_concerns += len(entry["payload"].get("concern_ids", []))
        assignments.sort(key=lambda a: a["concern_id"])
        ndjson.write_records(self.paths.subtheme_assignments, assignments)

        report.extras = {
            "themed_concerns": per_theme_counts,
            "assigned": len(assignments),
            "failed_concerns": failed_concerns,
            "remapped_to_catch_all": remapped,
        }
        self._write_summary(report)
        return report

    # -- shared -----------------------------------------------------------

    def _themed_concerns(self) -> dict[str, list[Concern]]:
        """Concerns grouped by assigned theme, excluding the catch-all.

        Concerns routed to the catch-all are filtered out here and never
        reach aggregation or prevalence.
        """
        concerns = load_concerns(self.paths.concerns)
        assignment_by_id = {
            a["concern_id"]: a["code"]
            for a in ndjson.iter_records(self.paths.theme_assignments)
        }
        catch_all = self.study.taxonomy.catch_all.code
        out: dict[str, list[Concern]] = {}
        for concern in concerns:
            code = assignment_by_id.get(concern.concern_id)
            if code is None or code == catch_all:
                continue
            out.setdefault(code, []).append(concern)
        return out

    def run_all(self, retry_failed: bool = False) -> list[StageReport]:
        return [
            self.stage_generate(retry_failed),
            self.stage_classify(retry_failed),
            self.stage_aggregate(retry_failed),
            self.stage_prevalence(retry_failed),
        ]

    def retry_failed(self) -> list[StageReport]:
        """Re-execute failed units of every stage that has already run."""
        reports = []
        stage_methods = {
            STAGE_GENERATE: self.stage_generate,
            STAGE_CLASSIFY: self.stage_classify,
            STAGE_AGGREGATE: self.stage_aggregate,
            STAGE_PREVALENCE: self.stage_prevalence,
        }
        for stage in STAGES:
            if self.paths.checkpoint(stage).exists():
                reports.append(stage_methods[stage](retry_failed=True))
        return reports


def _chunk_unit_result(
    key: str, chunk: Sequence[Concern], outcome: ChunkOutcome, theme: str = ""
) -> UnitResult:
    if outcome.ok:
        assert outcome.letters is not None
        assignments = []
        for concern, letter in zip(chunk, outcome.letters):
            record = {"concern_id": concern.concern_id, "code": letter}
            if theme:
                record["theme"] = theme
            assignments.append(record)
        return UnitResult(
            key=key,
            status="ok",
            payload={"assignments": assignments, "remapped": outcome.remapped},
        )
    assert outcome.failure is not None
    return _failure_unit(key, outcome.failure,
                         {"concern_ids": list(outcome.concern_ids)})


def _count_values(records: Iterable[dict], field_name: str) -> dict[str, int]:
    counts: dict[str, int] = {}
    for record in records:
        value = str(record.get(field_name))
        counts[value] = counts.get(value, 0) + 1
    return counts


def load_concerns(path: Path) -> list[Concern]:
    return [Concern.from_dict(r) for r in ndjson.iter_records(path)]


def load_theme_assignments(path: Path) -> list[ThemeAssignment]:
    return [ThemeAssignment.from_dict(r) for r in ndjson.iter_records(path)]


def load_subtheme_assignments(path: Path) -> list[SubThemeAssignment]:
    return [SubThemeAssignment.from_dict(r) for r in ndjson.iter_records(path)]
