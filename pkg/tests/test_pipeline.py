import json
from collections import Counter
from pathlib import Path

import pytest

from quallm import ndjson
from quallm.fixtures import build_demo_fixture
from quallm.gateway import Gateway, MockBackend
from quallm.pipeline import (
    Checkpoint,
    PipelineOrderError,
    PipelineRunner,
    RunPaths,
)



def build_runner(fixture, workers=4, run_dir=None):
    paths = RunPaths(run_dir or fixture.run_dir)
    paths.run_dir.mkdir(parents=True, exist_ok=True)
    backend = MockBackend.from_script(fixture.script_path)
    gateway = Gateway(backend, sleep=lambda _: None, run_log_path=paths.llm_log)
    from quallm.config import load_config

    config = load_config(fixture.config_path)
    runner = PipelineRunner(paths, config.study(), gateway, workers=workers)
    return runner, paths, backend


@pytest.fixture(scope="module")
def fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    return build_demo_fixture(root, thread_count=20, group_size=5, chunk_size=7)


def ingest_into(fixture, run_dir):
    from quallm.ingest import (
        build_threads,
        filter_short,
        group_batches,
        parse_archive_file,
        write_groups,
    )

    submissions = parse_archive_file(fixture.submissions_path, "submissions")
    comments = parse_archive_file(fixture.comments_path, "comments")
    threads = build_threads(submissions.records, comments.records)
    retained, _ = filter_short(threads.documents, 100)
    groups = group_batches(retained, 5)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_groups(RunPaths(run_dir).groups, groups)


def stage_outputs(paths: RunPaths) -> dict[str, bytes]:
    files = [paths.concerns, paths.theme_assignments, paths.subtheme_assignments]
    files += paths.subtheme_files()
    return {f.name: f.read_bytes() for f in files if f.exists()}


# ---------------------------------------------------------------------------
# ordering and happy path
# ---------------------------------------------------------------------------


def test_stage_order_enforced(fixture, tmp_path):
    runner, paths, _ = build_runner(fixture, run_dir=tmp_path / "run")
    with pytest.raises(PipelineOrderError, match="ingest"):
        runner.stage_generate()
    with pytest.raises(PipelineOrderError, match="generate"):
        runner.stage_classify()
    with pytest.raises(PipelineOrderError, match="classify"):
        runner.stage_aggregate()
    with pytest.raises(PipelineOrderError, match="aggregate"):
        runner.stage_prevalence()


def test_full_run_recovers_planted_counts(fixture, tmp_path):
    run_dir = tmp_path / "run"
    ingest_into(fixture, run_dir)
    runner, paths, _ = build_runner(fixture, run_dir=run_dir)
    reports = runner.run_all()
    assert all(r.failed == 0 for r in reports)

    assigned = Counter(
        r["code"] for r in ndjson.iter_records(paths.theme_assignments)
    )
    assert dict(assigned) == {
        k: v for k, v in fixture.theme_counts.items() if v
    }
    for theme, counts in fixture.subtheme_counts.items():
        got = Counter(
            r["code"]
            for r in ndjson.iter_records(paths.subtheme_assignments)
            if r["theme"] == theme
        )
        assert dict(got) == {k: v for k, v in counts.items() if v}


def test_catch_all_concerns_never_reach_aggregation(fixture, tmp_path):
    run_dir = tmp_path / "run"
    ingest_into(fixture, run_dir)
    runner, paths, _ = build_runner(fixture, run_dir=run_dir)
    runner.run_all()

    catch_all_ids = {
        r["concern_id"]
        for r in ndjson.iter_records(paths.theme_assignments)
        if r["code"] == "E"
    }
    assert catch_all_ids  # fixture plants catch-all concerns
    assert not paths.subthemes("E").exists()
    prevalence_ids = {
        r["concern_id"] for r in ndjson.iter_records(paths.subtheme_assignments)
    }
    assert prevalence_ids.isdisjoint(catch_all_ids)


def test_outputs_independent_of_worker_count(fixture, tmp_path):
    captures = []
    for workers in (1, 4, 16):
        run_dir = tmp_path / f"run-w{workers}"
        ingest_into(fixture, run_dir)
        runner, paths, _ = build_runner(fixture, workers=workers, run_dir=run_dir)
        runner.run_all()
        captures.append(stage_outputs(paths))
    assert captures[0] == captures[1] == captures[2]


# ---------------------------------------------------------------------------
# resume / idempotency
# ---------------------------------------------------------------------------


def test_finished_stage_reruns_with_zero_backend_calls(fixture, tmp_path):
    run_dir = tmp_path / "run"
    ingest_into(fixture, run_dir)
    runner, paths, backend = build_runner(fixture, run_dir=run_dir)
    runner.run_all()
    calls_after_first = backend.calls
    before = stage_outputs(paths)

    runner2, paths2, backend2 = build_runner(fixture, run_dir=run_dir)
    reports = runner2.run_all()
    assert backend2.calls == 0
    assert all(r.executed == 0 for r in reports)
    assert stage_outputs(paths2) == before
    assert calls_after_first > 0


def test_partial_checkpoint_resumes_remaining_units(fixture, tmp_path):
    run_dir = tmp_path / "run"
    ingest_into(fixture, run_dir)
    runner, paths, backend = build_runner(fixture, run_dir=run_dir)
    report = runner.stage_generate()
    assert report.units_total == 4  # 20 threads / 5 per group
    full_outputs = paths.concerns.read_bytes()

    # simulate an interrupt: drop the last two checkpoint entries
    checkpoint = paths.checkpoint("generate")
    lines = checkpoint.read_text().splitlines()
    checkpoint.write_text("\n".join(lines[:2]) + "\n")
    paths.concerns.unlink()

    runner2, paths2, backend2 = build_runner(fixture, run_dir=run_dir)
    report2 = runner2.stage_generate()
    assert report2.executed == 2  # only the missing units re-ran
    assert report2.skipped == 2
    assert backend2.calls == 2
    assert paths2.concerns.read_bytes() == full_outputs


def test_corrupt_checkpoint_line_quarantined_and_unit_recomputed(fixture, tmp_path):
    run_dir = tmp_path / "run"
    ingest_into(fixture, run_dir)
    runner, paths, _ = build_runner(fixture, run_dir=run_dir)
    runner.stage_generate()
    checkpoint = paths.checkpoint("generate")
    lines = checkpoint.read_text().splitlines()
    corrupted_key = json.loads(lines[1])["key"]
    lines[1] = '{"key": "' + corrupted_key + '", "status": '  # truncated JSON
    checkpoint.write_text("\n".join(lines) + "\n")

    runner2, paths2, backend2 = build_runner(fixture, run_dir=run_dir)
    report = runner2.stage_generate()
    assert backend2.calls == 1  # only the damaged unit re-executed
    assert report.executed == 1
    assert paths2.quarantine("generate").exists()
    quarantined = paths2.quarantine("generate").read_text()
    assert corrupted_key in quarantined


def test_checkpoint_last_entry_per_key_wins(tmp_path):
    checkpoint = Checkpoint(tmp_path / "c.ndjson", tmp_path / "q.ndjson")
    checkpoint.append({"key": "u1", "status": "failed", "category": "network",
                       "detail": "", "attempts": 6, "payload": {}})
    checkpoint.append({"key": "u1", "status": "ok", "payload": {"x": 1}})
    entries = checkpoint.load()
    assert entries["u1"]["status"] == "ok"


def test_input_change_invalidates_stale_checkpoint(fixture, tmp_path):
    run_dir = tmp_path / "run"
    ingest_into(fixture, run_dir)
    runner, paths, backend = build_runner(fixture, run_dir=run_dir)
    runner.stage_generate()
    runner.stage_classify()
    calls = backend.calls

    # Re-write the concern file with one concern dropped: classify must
    # discard its checkpoint and re-run rather than trust stale chunks.
    records = list(ndjson.iter_records(paths.concerns))
    ndjson.write_records(paths.concerns, records[:-1])
    runner2, paths2, backend2 = build_runner(fixture, run_dir=run_dir)
    report = runner2.stage_classify()
    assert report.executed == report.units_total  # full re-run
    assigned = list(ndjson.iter_records(paths2.theme_assignments))
    assert len(assigned) == len(records) - 1


# ---------------------------------------------------------------------------
# failures and retry-failed
# ---------------------------------------------------------------------------


def test_failed_units_recorded_and_retry_failed_recovers(fixture, tmp_path):
    run_dir = tmp_path / "run"
    ingest_into(fixture, run_dir)

    # Script a generation unit that exhausts throttling retries on the
    # first pass and succeeds only on the 7th call.
    entries = list(ndjson.iter_records(fixture.script_path))
    victim_tag = next(e["request_tag"] for e in entries if e["request_tag"].startswith("gen:"))
    recovery = next(e for e in entries if e["request_tag"] == victim_tag)
    throttles = [{"request_tag": victim_tag, "failure": "throttled"}] * 6
    script = throttles + entries  # queue: 6 throttles, then the real answer

    paths = RunPaths(run_dir)
    backend = MockBackend(script)
    gateway = Gateway(backend, sleep=lambda _: None, run_log_path=paths.llm_log)
    from quallm.config import load_config

    config = load_config(fixture.config_path)
    runner = PipelineRunner(paths, config.study(), gateway, workers=2)

    report = runner.stage_generate()
    assert report.failed == 1
    assert report.failed_by_category == {"throttled": 1}
    concerns_before = len(list(ndjson.iter_records(paths.concerns)))

    retry_report = runner.stage_generate(retry_failed=True)
    assert retry_report.failed == 0
    concerns_after = len(list(ndjson.iter_records(paths.concerns)))
    assert concerns_after == concerns_before + 5  # recovered group's concerns


def test_classification_failures_conserve_concerns(fixture, tmp_path):
    run_dir = tmp_path / "run"
    ingest_into(fixture, run_dir)

    entries = list(ndjson.iter_records(fixture.script_path))
    # break chunk 2 permanently: wrong serial count on every attempt
    entries = [e for e in entries if e["request_tag"] != "cls:2"]
    entries.extend(
        {"request_tag": "cls:2", "response_text": '{"1": "A"}'} for _ in range(3)
    )
    paths = RunPaths(run_dir)
    gateway = Gateway(MockBackend(entries), sleep=lambda _: None)
    from quallm.config import load_config

    config = load_config(fixture.config_path)
    runner = PipelineRunner(paths, config.study(), gateway, workers=3)

    runner.stage_generate()
    report = runner.stage_classify()
    assert report.failed == 1
    summary = json.loads(paths.summary("classify").read_text())
    total = summary["assigned"] + summary["failed_concerns"]
    assert total == summary["concerns_in"]
