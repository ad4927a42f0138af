import json
from pathlib import Path

import pytest

from quallm import ndjson
from quallm.cli import main
from quallm.fixtures import build_demo_fixture


@pytest.fixture()
def fixture(tmp_path):
    return build_demo_fixture(tmp_path / "demo", thread_count=20, group_size=5,
                              chunk_size=7)


def run_ingest(fixture):
    return main(
        [
            "ingest",
            "--config", str(fixture.config_path),
            "--submissions", str(fixture.submissions_path),
            "--comments", str(fixture.comments_path),
        ]
    )


def test_ingest_happy_path_prints_counts(fixture, capsys):
    assert run_ingest(fixture) == 0
    out = capsys.readouterr().out
    assert "submissions parsed: 20" in out
    assert "threads retained: 20" in out
    assert "orphan comments dropped: 0" in out
    assert fixture.run_dir.joinpath("groups.ndjson").exists()


def test_ingest_missing_input_exits_2(fixture, capsys):
    rc = main(
        [
            "ingest",
            "--config", str(fixture.config_path),
            "--submissions", str(fixture.root / "nope.ndjson"),
            "--comments", str(fixture.comments_path),
        ]
    )
    assert rc == 2
    assert "input not found" in capsys.readouterr().err


def test_ingest_min_chars_monotone(fixture, tmp_path):
    def retained_with(min_chars):
        config_text = fixture.config_path.read_text().replace(
            "min_chars=100", f"min_chars={min_chars}"
        )
        config = tmp_path / f"cfg{min_chars}.cfg"
        config.write_text(config_text)
        run_dir = tmp_path / f"run{min_chars}"
        rc = main(
            [
                "ingest",
                "--config", str(config),
                "--run-dir", str(run_dir),
                "--submissions", str(fixture.submissions_path),
                "--comments", str(fixture.comments_path),
            ]
        )
        assert rc == 0
        return sum(
            len(g["members"])
            for g in ndjson.iter_records(run_dir / "groups.ndjson")
        )

    counts = [retained_with(m) for m in (50, 150, 220)]
    assert counts[0] >= counts[1] >= counts[2]


def test_stage_before_predecessor_exits_3(fixture, capsys):
    rc = main(["classify", "--config", str(fixture.config_path)])
    assert rc == 3
    assert "generate" in capsys.readouterr().err


def test_full_cli_run_and_idempotent_rerun(fixture, capsys):
    assert run_ingest(fixture) == 0
    assert main(["run-all", "--config", str(fixture.config_path)]) == 0

    log_lines = fixture.run_dir.joinpath("llm_log.ndjson").read_text().splitlines()
    outputs = {
        p.name: p.read_bytes()
        for p in fixture.run_dir.iterdir()
        if p.suffix in (".ndjson", ".json") and p.name != "llm_log.ndjson"
    }

    assert main(["run-all", "--config", str(fixture.config_path)]) == 0
    rerun_lines = fixture.run_dir.joinpath("llm_log.ndjson").read_text().splitlines()
    assert rerun_lines == log_lines  # zero backend calls on the second pass
    for name, blob in outputs.items():
        assert fixture.run_dir.joinpath(name).read_bytes() == blob


def test_stage_by_stage_cli_matches_run_all(fixture, tmp_path):
    assert run_ingest(fixture) == 0
    for stage in ("generate", "classify", "aggregate", "prevalence"):
        assert main([stage, "--config", str(fixture.config_path)]) == 0
    staged = {
        p.name: p.read_bytes()
        for p in fixture.run_dir.iterdir()
        if p.name.endswith((".ndjson", ".json")) and p.name != "llm_log.ndjson"
    }

    other = build_demo_fixture(tmp_path / "demo2", thread_count=20, group_size=5,
                               chunk_size=7)
    assert run_ingest(other) == 0
    assert main(["run-all", "--config", str(other.config_path)]) == 0
    for name, blob in staged.items():
        assert other.run_dir.joinpath(name).read_bytes() == blob


def test_report_command_writes_tables(fixture, capsys):
    run_ingest(fixture)
    main(["run-all", "--config", str(fixture.config_path)])
    rc = main(["report", "--config", str(fixture.config_path)])
    assert rc == 0
    report = fixture.run_dir / "report.md"
    assert report.exists()
    assert (fixture.run_dir / "distribution.csv").exists()
    assert (fixture.run_dir / "theme_A.csv").exists()
    text = report.read_text()
    assert "| Harm | Quote | % (Count) |" in text


def test_report_before_classify_exits_3(fixture, capsys):
    rc = main(["report", "--config", str(fixture.config_path)])
    assert rc == 3


def test_report_distribution_only_before_aggregation(fixture):
    run_ingest(fixture)
    main(["generate", "--config", str(fixture.config_path)])
    main(["classify", "--config", str(fixture.config_path)])
    rc = main(["report", "--config", str(fixture.config_path)])
    assert rc == 0
    assert (fixture.run_dir / "distribution.csv").exists()
    assert not list(fixture.run_dir.glob("theme_*.csv"))
    assert "Theme distribution" in (fixture.run_dir / "report.md").read_text()


def test_cost_command_reference_ledger(fixture, tmp_path, capsys):
    ledger_file = tmp_path / "ledger.json"
    ledger_file.write_text(
        json.dumps({"total_input_tokens": 135_120_000,
                    "total_output_tokens": 10_370_000})
    )
    fixture.run_dir.mkdir(parents=True, exist_ok=True)
    rc = main(
        [
            "cost",
            "--config", str(fixture.config_path),
            "--ledger", str(ledger_file),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "$1,662.30" in out
    assert "$1,351.20" in out
    assert "$311.10" in out
    assert (fixture.run_dir / "cost.md").exists()


def test_cost_command_from_run_log(fixture, capsys):
    run_ingest(fixture)
    main(["run-all", "--config", str(fixture.config_path)])
    rc = main(["cost", "--config", str(fixture.config_path)])
    assert rc == 0
    cost_md = (fixture.run_dir / "cost.md").read_text()
    assert "Total Expenditure" in cost_md


def test_eval_factuality_fixture(fixture, tmp_path, capsys):
    judgments = tmp_path / "judgments.csv"
    rows = ["item_id,verdict"]
    rows += [f"i{k},yes" for k in range(55)]
    rows += [f"j{k},no" for k in range(45)]
    judgments.write_text("\n".join(rows) + "\n")
    fixture.run_dir.mkdir(parents=True, exist_ok=True)
    rc = main(
        [
            "eval",
            "--config", str(fixture.config_path),
            "--metrics", "factuality",
            "--factuality-judgments", str(judgments),
        ]
    )
    assert rc == 0
    metrics_path = Path(capsys.readouterr().out.strip().splitlines()[-1])
    data = json.loads(metrics_path.read_text())
    [metric] = data["metrics"]
    assert metric["name"] == "factuality"
    assert metric["value"] == pytest.approx(0.55)
    assert metric["sample_size"] == 100


def test_eval_completeness_fixture(fixture, tmp_path, capsys):
    judgments = tmp_path / "completeness.csv"
    rows = ["item_id,verdict"]
    rows += [f"i{k},yes" for k in range(78)]
    rows += [f"j{k},no" for k in range(22)]
    judgments.write_text("\n".join(rows) + "\n")
    fixture.run_dir.mkdir(parents=True, exist_ok=True)
    rc = main(
        [
            "eval",
            "--config", str(fixture.config_path),
            "--metrics", "completeness",
            "--completeness-judgments", str(judgments),
        ]
    )
    assert rc == 0
    data = json.loads((fixture.run_dir / "metrics.json").read_text())
    [metric] = data["metrics"]
    assert metric["name"] == "completeness"
    assert metric["value"] == pytest.approx(0.78)
    assert metric["significant_at_0.05"] is True  # 78/100 vs chance 0.5


def test_eval_missing_annotation_file_exits_3(fixture, capsys):
    fixture.run_dir.mkdir(parents=True, exist_ok=True)
    rc = main(
        [
            "eval",
            "--config", str(fixture.config_path),
            "--metrics", "factuality",
            "--factuality-judgments", str(fixture.root / "absent.csv"),
        ]
    )
    assert rc == 3


def test_eval_accuracy_and_fleiss(fixture, tmp_path, capsys):
    gold = tmp_path / "gold.csv"
    gold.write_text(
        "item_id,annotator_id,label\n"
        + "".join(f"i{k},gold,A\n" for k in range(100))
    )
    predicted = tmp_path / "predicted.csv"
    predicted.write_text(
        "item_id,annotator_id,label\n"
        + "".join(f"i{k},llm,{'A' if k < 74 else 'B'}\n" for k in range(100))
    )
    labels = tmp_path / "labels.csv"
    labels.write_text(
        "item_id,annotator_id,label\n"
        "i1,r1,A\ni1,r2,A\ni1,r3,B\n"
        "i2,r1,B\ni2,r2,B\ni2,r3,B\n"
        "i3,r1,A\ni3,r2,C\ni3,r3,C\n"
    )
    fixture.run_dir.mkdir(parents=True, exist_ok=True)
    rc = main(
        [
            "eval",
            "--config", str(fixture.config_path),
            "--metrics", "accuracy,fleiss",
            "--gold", str(gold),
            "--predicted", str(predicted),
            "--labels", str(labels),
            "--chance-p", "0.2",
        ]
    )
    assert rc == 0
    data = json.loads((fixture.run_dir / "metrics.json").read_text())
    by_name = {m["name"]: m for m in data["metrics"]}
    assert by_name["accuracy"]["value"] == pytest.approx(0.74)
    assert by_name["accuracy"]["significant_at_0.05"] is True
    assert "fleiss_kappa" in by_name


def test_eval_aggregation_metric_over_mock_run(fixture, capsys):
    run_ingest(fixture)
    main(["run-all", "--config", str(fixture.config_path)])
    rc = main(
        [
            "eval",
            "--config", str(fixture.config_path),
            "--metrics", "aggregation",
            "--min-topic-size", "1",
        ]
    )
    assert rc == 0
    data = json.loads((fixture.run_dir / "metrics.json").read_text())
    names = {m["name"] for m in data["metrics"]}
    assert {
        "distinctness_mean",
        "distinctness_pooled",
        "coverage_1_mean",
        "coverage_1_pooled",
        "coverage_2_mean",
        "coverage_2_pooled",
    } <= names
    for metric in data["metrics"]:
        assert 0.0 <= metric["value"] <= 1.0


def test_eval_unknown_metric_exits_2(fixture, capsys):
    fixture.run_dir.mkdir(parents=True, exist_ok=True)
    rc = main(
        [
            "eval",
            "--config", str(fixture.config_path),
            "--metrics", "sharpness",
        ]
    )
    assert rc == 2


def test_retry_failed_reports_decreasing_failures(fixture, capsys, tmp_path):
    # First pass: one classification chunk fails on throttling (the mock
    # replays the throttle for every attempt of that tag).
    entries = list(ndjson.iter_records(fixture.script_path))
    good_cls1 = next(e for e in entries if e["request_tag"] == "cls:1")
    broken = [e for e in entries if e["request_tag"] != "cls:1"]
    broken.append({"request_tag": "cls:1", "failure": "throttled"})
    ndjson.write_records(fixture.script_path, broken)
    with fixture.config_path.open("a") as fh:
        fh.write("backoff_base=0.001\n")  # keep throttle retries instant

    run_ingest(fixture)
    rc = main(["run-all", "--config", str(fixture.config_path)])
    assert rc == 4  # backend exhaustion: at least one unit failed
    summary = json.loads(
        (fixture.run_dir / "summaries" / "classify.json").read_text()
    )
    assert summary["failed"] == 1

    # The backend "recovers": restore the scripted answer, then retry.
    ndjson.write_records(fixture.script_path, entries)
    rc = main(["retry-failed", "--config", str(fixture.config_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "[classify] failures: 1 before -> 0 after" in out
    for stage in ("generate", "classify", "aggregate", "prevalence"):
        summary = json.loads(
            (fixture.run_dir / "summaries" / f"{stage}.json").read_text()
        )
        assert summary["failed"] == 0

    # Downstream stages were invalidated and re-run: the final outputs
    # now carry every planted assignment.
    from collections import Counter

    assigned = Counter(
        r["code"]
        for r in ndjson.iter_records(fixture.run_dir / "theme_assignments.ndjson")
    )
    assert dict(assigned) == {k: v for k, v in fixture.theme_counts.items() if v}


def test_bad_config_key_exits_2(fixture, tmp_path, capsys):
    config = tmp_path / "bad.cfg"
    config.write_text("run_dir=x\nbackend=mock\nmock_script=s\nbanana=1\n")
    rc = main(["generate", "--config", str(config)])
    assert rc == 2
    assert "unknown key" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path, capsys):
    rc = main(["generate", "--config", str(tmp_path / "no.cfg")])
    assert rc == 2
