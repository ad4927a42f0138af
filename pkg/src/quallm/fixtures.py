"""Synthetic corpus and scripted mock backend for demos and tests.

``build_demo_fixture`` writes a miniature but complete study into a
directory: archive dumps, a taxonomy, a run config and a mock script
whose responses plant known theme and sub-theme assignments. Running
the pipeline against it must recover the planted counts exactly, which
is what the end-to-end checks assert.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

from . import ndjson
from .ingest import build_threads, filter_short, group_batches, parse_archive_file
from .models import BatchGroup
from .stages import make_concern_id

THEME_NAMES = {
    "A": "Pricing clarity",
    "B": "Dispatch predictability",
    "C": "Safety and time pressure",
    "D": "Support responsiveness",
    "E": "Other",
}

THEME_DESCRIPTIONS = {
    "A": "Concerns about how fares, rates and pay are calculated or shown.",
    "B": "Concerns about unpredictable assignment, scheduling or demand swings.",
    "C": "Concerns about unsafe situations or excessive time demands.",
    "D": "Concerns about reaching or getting help from platform support.",
    "E": "Any concerns that do not fit into the above categories.",
}

_BODY_SENTENCES = {
    "A": "The fare breakdown on my last trip made absolutely no sense to me.",
    "B": "Ride offers dry up the moment I plan my shift around the app.",
    "C": "The app keeps routing me through areas I would rather avoid at night.",
    "D": "Support took almost two weeks to answer a single simple question.",
    "E": "My cousin visited last weekend and we tried that new diner downtown.",
}

_FILLER = (
    "Other drivers in the city have been comparing notes about this for a while"
    " and nobody has a convincing explanation so far."
)


@dataclass
class DemoFixture:
    root: Path
    config_path: Path
    submissions_path: Path
    comments_path: Path
    script_path: Path
    taxonomy_path: Path
    run_dir: Path
    groups: list[BatchGroup]
    theme_counts: dict[str, int]
    subtheme_counts: dict[str, dict[str, int]] = field(default_factory=dict)
    concern_count: int = 0
    no_concern_groups: int = 1


def _submission_id(index: int) -> str:
    return f"s{index:04d}"


def _planted_theme(index: int) -> str:
    return "ABCDE"[(index - 1) % 5]


def _quote_sentence(index: int) -> str:
    theme = _planted_theme(index)
    return f"{_BODY_SENTENCES[theme]} (thread {_submission_id(index)})"


def _write_dumps(root: Path, thread_count: int) -> tuple[Path, Path]:
    base_ts = 1_650_000_000
    submissions = []
    comments = []
    for i in range(1, thread_count + 1):
        sid = _submission_id(i)
        theme = _planted_theme(i)
        created = base_ts + i * 3600
        submissions.append(
            {
                "id": sid,
                "title": f"{THEME_NAMES[theme]} question from a driver ({sid})",
                "selftext": f"{_quote_sentence(i)} {_FILLER}",
                "created_utc": created,
                "subreddit": "demoforum",
            }
        )
        # Two comments with timestamps deliberately out of file order.
        comments.append(
            {
                "id": f"c{i:04d}b",
                "link_id": f"t3_{sid}",
                "body": "Same here, it changed again last month with no notice.",
                "created_utc": created + 120,
            }
        )
        comments.append(
            {
                "id": f"c{i:04d}a",
                "link_id": f"t3_{sid}",
                "body": "Has anyone actually gotten a straight answer about this?",
                "created_utc": created + 60,
            }
        )
    submissions_path = root / "submissions.ndjson"
    comments_path = root / "comments.ndjson"
    ndjson.write_records(submissions_path, submissions)
    ndjson.write_records(comments_path, comments)
    return submissions_path, comments_path


def _generation_entries(
    groups: list[BatchGroup], skip_group: str
) -> tuple[list[dict], list[tuple[str, str]]]:
    """Mock generation responses; returns (script entries, [(concern_id, theme)])."""
    entries = []
    planted: list[tuple[str, str]] = []
    for group in groups:
        if group.group_key == skip_group:
            entries.append(
                {"request_tag": f"gen:{group.group_key}", "response_text": "No concerns"}
            )
            continue
        items = []
        for ordinal, member in enumerate(group.members, start=1):
            index = int(member.submission_id[1:])
            theme = _planted_theme(index)
            items.append(
                {
                    "title": f"{THEME_NAMES[theme]} issue in {member.submission_id}",
                    "description": (
                        f"Drivers report recurring trouble with"
                        f" {THEME_NAMES[theme].lower()} on thread"
                        f" {member.submission_id} lately."
                    ),
                    "quote": _quote_sentence(index),
                }
            )
            planted.append((make_concern_id(group.group_key, ordinal), theme))
        entries.append(
            {
                "request_tag": f"gen:{group.group_key}",
                "response_text": json.dumps(items, ensure_ascii=False),
            }
        )
    return entries, planted


def build_demo_fixture(
    root: Path,
    thread_count: int = 50,
    group_size: int = 5,
    chunk_size: int = 20,
    subtheme_count: int = 5,
    concurrency: int = 8,
) -> DemoFixture:
    """Write a complete synthetic study under *root* and return its layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    submissions_path, comments_path = _write_dumps(root, thread_count)

    # Replay the exact ingest path so group keys and ordering match the run.
    submissions = parse_archive_file(submissions_path, "submissions")
    comments = parse_archive_file(comments_path, "comments")
    threads = build_threads(submissions.records, comments.records)
    retained, _ = filter_short(threads.documents, 100)
    groups = group_batches(retained, group_size)

    skip_group = groups[-1].group_key  # scripted to answer "No concerns"
    script, planted = _generation_entries(groups, skip_group)

    theme_of = dict(planted)
    ordered_ids = sorted(theme_of)  # concern_id order == pipeline output order

    # Classification chunks over the sorted concern list.
    for chunk_index, start in enumerate(range(0, len(ordered_ids), chunk_size), 1):
        chunk = ordered_ids[start : start + chunk_size]
        mapping = {
            str(serial): theme_of[cid] for serial, cid in enumerate(chunk, start=1)
        }
        script.append(
            {
                "request_tag": f"cls:{chunk_index}",
                "response_text": json.dumps(mapping),
            }
        )

    theme_counts: dict[str, int] = {letter: 0 for letter in "ABCDE"}
    for theme in theme_of.values():
        theme_counts[theme] += 1

    # Aggregation: every active theme fits in one call; prevalence cycles
    # the planted sub-theme codes (including the catch-all) per theme.
    subtheme_codes = [string.ascii_uppercase[i] for i in range(subtheme_count)]
    catch_all_code = string.ascii_uppercase[subtheme_count]
    cycle = subtheme_codes + [catch_all_code]
    subtheme_counts: dict[str, dict[str, int]] = {}

    for theme in "ABCD":
        if theme_counts[theme] == 0:
            continue
        subthemes = [
            {
                "concern_rank": rank,
                "concern_title": f"{THEME_NAMES[theme]} pattern {rank}",
                "concern_description": (
                    f"Recurring {THEME_NAMES[theme].lower()} pattern number {rank}"
                    f" seen across many driver threads."
                ),
            }
            for rank in range(1, subtheme_count + 1)
        ]
        script.append(
            {
                "request_tag": f"agg:{theme}",
                "response_text": json.dumps(subthemes, ensure_ascii=False),
            }
        )

        theme_ids = [cid for cid in ordered_ids if theme_of[cid] == theme]
        counts = {code: 0 for code in cycle}
        for chunk_index, start in enumerate(range(0, len(theme_ids), chunk_size), 1):
            chunk = theme_ids[start : start + chunk_size]
            mapping = {}
            for serial, cid in enumerate(chunk, start=1):
                code = cycle[(start + serial - 1) % len(cycle)]
                mapping[str(serial)] = code
                counts[code] += 1
            script.append(
                {
                    "request_tag": f"prev:{theme}:{chunk_index}",
                    "response_text": json.dumps(mapping),
                }
            )
        subtheme_counts[theme] = counts

    script_path = root / "script.ndjson"
    ndjson.write_records(script_path, script)

    taxonomy_path = root / "taxonomy.json"
    taxonomy_path.write_text(
        json.dumps(
            [
                {
                    "code": letter,
                    "name": THEME_NAMES[letter],
                    "description": THEME_DESCRIPTIONS[letter],
                }
                for letter in "ABCDE"
            ],
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )

    run_dir = root / "run"
    config_path = root / "run.cfg"
    config_path.write_text(
        "\n".join(
            [
                "# synthetic demo study",
                "run_dir=run",
                "backend=mock",
                "mock_script=script.ndjson",
                "taxonomy=taxonomy.json",
                "topic=concerns about automated dispatch and pay platform features",
                "source=a demo driver forum",
                f"group_size={group_size}",
                f"classification_chunk_size={chunk_size}",
                "aggregation_chunk_size=400",
                f"prevalence_chunk_size={chunk_size}",
                f"subtheme_count={subtheme_count}",
                "min_chars=100",
                f"concurrency={concurrency}",
                "seed=0",
            ]
        )
        + "\n",
        encoding="utf-8",
    )

    return DemoFixture(
        root=root,
        config_path=config_path,
        submissions_path=submissions_path,
        comments_path=comments_path,
        script_path=script_path,
        taxonomy_path=taxonomy_path,
        run_dir=run_dir,
        groups=groups,
        theme_counts=theme_counts,
        subtheme_counts=subtheme_counts,
        concern_count=len(ordered_ids),
    )
