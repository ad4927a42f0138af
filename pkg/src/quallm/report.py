"""Prevalence tables, theme distribution and their markdown/CSV renders.

All computation keeps exact integer counts and full-precision percents;
rounding happens only when a value is rendered. Percents render to one
decimal with a trailing ".0" trimmed, counts with thousands separators,
currency to two decimals.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .gateway import CostBreakdown
from .models import SubThemeAssignment, SubThemeSet, ThemeAssignment, ThemeTaxonomy

logger = logging.getLogger(__name__)

CATCH_ALL_ROW_LABEL = "Other"


def render_percent(value: float) -> str:
    """One decimal, ".0" trimmed: 29.133 -> "29.1", 20.0 -> "20"."""
    text = f"{value:.1f}"
    return text[:-2] if text.endswith(".0") else text


def render_count(value: int) -> str:
    return f"{value:,}"


def render_currency(value: float) -> str:
    return f"${value:,.2f}"


# ---------------------------------------------------------------------------
# Theme distribution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThemeDistribution:
    counts: dict[str, int]  # letter -> count, in taxonomy order
    grand_total: int

    def percent(self, code: str) -> float:
        if self.grand_total == 0:
            return 0.0
        return 100.0 * self.counts[code] / self.grand_total


def compute_theme_distribution(
    assignments: Iterable[ThemeAssignment], taxonomy: ThemeTaxonomy
) -> ThemeDistribution:
    """Counts and percents per taxonomy letter, catch-all included."""
    counts = {c.code: 0 for c in taxonomy.categories}
    total = 0
    for assignment in assignments:
        if assignment.code not in counts:
            raise ValueError(f"assignment letter {assignment.code!r} not in taxonomy")
        counts[assignment.code] += 1
        total += 1
    return ThemeDistribution(counts=counts, grand_total=total)


def render_distribution_markdown(
    dist: ThemeDistribution, taxonomy: ThemeTaxonomy
) -> str:
    lines = [
        "| Theme | % | Count |",
        "| --- | --- | --- |",
    ]
    for category in taxonomy.categories:
        count = dist.counts[category.code]
        lines.append(
            f"| {category.code}. {category.name}"
            f" | {render_percent(dist.percent(category.code))}"
            f" | {render_count(count)} |"
        )
    lines.append(f"| Total |  | {render_count(dist.grand_total)} |")
    return "\n".join(lines) + "\n"


def render_distribution_csv(dist: ThemeDistribution, taxonomy: ThemeTaxonomy) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["code", "name", "percent", "count"])
    for category in taxonomy.categories:
        writer.writerow(
            [
                category.code,
                category.name,
                render_percent(dist.percent(category.code)),
                dist.counts[category.code],
            ]
        )
    return buffer.getvalue()


# ---------------------------------------------------------------------------
# Per-theme prevalence tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrevalenceRow:
    code: str
    rank: int
    title: str
    count: int
    percent: float
    quote: Optional[str] = None


@dataclass(frozen=True)
class PrevalenceTable:
    theme: str
    total: int
    rows: tuple[PrevalenceRow, ...]  # sorted by count desc, ties by title
    catch_all_count: int

    @property
    def catch_all_percent(self) -> float:
        if self.total == 0:
            return 0.0
        return 100.0 * self.catch_all_count / self.total


def compute_prevalence_table(
    assignments: Sequence[SubThemeAssignment],
    subthemes: SubThemeSet,
    total: Optional[int] = None,
) -> PrevalenceTable:
    """Count sub-theme assignments for one theme.

    ``total`` defaults to the assignment count; passing it explicitly
    supports rebuilding a table from published counts. The catch-all row
    is the remainder total - sum(row counts), so count conservation is
    visible in the render.
    """
    code_counts = {code: 0 for code in subthemes.codes}
    seen = 0
    for assignment in assignments:
        if assignment.theme != subthemes.theme:
            raise ValueError(
                f"assignment theme {assignment.theme!r} does not match table theme"
                f" {subthemes.theme!r}"
            )
        seen += 1
        if assignment.code in code_counts:
            code_counts[assignment.code] += 1
        elif assignment.code != subthemes.catch_all_code:
            raise ValueError(f"assignment code {assignment.code!r} not in sub-themes")
    table_total = seen if total is None else total
    if table_total < sum(code_counts.values()):
        raise ValueError("total is smaller than the sum of sub-theme counts")

    rows = []
    for code, entry in zip(subthemes.codes, subthemes.by_rank()):
        count = code_counts[code]
        percent = 100.0 * count / table_total if table_total else 0.0
        rows.append(
            PrevalenceRow(
                code=code,
                rank=entry.rank,
                title=entry.title,
                count=count,
                percent=percent,
                quote=entry.quote,
            )
        )
    rows.sort(key=lambda r: (-r.count, r.title))
    return PrevalenceTable(
        theme=subthemes.theme,
        total=table_total,
        rows=tuple(rows),
        catch_all_count=table_total - sum(code_counts.values()),
    )


QuoteMap = dict[tuple[str, int], str]


def load_quotes(path: Path) -> QuoteMap:
    """Load the human-edited quote file: a JSON list of
    {"theme": letter, "rank": int, "quote": text} objects."""
    data = json.loads(path.read_text(encoding="utf-8"))
    quotes: QuoteMap = {}
    for item in data:
        quotes[(str(item["theme"]), int(item["rank"]))] = str(item["quote"])
    return quotes


def _attach_quotes(table: PrevalenceTable, quotes: Optional[QuoteMap]) -> list[PrevalenceRow]:
    if not quotes:
        return list(table.rows)
    known = {(table.theme, row.rank) for row in table.rows}
    for key in quotes:
        if key[0] == table.theme and key not in known:
            logger.warning("quote for unknown (theme, rank) %s ignored", key)
    rows = []
    for row in table.rows:
        quote = quotes.get((table.theme, row.rank), row.quote)
        rows.append(
            PrevalenceRow(
                code=row.code, rank=row.rank, title=row.title,
                count=row.count, percent=row.percent, quote=quote,
            )
        )
    return rows


def render_theme_table_markdown(
    table: PrevalenceTable, quotes: Optional[QuoteMap] = None
) -> str:
    """Columns: Harm | Quote | % (Count); quote column blank when absent."""
    rows = _attach_quotes(table, quotes)
    lines = [
        f"Theme {table.theme} (Total = {render_count(table.total)})",
        "",
        "| Harm | Quote | % (Count) |",
        "| --- | --- | --- |",
    ]
    for row in rows:
        quote = f"*“{row.quote}”*" if row.quote else ""
        lines.append(
            f"| {row.title} | {quote}"
            f" | {render_percent(row.percent)} ({render_count(row.count)}) |"
        )
    lines.append(
        f"| {CATCH_ALL_ROW_LABEL} |  |"
        f" {render_percent(table.catch_all_percent)}"
        f" ({render_count(table.catch_all_count)}) |"
    )
    return "\n".join(lines) + "\n"


def render_theme_table_csv(
    table: PrevalenceTable, quotes: Optional[QuoteMap] = None
) -> str:
    rows = _attach_quotes(table, quotes)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["harm", "quote", "percent", "count"])
    for row in rows:
        writer.writerow(
            [row.title, row.quote or "", render_percent(row.percent), row.count]
        )
    writer.writerow(
        [
            CATCH_ALL_ROW_LABEL,
            "",
            render_percent(table.catch_all_percent),
            table.catch_all_count,
        ]
    )
    return buffer.getvalue()


# ---------------------------------------------------------------------------
# Cost table
# ---------------------------------------------------------------------------


def render_cost_table(cost: CostBreakdown) -> str:
    per_1k = "per 1K tokens"
    lines = [
        "| Cost Category | Token Quantity | Cost (USD) |",
        "| --- | --- | --- |",
        f"| Input Token Rate | - | {render_currency(cost.input_rate)} {per_1k} |",
        f"| Output Token Rate | - | {render_currency(cost.output_rate)} {per_1k} |",
        f"| Total Input Tokens | {render_count(cost.total_input_tokens)}"
        f" | {render_currency(cost.input_cost)} |",
        f"| Total Output Tokens | {render_count(cost.total_output_tokens)}"
        f" | {render_currency(cost.output_cost)} |",
        f"| **Total Expenditure** | - | **{render_currency(cost.total_cost)}** |",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# File outputs
# ---------------------------------------------------------------------------


def write_reports(
    run_dir: Path,
    taxonomy: ThemeTaxonomy,
    theme_assignments: Sequence[ThemeAssignment],
    subtheme_sets: Sequence[SubThemeSet],
    subtheme_assignments: Sequence[SubThemeAssignment],
    quotes: Optional[QuoteMap] = None,
) -> list[Path]:
    """Write report.md, distribution.csv and one CSV per theme table."""
    written: list[Path] = []
    dist = compute_theme_distribution(theme_assignments, taxonomy)

    sections = ["# Theme report", "", "## Theme distribution", ""]
    sections.append(render_distribution_markdown(dist, taxonomy))

    dist_csv = run_dir / "distribution.csv"
    dist_csv.write_text(render_distribution_csv(dist, taxonomy), encoding="utf-8")
    written.append(dist_csv)

    by_theme: dict[str, list[SubThemeAssignment]] = {}
    for assignment in subtheme_assignments:
        by_theme.setdefault(assignment.theme, []).append(assignment)

    names = {c.code: c.name for c in taxonomy.categories}
    for subthemes in sorted(subtheme_sets, key=lambda s: s.theme):
        table = compute_prevalence_table(by_theme.get(subthemes.theme, []), subthemes)
        sections.append(f"## {subthemes.theme}. {names.get(subthemes.theme, '')}")
        sections.append("")
        sections.append(render_theme_table_markdown(table, quotes))
        csv_path = run_dir / f"theme_{subthemes.theme}.csv"
        csv_path.write_text(render_theme_table_csv(table, quotes), encoding="utf-8")
        written.append(csv_path)

    report_path = run_dir / "report.md"
    report_path.write_text("\n".join(sections), encoding="utf-8")
    written.insert(0, report_path)
    return written


def write_cost_report(run_dir: Path, cost: CostBreakdown) -> Path:
    path = run_dir / "cost.md"
    path.write_text("# Token usage and cost\n\n" + render_cost_table(cost),
                    encoding="utf-8")
    return path
