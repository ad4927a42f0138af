"""Stage operations: model-output parsing, contract enforcement, retries.

Each stage has a strict output contract. Generation must return a JSON
array of concern objects or the literal "No concerns"; classification
and prevalence must return a serial->letter map covering exactly the
chunk that was sent (the parity check); aggregation must return exactly
n sub-themes whose ranks form a permutation of 1..n. Parity violations
are usually formatting flukes, so they are retried a bounded number of
times before the unit is marked failed. Gateway-level failures
(throttling past the cap, content filtering) are never retried here.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .gateway import Gateway, GatewayFailure, MALFORMED_OUTPUT, OTHER
from .ingest import derive_group_key
from .models import (
    BatchGroup,
    Concern,
    StudyConfig,
    SubThemeAssignment,
    SubThemeEntry,
    SubThemeSet,
    ThemeAssignment,
    ThemeCategory,
)
from .prompts import (
    PromptTooLargeError,
    render_aggregation_prompt,
    render_classification_prompt,
    render_generation_prompt,
    render_merge_prompt,
    render_prevalence_prompt,
)

logger = logging.getLogger(__name__)

NO_CONCERNS = "no concerns"

QUOTE_VERBATIM = "verbatim"
QUOTE_FUZZY = "fuzzy"
QUOTE_ABSENT = "absent"
FUZZY_OVERLAP_THRESHOLD = 0.8

# Advisory description length from the generation contract; violations
# are warnings, never failures.
DESCRIPTION_WORDS = (10, 20)

_FENCE_RE = re.compile(r"^```[a-zA-Z0-9]*\s*\n(.*)\n```\s*$", re.DOTALL)
_PAIR_RE = re.compile(r"(\d+)\s*[:=]\s*[\"']?([A-Za-z])[\"']?")


class MalformedStageOutput(ValueError):
    """Model output that violates the stage contract."""


def strip_code_fences(text: str) -> str:
    stripped = text.strip()
    match = _FENCE_RE.match(stripped)
    return match.group(1).strip() if match else stripped


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def make_concern_id(group_key: str, ordinal: int) -> str:
    # Zero-padded so string order equals (group_key, ordinal) order.
    return f"{group_key}-{ordinal:04d}"


def parse_generation_output(text: str, group: BatchGroup) -> list[Concern]:
    """Turn one generation response into enriched concerns.

    "No concerns" (case-insensitive, surrounding whitespace ignored)
    yields an empty list. Anything that is not a JSON array of objects
    with title/description/quote raises MalformedStageOutput.
    """
    body = strip_code_fences(text)
    if body.lower() == NO_CONCERNS:
        return []
    try:
        data = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MalformedStageOutput(f"unparseable generation output: {exc}") from exc
    if not isinstance(data, list):
        raise MalformedStageOutput("generation output is not a JSON array")

    concerns: list[Concern] = []
    for ordinal, item in enumerate(data, start=1):
        if not isinstance(item, dict):
            raise MalformedStageOutput(f"item {ordinal} is not an object")
        missing = [k for k in ("title", "description", "quote") if k not in item]
        if missing:
            raise MalformedStageOutput(
                f"item {ordinal} is missing field(s): {', '.join(missing)}"
            )
        try:
            concerns.append(
                Concern(
                    concern_id=make_concern_id(group.group_key, ordinal),
                    group_key=group.group_key,
                    earliest_timestamp=group.earliest_timestamp,
                    title=str(item["title"]),
                    description=str(item["description"]),
                    quote=str(item["quote"]),
                )
            )
        except ValueError as exc:
            raise MalformedStageOutput(f"item {ordinal}: {exc}") from exc
    return concerns


_PUNCT_RE = re.compile(r"[^a-z0-9\s]+")


def _normalize(text: str) -> str:
    # Punctuation is dropped in place ("it's" -> "its"), then whitespace
    # collapsed, so punctuation-only edits cannot break a verbatim match.
    return " ".join(_PUNCT_RE.sub("", text.lower()).split())


def _best_window_overlap(quote_tokens: list[str], member_tokens: list[str]) -> float:
    """Max multiset-overlap ratio of the quote against same-length windows."""
    qlen = len(quote_tokens)
    if qlen == 0 or not member_tokens:
        return 0.0
    need = Counter(quote_tokens)
    width = min(qlen, len(member_tokens))
    window = Counter(member_tokens[:width])
    overlap = sum(min(count, need[token]) for token, count in window.items())
    best = overlap
    for i in range(width, len(member_tokens)):
        leaving = member_tokens[i - width]
        if window[leaving] <= need[leaving]:
            overlap -= 1
        window[leaving] -= 1
        entering = member_tokens[i]
        window[entering] += 1
        if window[entering] <= need[entering]:
            overlap += 1
        if overlap > best:
            best = overlap
    return best / qlen


def verify_quote(concern: Concern, group: BatchGroup) -> str:
    """Check the quote against the source threads; never blocks the pipeline.

    Returns "verbatim" when the normalized quote appears as a substring
    of any member text, "fuzzy" when a same-length token window of some
    member overlaps the quote's tokens at >= 0.8, else "absent".
    """
    quote_norm = _normalize(concern.quote)
    if not quote_norm:
        return QUOTE_ABSENT
    member_norms = [_normalize(m.text) for m in group.members]
    for text in member_norms:
        if quote_norm in text:
            return QUOTE_VERBATIM
    quote_tokens = quote_norm.split()
    for text in member_norms:
        if _best_window_overlap(quote_tokens, text.split()) >= FUZZY_OVERLAP_THRESHOLD:
            return QUOTE_FUZZY
    return QUOTE_ABSENT


@dataclass
class GenerationOutcome:
    group_key: str
    concerns: list[Concern] = field(default_factory=list)
    failure: Optional[GatewayFailure] = None
    description_warnings: int = 0

    @property
    def ok(self) -> bool:
        return self.failure is None


def _attach_quote_checks(
    concerns: list[Concern], group: BatchGroup
) -> tuple[list[Concern], int]:
    checked: list[Concern] = []
    warnings = 0
    lo, hi = DESCRIPTION_WORDS
    for concern in concerns:
        words = len(concern.description.split())
        if not lo <= words <= hi:
            warnings += 1
            logger.debug(
                "concern %s: description is %d words (advisory range %d-%d)",
                concern.concern_id, words, lo, hi,
            )
        checked.append(
            Concern(
                concern_id=concern.concern_id,
                group_key=concern.group_key,
                earliest_timestamp=concern.earliest_timestamp,
                title=concern.title,
                description=concern.description,
                quote=concern.quote,
                quote_check=verify_quote(concern, group),
            )
        )
    return checked, warnings


def generate_for_group(
    gateway: Gateway,
    group: BatchGroup,
    config: StudyConfig,
    template_dir: Optional[Path] = None,
) -> GenerationOutcome:
    """Run the generation stage for one batch group.

    A group whose prompt exceeds the context budget is split into
    singleton groups rather than truncated (truncation would silently
    bias toward thread openings).
    """
    try:
        prompt = render_generation_prompt(group, config, template_dir)
    except PromptTooLargeError as exc:
        if len(group.members) == 1:
            return GenerationOutcome(
                group_key=group.group_key,
                failure=GatewayFailure(category=OTHER, attempts=0, detail=str(exc)),
            )
        outcome = GenerationOutcome(group_key=group.group_key)
        for member in group.members:
            singleton = BatchGroup(
                group_key=derive_group_key([member.submission_id]),
                members=(member,),
                earliest_timestamp=member.created_at,
            )
            sub = generate_for_group(gateway, singleton, config, template_dir)
            if not sub.ok:
                outcome.failure = sub.failure
                return outcome
            outcome.concerns.extend(sub.concerns)
            outcome.description_warnings += sub.description_warnings
        return outcome

    reply = gateway.complete(gateway.request(prompt, f"gen:{group.group_key}"))
    if isinstance(reply, GatewayFailure):
        return GenerationOutcome(group_key=group.group_key, failure=reply)
    try:
        concerns = parse_generation_output(reply.text, group)
    except MalformedStageOutput as exc:
        return GenerationOutcome(
            group_key=group.group_key,
            failure=GatewayFailure(
                category=MALFORMED_OUTPUT, attempts=reply.attempts, detail=str(exc)
            ),
        )
    checked, warnings = _attach_quote_checks(concerns, group)
    return GenerationOutcome(
        group_key=group.group_key, concerns=checked, description_warnings=warnings
    )


# ---------------------------------------------------------------------------
# Serial->letter maps (classification and prevalence share the contract)
# ---------------------------------------------------------------------------


def parse_serial_letter_map(text: str) -> dict[int, str]:
    """Parse a {serial: letter} response, accepting JSON or the relaxed
    unquoted form the prompt itself demonstrates ({1: A, 2: B})."""
    body = strip_code_fences(text)
    try:
        data = json.loads(body)
        if isinstance(data, dict):
            return {int(k): str(v).strip().upper() for k, v in data.items()}
    except (json.JSONDecodeError, TypeError, ValueError):
        pass
    pairs = _PAIR_RE.findall(body)
    if not pairs:
        raise MalformedStageOutput("no serial: letter pairs found in output")
    return {int(serial): letter.upper() for serial, letter in pairs}


def check_parity(mapping: dict[int, str], expected_count: int) -> None:
    """Entry count must equal the chunk size and serials must be 1..m."""
    if len(mapping) != expected_count:
        raise MalformedStageOutput(
            f"expected {expected_count} entries, got {len(mapping)}"
        )
    expected = set(range(1, expected_count + 1))
    if set(mapping) != expected:
        missing = sorted(expected - set(mapping))[:5]
        raise MalformedStageOutput(f"serials are not exactly 1..{expected_count}"
                                   f" (first missing: {missing})")


@dataclass
class ChunkOutcome:
    """Result of one classification or prevalence chunk."""

    index: int
    concern_ids: list[str]
    letters: Optional[list[str]] = None
    failure: Optional[GatewayFailure] = None
    remapped: int = 0

    @property
    def ok(self) -> bool:
        return self.failure is None


def _run_letter_chunk(
    gateway: Gateway,
    prompt: str,
    tag: str,
    index: int,
    concern_ids: list[str],
    valid_codes: Sequence[str],
    catch_all: str,
    retries: int,
) -> ChunkOutcome:
    last_detail = ""
    for attempt in range(retries + 1):
        reply = gateway.complete(gateway.request(prompt, tag))
        if isinstance(reply, GatewayFailure):
            return ChunkOutcome(index=index, concern_ids=concern_ids, failure=reply)
        try:
            mapping = parse_serial_letter_map(reply.text)
            check_parity(mapping, len(concern_ids))
        except MalformedStageOutput as exc:
            last_detail = str(exc)
            logger.debug("chunk %s attempt %d parity violation: %s",
                         tag, attempt + 1, exc)
            continue
        letters: list[str] = []
        remapped = 0
        valid = set(valid_codes)
        for serial in range(1, len(concern_ids) + 1):
            letter = mapping[serial]
            if letter not in valid:
                logger.warning(
                    "chunk %s: letter %r outside the category set, remapped to %s",
                    tag, letter, catch_all,
                )
                letter = catch_all
                remapped += 1
            letters.append(letter)
        return ChunkOutcome(
            index=index, concern_ids=concern_ids, letters=letters, remapped=remapped
        )
    return ChunkOutcome(
        index=index,
        concern_ids=concern_ids,
        failure=GatewayFailure(
            category=MALFORMED_OUTPUT,
            attempts=retries + 1,
            detail=f"parity violation persisted after {retries} retries: {last_detail}",
        ),
    )


def chunk_slices(total: int, chunk_size: int) -> list[tuple[int, int]]:
    """(start, end) index pairs covering 0..total in chunk_size steps."""
    return [(i, min(i + chunk_size, total)) for i in range(0, total, chunk_size)]


def classify_chunk(
    gateway: Gateway,
    concerns: Sequence[Concern],
    config: StudyConfig,
    chunk_index: int,
    template_dir: Optional[Path] = None,
) -> ChunkOutcome:
    prompt = render_classification_prompt(concerns, config, template_dir)
    return _run_letter_chunk(
        gateway,
        prompt,
        tag=f"cls:{chunk_index}",
        index=chunk_index,
        concern_ids=[c.concern_id for c in concerns],
        valid_codes=config.taxonomy.codes,
        catch_all=config.taxonomy.catch_all.code,
        retries=config.parity_retries,
    )


@dataclass
class ClassificationResult:
    assignments: list[ThemeAssignment]
    failed_chunks: list[ChunkOutcome]
    remapped: int

    @property
    def failed_concern_ids(self) -> list[str]:
        return [cid for chunk in self.failed_chunks for cid in chunk.concern_ids]


def run_classification(
    gateway: Gateway,
    concerns: Sequence[Concern],
    config: StudyConfig,
    template_dir: Optional[Path] = None,
) -> ClassificationResult:
    """Classify concerns into top-level themes in numbered chunks.

    Conservation holds by construction: every input concern ends up
    either in ``assignments`` or in a failed chunk.
    """
    if not concerns:
        raise ValueError("run_classification requires a non-empty concern list")
    assignments: list[ThemeAssignment] = []
    failed: list[ChunkOutcome] = []
    remapped = 0
    for index, (start, end) in enumerate(
        chunk_slices(len(concerns), config.classification_chunk_size), start=1
    ):
        chunk = concerns[start:end]
        outcome = classify_chunk(gateway, chunk, config, index, template_dir)
        if outcome.ok:
            assert outcome.letters is not None
            assignments.extend(
                ThemeAssignment(concern_id=c.concern_id, code=letter)
                for c, letter in zip(chunk, outcome.letters)
            )
            remapped += outcome.remapped
        else:
            failed.append(outcome)
    return ClassificationResult(
        assignments=assignments, failed_chunks=failed, remapped=remapped
    )


# ---------------------------------------------------------------------------
# Aggregation (with map-reduce over the per-call budget)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AggregationPlan:
    map_calls: int
    merge_calls: int

    @property
    def total_calls(self) -> int:
        return self.map_calls + self.merge_calls


def plan_aggregation(concern_count: int, budget: int) -> AggregationPlan:
    """One call when the list fits the budget; otherwise chunked map calls
    feeding a single merge call over the candidate sub-themes."""
    if concern_count < 1:
        raise ValueError("cannot aggregate zero concerns")
    if budget < 1:
        raise ValueError("aggregation budget must be >= 1")
    if concern_count <= budget:
        return AggregationPlan(map_calls=1, merge_calls=0)
    maps = -(-concern_count // budget)
    return AggregationPlan(map_calls=maps, merge_calls=1)


def parse_subtheme_output(text: str, theme: str, expected_n: int) -> SubThemeSet:
    """Parse ranked sub-themes; count, rank-permutation and distinct-title
    violations all raise MalformedStageOutput (callers retry)."""
    body = strip_code_fences(text)
    items: Optional[list] = None
    try:
        data = json.loads(body)
        if isinstance(data, list):
            items = data
    except json.JSONDecodeError:
        pass
    if items is None:
        # One JSON object per line is also accepted.
        items = []
        for line in body.splitlines():
            line = line.strip().rstrip(",")
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedStageOutput(
                    f"unparseable sub-theme output: {exc}"
                ) from exc
            items.append(obj)

    entries: list[SubThemeEntry] = []
    for item in items:
        if not isinstance(item, dict):
            raise MalformedStageOutput("sub-theme item is not an object")
        try:
            rank = int(item.get("concern_rank", item.get("rank")))
            title = str(item.get("concern_title", item.get("title")))
            description = str(
                item.get("concern_description", item.get("description", ""))
            )
        except (TypeError, ValueError) as exc:
            raise MalformedStageOutput(f"bad sub-theme item {item!r}") from exc
        entries.append(SubThemeEntry(rank=rank, title=title, description=description))

    if len(entries) != expected_n:
        raise MalformedStageOutput(
            f"expected {expected_n} sub-themes, got {len(entries)}"
        )
    try:
        return SubThemeSet(theme=theme, entries=tuple(entries))
    except ValueError as exc:
        raise MalformedStageOutput(str(exc)) from exc


@dataclass
class AggregationOutcome:
    theme: str
    subthemes: Optional[SubThemeSet] = None
    failure: Optional[GatewayFailure] = None
    plan: Optional[AggregationPlan] = None

    @property
    def ok(self) -> bool:
        return self.failure is None


def _aggregation_call(
    gateway: Gateway,
    prompt: str,
    tag: str,
    theme: str,
    n: int,
    retries: int,
) -> tuple[Optional[SubThemeSet], Optional[GatewayFailure]]:
    last_detail = ""
    for _ in range(retries + 1):
        reply = gateway.complete(gateway.request(prompt, tag))
        if isinstance(reply, GatewayFailure):
            return None, reply
        try:
            return parse_subtheme_output(reply.text, theme, n), None
        except MalformedStageOutput as exc:
            last_detail = str(exc)
            continue
    return None, GatewayFailure(
        category=MALFORMED_OUTPUT,
        attempts=retries + 1,
        detail=f"sub-theme contract violated after {retries} retries: {last_detail}",
    )


def run_aggregation(
    gateway: Gateway,
    category: ThemeCategory,
    theme_concerns: Sequence[Concern],
    config: StudyConfig,
    template_dir: Optional[Path] = None,
) -> AggregationOutcome:
    """Produce the ranked sub-theme set for one theme.

    When the concern list exceeds the per-call budget, chunked map calls
    each propose n candidates and a single merge call over all candidate
    titles/descriptions picks the final n.
    """
    if not theme_concerns:
        raise ValueError(f"theme {category.code}: aggregation needs >= 1 concern")
    theme = category.code
    n = config.subtheme_count
    plan = plan_aggregation(len(theme_concerns), config.aggregation_chunk_size)

    if plan.merge_calls == 0:
        prompt = render_aggregation_prompt(category, theme_concerns, config,
                                           template_dir)
        subthemes, failure = _aggregation_call(
            gateway, prompt, f"agg:{theme}", theme, n, config.parity_retries
        )
        return AggregationOutcome(theme=theme, subthemes=subthemes, failure=failure,
                                  plan=plan)

    candidates: list[SubThemeSet] = []
    for j, (start, end) in enumerate(
        chunk_slices(len(theme_concerns), config.aggregation_chunk_size), start=1
    ):
        prompt = render_aggregation_prompt(
            category, theme_concerns[start:end], config, template_dir
        )
        subthemes, failure = _aggregation_call(
            gateway, prompt, f"agg:{theme}:map:{j}", theme, n, config.parity_retries
        )
        if failure is not None:
            return AggregationOutcome(theme=theme, failure=failure, plan=plan)
        assert subthemes is not None
        candidates.append(subthemes)

    merge_prompt = render_merge_prompt(category, candidates, config, template_dir)
    subthemes, failure = _aggregation_call(
        gateway, merge_prompt, f"agg:{theme}:merge", theme, n, config.parity_retries
    )
    return AggregationOutcome(theme=theme, subthemes=subthemes, failure=failure,
                              plan=plan)


# ---------------------------------------------------------------------------
# Prevalence
# ---------------------------------------------------------------------------


def prevalence_chunk(
    gateway: Gateway,
    subthemes: SubThemeSet,
    concerns: Sequence[Concern],
    config: StudyConfig,
    chunk_index: int,
    template_dir: Optional[Path] = None,
) -> ChunkOutcome:
    prompt = render_prevalence_prompt(subthemes, concerns, template_dir)
    valid = list(subthemes.codes) + [subthemes.catch_all_code]
    return _run_letter_chunk(
        gateway,
        prompt,
        tag=f"prev:{subthemes.theme}:{chunk_index}",
        index=chunk_index,
        concern_ids=[c.concern_id for c in concerns],
        valid_codes=valid,
        catch_all=subthemes.catch_all_code,
        retries=config.parity_retries,
    )


@dataclass
class PrevalenceResult:
    theme: str
    assignments: list[SubThemeAssignment]
    failed_chunks: list[ChunkOutcome]
    remapped: int

    @property
    def failed_concern_ids(self) -> list[str]:
        return [cid for chunk in self.failed_chunks for cid in chunk.concern_ids]


def run_prevalence(
    gateway: Gateway,
    subthemes: SubThemeSet,
    theme_concerns: Sequence[Concern],
    config: StudyConfig,
    template_dir: Optional[Path] = None,
) -> PrevalenceResult:
    """Assign each theme concern to a sub-theme letter or the catch-all."""
    if not subthemes.entries:
        raise ValueError("prevalence requires a validated, non-empty sub-theme set")
    if not theme_concerns:
        raise ValueError(f"theme {subthemes.theme}: no concerns to assign")
    assignments: list[SubThemeAssignment] = []
    failed: list[ChunkOutcome] = []
    remapped = 0
    for index, (start, end) in enumerate(
        chunk_slices(len(theme_concerns), config.prevalence_chunk_size), start=1
    ):
        chunk = theme_concerns[start:end]
        outcome = prevalence_chunk(
            gateway, subthemes, chunk, config, index, template_dir
        )
        if outcome.ok:
            assert outcome.letters is not None
            assignments.extend(
                SubThemeAssignment(
                    concern_id=c.concern_id, theme=subthemes.theme, code=letter
                )
                for c, letter in zip(chunk, outcome.letters)
            )
            remapped += outcome.remapped
        else:
            failed.append(outcome)
    return PrevalenceResult(
        theme=subthemes.theme,
        assignments=assignments,
        failed_chunks=failed,
        remapped=remapped,
    )
