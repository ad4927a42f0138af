"""Shared test helpers."""

from __future__ import annotations

import pytest

from quallm.gateway import Gateway, MockBackend, RetryPolicy
from quallm.models import (
    BatchGroup,
    Concern,
    StudyConfig,
    SubThemeEntry,
    SubThemeSet,
    ThemeCategory,
    ThemeTaxonomy,
    ThreadDocument,
)


def make_taxonomy(active: int = 4) -> ThemeTaxonomy:
    names = ["Pricing clarity", "Dispatch predictability",
             "Safety and time pressure", "Support responsiveness"]
    categories = [
        ThemeCategory(code=chr(ord("A") + i), name=names[i % len(names)],
                      description=f"category {i}")
        for i in range(active)
    ]
    categories.append(
        ThemeCategory(
            code=chr(ord("A") + active),
            name="Other",
            description="Anything that does not fit the above.",
        )
    )
    return ThemeTaxonomy(categories=tuple(categories))


def make_doc(sid: str, text: str, created_at: int = 1_650_000_000,
             comment_count: int = 0) -> ThreadDocument:
    return ThreadDocument(
        submission_id=sid, text=text, created_at=created_at,
        comment_count=comment_count,
    )


def make_group(key: str = "deadbeef00000001", docs=None,
               created_at: int = 1_650_000_000) -> BatchGroup:
    if docs is None:
        docs = (make_doc("s1", "A thread about opaque fare math.", created_at),)
    return BatchGroup(
        group_key=key,
        members=tuple(docs),
        earliest_timestamp=min(d.created_at for d in docs),
    )


def make_concern(cid: str = "deadbeef00000001-0001", title: str = "Opaque fares",
                 description: str = "Pay math is unclear to drivers working daily",
                 quote: str = "the math never adds up",
                 group_key: str = "deadbeef00000001") -> Concern:
    return Concern(
        concern_id=cid,
        group_key=group_key,
        earliest_timestamp=1_650_000_000,
        title=title,
        description=description,
        quote=quote,
    )


def make_subthemes(theme: str = "A", n: int = 5) -> SubThemeSet:
    return SubThemeSet(
        theme=theme,
        entries=tuple(
            SubThemeEntry(rank=r, title=f"pattern {r}", description=f"detail {r}")
            for r in range(1, n + 1)
        ),
    )


def scripted_gateway(entries, default_text=None, **kwargs) -> Gateway:
    """Gateway over a MockBackend with sleeps disabled."""
    slept: list[float] = []
    gateway = Gateway(
        MockBackend(entries, default_text=default_text),
        retry=kwargs.pop("retry", RetryPolicy()),
        sleep=slept.append,
        seed=0,
        **kwargs,
    )
    gateway.slept = slept  # exposed for assertions
    return gateway


@pytest.fixture
def taxonomy() -> ThemeTaxonomy:
    return make_taxonomy()


@pytest.fixture
def study(taxonomy) -> StudyConfig:
    return StudyConfig(
        topic_description="concerns about automated dispatch and pay",
        taxonomy=taxonomy,
        group_size=5,
        classification_chunk_size=3,
        aggregation_chunk_size=4,
        prevalence_chunk_size=3,
        subtheme_count=5,
    )
