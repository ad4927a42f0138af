"""Flat key=value run configuration.

The config format is deliberately primitive: one ``key=value`` per line,
``#`` comments, no sections, no quoting. Runs stay diff-friendly and the
parser has no dependencies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .models import StudyConfig, ThemeTaxonomy

BACKEND_MOCK = "mock"
BACKEND_LIVE = "live"

_INT_KEYS = {
    "group_size",
    "classification_chunk_size",
    "aggregation_chunk_size",
    "prevalence_chunk_size",
    "subtheme_count",
    "min_chars",
    "max_prompt_chars",
    "parity_retries",
    "concurrency",
    "seed",
    "max_output_tokens",
    "max_attempts",
}
_FLOAT_KEYS = {"temperature", "input_rate", "output_rate", "backoff_base"}
_PATH_KEYS = {"run_dir", "taxonomy", "quotes", "template_dir", "mock_script"}
_STR_KEYS = {
    "backend",
    "endpoint",
    "model",
    "topic",
    "source",
    "mock_default_text",
}
KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _PATH_KEYS | _STR_KEYS


@dataclass
class RunConfig:
    run_dir: Optional[Path] = None
    taxonomy: Optional[Path] = None
    quotes: Optional[Path] = None
    template_dir: Optional[Path] = None

    backend: str = BACKEND_MOCK
    mock_script: Optional[Path] = None
    mock_default_text: Optional[str] = None
    endpoint: str = ""
    model: str = "gpt-4-turbo"
    temperature: float = 0.2
    max_output_tokens: int = 4096
    max_attempts: int = 6
    backoff_base: float = 2.0

    topic: str = ""
    source: str = "an online discussion forum"
    group_size: int = 5
    classification_chunk_size: int = 400
    aggregation_chunk_size: int = 400
    prevalence_chunk_size: int = 400
    subtheme_count: int = 5
    min_chars: int = 100
    max_prompt_chars: int = 480_000
    parity_retries: int = 2

    concurrency: int = 8
    seed: int = 0
    input_rate: float = 0.01
    output_rate: float = 0.03

    def validate(self) -> None:
        if self.run_dir is None:
            raise ValueError("run_dir is required (config key or --run-dir)")
        if self.backend not in (BACKEND_MOCK, BACKEND_LIVE):
            raise ValueError(f"backend must be 'mock' or 'live', got {self.backend!r}")
        if self.backend == BACKEND_LIVE and not self.endpoint:
            raise ValueError("backend=live requires an endpoint URL")
        if self.backend == BACKEND_MOCK and self.mock_script is None \
                and self.mock_default_text is None:
            raise ValueError("backend=mock requires mock_script or mock_default_text")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    def load_taxonomy(self) -> ThemeTaxonomy:
        if self.taxonomy is None:
            raise ValueError("taxonomy file is required (config key 'taxonomy')")
        if not self.taxonomy.exists():
            raise FileNotFoundError(f"taxonomy file not found: {self.taxonomy}")
        data = json.loads(self.taxonomy.read_text(encoding="utf-8"))
        return ThemeTaxonomy.from_dict(data)

    def study(self) -> StudyConfig:
        if not self.topic:
            raise ValueError("config key 'topic' is required for pipeline stages")
        return StudyConfig(
            topic_description=self.topic,
            taxonomy=self.load_taxonomy(),
            group_size=self.group_size,
            classification_chunk_size=self.classification_chunk_size,
            aggregation_chunk_size=self.aggregation_chunk_size,
            prevalence_chunk_size=self.prevalence_chunk_size,
            subtheme_count=self.subtheme_count,
            source_description=self.source,
            max_prompt_chars=self.max_prompt_chars,
            parity_retries=self.parity_retries,
        )


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in KNOWN_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def load_config(path: Path, run_dir_override: Optional[Path] = None) -> RunConfig:
    """Parse a config file; --run-dir on the command line wins over the file."""
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = parse_config_text(path.read_text(encoding="utf-8"))
    config = RunConfig()
    base = path.parent
    for key, value in raw.items():
        if key in _INT_KEYS:
            setattr(config, key, int(value))
        elif key in _FLOAT_KEYS:
            setattr(config, key, float(value))
        elif key in _PATH_KEYS:
            # Relative paths resolve against the config file's directory.
            candidate = Path(value)
            setattr(config, key,
                    candidate if candidate.is_absolute() else base / candidate)
        else:
            setattr(config, key, value)
    if run_dir_override is not None:
        config.run_dir = run_dir_override
    config.validate()
    return config
