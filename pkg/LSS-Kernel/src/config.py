"""
config.py - Runtime settings for the kernel.

Defaults live in constants.py; every value can be overridden through an
``LSS_*`` environment variable (a ``.env`` file is honoured) or explicitly
through ``load_settings(**overrides)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv

import constants
from utils import InputError


class ConfigError(InputError):
    """Raised when a setting is out of range."""
    pass


@dataclass(frozen=True)
class LssSettings:
    home: Path = constants.DEFAULT_HOME
    promotion_threshold: int = constants.PROMOTION_THRESHOLD
    staleness_window: int = constants.STALENESS_WINDOW
    brief_limit: int = constants.BRIEF_LIMIT
    read_limit: int = constants.READ_LIMIT
    top_k: int = constants.TOP_K
    local_context_tokens: int = constants.LOCAL_CONTEXT_TOKENS
    mediation_rounds: int = constants.MEDIATION_ROUNDS
    merge_cap: int = constants.MERGE_CAP
    pass_threshold: float = constants.PASS_THRESHOLD
    round_cap: int = constants.ROUND_CAP
    max_rounds: int = constants.MAX_ROUNDS
    high_watermark: float = constants.HIGH_WATERMARK
    remote_url: Optional[str] = None
    remote_api_key: Optional[str] = None
    remote_timeout: int = constants.REMOTE_TIMEOUT
    chat_model: str = "gpt-4o-mini"

    def __post_init__(self) -> None:
        positive = (
            "promotion_threshold",
            "staleness_window",
            "brief_limit",
            "read_limit",
            "top_k",
            "local_context_tokens",
            "mediation_rounds",
            "merge_cap",
            "round_cap",
            "max_rounds",
            "remote_timeout",
        )
        for name in positive:
            value = getattr(self, name)
            if value < 1:
                raise ConfigError(f"{name} must be >= 1 (got {value})")
        if not 0.0 <= self.pass_threshold <= 1.0:
            raise ConfigError(f"pass_threshold must be within [0, 1] (got {self.pass_threshold})")
        if not 0.0 <= self.high_watermark <= 1.0:
            raise ConfigError(f"high_watermark must be within [0, 1] (got {self.high_watermark})")

    def with_overrides(self, **overrides: Any) -> "LssSettings":
        return replace(self, **overrides)


def _coerce(raw: str, template: Any) -> Any:
    if isinstance(template, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, Path):
        return Path(raw).expanduser()
    return raw


def load_settings(**overrides: Any) -> LssSettings:
    """
    Build settings from defaults, then ``LSS_*`` env vars, then overrides.

    Raises:
        ConfigError: on unparsable or out-of-range values.
    """
    load_dotenv()
    defaults = LssSettings()
    values = {}

    for f in fields(LssSettings):
        name = f"{constants.ENV_PREFIX}{f.name.upper()}"
        raw = os.getenv(name)
        if raw is None or raw == "":
            continue
        template = getattr(defaults, f.name)
        try:
            values[f.name] = _coerce(raw, template if template is not None else "")
        except ValueError as e:
            raise ConfigError(f"{name}={raw!r} is not valid: {e}")

    values.update({k: v for k, v in overrides.items() if v is not None})
    if "home" in values:
        values["home"] = Path(values["home"])
    return LssSettings(**values)
