"""Campaign configuration: defaults, CASCADELAB_* environment variables, then explicit overrides."""

import logging
import os
from collections.abc import Mapping
from typing import Any, Optional

from app.models import CampaignConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "CASCADELAB_"
_LIST_FIELDS = {"delay_values"}
_OPTIONAL_FIELDS = {"max_delay_injections"}


def _from_env(environ: Mapping[str, str]) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for field in CampaignConfig.model_fields:
        raw = environ.get(f"{ENV_PREFIX}{field.upper()}")
        if raw is None:
            continue
        if field in _LIST_FIELDS:
            values[field] = [item.strip() for item in raw.split(",") if item.strip()]
        elif field in _OPTIONAL_FIELDS and raw.strip().lower() in ("", "none"):
            values[field] = None
        else:
            values[field] = raw
    return values


def load_config(overrides: Optional[Mapping[str, Any]] = None, environ: Optional[Mapping[str, str]] = None) -> CampaignConfig:
    """Build a validated config; `None` overrides fall through to the environment or the default."""
    values = _from_env(os.environ if environ is None else environ)
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})
    config = CampaignConfig.model_validate(values)
    logger.debug(f"Campaign config: {config.model_dump()}")
    return config
