import json
from enum import Enum
from typing import Any, Generic, TypeVar

import pandas as pd
import toons
from fastmcp import Context
from pydantic import BaseModel

from doublegen.config import ExperimentConfig, parse_config
from doublegen.constants import TOON_AUTO_THRESHOLD_ITEMS

T = TypeVar("T")


class MCPToolStatus(Enum):
    SUCCESS = "success"
    ERROR = "error"


class MCPResponse(BaseModel, Generic[T]):
    status: MCPToolStatus
    data: T | None = None
    error: str | None = None
    remediation: str | None = None


async def _log_and_return_error(ctx: Context, error: str | Exception, remediation: str | None = None) -> MCPResponse:
    """Log an error and return a standardized error response."""
    if isinstance(error, Exception):
        error = str(error)
    await ctx.error(message=error)
    return MCPResponse(
        status=MCPToolStatus.ERROR,
        error=error,
        remediation=remediation,
    )


def config_from_payload(payload: dict[str, Any] | None) -> ExperimentConfig:
    """Validate a tool's config argument; ``None`` means all defaults."""
    return parse_config(json.dumps(payload or {}))


def frame_rows(frame: pd.DataFrame) -> list[dict[str, Any]]:
    """JSON-native records; numpy scalars become Python numbers."""
    return json.loads(frame.to_json(orient="records"))


def encode_with_toon(data: Any) -> str:
    """
    Encode data using toon format for token-efficient transmission.

    Args:
        data: JSON-compatible Python object

    Returns:
        TOON-formatted string
    """
    return toons.dumps(data)  # type: ignore[attr-defined]


def decode_from_toon(encoded: str) -> Any:
    return toons.loads(encoded)  # type: ignore[attr-defined]


async def maybe_compress(
    ctx: Context,
    data: list[Any],
    kind_label: str,
    data_key: str,
    extra: dict[str, Any] | None = None,
) -> "MCPResponse | None":
    """Return a TOON-compressed MCPResponse if ``data`` exceeds the auto-compress threshold, else None.

    Callers should do:
        return await maybe_compress(...) or MCPResponse(status=SUCCESS, data=...)
    """
    if len(data) <= TOON_AUTO_THRESHOLD_ITEMS:
        return None

    toon_str = encode_with_toon(data)
    json_chars = len(json.dumps(data))
    saved = round((json_chars - len(toon_str)) / json_chars * 100, 1) if json_chars else 0.0
    await ctx.info(f"Auto-compressing {len(data)} {kind_label} with TOON (saving {saved}% characters)")
    return MCPResponse(
        status=MCPToolStatus.SUCCESS,
        data={data_key: toon_str, "count": len(data), **(extra or {})},
    )
