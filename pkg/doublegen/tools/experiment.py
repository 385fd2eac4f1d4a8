from typing import Annotated, Any

import pandas as pd
from fastmcp import Context, FastMCP
from mcp.types import ToolAnnotations
from pydantic import Field

from doublegen import pipeline
from doublegen.exceptions import DoubleGenError
from doublegen.storage import METRIC_COLUMNS
from doublegen.tools.data import CONFIG_DESCRIPTION
from doublegen.utils import MCPResponse, MCPToolStatus, _log_and_return_error, config_from_payload, frame_rows

mcp: FastMCP = FastMCP(name="DoubleGen Experiments")


@mcp.tool(tags={"experiment", "run"}, annotations=ToolAnnotations(readOnlyHint=True, idempotentHint=True))
async def run_experiment(
    ctx: Context,
    config: Annotated[dict[str, Any] | None, Field(default=None, description=CONFIG_DESCRIPTION)],
) -> MCPResponse[dict[str, Any]]:
    """Run the scenario x method x seed grid and summarize it.

    Parameters:
        config: Partial experiment config. Keep ``n`` and training epochs small; the grid runs in-process.

    Returns:
        MCPResponse with ``metrics`` (one record per cell and metric, failed cells carry ``error``)
        and ``summary`` (seed means per scenario and method with ``*``/``!`` marks for doublegen).
    """
    try:
        resolved = config_from_payload(config)
    except DoubleGenError as exc:
        return await _log_and_return_error(ctx=ctx, error=exc, remediation="Fix the config fields named above.")

    cells = len(resolved.scenarios) * len(resolved.methods) * len(resolved.seeds)
    await ctx.info(f"Running {cells} cells...")
    metrics = pd.DataFrame(pipeline.grid(resolved), columns=METRIC_COLUMNS)
    failed = int((metrics["error"] != "").sum())
    if failed:
        await ctx.warning(f"{failed} cells failed; see their error column")
    summary = pipeline.summarize(metrics)
    return MCPResponse(
        status=MCPToolStatus.SUCCESS,
        data={"metrics": frame_rows(metrics), "summary": frame_rows(summary)},
    )
