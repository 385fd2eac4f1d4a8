from typing import Annotated, Any

from fastmcp import Context, FastMCP
from mcp.types import ToolAnnotations
from pydantic import Field

from doublegen.constants import Stream
from doublegen.core import RngStream
from doublegen.exceptions import DoubleGenError
from doublegen.storage import dataset_frame, samples_frame
from doublegen.synth import make_dgp
from doublegen.utils import (
    MCPResponse,
    MCPToolStatus,
    _log_and_return_error,
    config_from_payload,
    frame_rows,
    maybe_compress,
)

mcp: FastMCP = FastMCP(name="DoubleGen Data")

CONFIG_DESCRIPTION = "Experiment config as JSON; omitted fields take their defaults."


@mcp.tool(tags={"config", "retrieve"}, annotations=ToolAnnotations(readOnlyHint=True, idempotentHint=True))
async def describe_config(
    ctx: Context,
    config: Annotated[dict[str, Any] | None, Field(default=None, description=CONFIG_DESCRIPTION)],
) -> MCPResponse[dict[str, Any]]:
    """Validate an experiment config and return it with every default resolved.

    Parameters:
        config: Partial experiment config. Defaults to the built-in experiment.

    Returns:
        MCPResponse with the resolved config.
    """
    try:
        resolved = config_from_payload(config)
    except DoubleGenError as exc:
        return await _log_and_return_error(ctx=ctx, error=exc, remediation="Fix the config fields named above.")
    return MCPResponse(status=MCPToolStatus.SUCCESS, data=resolved.model_dump(mode="json"))


@mcp.tool(tags={"data", "simulate"}, annotations=ToolAnnotations(readOnlyHint=True, idempotentHint=True))
async def simulate_dataset(
    ctx: Context,
    config: Annotated[dict[str, Any] | None, Field(default=None, description=CONFIG_DESCRIPTION)],
    seed: Annotated[int, Field(default=0, description="Seed of the data stream.")],
    counterfactual: Annotated[
        bool, Field(default=False, description="Return draws from the counterfactual law instead.")
    ],
) -> MCPResponse:
    """Draw ``config.n`` rows from the configured synthetic data generator.

    Parameters:
        config: Partial experiment config.
        seed: Seed; the same seed yields the same rows as the CLI ``simulate`` stage.
        counterfactual: If True, return outcomes drawn with treatment forced to ``a_star``.

    Returns:
        MCPResponse with one record per row, TOON-compressed when large.
    """
    try:
        resolved = config_from_payload(config)
        dgp = make_dgp(resolved.dgp, resolved.a_star)
        if counterfactual:
            draws = dgp.sample_counterfactual(resolved.n, RngStream(seed, Stream.COUNTERFACTUAL))
            rows = frame_rows(samples_frame(draws, dgp.outcome_kind))
            label = "counterfactual draws"
        else:
            dataset = dgp.sample_observational(resolved.n, RngStream(seed, Stream.DATA))
            rows = frame_rows(dataset_frame(dataset))
            label = "observations"
    except DoubleGenError as exc:
        return await _log_and_return_error(ctx=ctx, error=exc, remediation="Check the DGP section of the config.")

    await ctx.info(f"Simulated {len(rows)} {label} for seed {seed}")
    return await maybe_compress(ctx, rows, label, "rows_toon") or MCPResponse(
        status=MCPToolStatus.SUCCESS,
        data=rows,
    )
