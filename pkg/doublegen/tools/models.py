from typing import Annotated, Any

import numpy as np
from fastmcp import Context, FastMCP
from mcp.types import ToolAnnotations
from pydantic import Field

from doublegen import pipeline
from doublegen.config import Scenario
from doublegen.constants import Stream
from doublegen.core import OutcomeKind, RngStream
from doublegen.exceptions import DataError, DoubleGenError
from doublegen.risk import Method
from doublegen.storage import samples_frame
from doublegen.synth import make_dgp
from doublegen.tools.data import CONFIG_DESCRIPTION
from doublegen.utils import (
    MCPResponse,
    MCPToolStatus,
    _log_and_return_error,
    config_from_payload,
    frame_rows,
    maybe_compress,
)

mcp: FastMCP = FastMCP(name="DoubleGen Models")


@mcp.tool(tags={"models", "train"}, annotations=ToolAnnotations(readOnlyHint=True, idempotentHint=True))
async def train_model(
    ctx: Context,
    config: Annotated[dict[str, Any] | None, Field(default=None, description=CONFIG_DESCRIPTION)],
    method: Annotated[Method, Field(default=Method.DOUBLEGEN, description="Risk estimator to minimize.")],
    scenario: Annotated[
        Scenario, Field(default=Scenario.BOTH_RIGHT, description="Which nuisances are deliberately misspecified.")
    ],
    seed: Annotated[int, Field(default=0, description="Seed for data, folds, initialization and training.")],
) -> MCPResponse[dict[str, Any]]:
    """Simulate a dataset, fit nuisances and train one generative model.

    Parameters:
        config: Partial experiment config.
        method: One of oracle, naive, plugin, ipw, doublegen. Defaults to doublegen.
        scenario: Nuisance scenario. Defaults to both_right.
        seed: Seed. Defaults to 0.

    Returns:
        MCPResponse with the model document (pass it to generate_samples), the reported risk
        and the per-epoch training risk.
    """
    try:
        resolved = config_from_payload(config)
        dgp = make_dgp(resolved.dgp, resolved.a_star)
        dataset = dgp.sample_observational(resolved.n, RngStream(seed, Stream.DATA))
        counterfactual = None
        if method is Method.ORACLE:
            counterfactual = dgp.sample_counterfactual(resolved.n, RngStream(seed, Stream.COUNTERFACTUAL))
        await ctx.info(f"Training {method.value} under {scenario.value} on {len(dataset)} rows...")
        result = pipeline.train(resolved, dataset, method, scenario, seed, counterfactual)
    except DoubleGenError as exc:
        return await _log_and_return_error(
            ctx=ctx,
            error=exc,
            remediation="Lower the learning rate or raise the propensity clip if the risk diverged.",
        )

    document = pipeline.model_document(
        result.backend, result.theta, method=method.value, scenario=scenario.value, seed=seed, risk=result.risk
    )
    return MCPResponse(
        status=MCPToolStatus.SUCCESS,
        data={"model": document, "risk": result.risk, "history": result.history},
    )


@mcp.tool(tags={"models", "generate"}, annotations=ToolAnnotations(readOnlyHint=True, idempotentHint=True))
async def generate_samples(
    ctx: Context,
    model: Annotated[dict[str, Any], Field(description="Model document returned by train_model.")],
    count: Annotated[int, Field(default=100, ge=0, description="Number of samples.")],
    seed: Annotated[int, Field(default=0, description="Sampling seed.")],
) -> MCPResponse:
    """Draw samples from a trained model.

    Parameters:
        model: Model document as returned by train_model.
        count: Number of samples. Defaults to 100.
        seed: Seed; a fixed seed gives row-aligned samples across models.

    Returns:
        MCPResponse with one record per sample, TOON-compressed when large.
    """
    try:
        backend, theta = pipeline.load_model(model)
        samples = pipeline.generate(backend, theta, count, seed)
    except DoubleGenError as exc:
        return await _log_and_return_error(
            ctx=ctx, error=exc, remediation="Pass the 'model' field of a train_model response unchanged."
        )

    rows = frame_rows(samples_frame(samples, backend.outcome_kind, pipeline.outcome_dim(backend)))
    return await maybe_compress(ctx, rows, "samples", "samples_toon") or MCPResponse(
        status=MCPToolStatus.SUCCESS,
        data=rows,
    )


@mcp.tool(tags={"models", "evaluate"}, annotations=ToolAnnotations(readOnlyHint=True, idempotentHint=True))
async def evaluate_samples(
    ctx: Context,
    samples: Annotated[list[list[float]], Field(description="Sample matrix, one row per sample.")],
    config: Annotated[dict[str, Any] | None, Field(default=None, description=CONFIG_DESCRIPTION)],
    model: Annotated[
        dict[str, Any] | None,
        Field(default=None, description="Model document; enables exact token divergences and gen_error."),
    ],
    seed: Annotated[int, Field(default=0, description="Evaluation seed.")],
) -> MCPResponse[list[dict[str, Any]]]:
    """Compare samples with the configured counterfactual law.

    Parameters:
        samples: One row per sample; token rows hold integers with 1 as padding.
        config: Partial experiment config naming the DGP the samples target.
        model: Optional model document that produced the samples.
        seed: Seed of the reference draws.

    Returns:
        MCPResponse with one ``{"metric", "value", "sizes"}`` record per divergence.
    """
    try:
        resolved = config_from_payload(config)
        kind = make_dgp(resolved.dgp, resolved.a_star).outcome_kind
        values = np.asarray(samples, dtype=float)
        if kind is OutcomeKind.TOKEN:
            if not np.array_equal(values, np.round(values)):
                raise DataError("token samples must be integers")
            values = values.astype(np.int64)
        theta = backend = None
        if model is not None:
            backend, theta = pipeline.load_model(model)
        reports = pipeline.evaluate(resolved, values, seed, theta=theta, backend=backend)
    except DoubleGenError as exc:
        return await _log_and_return_error(
            ctx=ctx, error=exc, remediation="Samples must match the DGP's outcome type and dimension."
        )

    return MCPResponse(
        status=MCPToolStatus.SUCCESS,
        data=[{"metric": r.metric, "value": r.value, "sizes": list(r.sizes)} for r in reports],
    )
