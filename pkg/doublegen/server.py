import logging

from fastmcp import FastMCP

from doublegen.tools.data import mcp as data_mcp
from doublegen.tools.experiment import mcp as experiment_mcp
from doublegen.tools.models import mcp as models_mcp

logger = logging.getLogger("doublegen.server")

mcp = FastMCP("DoubleGen MCP")

mcp.mount(data_mcp)
mcp.mount(models_mcp)
mcp.mount(experiment_mcp)


def main() -> None:
    logger.info("starting DoubleGen MCP over stdio")
    mcp.run()
