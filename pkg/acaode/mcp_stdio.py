"""
MCP Stdio Entry Point.

Runs the acaode experiment server over standard I/O for MCP clients
(Claude Desktop, IDE extensions). Set ACAODE_LOG_LEVEL to change the
stderr log level (default: INFO).
"""

import logging
import os
import sys

from acaode.app import mcp

logger = logging.getLogger("acaode.mcp_stdio")


def main():
    """Run the MCP server over stdio.

    IMPORTANT: Do not print anything to stdout here, as it will
    corrupt the JSON-RPC protocol used by the MCP client. Logs go to stderr.
    """
    level = os.environ.get("ACAODE_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logger.info("Starting acaode MCP server on stdio")
    mcp.run()


if __name__ == "__main__":
    main()
