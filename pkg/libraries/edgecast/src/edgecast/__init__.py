"""
edgecast: online edge-cloud routing for short-horizon power forecasting.

Every node can forecast with its own site expert, a shared small model on the edge
and a retrieval-conditioned regressor in the cloud. A screening score and virtual
queues pick one of three inference modes per slot so that each long-run resource
rate stays within its budget. The branches a mode runs are fused with online
regret-bounded weights.

Importing the package loads `.env` files and sets up module-level logging; set
`LOGLEVEL` to change the level.
"""

import logging
import os
from sys import stdout
from typing import Union

from dotenv import load_dotenv

# load dotenv files defined in module
load_dotenv()

LOGLEVEL: Union[str, int] = os.getenv("LOGLEVEL", default=logging.INFO)

# define the default logging config for the edgecast module here
logging.basicConfig(
    level=LOGLEVEL,
    format="[%(asctime)s] %(levelname)s [%(name)s.%(funcName)s:%(lineno)d] %(message)s",
    datefmt="%d/%b/%Y %H:%M:%S",
    stream=stdout,
)


def main() -> int:
    from nicelog import setup_logging  # type: ignore

    from edgecast.cli import cli

    setup_logging()
    cli()
    return 0
