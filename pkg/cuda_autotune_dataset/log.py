"""
Global log handle and the one place logging is configured
"""

# Standard
import logging

# Third Party
import alog

log = logging.getLogger("cuda_autotune_dataset")


def configure_logging(level: str):
    """Route the shared handle through alog at the given level. Logs go to
    stderr so stdout only carries command results.
    """
    alog.configure(default_level=level, formatter="pretty")
