"""
Common test config
"""
# Standard
import os

# Third Party
import pytest

# Local
from cuda_autotune_dataset.constants import COMPILER_ENV_VAR
from cuda_autotune_dataset.log import configure_logging

configure_logging(os.environ.get("LOG_LEVEL", "off"))


@pytest.fixture(autouse=True)
def no_compiler_override(monkeypatch):
    """A developer's compiler override must not leak into the real backend
    tests
    """
    monkeypatch.delenv(COMPILER_ENV_VAR, raising=False)
