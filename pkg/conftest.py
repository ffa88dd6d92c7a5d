"""Shared pytest setup: put src/ on the import path and register markers."""

import sys
from pathlib import Path

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent / "src"))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte-Carlo runs (deselect with -m 'not slow')")
