import json
import sys
from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def debug_channel(monkeypatch):
    """Enable the forced-noise hook for hand-computed channel examples."""
    from ddcl import channel

    monkeypatch.setattr(channel, "DEBUG", True)
    return channel


def load_data(name):
    return json.loads((DATA / name).read_text())
