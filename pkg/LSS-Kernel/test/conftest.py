import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.append(str(ROOT / "src"))

from artifact_store import ArtifactStore
from config import LssSettings


@pytest.fixture
def settings(tmp_path):
    return LssSettings(home=tmp_path / "home")


@pytest.fixture
def store(settings):
    """In-memory store."""
    return ArtifactStore(settings=settings)


@pytest.fixture
def disk_store(settings):
    return ArtifactStore(root=settings.home, settings=settings)
