import pytest

from config import ConfigError, LssSettings, load_settings
from constants import ENV_PREFIX, ROUND_CAP


@pytest.fixture
def clean_env(monkeypatch):
    for name in ("HOME", "ROUND_CAP", "PASS_THRESHOLD", "TOP_K"):
        monkeypatch.delenv(f"{ENV_PREFIX}{name}", raising=False)
    return monkeypatch


def test_env_vars_use_the_prefix(clean_env, tmp_path):
    clean_env.setenv(f"{ENV_PREFIX}HOME", str(tmp_path / "store"))
    clean_env.setenv(f"{ENV_PREFIX}ROUND_CAP", "4")
    clean_env.setenv(f"{ENV_PREFIX}PASS_THRESHOLD", "0.5")
    settings = load_settings()
    assert settings.home == tmp_path / "store"
    assert settings.round_cap == 4
    assert settings.pass_threshold == 0.5


def test_overrides_beat_env_and_defaults(clean_env):
    clean_env.setenv(f"{ENV_PREFIX}TOP_K", "7")
    assert load_settings(top_k=3).top_k == 3
    assert load_settings().round_cap == ROUND_CAP


def test_invalid_values_are_rejected(clean_env):
    clean_env.setenv(f"{ENV_PREFIX}ROUND_CAP", "many")
    with pytest.raises(ConfigError) as info:
        load_settings()
    assert f"{ENV_PREFIX}ROUND_CAP" in str(info.value)

    with pytest.raises(ConfigError):
        LssSettings(round_cap=0)
    with pytest.raises(ConfigError):
        LssSettings(pass_threshold=1.5)
