import os

import pytest
from hypothesis import HealthCheck, settings

from enrichstream.engine import EngineConfig

# derandomized so every run explores the same examples
settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.register_profile("dev", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ATTRS = ("geolocation", "unit", "device_type")


@pytest.fixture
def make_config(tmp_path):
    def build(**changes) -> EngineConfig:
        changes.setdefault("enrichment_attributes", ATTRS)
        changes.setdefault("simulated_latency_ms", 0.0)
        return EngineConfig(**changes).rooted_at(tmp_path / "state")

    return build
