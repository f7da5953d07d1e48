from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from addbench.corpus import AudioBuffer

settings.register_profile("addbench", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("addbench")


def tone(freq=1000.0, n=64000, amp=8000.0, sr=16000):
    t = np.arange(n) / sr
    return AudioBuffer(np.rint(amp * np.sin(2 * np.pi * freq * t)).astype(np.int16), sr)


def noise(seed=0, n=64000, scale=3000.0):
    rng = np.random.default_rng(seed)
    return AudioBuffer(np.clip(np.rint(rng.standard_normal(n) * scale), -32768, 32767).astype(np.int16))


@pytest.fixture
def tone_buffer():
    return tone()


@pytest.fixture
def noise_buffer():
    return noise()
