import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_video():
    from fragtrack.synthgen import SynthConfig, generate_synthetic_video
    return generate_synthetic_video(SynthConfig(n_individuals=4, total_frames=400, seed=1))


@pytest.fixture(scope="session")
def small_run(small_video):
    from fragtrack.config import load_config
    from fragtrack.pipeline import track
    cfg = load_config({"n_individuals": 4, "seed": 0})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return track(small_video.blobs, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
