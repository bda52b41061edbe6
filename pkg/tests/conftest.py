import numpy as np
import pytest
from hypothesis import settings

from semx.data import DT, Clip, Scene, SynthConfig, Trajectory, synth_scenes

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def make_track(vid, x0=0.0, y0=0.0, vx=0.0, vy=10.0, ax=0.0, ay=0.0, n=80, frame0=0):
    k = np.arange(n)
    tau = k * DT
    x = x0 + vx * tau + 0.5 * ax * tau ** 2
    y = y0 + vy * tau + 0.5 * ay * tau ** 2
    return Trajectory(vid, (frame0 + k) * DT, np.column_stack([x, y]))


def make_clip(vid=1, scene_id=0, **kw):
    tr = make_track(vid, **kw)
    return Clip(vid, scene_id, tr.t[:30], tr.xy[:30], tr.t[30:80], tr.xy[30:80])


def make_scene(tracks, scene_id=0):
    clips = [Clip(tr.vehicle_id, scene_id, tr.t[:30], tr.xy[:30], tr.t[30:80], tr.xy[30:80]) for tr in tracks]
    return Scene(scene_id, tuple(clips))


@pytest.fixture(scope="session")
def probe_scenes():
    """10-scene synthetic probe corpus with some congested scenes."""
    return synth_scenes(SynthConfig(n_scenes=10, n_vehicles=6, congestion_prob=0.4), seed=7)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
