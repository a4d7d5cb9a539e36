import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from echoquant.bundle import EchoVideo, StudyMetadata
from echoquant.phantom import PhantomSpec, generate_phantom

settings.register_profile(
    "echoquant",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("echoquant")


def make_metadata(rows=32, cols=32, frame_interval=1 / 30, heart_rate=60.0, spacing=0.1, bsa=1.9, study_id="s"):
    return StudyMetadata(study_id=study_id, frame_interval=frame_interval, heart_rate=heart_rate, rows=rows,
                         cols=cols, pixel_spacing_x=spacing, pixel_spacing_y=spacing, body_surface_area=bsa)


def make_video(frames, view="A4c", masks=None, name="v", **meta):
    frames = np.asarray(frames)
    md = make_metadata(rows=frames.shape[1], cols=frames.shape[2], **meta)
    return EchoVideo(frames=frames, metadata=md, view_label=view, truth_masks=masks, name=name)


@pytest.fixture(scope="session")
def phantom_a4c():
    """Default A4c phantom, -15 % longitudinal strain."""
    return generate_phantom(PhantomSpec(seed=5))


@pytest.fixture(scope="session")
def static_phantom():
    return generate_phantom(PhantomSpec(longitudinal_strain=0.0, short_axis_contraction=0.0, la_expansion=0.0, seed=2))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
