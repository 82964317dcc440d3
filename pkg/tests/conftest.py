import numpy as np
import pytest
import torch

from vis2therm.data import BoundingBox, DatasetManifest, FrameRecord, write_thermal_png, write_visible_png


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def write_pair(directory, frame_id, height=32, width=32, value=0.5):
    directory.mkdir(parents=True, exist_ok=True)
    vis = directory / f"{frame_id}_v.png"
    th = directory / f"{frame_id}_t.png"
    write_visible_png(vis, np.full((3, height, width), value))
    write_thermal_png(th, np.full((1, height, width), value))
    return str(vis), str(th)


def make_manifest(directory, n=4, boxes=None, height=32, width=32, name="m", times=None):
    """A manifest of ``n`` small flat frames with one default box each."""
    frames = []
    for i in range(n):
        vis, th = write_pair(directory / "img", f"f{i:03d}", height, width, value=i / max(n, 1))
        frame_boxes = boxes[i] if boxes is not None else (BoundingBox(2.0, 3.0, 8.0, 20.0),)
        tod = times[i] if times is not None else ("day" if i % 2 == 0 else "night")
        frames.append(FrameRecord(f"f{i:03d}", vis, th, tod, tuple(frame_boxes), frame_index=i))
    return DatasetManifest(name, tuple(frames), height, width)


@pytest.fixture
def manifest_factory(tmp_path):
    def factory(**kw):
        return make_manifest(tmp_path, **kw)

    return factory


# -- acceptance reporting ------------------------------------------------------------------

CRITERIA: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
