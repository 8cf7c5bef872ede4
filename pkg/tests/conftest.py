import numpy as np
import pytest
import torch

from tend.samples import ImageSample, Label

# (name, passed, detail); passed is None for criteria that are out of scope
ACCEPTANCE_RESULTS: list[tuple[str, bool | None, str]] = []


def natural_image(side: int = 64, channels: int = 1) -> np.ndarray:
    """Smooth shading, a soft disc and some texture: stands in for a photograph."""
    ys, xs = np.mgrid[0:side, 0:side] / side
    img = 0.35 + 0.25 * xs + 0.15 * np.sin(9 * xs) * np.cos(7 * ys)
    img += 0.3 * np.exp(-((xs - 0.4) ** 2 + (ys - 0.55) ** 2) / 0.02)
    img += 0.05 * np.random.default_rng(123).standard_normal((side, side))
    img = np.clip(img, 0, 1).astype(np.float32)[..., None]
    return np.repeat(img, channels, axis=2)


@pytest.fixture
def test_image():
    return ImageSample(natural_image(), Label.ID, "natural")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        tag = "N/A" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{tag}] {name}: {detail}")
