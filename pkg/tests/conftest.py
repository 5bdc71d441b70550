import numpy as np
import pytest

from pipmn import autodiff as ad
from pipmn import dsp

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(seconds, freq, rate=dsp.SAMPLE_RATE, amp=0.3, noise=0.01, seed=0):
    t = np.arange(int(round(seconds * rate))) / rate
    r = np.random.default_rng(seed)
    return amp * np.sin(2 * np.pi * freq * t) + noise * r.standard_normal(t.size)


def synthetic_set(n=64, classes=4, dims=20, frames=40, seed=0, sep=1.0):
    """Gaussian class means in feature space, broadcast over frames plus noise."""
    r = np.random.default_rng(seed)
    means = r.normal(0, sep, (classes, dims))
    y = np.repeat(np.arange(classes), n // classes)
    x = means[y][:, None, :] + r.normal(0, 1, (len(y), frames, dims))
    return x.astype(np.float32), y


@pytest.fixture
def audio_corpus(tmp_path):
    """Ten 4 s clips, two classes (low vs high tone) plus a manifest."""
    rows = ["clip_id,file_path,labels"]
    for i in range(10):
        label = "low" if i % 2 == 0 else "high"
        freq = 300 + 20 * i if label == "low" else 3000 + 50 * i
        path = tmp_path / f"clip{i}.wav"
        dsp.write_wav(path, tone(4.0, freq, seed=i), dsp.SAMPLE_RATE)
        rows.append(f"c{i},{path.name},{label}")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest
