import os

import numpy as np
import pytest
import soundfile as sf
import torch
from scipy.signal import lfilter

SR = 22050


def write_voice(path, f0, formant, seconds=0.8, seed=0, sr=SR, vibrato_phase=0.0):
    """Harmonic source through a single resonance; crude but WORLD-analysable."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * sr)) / sr
    ph = 2 * np.pi * np.cumsum(f0 * (1 + 0.05 * np.sin(2 * np.pi * 3 * t + vibrato_phase))) / sr
    x = sum(np.sin(h * ph) / h for h in range(1, 40) if h * f0 < sr / 2)
    r, th = 0.97, 2 * np.pi * formant / sr
    x = lfilter([1], [1, -2 * r * np.cos(th), r * r], x)
    x = 0.3 * x / np.abs(x).max() + 1e-3 * rng.standard_normal(len(x))
    os.makedirs(os.path.dirname(path), exist_ok=True)
    sf.write(path, x, sr, subtype="PCM_16")


@pytest.fixture
def audio_tree(tmp_path):
    """2 speakers x 4 short utterances with distinct pitch and formant."""
    root = tmp_path / "audio"
    for k, (f0, fm) in enumerate([(110.0, 700.0), (220.0, 1600.0)]):
        for u in range(4):
            write_voice(str(root / f"spk{k}" / f"u{u}.wav"), f0, fm, seed=10 * k + u, vibrato_phase=u)
    return root


@pytest.fixture(autouse=True)
def _torch_defaults():
    torch.set_default_dtype(torch.float32)
    yield
    torch.use_deterministic_algorithms(False)


# acceptance summary ---------------------------------------------------------

_RESULTS = []


@pytest.fixture
def criterion():
    def record(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _RESULTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
