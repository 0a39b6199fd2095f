"""Shared fixtures: tiny deterministic datasets and finite-difference helpers."""

import numpy as np
import pytest

from gazeadapt import synth
from gazeadapt.config import RunConfig


def tiny_synth_config(**kw):
    """Smallest geometry that clears the validation floor; fast to render."""
    base = dict(image_size=32, n_source=4, n_target=4,
                axes_range=(7.0, 11.0), wall=3.0, area_range=(0.02, 0.6),
                gaze_samples=8, seed=11)
    base.update(kw)
    return synth.SynthConfig(**base)


def tiny_run_config(tmp_path, **kw):
    """2-level net on 32px frames; a full train step takes well under a second."""
    base = dict(depth=2, base_channels=4, epochs=2, batch=2, lr=3e-4,
                seed=3, out_dir=str(tmp_path / "run"))
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_source():
    return synth.generate_domain(tiny_synth_config(), role="source")


@pytest.fixture(scope="session")
def tiny_target():
    return synth.generate_domain(tiny_synth_config(), role="target")


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar f at every coordinate of x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy(); xp[i] += eps
        xm = x.copy(); xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom
