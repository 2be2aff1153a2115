import dataclasses

import numpy as np
import pytest

from eyerefine import eyegen
from eyerefine.percept import PerceptualNet


def render_toys(n, seed, shift=None, size=64, gaze_range=0.5):
    """Labeled toy samples; shifted copies get per-sample shift seeds."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        params = eyegen.sample_params(rng, gaze_range, seed * 10000 + i)
        image, mask, sample = eyegen.render_eye(params, size)
        if shift is not None:
            sh = dataclasses.replace(shift, seed=seed * 10000 + i)
            image = eyegen.apply_domain_shift(image, sh)
        out.append(dataclasses.replace(sample, image=image, mask=mask))
    return out


STRONG_SHIFT = eyegen.DomainShiftConfig(
    blur_sigma=1.0, color_gain=(1.35, 0.8, 0.65), noise_sigma=0.02,
    vignette_strength=0.5, seed=0,
)


@pytest.fixture(scope="session")
def toy_batch():
    return render_toys(8, seed=11)


@pytest.fixture(scope="session")
def shifted_batch():
    return render_toys(8, seed=12, shift=STRONG_SHIFT)


@pytest.fixture(scope="session")
def small_percept():
    return PerceptualNet(width=8, seed=2)


@pytest.fixture(scope="session")
def medium_percept():
    return PerceptualNet(width=16, seed=1)
