from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from iadbench.synth import SynthSpec, synth_dataset


@pytest.fixture(scope="session")
def small_dataset():
    """3 categories, enough samples for every protocol."""
    spec = SynthSpec(
        categories=3,
        normals_train=10,
        normals_test=4,
        abnormals_test=8,
        image_size=24,
        defect_kinds=("scratch", "blob", "missing-patch"),
    )
    return synth_dataset(spec, seed=7)
