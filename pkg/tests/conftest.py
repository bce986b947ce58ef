import os

# single-threaded BLAS keeps results bitwise reproducible across runs;
# must be set before numpy loads
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from openworldseg.model import TrainHyper, build_model, train_closed_set
from openworldseg.shapesworld import WorldSpec, generate


@pytest.fixture(scope="session")
def small_world():
    spec = WorldSpec(image_size=24, master_seed=7)
    return {
        "spec": spec,
        "train": generate(spec, "train", 40),
        "val": generate(spec, "val", 10),
        "test": generate(spec, "test_ood", 12),
    }


@pytest.fixture(scope="session")
def small_model(small_world):
    """A quickly trained 5-class model; good enough for behavioural tests,
    not for the calibrated acceptance thresholds."""
    # lr 0.01: the default 0.02 sits at the stability edge for batch 4 on
    # the 24px world and can kill the ReLUs at some seeds
    model = build_model(5, ["background", "circle", "square", "triangle", "diamond"],
                        t_value=3.0, seed=7)
    train_closed_set(model, small_world["train"],
                     TrainHyper(learning_rate=0.01, iterations=150, batch_size=4, seed=7))
    return model
