import numpy as np
import pytest

from spectrasweep.config import toy_geometry, toy_lens
from spectrasweep.core import BandGrid
from spectrasweep.optics import schedule_for_bands
from spectrasweep.scene import SceneSpec, synth


@pytest.fixture(scope="session")
def toy():
    """8-band toy optics with a matched focus schedule."""
    lens, geom, bands = toy_lens(), toy_geometry(64), BandGrid.uniform(8)
    return lens, geom, bands, schedule_for_bands(lens, geom, bands)


@pytest.fixture(scope="session")
def toy_scene(toy):
    _, _, bands, _ = toy
    return synth(SceneSpec(64, 64, bands, n_random_shapes=7, seed=3))


# Single-sample overfit settings found by scripts/pilot_overfit.py (recorded values live there).
OVERFIT_SIZE = 32
OVERFIT_NET = dict(base_width=16, depth=2)
OVERFIT_LR = 3e-3
OVERFIT_EPOCHS = 1000
OVERFIT_RESTART = 200


@pytest.fixture(scope="session")
def sample(toy):
    """Noiseless 32x32 scene and its preprocessed input tensor."""
    from spectrasweep.forward import simulate_stack
    from spectrasweep.preprocess import preprocess_pipeline
    lens, _, bands, _ = toy
    g = toy_geometry(OVERFIT_SIZE)
    cube = synth(SceneSpec(OVERFIT_SIZE, OVERFIT_SIZE, bands, n_random_shapes=7, seed=3))
    stack = simulate_stack(cube, lens, g, schedule_for_bands(lens, g, bands))
    return preprocess_pipeline(stack, align=False), cube


@pytest.fixture(scope="session")
def overfit(sample):
    """Toy network trained on one sample with Adam warm restarts; (params, loss curve)."""
    from spectrasweep.reconstruct import NetConfig, train
    x, cube = sample
    cfg = NetConfig(c_in=x.shape[0], c_out=len(cube.bands), **OVERFIT_NET)
    return train([(x, cube.data)], cfg, epochs=OVERFIT_EPOCHS, lr=OVERFIT_LR, restart_every=OVERFIT_RESTART)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
