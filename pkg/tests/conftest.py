import numpy as np
import pytest
from hypothesis import settings

from ttvla import envsim
from ttvla.numkit import Rng
from ttvla.policy import init_policy

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def policy():
    return init_policy(envsim.D_OBS, envsim.N_INSTRUCTIONS, Rng(7))


@pytest.fixture
def small_net():
    """A 5-4-3 tanh net with non-trivial output weights for gradient checks."""
    from ttvla.numkit import init_mlp

    return init_mlp([5, 4, 3], Rng(3))


def central_diff(f, params, name, h=1e-5):
    """Central finite-difference gradient of scalar f() w.r.t. params[name]."""
    base = params[name].copy()
    out = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        for sign in (1, -1):
            v = base.copy()
            v[idx] += sign * h
            params.assign(name, v)
            out[idx] += sign * f()
        out[idx] /= 2 * h
    params.assign(name, base)
    return out


@pytest.fixture(scope="session")
def bc_checkpoint(tmp_path_factory):
    """Default behaviour-cloning checkpoint, trained once per session."""
    from ttvla import harness

    path = tmp_path_factory.mktemp("ckpt") / "bc.ckpt"
    harness.save_checkpoint(path, harness.pretrain(600, 0))
    return path


@pytest.fixture(scope="session")
def bc_params(bc_checkpoint):
    from ttvla import checkpoint

    return checkpoint.load(bc_checkpoint)[0]
