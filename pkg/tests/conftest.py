import numpy as np
import pytest

from flprotect.data_processing import default_script
from flprotect.models import Scenario


def _scripted(horizon=12, protocol="flip", p=0.5, gamma=0.5, M=0.5, x_c0=(0.0,), x_a0=(0.0,),
              xi=None, zeta=None, zeta_hat=None, force_mu_one=False, tail_window=None):
    d = len(x_c0)
    default_xi, default_zeta, _ = default_script(horizon, d)
    return Scenario(
        mode="scripted",
        protocol=protocol,
        p=p,
        gamma=gamma,
        M=M,
        horizon=horizon,
        x_c0=np.array(x_c0, dtype=float),
        x_a0=np.array(x_a0, dtype=float),
        xi=default_xi if xi is None else xi,
        zeta=default_zeta if zeta is None else zeta,
        zeta_hat=zeta_hat,
        force_mu_one=force_mu_one,
        tail_window=tail_window,
    )


def _random_scripted(seed, horizon=8, d=None, **changes):
    rng = np.random.default_rng(seed)
    d = d or int(rng.integers(1, 3))
    x_c0 = rng.normal(size=d)
    params = dict(
        horizon=horizon,
        p=float(rng.uniform(0.2, 0.9)),
        gamma=float(rng.uniform(0.1, 0.9)),
        M=0.5 * rng.normal(size=(d, d)) / np.sqrt(d),
        x_c0=tuple(x_c0),
        x_a0=tuple(x_c0) if rng.random() < 0.5 else tuple(np.zeros(d)),
        xi=rng.normal(size=(horizon, d)),
        zeta=0.3 * rng.normal(size=(horizon, d)),
    )
    params.update(changes)
    return _scripted(**params)


@pytest.fixture
def scripted():
    """Factory for scripted scenarios; defaults to the d=1 reference script."""
    return _scripted


@pytest.fixture
def random_scripted():
    return _random_scripted
