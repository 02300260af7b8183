import numpy as np
import pytest

from deepwkb.models import make_benchmark


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def ou1d():
    return make_benchmark("ou1d")


@pytest.fixture
def figure8():
    return make_benchmark("figure8")


def figure8_quasipotential(mu=0.5):
    """Closed-form oracle V = mu * H^2 with its gradient and Hessian."""
    def h_parts(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u, v = x[:, 0], x[:, 1]
        h = v**2 / 2.0 + u**4 / 12.0 - u**2 / 2.0
        grad_h = np.stack([u**3 / 3.0 - u, v], axis=1)
        return u, v, h, grad_h

    def value(x):
        _, _, h, _ = h_parts(x)
        return mu * h**2

    def grad(x):
        _, _, h, gh = h_parts(x)
        return 2.0 * mu * h[:, None] * gh

    def hess(x):
        u, v, h, gh = h_parts(x)
        b = u.shape[0]
        hess_h = np.zeros((b, 2, 2))
        hess_h[:, 0, 0] = u**2 - 1.0
        hess_h[:, 1, 1] = 1.0
        outer = np.einsum("bi,bj->bij", gh, gh)
        return 2.0 * mu * (outer + h[:, None, None] * hess_h)

    return value, grad, hess
