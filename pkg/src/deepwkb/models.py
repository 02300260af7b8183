"""SDE system abstraction and the registered benchmark systems.

Every system bundles the drift f, the noise factor sigma, the diffusion
matrix A = sigma sigma^T, the drift Jacobian and the divergence terms
that appear in the transport operator.  All evaluators accept either a
single state of shape (n,) or a batch of shape (B, n) and are pure
functions, safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = ["SdeSystem", "BenchmarkId", "make_benchmark", "eval_derivatives", "BENCHMARKS"]


def _as_batch(x, dim):
    """Promote x to shape (B, dim); return (batch, was_single)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"state has length {x.shape[0]}, expected {dim}")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"state batch has shape {x.shape}, expected (B, {dim})")
    return x, False


@dataclass
class SdeSystem:
    """A small-noise SDE dX = f(X) dt + sqrt(eps) sigma(X) dB.

    attractor_dim is the dimension d of the attractor of the zero-noise
    flow (0 for an equilibrium, 1 for a limit cycle, ...).  It enters the
    normalization scaling eps^((n-d)/2) and must be supplied by the user.
    """

    dim_state: int
    dim_noise: int
    drift: Callable[[np.ndarray], np.ndarray]
    drift_jacobian: Callable[[np.ndarray], np.ndarray]
    drift_divergence: Callable[[np.ndarray], np.ndarray]
    attractor_dim: int
    # All registered benchmarks carry additive noise; a constant factor is
    # stored and the callable accessors derive from it.
    sigma_constant: np.ndarray | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("dim_state and dim_noise must be >= 1")
        if self.attractor_dim < 0:
            raise ValueError("attractor_dim must be >= 0")
        if self.sigma_constant is not None:
            self.sigma_constant = np.asarray(self.sigma_constant, dtype=float)
            if self.sigma_constant.shape != (self.dim_state, self.dim_noise):
                raise ValueError("sigma_constant has wrong shape")

    # -- diffusion -----------------------------------------------------

    def sigma(self, x):
        """Noise factor sigma(x), shape (n, m) or (B, n, m)."""
        xb, single = _as_batch(x, self.dim_state)
        s = np.broadcast_to(self.sigma_constant, (xb.shape[0],) + self.sigma_constant.shape)
        return s[0] if single else np.array(s)

    def diffusion(self, x):
        """Diffusion matrix A(x) = sigma sigma^T, shape (n, n) or (B, n, n)."""
        xb, single = _as_batch(x, self.dim_state)
        a = self.sigma_constant @ self.sigma_constant.T
        ab = np.broadcast_to(a, (xb.shape[0],) + a.shape)
        return a if single else np.array(ab)

    def diffusion_row_divergence(self, x):
        """Vector (sum_i d_i a^{ij})_j; identically zero for constant sigma."""
        xb, single = _as_batch(x, self.dim_state)
        out = np.zeros_like(xb)
        return out[0] if single else out

    @property
    def constant_diffusion(self) -> np.ndarray | None:
        """A as a constant matrix when sigma does not depend on x, else None."""
        if self.sigma_constant is None:
            return None
        return self.sigma_constant @ self.sigma_constant.T


@dataclass(frozen=True)
class BenchmarkId:
    """Name plus parameter map selecting one of the registered systems."""

    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, val in self.params.items():
            if not np.isfinite(val):
                raise ValueError(f"benchmark parameter {key} is not finite")


def eval_derivatives(system: SdeSystem, x):
    """Evaluate (f, A, grad f, div f, row-div A) consistently at one x.

    Bundled so the loss kernels touch the state array once.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("state is not finite")
    return (
        system.drift(x),
        system.diffusion(x),
        system.drift_jacobian(x),
        system.drift_divergence(x),
        system.diffusion_row_divergence(x),
    )


# ---------------------------------------------------------------------------
# Registered benchmarks.  Derivatives are coded analytically, no finite
# differences.  All use additive noise sigma = I (m = n).
# ---------------------------------------------------------------------------


def _make_ou(dim):
    def drift(x):
        xb, single = _as_batch(x, dim)
        out = -xb
        return out[0] if single else out

    def jac(x):
        xb, single = _as_batch(x, dim)
        j = np.broadcast_to(-np.eye(dim), (xb.shape[0], dim, dim))
        return -np.eye(dim) if single else np.array(j)

    def div(x):
        xb, single = _as_batch(x, dim)
        out = np.full(xb.shape[0], -float(dim))
        return out[0] if single else out

    def build(**params):
        if params:
            raise ValueError(f"ou{dim}d takes no parameters, got {sorted(params)}")
        return SdeSystem(
            dim_state=dim, dim_noise=dim, drift=drift, drift_jacobian=jac,
            drift_divergence=div, attractor_dim=0, sigma_constant=np.eye(dim),
            name=f"ou{dim}d", params={},
        )

    return build


def _make_vdp(**params):
    mu = float(params.pop("mu", 1.0))
    if params:
        raise ValueError(f"unknown vdp parameters {sorted(params)}")

    def drift(x):
        xb, single = _as_batch(x, 2)
        u, v = xb[:, 0], xb[:, 1]
        out = np.stack([mu * (u - u**3 / 3.0 - v), u / mu], axis=1)
        return out[0] if single else out

    def jac(x):
        xb, single = _as_batch(x, 2)
        u = xb[:, 0]
        j = np.zeros((xb.shape[0], 2, 2))
        j[:, 0, 0] = mu * (1.0 - u**2)
        j[:, 0, 1] = -mu
        j[:, 1, 0] = 1.0 / mu
        return j[0] if single else j

    def div(x):
        xb, single = _as_batch(x, 2)
        out = mu * (1.0 - xb[:, 0] ** 2)
        return out[0] if single else out

    return SdeSystem(
        dim_state=2, dim_noise=2, drift=drift, drift_jacobian=jac,
        drift_divergence=div, attractor_dim=1, sigma_constant=np.eye(2),
        name="vdp", params={"mu": mu},
    )


def figure8_hamiltonian(x):
    """H = y^2/2 + x^4/12 - x^2/2 for states of shape (..., 2)."""
    x = np.asarray(x, dtype=float)
    u, v = x[..., 0], x[..., 1]
    return v**2 / 2.0 + u**4 / 12.0 - u**2 / 2.0


def _make_figure8(**params):
    mu = float(params.pop("mu", 0.5))
    if params:
        raise ValueError(f"unknown figure8 parameters {sorted(params)}")

    def _parts(xb):
        u, v = xb[:, 0], xb[:, 1]
        h = v**2 / 2.0 + u**4 / 12.0 - u**2 / 2.0
        hx = u**3 / 3.0 - u
        hy = v
        return u, v, h, hx, hy

    def drift(x):
        xb, single = _as_batch(x, 2)
        u, v, h, hx, hy = _parts(xb)
        out = np.stack([hy - mu * h * hx, -hx - mu * h * hy], axis=1)
        return out[0] if single else out

    def jac(x):
        xb, single = _as_batch(x, 2)
        u, v, h, hx, hy = _parts(xb)
        hxx = u**2 - 1.0
        j = np.zeros((xb.shape[0], 2, 2))
        j[:, 0, 0] = -mu * (hx * hx + h * hxx)
        j[:, 0, 1] = 1.0 - mu * hy * hx       # H_xy = 0
        j[:, 1, 0] = -hxx - mu * hx * hy
        j[:, 1, 1] = -mu * (hy * hy + h)      # H_yy = 1
        return j[0] if single else j

    def div(x):
        xb, single = _as_batch(x, 2)
        u, v, h, hx, hy = _parts(xb)
        out = -mu * (hx * hx + hy * hy + h * (u**2 - 1.0) + h)
        return out[0] if single else out

    return SdeSystem(
        dim_state=2, dim_noise=2, drift=drift, drift_jacobian=jac,
        drift_divergence=div, attractor_dim=1, sigma_constant=np.eye(2),
        name="figure8", params={"mu": mu},
    )


def _make_coupled_vdp(**params):
    mu = float(params.pop("mu", 1.0))
    delta = float(params.pop("delta", 0.0))
    if params:
        raise ValueError(f"unknown coupled_vdp parameters {sorted(params)}")

    def drift(x):
        xb, single = _as_batch(x, 4)
        x1, y1, x2, y2 = xb.T
        out = np.stack(
            [
                mu * (x1 - x1**3 / 3.0 - y1) + delta * (x1 - x2),
                x1 / mu,
                mu * (x2 - x2**3 / 3.0 - y2) + delta * (x2 - x1),
                x2 / mu,
            ],
            axis=1,
        )
        return out[0] if single else out

    def jac(x):
        xb, single = _as_batch(x, 4)
        x1, x2 = xb[:, 0], xb[:, 2]
        j = np.zeros((xb.shape[0], 4, 4))
        j[:, 0, 0] = mu * (1.0 - x1**2) + delta
        j[:, 0, 1] = -mu
        j[:, 0, 2] = -delta
        j[:, 1, 0] = 1.0 / mu
        j[:, 2, 2] = mu * (1.0 - x2**2) + delta
        j[:, 2, 3] = -mu
        j[:, 2, 0] = -delta
        j[:, 3, 2] = 1.0 / mu
        return j[0] if single else j

    def div(x):
        xb, single = _as_batch(x, 4)
        out = mu * (2.0 - xb[:, 0] ** 2 - xb[:, 2] ** 2) + 2.0 * delta
        return out[0] if single else out

    return SdeSystem(
        dim_state=4, dim_noise=4, drift=drift, drift_jacobian=jac,
        drift_divergence=div, attractor_dim=2, sigma_constant=np.eye(4),
        name="coupled_vdp", params={"mu": mu, "delta": delta},
    )


def _make_rossler(**params):
    a = float(params.pop("a", 0.2))
    b = float(params.pop("b", 0.2))
    c = float(params.pop("c", 5.7))
    if params:
        raise ValueError(f"unknown rossler parameters {sorted(params)}")

    def drift(x):
        xb, single = _as_batch(x, 3)
        u, v, w = xb.T
        out = np.stack([-v - w, u + a * v, b + w * (u - c)], axis=1)
        return out[0] if single else out

    def jac(x):
        xb, single = _as_batch(x, 3)
        u, w = xb[:, 0], xb[:, 2]
        j = np.zeros((xb.shape[0], 3, 3))
        j[:, 0, 1] = -1.0
        j[:, 0, 2] = -1.0
        j[:, 1, 0] = 1.0
        j[:, 1, 1] = a
        j[:, 2, 0] = w
        j[:, 2, 2] = u - c
        return j[0] if single else j

    def div(x):
        xb, single = _as_batch(x, 3)
        out = a + xb[:, 0] - c
        return out[0] if single else out

    return SdeSystem(
        dim_state=3, dim_noise=3, drift=drift, drift_jacobian=jac,
        drift_divergence=div, attractor_dim=2, sigma_constant=np.eye(3),
        name="rossler", params={"a": a, "b": b, "c": c},
    )


BENCHMARKS = {
    "ou1d": _make_ou(1),
    "ou2d": _make_ou(2),
    "vdp": _make_vdp,
    "figure8": _make_figure8,
    "coupled_vdp": _make_coupled_vdp,
    "rossler": _make_rossler,
}


def make_benchmark(bid, **params) -> SdeSystem:
    """Build a registered benchmark system.

    Accepts a BenchmarkId or a name string plus keyword parameters.
    Unknown names and non-finite parameters raise ValueError.
    """
    if isinstance(bid, BenchmarkId):
        name, kwargs = bid.name, dict(bid.params)
        kwargs.update(params)
    else:
        name, kwargs = str(bid), dict(params)
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; known: {sorted(BENCHMARKS)}")
    for key, val in kwargs.items():
        if not np.isfinite(val):
            raise ValueError(f"benchmark parameter {key} is not finite")
    return BENCHMARKS[name](**kwargs)
