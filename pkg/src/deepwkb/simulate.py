"""Euler-Maruyama ensemble simulation, deterministic flow, attractor sampling.

Trajectories advance with the explicit scheme

    x <- x + f(x) dt + sqrt(eps * dt) * sigma(x) xi,   xi ~ N(0, I_m),

run in a vectorized batch, and push retained states to a caller-supplied
sink every ``sample_interval`` time units.  Each trajectory owns an
independent counter-based RNG substream derived from (seed, index), so
the per-trajectory sample streams are reproducible bit for bit and do
not depend on chunking internals.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "SimConfig",
    "SimSummary",
    "AttractorSample",
    "RawDumpSink",
    "simulate_ensemble",
    "integrate_ode",
    "sample_attractor",
    "read_raw_dump",
]

_CHUNK_STEPS = 4096
_RAW_MAGIC = b"DWKB"
_RAW_VERSION = 1


@dataclass
class SimConfig:
    """Ensemble parameters for one noise level."""

    epsilon: float
    dt: float
    total_time: float
    n_traj: int
    sample_interval: float
    seed: int
    domain: tuple  # (lower, upper) arrays of length n
    escape_policy: str = "none"  # or "restart_at_last_inside"
    x0: np.ndarray | None = None  # default: domain center
    burn_in_fraction: float = 0.01  # leading part of each trajectory discarded

    def validate(self, dim):
        # epsilon = 0 is allowed: the scheme degenerates to the Euler flow.
        if not (self.epsilon >= 0 and np.isfinite(self.epsilon)):
            raise ValueError("epsilon must be nonnegative and finite")
        if self.dt <= 0 or self.total_time <= 0:
            raise ValueError("dt and total_time must be positive")
        if self.n_traj < 1:
            raise ValueError("need at least one trajectory")
        if self.sample_interval < self.dt - 1e-12:
            raise ValueError("sample_interval must be >= dt")
        ratio = self.sample_interval / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("sample_interval must be an integer multiple of dt")
        nsteps = self.total_time / self.dt
        if abs(nsteps - round(nsteps)) > 1e-6:
            raise ValueError("total_time must be an integer multiple of dt")
        lo, hi = (np.asarray(v, dtype=float) for v in self.domain)
        if lo.shape != (dim,) or hi.shape != (dim,) or np.any(hi <= lo):
            raise ValueError("domain box is empty or has wrong dimension")
        if self.escape_policy not in ("none", "restart_at_last_inside"):
            raise ValueError(f"unknown escape policy {self.escape_policy!r}")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        return lo, hi


@dataclass
class SimSummary:
    steps_taken: int
    samples_emitted: int
    escapes: int
    aborted_trajectories: int


@dataclass
class AttractorSample:
    """Points collected from the deterministic flow after burn-in."""

    points: np.ndarray  # (count, n)
    burn_in: float


def _trajectory_generators(seed, n_traj):
    # One Philox stream per trajectory, split from the run seed.
    root = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.Philox(s)) for s in root.spawn(n_traj)]


def simulate_ensemble(system, cfg: SimConfig, sink: Callable[[np.ndarray], None]) -> SimSummary:
    """Run the ensemble and stream retained states into ``sink``.

    ``sink`` receives arrays of shape (k, n) holding one retained state per
    live trajectory.  With escape_policy="restart_at_last_inside", a step
    that exits the domain box is rolled back to the previous state and
    counted; rolled-back states are re-sampled as usual, so no emitted
    sample lies outside the box.  Trajectories hitting a non-finite state
    are frozen and excluded from sampling.
    """
    n = system.dim_state
    m = system.dim_noise
    lo, hi = cfg.validate(n)

    n_steps = round(cfg.total_time / cfg.dt)
    sample_every = round(cfg.sample_interval / cfg.dt)
    burn_in_steps = int(np.ceil(cfg.burn_in_fraction * n_steps))

    x0 = np.asarray(cfg.x0, dtype=float) if cfg.x0 is not None else 0.5 * (lo + hi)
    if x0.shape != (n,):
        raise ValueError("x0 has wrong dimension")
    x = np.tile(x0, (cfg.n_traj, 1))
    alive = np.ones(cfg.n_traj, dtype=bool)

    gens = _trajectory_generators(cfg.seed, cfg.n_traj)
    sqrt_noise = np.sqrt(cfg.epsilon * cfg.dt)
    sigma_const = system.sigma_constant
    restart = cfg.escape_policy == "restart_at_last_inside"

    escapes = 0
    emitted = 0
    steps_taken = 0
    noise = np.empty((cfg.n_traj, _CHUNK_STEPS, m))

    step = 0
    while step < n_steps:
        chunk = min(_CHUNK_STEPS, n_steps - step)
        for j, g in enumerate(gens):
            noise[j, :chunk] = g.standard_normal((chunk, m))
        for k in range(chunk):
            step += 1
            xi = noise[:, k, :]
            if sigma_const is not None:
                kick = xi @ sigma_const.T
            else:
                kick = np.einsum("bnm,bm->bn", system.sigma(x), xi)
            x_new = x + system.drift(x) * cfg.dt + sqrt_noise * kick
            bad = ~np.all(np.isfinite(x_new), axis=1)
            if bad.any():
                x_new[bad] = x[bad]
                alive &= ~bad
            if restart:
                out = np.any((x_new < lo) | (x_new > hi), axis=1) & alive
                if out.any():
                    x_new[out] = x[out]
                    escapes += int(out.sum())
            x = x_new
            steps_taken += int(alive.sum())
            if step > burn_in_steps and step % sample_every == 0 and alive.any():
                batch = x[alive]
                sink(batch)
                emitted += batch.shape[0]

    return SimSummary(
        steps_taken=steps_taken,
        samples_emitted=emitted,
        escapes=escapes,
        aborted_trajectories=int((~alive).sum()),
    )


def integrate_ode(system, x0, dt, total_time, record_every=1):
    """Integrate the zero-noise flow with the classical 4th-order scheme.

    Returns the recorded states as an array of shape (k, n) including the
    initial state.  Raises on divergence to non-finite values.
    """
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (system.dim_state,):
        raise ValueError("x0 has wrong dimension")
    n_steps = round(total_time / dt)
    f = system.drift
    out = [x.copy()]
    for k in range(n_steps):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"deterministic flow diverged at t={(k + 1) * dt:g}")
        if (k + 1) % record_every == 0:
            out.append(x.copy())
    return np.asarray(out)


def sample_attractor(system, x0, burn_in, collect_time, count, dt=0.01, seed=0) -> AttractorSample:
    """Integrate past the transient, then draw ``count`` states uniformly
    in time (without replacement) from the next ``collect_time`` units."""
    traj = integrate_ode(system, x0, dt, burn_in + collect_time)
    skip = round(burn_in / dt)
    pool = traj[skip + 1:]
    if count > pool.shape[0]:
        raise ValueError(f"requested {count} points but only {pool.shape[0]} are available")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    idx = rng.choice(pool.shape[0], size=count, replace=False)
    return AttractorSample(points=pool[np.sort(idx)], burn_in=float(burn_in))


class RawDumpSink:
    """Stream samples to an open binary file as little-endian f64 tuples.

    Layout: 16-byte header (magic ``DWKB``, version u32, n u32, reserved
    u32), then the raw coordinates.
    """

    def __init__(self, fh, dim):
        self.fh = fh
        self.dim = dim
        fh.write(_RAW_MAGIC + struct.pack("<III", _RAW_VERSION, dim, 0))

    def __call__(self, batch):
        arr = np.ascontiguousarray(batch, dtype="<f8")
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise ValueError("batch has wrong shape for raw dump")
        self.fh.write(arr.tobytes())


def read_raw_dump(fh):
    """Read back a raw dump written by RawDumpSink; returns (B, n) array."""
    header = fh.read(16)
    if header[:4] != _RAW_MAGIC:
        raise ValueError("bad magic in raw dump")
    version, dim, _ = struct.unpack("<III", header[4:])
    if version != _RAW_VERSION:
        raise ValueError(f"unsupported raw dump version {version}")
    data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(-1, dim)
