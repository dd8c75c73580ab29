"""Euler-Maruyama integration of controlled SDEs with replayable noise.

Simulates  dx_t = g(t, c, y, x_t) dt + sigma(t) dw_t  on a fixed grid
t_i = i * dt, recording states, noise increments and a running pathwise
KL accumulator

    Z_i = Z_{i-1} + ||g(t_{i-1}) - f(t_{i-1})||^2 / (2 sigma^2(t_{i-1})) * dt,

whose expectation under the controlled process is the path KL divergence
between the controlled and the reference process.

Every trajectory owns its own RNG stream, so results are independent of how
paths are chunked across workers and any path is exactly replayable from
(seed, stream_id, path index).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Callable, Protocol, Sequence

import numpy as np

Array = np.ndarray

# drift(t, contexts, labels, x) -> (n, d); contexts (n,), labels (n, m), x (n, d)
DriftFn = Callable[[float, Array, Array, Array], Array]


class ConfigurationError(ValueError):
    """Mismatched grids, shapes or schedule parameters."""


class SimulationError(RuntimeError):
    """Non-finite drift or state during integration."""

    def __init__(self, message: str, path_index: int | None = None, step_index: int | None = None):
        super().__init__(message)
        self.path_index = path_index
        self.step_index = step_index


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of [0, horizon] into `steps` Euler steps.

    dt is derived once at construction and stored; all integrators reuse the
    stored value rather than recomputing horizon/steps per step.
    """

    horizon: float
    steps: int
    dt: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not np.isfinite(self.horizon) or self.horizon <= 0.0:
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")
        object.__setattr__(self, "dt", self.horizon / self.steps)

    def times(self) -> Array:
        """Grid times t_0 .. t_L, with t_L = horizon up to rounding."""
        return np.arange(self.steps + 1) * self.dt


class NoiseSchedule:
    """Diffusion coefficient sigma(t) > 0 on [0, horizon]."""

    def __init__(self, sigma: Callable[[float], float]):
        self._sigma = sigma

    def __call__(self, t: float) -> float:
        return float(self._sigma(t))

    @staticmethod
    def constant(value: float) -> "NoiseSchedule":
        if value <= 0.0:
            raise ConfigurationError(f"sigma must be positive, got {value}")
        return NoiseSchedule(lambda t, v=float(value): v)

    def left_values(self, grid: TimeGrid) -> Array:
        """sigma evaluated at the left endpoint of each step; validates positivity."""
        vals = np.array([self(i * grid.dt) for i in range(grid.steps)], dtype=float)
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0.0):
            bad = int(np.argmin(vals))
            raise ConfigurationError(f"sigma(t) must be positive and finite, got {vals[bad]} at step {bad}")
        return vals


@dataclass(frozen=True)
class RngStream:
    """Counter-addressed RNG stream: (seed, stream_id) -> bit-reproducible noise."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def path(self, index: int) -> "RngStream":
        """Stream for one trajectory; rollout uses path(0..n-1)."""
        return RngStream(self.seed, self.stream_id + index)


class InitialLaw(Protocol):
    """Initial state distribution, sampled by transforming per-path noise.

    `uniform` is one U(0,1) variate per path (for discrete choices) and
    `normals` one standard normal vector per path, both drawn from the path's
    own stream so that the entire trajectory is a function of its stream.
    """

    dim: int

    def from_noise(self, contexts: Array, uniform: Array, normals: Array) -> Array: ...


@dataclass(frozen=True)
class GaussianInit:
    """x_0 ~ N(0, I_d)."""

    dim: int

    def from_noise(self, contexts: Array, uniform: Array, normals: Array) -> Array:
        return normals.copy()


@dataclass(frozen=True)
class PointInit:
    """Deterministic x_0 = point."""

    point: tuple

    @property
    def dim(self) -> int:
        return len(self.point)

    def from_noise(self, contexts: Array, uniform: Array, normals: Array) -> Array:
        return np.tile(np.asarray(self.point, dtype=float), (len(contexts), 1))


@dataclass
class TrajectoryBatch:
    """Discretized rollouts with per-step noise record and KL accumulator.

    states  (n, L+1, d)   x_{t_i}
    noises  (n, L, d)     Brownian increments actually used (std sigma*sqrt(dt))
    kl_acc  (n, L+1)      running Z_i, zero at i=0, nondecreasing
    """

    states: Array
    noises: Array | None
    kl_acc: Array
    contexts: Array
    labels: Array
    grid: TimeGrid

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def terminal(self) -> Array:
        return self.states[:, -1, :]

    def path_kl(self) -> Array:
        """Z_T per path."""
        return self.kl_acc[:, -1]


def _as_labels(labels: Array | Sequence, n: int) -> Array:
    arr = np.asarray(labels)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] != n:
        raise ConfigurationError(f"labels batch {arr.shape[0]} != contexts batch {n}")
    return arr


def default_chunk_size(n: int) -> int:
    """Paths per sequential chunk; CONDIFF_WORKERS only changes chunking, never results."""
    cap = 1 << 14
    workers = os.environ.get("CONDIFF_WORKERS", "").strip()
    if workers:
        w = int(workers)
        if w < 1:
            raise ConfigurationError(f"CONDIFF_WORKERS must be >= 1, got {w}")
        return max(1, min(cap, -(-n // w)))
    return cap


def _draw_path_noise(rng: RngStream, offset: int, count: int, steps: int, dim: int):
    """Per-path init noise and step increments from per-path streams.

    Returns (uniform (count,), init_normals (count, d), dW_normals (count, L, d)).
    """
    uniform = np.empty(count)
    init_normals = np.empty((count, dim))
    dw = np.empty((count, steps, dim))
    for i in range(count):
        g = rng.path(offset + i).generator()
        uniform[i] = g.uniform()
        init_normals[i] = g.standard_normal(dim)
        dw[i] = g.standard_normal((steps, dim))
    return uniform, init_normals, dw


def rollout(
    drift: DriftFn,
    sched: NoiseSchedule,
    grid: TimeGrid,
    init: InitialLaw,
    contexts: Array | Sequence,
    labels: Array | Sequence,
    rng: RngStream,
    check_finite: bool = True,
) -> TrajectoryBatch:
    """Integrate the SDE, recording every state and noise increment.

    The recorded noises have standard deviation sigma(t_{i-1}) * sqrt(dt); a
    rollout with identical (rng, grid, drift) reproduces states bit-for-bit.
    kl_acc is left at zero; fill it with :func:`accumulate_kl`.
    """
    contexts = np.asarray(contexts)
    n = len(contexts)
    if n < 1:
        raise ConfigurationError("need at least one trajectory")
    labels = _as_labels(labels, n)
    d = init.dim
    L = grid.steps
    sig = sched.left_values(grid)
    sqrt_dt = np.sqrt(grid.dt)

    uniform, init_normals, dw_normals = _draw_path_noise(rng, 0, n, L, d)
    states = np.empty((n, L + 1, d))
    noises = np.empty((n, L, d))
    states[:, 0, :] = init.from_noise(contexts, uniform, init_normals)

    x = states[:, 0, :].copy()
    for i in range(1, L + 1):
        t = (i - 1) * grid.dt
        f = drift(t, contexts, labels, x)
        if check_finite and not np.all(np.isfinite(f)):
            bad = np.argwhere(~np.isfinite(f))[0]
            raise SimulationError(
                f"non-finite drift at step {i} (path {bad[0]})", path_index=int(bad[0]), step_index=i
            )
        dwi = sig[i - 1] * sqrt_dt * dw_normals[:, i - 1, :]
        x = x + f * grid.dt + dwi
        if check_finite and not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x))[0]
            raise SimulationError(
                f"non-finite state at step {i} (path {bad[0]})", path_index=int(bad[0]), step_index=i
            )
        noises[:, i - 1, :] = dwi
        states[:, i, :] = x

    return TrajectoryBatch(
        states=states,
        noises=noises,
        kl_acc=np.zeros((n, L + 1)),
        contexts=contexts.copy(),
        labels=labels.copy(),
        grid=grid,
    )


def rollout_terminal(
    drift: DriftFn,
    sched: NoiseSchedule,
    grid: TimeGrid,
    init: InitialLaw,
    contexts: Array | Sequence,
    labels: Array | Sequence,
    rng: RngStream,
    chunk: int | None = None,
) -> Array:
    """Memory-light rollout keeping only x_T; same streams as :func:`rollout`.

    Chunks are processed sequentially; the terminal states are identical to a
    full rollout with the same arguments for any chunk size.
    """
    contexts = np.asarray(contexts)
    n = len(contexts)
    labels = _as_labels(labels, n)
    d = init.dim
    L = grid.steps
    sig = sched.left_values(grid)
    sqrt_dt = np.sqrt(grid.dt)
    chunk = chunk or default_chunk_size(n)

    out = np.empty((n, d))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        ctx = contexts[lo:hi]
        lab = labels[lo:hi]
        uniform, init_normals, dw_normals = _draw_path_noise(rng, lo, hi - lo, L, d)
        x = init.from_noise(ctx, uniform, init_normals)
        for i in range(1, L + 1):
            t = (i - 1) * grid.dt
            f = drift(t, ctx, lab, x)
            x = x + f * grid.dt + sig[i - 1] * sqrt_dt * dw_normals[:, i - 1, :]
        if not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x))[0]
            raise SimulationError(f"non-finite terminal state (path {lo + bad[0]})", path_index=int(lo + bad[0]))
        out[lo:hi] = x
    return out


def rollout_from(
    drift: DriftFn,
    sched: NoiseSchedule,
    grid: TimeGrid,
    x0: Array,
    start_step: int,
    contexts: Array | Sequence,
    labels: Array | Sequence,
    rng: RngStream,
) -> Array:
    """Integrate from the grid time t = start_step * dt with given states x0.

    Used for conditional sub-rollouts (value-function estimates from an
    interior state); returns the terminal states.
    """
    contexts = np.asarray(contexts)
    n = len(contexts)
    labels = _as_labels(labels, n)
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    if x.shape[0] != n:
        raise ConfigurationError(f"x0 batch {x.shape[0]} != contexts batch {n}")
    if not (0 <= start_step <= grid.steps):
        raise ConfigurationError(f"start step {start_step} outside grid")
    d = x.shape[1]
    L = grid.steps
    sig = sched.left_values(grid)
    sqrt_dt = np.sqrt(grid.dt)
    remaining = L - start_step
    if remaining == 0:
        return x
    dw = np.empty((n, remaining, d))
    for i in range(n):
        dw[i] = rng.path(i).generator().standard_normal((remaining, d))
    for j, i in enumerate(range(start_step + 1, L + 1)):
        t = (i - 1) * grid.dt
        f = drift(t, contexts, labels, x)
        x = x + f * grid.dt + sig[i - 1] * sqrt_dt * dw[:, j, :]
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise SimulationError(f"non-finite state in sub-rollout (path {bad[0]})", path_index=int(bad[0]))
    return x


def accumulate_kl(
    batch: TrajectoryBatch,
    base_drift: DriftFn,
    ctrl_drift: DriftFn,
    sched: NoiseSchedule,
    grid: TimeGrid,
) -> TrajectoryBatch:
    """Fill Z_i from the recorded states.

    Z_i = Z_{i-1} + ||ctrl - base||^2(t_{i-1}, x_{i-1}) / (2 sigma^2(t_{i-1})) * dt.
    Z_T is the path KL cost; its mean under the controlled process estimates
    KL(P_ctrl || P_base).
    """
    if grid != batch.grid:
        raise ConfigurationError(f"grid mismatch: batch has {batch.grid}, got {grid}")
    sig = sched.left_values(grid)
    n, L = batch.n, grid.steps
    kl = np.zeros((n, L + 1))
    for i in range(1, L + 1):
        t = (i - 1) * grid.dt
        x = batch.states[:, i - 1, :]
        delta = ctrl_drift(t, batch.contexts, batch.labels, x) - base_drift(t, batch.contexts, batch.labels, x)
        kl[:, i] = kl[:, i - 1] + np.sum(delta * delta, axis=1) * (grid.dt / (2.0 * sig[i - 1] ** 2))
    return replace(batch, kl_acc=kl)
