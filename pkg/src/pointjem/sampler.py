"""Stochastic gradient Langevin dynamics over point clouds.

Each step moves every coordinate against the (clipped) energy gradient and
adds Gaussian noise::

    X <- X - step_size * clip(dE/dX) + noise_scale * N(0, I)

Chains start from a persistent replay buffer or, with probability
``reinit_prob``, from a fresh draw of the prior. Points are never projected
back into the unit cube after initialization.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .energy import energy_and_input_gradient
from .netcore import ContractViolation, NetworkParams, NonFiniteError

__all__ = [
    "ChainDivergenceError",
    "InitStats",
    "ReplayBuffer",
    "SgldConfig",
    "buffer_push",
    "init_chain",
    "init_chains",
    "run_chain",
    "sgld_step",
]

INIT_MODES = ("uniform", "data_gaussian")

# (clouds) -> (energies, dE/dX); replaces the network energy in tests
EnergyFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


class ChainDivergenceError(NonFiniteError):
    def __init__(self, step: int, message: str = "non-finite energy"):
        super().__init__(f"SGLD chain diverged at step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class SgldConfig:
    step_size: float = 0.05
    noise_scale: float = 0.01
    n_steps: int = 32
    reinit_prob: float = 0.05
    clip_bound: float = 1.0
    init_mode: str = "uniform"

    def __post_init__(self):
        if not self.step_size > 0:
            raise ContractViolation(f"step_size must be > 0, got {self.step_size}")
        if self.noise_scale < 0:
            raise ContractViolation(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.n_steps < 1:
            raise ContractViolation(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0.0 <= self.reinit_prob <= 1.0:
            raise ContractViolation(f"reinit_prob must lie in [0, 1], got {self.reinit_prob}")
        if not self.clip_bound > 0:
            raise ContractViolation(f"clip_bound must be > 0, got {self.clip_bound}")
        if self.init_mode not in INIT_MODES:
            raise ContractViolation(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class InitStats:
    """Per-axis mean and standard deviation of training coordinates."""

    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @classmethod
    def from_clouds(cls, clouds: np.ndarray) -> "InitStats":
        pts = np.asarray(clouds, dtype=np.float64).reshape(-1, 3)
        return cls(tuple(pts.mean(axis=0).tolist()), tuple(pts.std(axis=0).tolist()))


class ReplayBuffer:
    """Fixed-capacity FIFO store of sampled clouds.

    Storage is a ring of shape ``(capacity, n, 3)`` allocated on the first
    push, so all entries must share a point count.
    """

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ContractViolation(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self._data: np.ndarray | None = None
        self._start = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def n_points(self) -> int | None:
        return None if self._data is None else self._data.shape[1]

    def push(self, clouds: np.ndarray) -> None:
        """Append one cloud ``(n, 3)`` or a batch ``(batch, n, 3)``."""
        clouds = np.asarray(clouds, dtype=np.float64)
        if clouds.ndim == 2:
            clouds = clouds[None]
        if clouds.ndim != 3 or clouds.shape[2] != 3:
            raise ContractViolation(f"expected clouds (batch, n, 3), got {clouds.shape}")
        bad = ~np.isfinite(clouds).all(axis=(1, 2))
        if bad.any():
            raise ContractViolation(
                f"refusing to store non-finite clouds at batch positions {np.flatnonzero(bad).tolist()}"
            )
        if self._data is None:
            self._data = np.empty((self.capacity, clouds.shape[1], 3))
        elif clouds.shape[1] != self._data.shape[1]:
            raise ContractViolation(
                f"buffer holds {self._data.shape[1]}-point clouds, got {clouds.shape[1]}"
            )
        for c in clouds:
            end = (self._start + self._size) % self.capacity
            self._data[end] = c
            if self._size < self.capacity:
                self._size += 1
            else:
                self._start = (self._start + 1) % self.capacity

    def get(self, i: int) -> np.ndarray:
        if not 0 <= i < self._size:
            raise IndexError(i)
        return self._data[(self._start + i) % self.capacity].copy()

    def entries(self) -> np.ndarray:
        """All stored clouds, oldest first."""
        if self._size == 0:
            return np.empty((0, self.n_points or 0, 3))
        idx = (self._start + np.arange(self._size)) % self.capacity
        return self._data[idx].copy()

    @classmethod
    def from_entries(cls, capacity: int, entries: np.ndarray) -> "ReplayBuffer":
        buf = cls(capacity)
        if len(entries):
            buf.push(entries)
        return buf


def buffer_push(buffer: ReplayBuffer, cloud: np.ndarray) -> ReplayBuffer:
    buffer.push(cloud)
    return buffer


def _fresh(cfg: SgldConfig, stats: InitStats | None, rng, shape) -> np.ndarray:
    if cfg.init_mode == "uniform":
        return rng.uniform(-1.0, 1.0, size=shape)
    stats = stats or InitStats()
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    out = rng.standard_normal(shape) * std + mean
    # truncate by redrawing the out-of-range coordinates
    bad = np.abs(out) > 1.0
    while bad.any():
        redraw = rng.standard_normal(shape) * std + mean
        out[bad] = redraw[bad]
        bad = np.abs(out) > 1.0
    return out


def init_chains(
    buffer: ReplayBuffer,
    cfg: SgldConfig,
    stats: InitStats | None,
    rng: np.random.Generator,
    n: int,
    batch: int,
) -> np.ndarray:
    """Starting points for ``batch`` chains of ``n`` points each.

    Each chain independently takes a uniformly chosen buffer entry with
    probability ``1 - reinit_prob`` (if the buffer is non-empty and holds
    ``n``-point clouds), and a fresh prior draw otherwise.
    """
    if n < 1 or batch < 1:
        raise ContractViolation("need n >= 1 and batch >= 1")
    out = _fresh(cfg, stats, rng, (batch, n, 3))
    usable = buffer is not None and len(buffer) > 0 and buffer.n_points == n
    if usable:
        from_buffer = rng.random(batch) >= cfg.reinit_prob
        picks = rng.integers(0, len(buffer), size=batch)
        for j in np.flatnonzero(from_buffer):
            out[j] = buffer.get(int(picks[j]))
    return out


def init_chain(buffer, cfg, stats, rng, n: int) -> np.ndarray:
    return init_chains(buffer, cfg, stats, rng, n, 1)[0]


def _network_energy(params: NetworkParams) -> EnergyFn:
    return lambda X: energy_and_input_gradient(params, X)


def sgld_step(
    params: NetworkParams | None,
    cloud: np.ndarray,
    cfg: SgldConfig,
    rng: np.random.Generator,
    energy_fn: EnergyFn | None = None,
    step_index: int = 0,
) -> np.ndarray:
    """One Langevin step on a cloud ``(n, 3)`` or a batch ``(batch, n, 3)``."""
    X = np.asarray(cloud, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    fn = energy_fn or _network_energy(params)
    e, g = fn(X)
    if not np.all(np.isfinite(e)):
        raise ChainDivergenceError(step_index)
    if not np.all(np.isfinite(g)):
        raise ChainDivergenceError(step_index, "non-finite energy gradient")
    g = np.clip(g, -cfg.clip_bound, cfg.clip_bound)
    out = X - cfg.step_size * g
    if cfg.noise_scale > 0:
        out += cfg.noise_scale * rng.standard_normal(X.shape)
    return out[0] if single else out


def run_chain(
    params: NetworkParams | None,
    init: np.ndarray,
    cfg: SgldConfig,
    rng: np.random.Generator,
    energy_fn: EnergyFn | None = None,
    n_steps: int | None = None,
) -> np.ndarray:
    """Apply ``n_steps`` (default ``cfg.n_steps``) SGLD steps; returns a detached copy."""
    steps = cfg.n_steps if n_steps is None else int(n_steps)
    if steps < 1:
        raise ContractViolation(f"need at least one step, got {steps}")
    fn = energy_fn or _network_energy(params)
    X = np.array(init, dtype=np.float64)
    for t in range(steps):
        X = sgld_step(None, X, cfg, rng, energy_fn=fn, step_index=t)
    return X
