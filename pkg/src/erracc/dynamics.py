"""Lorenz 63 / two-tier Lorenz 96 vector fields and a fixed-step RK4 integrator.

State vectors are plain float64 arrays. A Lorenz 96 state is the flat
concatenation ``[X_1..X_K, Y_1..Y_JK]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np


class IntegrationError(RuntimeError):
    """Raised when the integrator produces a non-finite state."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at integration step {step}")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class L63Params:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 2.667  # kept as 2.667, not 8/3

    def __post_init__(self):
        if not np.all(np.isfinite([self.sigma, self.rho, self.beta])):
            raise ConfigurationError("L63 parameters must be finite")


@dataclass(frozen=True)
class L96Params:
    K: int = 8
    J: int = 32
    h: float = 1.0
    b: float = 10.0
    c: float = 10.0
    F: float = 20.0
    # Sign of the X forcing in the Y equation. -1 is the equation as
    # written for this configuration; +1 gives the energy-conserving coupling.
    y_forcing_sign: float = -1.0

    def __post_init__(self):
        if self.K < 4:
            raise ConfigurationError("L96 needs K >= 4 for the advection stencil")
        if self.J < 1:
            raise ConfigurationError("L96 needs J >= 1")

    @property
    def state_dim(self) -> int:
        return self.K + self.J * self.K


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    save_every: int = 1
    n_save: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.save_every < 1 or self.n_save < 1:
            raise ConfigurationError("save_every and n_save must be >= 1")


@dataclass
class Trajectory:
    """Saved states of a run, one row per saved sample."""

    values: np.ndarray  # [T, D_full]
    dt_between_rows: float
    system: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("trajectory must be a non-empty [T, D] matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("trajectory contains non-finite values")

    def __len__(self) -> int:
        return self.values.shape[0]


def l63_deriv(state, params: L63Params = L63Params()) -> np.ndarray:
    s = np.asarray(state, dtype=np.float64)
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    return np.stack(
        [params.sigma * (y - x), x * (params.rho - z) - y, x * y - params.beta * z],
        axis=-1,
    )


def split_l96(state, params: L96Params) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(state, dtype=np.float64)
    if s.shape[-1] != params.state_dim:
        raise ConfigurationError(
            f"L96 state has length {s.shape[-1]}, expected K + J*K = {params.state_dim}"
        )
    return s[..., : params.K], s[..., params.K :]


def l96_deriv(state, params: L96Params = L96Params()) -> np.ndarray:
    X, Y = split_l96(state, params)
    K, J = params.K, params.J
    coupling = params.h * params.c / params.b
    y_block_sums = Y.reshape(Y.shape[:-1] + (K, J)).sum(axis=-1)
    dX = (
        -np.roll(X, 1, axis=-1) * (np.roll(X, 2, axis=-1) - np.roll(X, -1, axis=-1))
        - X
        + params.F
        - coupling * y_block_sums
    )
    dY = (
        -params.c * params.b * np.roll(Y, -1, axis=-1) * (np.roll(Y, -2, axis=-1) - np.roll(Y, 1, axis=-1))
        - params.c * Y
        + params.y_forcing_sign * coupling * np.repeat(X, J, axis=-1)
    )
    return np.concatenate([dX, dY], axis=-1)


def rk4_step(deriv: Callable[[np.ndarray], np.ndarray], state, dt: float, step: int = 0) -> np.ndarray:
    """One classical RK4 step ``s + dt/6 (k1 + 2k2 + 2k3 + k4)``."""
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    s = np.asarray(state, dtype=np.float64)
    k1 = deriv(s)
    k2 = deriv(s + 0.5 * dt * k1)
    k3 = deriv(s + 0.5 * dt * k2)
    k4 = deriv(s + dt * k3)
    out = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not (np.all(np.isfinite(k4)) and np.all(np.isfinite(out))):
        raise IntegrationError(step)
    return out


# Compiled kernels used by `integrate`. They evaluate the same formulas as the
# numpy functions above, term for term.

@numba.njit(cache=True)
def _l63_field(s, out, sigma, rho, beta):
    out[0] = sigma * (s[1] - s[0])
    out[1] = s[0] * (rho - s[2]) - s[1]
    out[2] = s[0] * s[1] - beta * s[2]


@numba.njit(cache=True)
def _l96_field(s, out, K, J, h, b, c, F, sign):
    coupling = h * c / b
    n_y = J * K
    for k in range(K):
        acc = 0.0
        for j in range(J):
            acc += s[K + k * J + j]
        out[k] = (
            -s[(k - 1) % K] * (s[(k - 2) % K] - s[(k + 1) % K])
            - s[k]
            + F
            - coupling * acc
        )
    for j in range(n_y):
        out[K + j] = (
            -c * b * s[K + (j + 1) % n_y] * (s[K + (j + 2) % n_y] - s[K + (j - 1) % n_y])
            - c * s[K + j]
            + sign * coupling * s[j // J]
        )


@numba.njit(cache=True)
def _run(kind, s0, dt, save_every, n_save, p):
    n = s0.shape[0]
    out = np.empty((n_save, n))
    s = s0.copy()
    tmp = np.empty(n)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    step = 0
    for i in range(n_save):
        for _ in range(save_every):
            step += 1
            if kind == 0:
                _l63_field(s, k1, p[0], p[1], p[2])
            else:
                _l96_field(s, k1, int(p[0]), int(p[1]), p[2], p[3], p[4], p[5], p[6])
            for d in range(n):
                tmp[d] = s[d] + 0.5 * dt * k1[d]
            if kind == 0:
                _l63_field(tmp, k2, p[0], p[1], p[2])
            else:
                _l96_field(tmp, k2, int(p[0]), int(p[1]), p[2], p[3], p[4], p[5], p[6])
            for d in range(n):
                tmp[d] = s[d] + 0.5 * dt * k2[d]
            if kind == 0:
                _l63_field(tmp, k3, p[0], p[1], p[2])
            else:
                _l96_field(tmp, k3, int(p[0]), int(p[1]), p[2], p[3], p[4], p[5], p[6])
            for d in range(n):
                tmp[d] = s[d] + dt * k3[d]
            if kind == 0:
                _l63_field(tmp, k4, p[0], p[1], p[2])
            else:
                _l96_field(tmp, k4, int(p[0]), int(p[1]), p[2], p[3], p[4], p[5], p[6])
            finite = True
            for d in range(n):
                s[d] = s[d] + (dt / 6.0) * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d])
                if not np.isfinite(s[d]):
                    finite = False
            if not finite:
                return out[:i], step
        out[i] = s
    return out, -1


def integrate(system: str, ic, cfg: IntegratorConfig, params=None) -> Trajectory:
    """Integrate ``system`` ('l63' or 'l96') from ``ic``.

    Row ``i`` of the result is the state after ``(i + 1) * save_every`` RK4
    steps; the initial condition itself is not stored.
    """
    system = system.lower()
    s0 = np.array(ic, dtype=np.float64).ravel()
    if not np.all(np.isfinite(s0)):
        raise ConfigurationError("initial condition must be finite")
    if system == "l63":
        params = params or L63Params()
        if s0.shape[0] != 3:
            raise ConfigurationError("L63 state has 3 components")
        kind, p = 0, np.array([params.sigma, params.rho, params.beta])
    elif system == "l96":
        params = params or L96Params()
        if s0.shape[0] != params.state_dim:
            raise ConfigurationError(
                f"L96 state has length {s0.shape[0]}, expected {params.state_dim}"
            )
        kind = 1
        p = np.array(
            [params.K, params.J, params.h, params.b, params.c, params.F, params.y_forcing_sign],
            dtype=np.float64,
        )
    else:
        raise ConfigurationError(f"unknown system {system!r}")
    values, failed_at = _run(kind, s0, float(cfg.dt), int(cfg.save_every), int(cfg.n_save), p)
    if failed_at >= 0:
        raise IntegrationError(failed_at)
    return Trajectory(values, cfg.dt * cfg.save_every, system)
