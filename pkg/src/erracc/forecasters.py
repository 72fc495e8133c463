"""Conditional samplers: autoregressive rollout, direct-horizon (CTS) models and baselines.

All samplers work in standardized units internally and return raw-unit
ensembles. Every member draws its noise from its own stream seeded by
``(seed, ic_id, member)``, so batching over initial conditions does not change
the samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Standardizer
from .neuralnet import MLP, GaussianPrediction, load_checkpoint, save_checkpoint

EXPLOSION_LIMIT = 1e6  # standardized units
SIGMA_FLOOR = 1e-8
FORWARD_CHUNK = 65_536  # rows per network call when sampling


class DegenerateEnsembleError(ValueError):
    pass


@dataclass
class ForecastEnsemble:
    samples: np.ndarray  # [N, T, D] raw units
    exploded: np.ndarray  # [N, T] bool, member had exploded at or before this lead
    ic_id: int = 0
    model: str = ""
    seed: int = 0

    @property
    def n_members(self) -> int:
        return self.samples.shape[0]

    @property
    def explosion_rate(self) -> float:
        return float(self.exploded[:, -1].mean())

    def save(self, prefix: str | Path) -> None:
        """Write ``<prefix>.f64`` ([N, T, D] little-endian float64) and ``<prefix>.json``."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.f64").write_bytes(np.ascontiguousarray(self.samples, dtype="<f8").tobytes())
        first = np.where(self.exploded.any(axis=1), self.exploded.argmax(axis=1), -1)
        meta = {
            "shape": list(self.samples.shape),
            "ic": self.ic_id,
            "model": self.model,
            "seed": self.seed,
            "exploded_from": first.tolist(),
        }
        Path(f"{prefix}.json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, prefix: str | Path) -> "ForecastEnsemble":
        meta = json.loads(Path(f"{prefix}.json").read_text())
        shape = tuple(meta["shape"])
        samples = np.fromfile(f"{prefix}.f64", dtype="<f8").reshape(shape)
        first = np.asarray(meta["exploded_from"])
        leads = np.arange(shape[1])
        exploded = (first[:, None] >= 0) & (leads[None, :] >= first[:, None])
        return cls(samples, exploded, meta["ic"], meta["model"], meta["seed"])


def member_noise(seed: int, ic_ids, n_members: int, n_steps: int, dim: int) -> np.ndarray:
    """Standard-normal draws ``[M, N, T, D]`` from per-member streams."""
    ic_ids = np.atleast_1d(ic_ids)
    out = np.empty((len(ic_ids), n_members, n_steps, dim))
    for i, ic in enumerate(ic_ids):
        for n in range(n_members):
            out[i, n] = np.random.default_rng([seed, int(ic), n]).standard_normal((n_steps, dim))
    return out


def _check_explosions(x: np.ndarray, alive: np.ndarray) -> np.ndarray:
    """Freeze members that left the finite range; returns the updated alive mask."""
    bad = ~np.all(np.isfinite(x) & (np.abs(x) <= EXPLOSION_LIMIT), axis=-1) & alive
    if np.any(bad):
        xb = x[bad]
        x[bad] = np.where(np.isnan(xb), EXPLOSION_LIMIT, np.clip(xb, -EXPLOSION_LIMIT, EXPLOSION_LIMIT))
    return alive & ~bad


class Forecaster:
    """Interface: ``sample(ics, T, N, seed, ic_ids) -> (samples [M,N,T,D], exploded [M,N,T])``."""

    tag = "forecaster"

    def sample(self, ics, T: int, N: int, seed: int, ic_ids=None):
        raise NotImplementedError


class ARModel(Forecaster):
    """One-step Gaussian model ``x_{t+1} = x_t + mean(x_t) + sigma(x_t) * eps``."""

    kind = "ar"

    def __init__(self, net: MLP, standardizer: Standardizer, tag: str = "gen"):
        if net.config.in_dim != net.config.out_dim:
            raise ValueError("AR network must map D -> D")
        self.net = net
        self.standardizer = standardizer
        self.tag = tag

    @property
    def dim(self) -> int:
        return self.net.config.out_dim

    def conditional(self, x_std) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x_std, dtype=self.net.dtype)
        mean, log_sigma, _ = self.net.forward(x)
        return x + mean, log_sigma

    def sample(self, ics, T: int, N: int, seed: int, ic_ids=None):
        ics = np.atleast_2d(np.asarray(ics, dtype=np.float64))
        M, D = ics.shape
        ic_ids = np.arange(M) if ic_ids is None else np.asarray(ic_ids)
        if T < 1 or N < 1:
            raise ValueError("T and N must be >= 1")
        eps = member_noise(seed, ic_ids, N, T, D).reshape(M * N, T, D)
        x = np.repeat(self.standardizer.standardize(ics), N, axis=0)
        out = np.empty((M * N, T, D))
        exploded = np.zeros((M * N, T), dtype=bool)
        alive = np.ones(M * N, dtype=bool)
        for t in range(T):
            inp = np.where(alive[:, None], x, 0.0)
            mean, log_sigma = self.conditional(inp)
            step = mean.astype(np.float64) + np.exp(log_sigma.astype(np.float64)) * eps[:, t]
            x = np.where(alive[:, None], step, x)
            alive = _check_explosions(x, alive)
            out[:, t] = x
            exploded[:, t] = ~alive
        samples = self.standardizer.destandardize(out)
        return samples.reshape(M, N, T, D), exploded.reshape(M, N, T)

    def save(self, path, extra: dict | None = None):
        meta = {"kind": self.kind, "tag": self.tag, "standardizer": self.standardizer.to_json()}
        meta.update(extra or {})
        return save_checkpoint(path, self.net, meta)


class CTSModel(Forecaster):
    """Direct-horizon model ``x_{c+t} = x_c + mean(x_c, t) + sigma(x_c, t) * eps``.

    The lead time enters as the single feature ``t / t_max``. Beyond ``t_max``
    the ``freeze`` policy keeps sampling the ``t_max`` conditional, while
    ``reanchor`` conditions on the member's own ``t_max`` sample (repeatedly,
    every ``t_max`` leads).
    """

    kind = "cts"

    def __init__(self, net: MLP, standardizer: Standardizer, t_max: int, policy: str = "freeze", tag: str = "cts"):
        if policy not in ("freeze", "reanchor"):
            raise ValueError(f"unknown beyond-cap policy {policy!r}")
        if net.config.in_dim != net.config.out_dim + 1:
            raise ValueError("CTS network takes D state inputs plus one lead-time feature")
        self.net = net
        self.standardizer = standardizer
        self.t_max = int(t_max)
        self.policy = policy
        self.tag = tag

    @property
    def dim(self) -> int:
        return self.net.config.out_dim

    def features(self, x_std, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.t_max):
            raise ValueError(f"CTS lead times must lie in 1..{self.t_max}")
        x = np.asarray(x_std, dtype=self.net.dtype)
        lead = np.broadcast_to(t, x.shape[:1]).astype(self.net.dtype)[:, None] / self.net.dtype.type(self.t_max)
        return np.concatenate([x, lead], axis=1)

    def conditional(self, x_std, t) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x_std, dtype=self.net.dtype)
        t = np.broadcast_to(np.asarray(t), x.shape[:1])
        if x.shape[0] <= FORWARD_CHUNK:
            mean, log_sigma, _ = self.net.forward(self.features(x, t))
            return x + mean, log_sigma
        parts = [self.conditional(x[i : i + FORWARD_CHUNK], t[i : i + FORWARD_CHUNK]) for i in range(0, x.shape[0], FORWARD_CHUNK)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def predict(self, x_std, t) -> GaussianPrediction:
        mean, log_sigma = self.conditional(x_std, t)
        return GaussianPrediction(mean, np.exp(log_sigma))

    def sample(self, ics, T: int, N: int, seed: int, ic_ids=None):
        ics = np.atleast_2d(np.asarray(ics, dtype=np.float64))
        M, D = ics.shape
        ic_ids = np.arange(M) if ic_ids is None else np.asarray(ic_ids)
        if T < 1 or N < 1:
            raise ValueError("T and N must be >= 1")
        eps = member_noise(seed, ic_ids, N, T, D)  # [M, N, T, D]
        x0 = self.standardizer.standardize(ics)
        out = np.empty((M, N, T, D))
        # Leads up to the cap share one conditional per IC.
        n_direct = min(T, self.t_max)
        leads = np.arange(1, n_direct + 1)
        mean, log_sigma = self.conditional(np.repeat(x0, n_direct, axis=0), np.tile(leads, M))
        mean = mean.astype(np.float64).reshape(M, 1, n_direct, D)
        sigma = np.exp(log_sigma.astype(np.float64)).reshape(M, 1, n_direct, D)
        out[:, :, :n_direct] = mean + sigma * eps[:, :, :n_direct]
        if T > self.t_max:
            if self.policy == "freeze":
                out[:, :, self.t_max :] = mean[:, :, -1:] + sigma[:, :, -1:] * eps[:, :, self.t_max :]
            else:
                for start in range(self.t_max, T, self.t_max):
                    anchor = out[:, :, start - 1].reshape(M * N, D)
                    n_lead = min(self.t_max, T - start)
                    lead = np.arange(1, n_lead + 1)
                    m, ls = self.conditional(np.repeat(anchor, n_lead, axis=0), np.tile(lead, M * N))
                    m = m.astype(np.float64).reshape(M, N, n_lead, D)
                    s = np.exp(ls.astype(np.float64)).reshape(M, N, n_lead, D)
                    out[:, :, start : start + n_lead] = m + s * eps[:, :, start : start + n_lead]
        flat = out.reshape(M * N, T, D)
        exploded = np.zeros((M * N, T), dtype=bool)
        alive = np.ones(M * N, dtype=bool)
        for t in range(T):
            x = flat[:, t]
            alive = _check_explosions(x, alive)
            flat[:, t] = x
            exploded[:, t] = ~alive
        samples = self.standardizer.destandardize(out)
        return samples, exploded.reshape(M, N, T)

    def save(self, path, extra: dict | None = None):
        meta = {
            "kind": self.kind,
            "tag": self.tag,
            "t_max": self.t_max,
            "policy": self.policy,
            "standardizer": self.standardizer.to_json(),
        }
        meta.update(extra or {})
        return save_checkpoint(path, self.net, meta)


class RandomWalkBaseline(Forecaster):
    """``x_{t+1} = x_t + step_std * Z`` in the standardizer's units.

    With an identity standardizer and ``step_std = 1`` this is the unit random
    walk on raw values.
    """

    def __init__(self, standardizer: Standardizer, step_std: float = 1.0, tag: str = "random-walk"):
        self.standardizer = standardizer
        self.step_std = step_std
        self.tag = tag

    def sample(self, ics, T: int, N: int, seed: int, ic_ids=None):
        ics = np.atleast_2d(np.asarray(ics, dtype=np.float64))
        M, D = ics.shape
        ic_ids = np.arange(M) if ic_ids is None else np.asarray(ic_ids)
        eps = member_noise(seed, ic_ids, N, T, D)
        x0 = self.standardizer.standardize(ics)[:, None, None, :]
        z = x0 + self.step_std * np.cumsum(eps, axis=2)
        flat = z.reshape(M * N, T, D)
        exploded = np.zeros((M * N, T), dtype=bool)
        alive = np.ones(M * N, dtype=bool)
        for t in range(T):
            x = flat[:, t]
            alive = _check_explosions(x, alive)
            flat[:, t] = x
            exploded[:, t] = ~alive
        return self.standardizer.destandardize(z), exploded.reshape(M, N, T)


@dataclass
class ClimatologyCTS(Forecaster):
    """Every lead time drawn independently from ``N(loc, scale^2)`` (raw units)."""

    loc: float = 2.5
    scale: float = 6.25
    tag: str = "climatology"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def sample(self, ics, T: int, N: int, seed: int, ic_ids=None):
        ics = np.atleast_2d(np.asarray(ics, dtype=np.float64))
        M, D = ics.shape
        ic_ids = np.arange(M) if ic_ids is None else np.asarray(ic_ids)
        samples = self.loc + self.scale * member_noise(seed, ic_ids, N, T, D)
        return samples, np.zeros((M, N, T), dtype=bool)


def ar_rollout(model: ARModel, ic, T: int, N: int, seed: int = 0, ic_id: int = 0) -> ForecastEnsemble:
    samples, exploded = model.sample(np.asarray(ic)[None], T, N, seed, [ic_id])
    return ForecastEnsemble(samples[0], exploded[0], ic_id, model.tag, seed)


def cts_forecast(model: Forecaster, ic, T: int, N: int, seed: int = 0, ic_id: int = 0) -> ForecastEnsemble:
    samples, exploded = model.sample(np.asarray(ic)[None], T, N, seed, [ic_id])
    return ForecastEnsemble(samples[0], exploded[0], ic_id, model.tag, seed)


def fit_ensemble_gaussian(samples, valid=None) -> GaussianPrediction:
    """Per-dimension mean and population std over the usable members.

    ``samples`` is ``[N, D]`` (one lead time); ``valid`` masks exploded members.
    """
    x = np.asarray(samples, dtype=np.float64)
    if valid is not None:
        x = x[np.asarray(valid, dtype=bool)]
    if x.shape[0] < 2:
        raise DegenerateEnsembleError("need at least two usable members")
    return GaussianPrediction(x.mean(axis=0), np.maximum(x.std(axis=0), SIGMA_FLOOR))


def fit_gaussians(samples, exploded=None):
    """Vectorized fit over ``[..., N, T, D]`` stacks.

    Returns ``(mean, std, count)`` with shapes ``[..., T, D]``, ``[..., T, D]``
    and ``[..., T]``. Cells with fewer than two usable members get NaN.
    """
    x = np.asarray(samples, dtype=np.float64)
    if exploded is None:
        w = np.ones(x.shape[:-1])
    else:
        w = (~np.asarray(exploded)).astype(np.float64)
    count = w.sum(axis=-2)
    wx = np.where(w[..., None] > 0, x, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = wx.sum(axis=-3) / count[..., None]
        var = (w[..., None] * (wx - np.expand_dims(mean, -3)) ** 2).sum(axis=-3) / count[..., None]
    std = np.maximum(np.sqrt(var), SIGMA_FLOOR)
    bad = count < 2
    mean[bad] = np.nan
    std[bad] = np.nan
    return mean, std, count


def load_model(path: str | Path) -> Forecaster:
    net, meta = load_checkpoint(path)
    std = Standardizer.from_json(meta["standardizer"])
    if meta["kind"] == "ar":
        return ARModel(net, std, meta.get("tag", "gen"))
    if meta["kind"] == "cts":
        return CTSModel(net, std, meta["t_max"], meta["policy"], meta.get("tag", "cts"))
    raise ValueError(f"unknown model kind {meta['kind']!r}")
