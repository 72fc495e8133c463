"""Ensemble verification scores and the KL error-accumulation metric.

Array conventions: ensembles are ``[M, N, T, G]`` (initial conditions,
members, lead times, locations/variables), truth is ``[M, T, G]`` and the
optional ``exploded`` mask is ``[M, N, T]``. Location weights ``a_i`` are
normalized to unit mean; ``None`` means uniform.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.special import ndtr

from .forecasters import fit_gaussians

SKILL_EPS = 1e-12
LOCATION_EPS = 1e-8
HIST_EPS = 1e-6

CSV_FIELDS = [
    "system",
    "model",
    "metric",
    "variable",
    "lead_time",
    "value",
    "ci_lo",
    "ci_hi",
    "n_ic",
    "n_members",
    "flags",
]


def location_weights(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if np.any(~(a > 0)):
        raise ValueError("location weights must be positive")
    return a / a.mean()


@dataclass
class MetricCurve:
    lead_times: np.ndarray
    value: np.ndarray
    metric: str
    model: str = ""
    variable: str = "all"
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    n_ic: int = 0
    n_members: int = 0
    flags: list[str] = field(default_factory=list)
    per_ic: np.ndarray | None = field(default=None, repr=False)

    def with_band(self, lo, hi) -> "MetricCurve":
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        # the band is a percentile interval of the replicates; widen it to
        # contain the point estimate
        self.lo = np.fmin(self.lo, self.value)
        self.hi = np.fmax(self.hi, self.value)
        return self

    def rows(self, system: str) -> list[dict]:
        out = []
        flags = ";".join(self.flags)
        for i, t in enumerate(self.lead_times):
            out.append(
                {
                    "system": system,
                    "model": self.model,
                    "metric": self.metric,
                    "variable": self.variable,
                    "lead_time": int(t),
                    "value": _fmt(self.value[i]),
                    "ci_lo": "" if self.lo is None else _fmt(self.lo[i]),
                    "ci_hi": "" if self.hi is None else _fmt(self.hi[i]),
                    "n_ic": self.n_ic,
                    "n_members": self.n_members,
                    "flags": flags,
                }
            )
        return out


def _fmt(x) -> str:
    return repr(float(x))


def write_csv(rows: Iterable[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


# --------------------------------------------------------------------------
# ensemble-mean skill and spread


def _valid(members, exploded):
    if exploded is None:
        return np.ones(members.shape[:-1], dtype=bool)
    return ~np.asarray(exploded, dtype=bool)


def _masked_moments(members, exploded):
    """Ensemble mean and population variance over usable members: ``[M, T, G]``."""
    x = np.asarray(members, dtype=np.float64)
    w = _valid(x, exploded).astype(np.float64)[..., None]
    n = w.sum(axis=1)
    xw = np.where(w > 0, x, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = xw.sum(axis=1) / n
        var = (w * (xw - mean[:, None]) ** 2).sum(axis=1) / n
    return mean, var, n[..., 0]


def _wmean(v, weights):
    if weights is None:
        return v.mean(axis=-1)
    return (v * location_weights(weights)).mean(axis=-1)


def squared_error_per_ic(members, truth, exploded=None, weights=None) -> np.ndarray:
    """Location-weighted squared error of the ensemble mean, ``[M, T]`` (NaN where no member survives)."""
    mean, _, _ = _masked_moments(members, exploded)
    return _wmean((mean - np.asarray(truth, dtype=np.float64)) ** 2, weights)


def variance_per_ic(members, exploded=None, weights=None) -> np.ndarray:
    _, var, _ = _masked_moments(members, exploded)
    return _wmean(var, weights)


def ensemble_mean_rmse(members, truth, exploded=None, weights=None) -> np.ndarray:
    """``sqrt( mean_m mean_i a_i (xbar - x_obs)^2 )`` per lead time.

    ICs whose members all exploded are skipped.
    """
    se = squared_error_per_ic(members, truth, exploded, weights)
    return np.sqrt(_nanmean0(se))


def _nanmean0(a):
    a = np.asarray(a, dtype=np.float64)
    ok = ~np.isnan(a)
    n = ok.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(ok, a, 0.0).sum(axis=0) / n


def spread_and_skill(members, truth, exploded=None, weights=None):
    """Return ``(spread, skill, ratio, skill_zero)`` per lead time.

    ``ratio`` is NaN, flagged in ``skill_zero``, where the skill is below 1e-12.
    """
    spread = np.sqrt(_nanmean0(variance_per_ic(members, exploded, weights)))
    skill = ensemble_mean_rmse(members, truth, exploded, weights)
    return (spread, skill) + _ratio(spread, skill)


def _ratio(spread, skill):
    skill_zero = ~(skill >= SKILL_EPS)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(skill_zero, np.nan, spread / np.where(skill_zero, 1.0, skill))
    return ratio, skill_zero


def spread_skill_per_location(members, truth, exploded=None):
    """Mean over ICs and locations of ``sqrt(var / (xbar - x_obs)^2)``.

    The squared error is floored at 1e-8. Returns ``(value [T], n_floored [T])``.
    """
    mean, var, _ = _masked_moments(members, exploded)
    err2 = (mean - np.asarray(truth, dtype=np.float64)) ** 2
    floored = err2 < LOCATION_EPS
    ratio = np.sqrt(var / np.maximum(err2, LOCATION_EPS))
    per_ic = ratio.mean(axis=-1)
    return _nanmean0(per_ic), floored.sum(axis=(0, 2))


# --------------------------------------------------------------------------
# CRPS


def crps_ensemble(members, truth) -> float:
    """``mean|X - y| - 0.5 * mean|X - X'|`` over all ordered member pairs."""
    x = np.sort(np.asarray(members, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("empty ensemble")
    n = x.size
    k = np.arange(n)
    pair_mean = 2.0 * np.dot(2 * k - n + 1, x) / n**2
    return float(np.mean(np.abs(x - truth)) - 0.5 * pair_mean)


def crps_ensemble_cells(members, truth, exploded=None) -> np.ndarray:
    """CRPS per ``(m, t, g)`` cell of an ``[M, N, T, G]`` stack.

    Exploded members are left out of their cell; cells with no usable member
    are NaN.
    """
    x = np.asarray(members, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    N = x.shape[1]
    ok = np.broadcast_to(_valid(x, exploded)[..., None], x.shape)
    xs = np.sort(np.where(ok, x, np.inf), axis=1)  # usable members first
    n = ok.sum(axis=1)  # [M, T, G]
    idx = np.arange(N).reshape((1, N) + (1,) * (x.ndim - 2))
    used = idx < n[:, None]
    k = np.where(used, 2 * idx - n[:, None] + 1, 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        pair_mean = 2.0 * (k * np.where(used, xs, 0.0)).sum(axis=1) / n**2
        abs_mean = np.where(ok, np.abs(x - y[:, None]), 0.0).sum(axis=1) / n
    return np.where(n > 0, abs_mean - 0.5 * pair_mean, np.nan)


def crps_gaussian(mu, sigma, truth):
    mu, sigma, y = (np.asarray(v, dtype=np.float64) for v in (mu, sigma, truth))
    if np.any(~(sigma > 0)):
        raise ValueError("sigma must be positive")
    z = (y - mu) / sigma
    pdf = np.exp(-0.5 * z**2) / math.sqrt(2 * math.pi)
    return sigma * (z * (2 * ndtr(z) - 1) + 2 * pdf - 1 / math.sqrt(math.pi))


def crps(members, truth, exploded=None, weights=None) -> np.ndarray:
    """IC-averaged, location-weighted ensemble CRPS per lead time."""
    return _nanmean0(_wmean(crps_ensemble_cells(members, truth, exploded), weights))


# --------------------------------------------------------------------------
# KL and the error-accumulation metric


def gaussian_kl(mu1, sigma1, mu2, sigma2, axis=-1):
    """``KL(N(mu1, sigma1^2) || N(mu2, sigma2^2))``, summed over ``axis`` for arrays."""
    mu1, s1, mu2, s2 = (np.asarray(v, dtype=np.float64) for v in (mu1, sigma1, mu2, sigma2))
    if np.any(~(s1 > 0)) or np.any(~(s2 > 0)):
        raise ValueError("standard deviations must be positive")
    kl = np.log(s2 / s1) + (s1**2 + (mu1 - mu2) ** 2) / (2 * s2**2) - 0.5
    if kl.ndim == 0:
        return float(kl)
    return kl.sum(axis=axis)


@dataclass
class ErrorAccumulation:
    per_ic: np.ndarray  # [M, T] dimension-aggregated KL
    per_dim: np.ndarray  # [M, T, D]
    skipped: np.ndarray  # [T] number of (IC, lead) cells skipped
    aggregate: str = "mean"

    def curve(self) -> np.ndarray:
        return _nanmean0(self.per_ic)

    def curve_per_dim(self) -> np.ndarray:
        return _nanmean0(self.per_dim)


def _aggregate(per_dim, aggregate):
    if aggregate == "mean":
        return per_dim.mean(axis=-1)
    if aggregate == "sum":
        return per_dim.sum(axis=-1)
    raise ValueError("aggregate must be 'mean' or 'sum'")


def error_accum_gaussian(gen, cts, gen_exploded=None, cts_exploded=None, aggregate="mean") -> ErrorAccumulation:
    """KL(gen || cts) between Gaussians fitted to the two ensembles per (IC, lead, dim)."""
    gen = np.asarray(gen)
    cts = np.asarray(cts)
    if gen.shape[0] != cts.shape[0] or gen.shape[2:] != cts.shape[2:]:
        raise ValueError("ensembles must share ICs, lead times and dimensions")
    mg, sg, _ = fit_gaussians(gen, gen_exploded)
    mc, sc, _ = fit_gaussians(cts, cts_exploded)
    with np.errstate(invalid="ignore"):
        per_dim = np.log(sc / sg) + (sg**2 + (mg - mc) ** 2) / (2 * sc**2) - 0.5
    per_ic = _aggregate(per_dim, aggregate)
    skipped = np.isnan(per_ic).sum(axis=0)
    return ErrorAccumulation(per_ic, per_dim, skipped, aggregate)


def discrete_kl(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def error_accum_histogram(
    gen, cts, bins: int = 30, gen_exploded=None, cts_exploded=None, aggregate="mean", eps: float = HIST_EPS
) -> ErrorAccumulation:
    """Discrete KL(gen || cts) between histograms on shared equal-width bins.

    Bin edges span the pooled min/max of both sample sets in each
    (IC, lead, dim) cell; each bin gets ``eps`` extra mass before renormalizing.
    """
    gen = np.asarray(gen, dtype=np.float64)
    cts = np.asarray(cts, dtype=np.float64)
    if gen.shape[0] != cts.shape[0] or gen.shape[2:] != cts.shape[2:]:
        raise ValueError("ensembles must share ICs, lead times and dimensions")
    vg = _valid(gen, gen_exploded)[..., None]
    vc = _valid(cts, cts_exploded)[..., None]
    lo = np.minimum(np.where(vg, gen, np.inf).min(axis=1), np.where(vc, cts, np.inf).min(axis=1))
    hi = np.maximum(np.where(vg, gen, -np.inf).max(axis=1), np.where(vc, cts, -np.inf).max(axis=1))
    width = hi - lo
    flat_range = ~(width > 0)
    safe_width = np.where(flat_range, 1.0, width)

    cell_ids = np.arange(lo.size).reshape(lo.shape)[:, None]

    def probs(x, valid):
        with np.errstate(invalid="ignore"):
            idx = np.floor((x - lo[:, None]) / safe_width[:, None] * bins)
        idx = np.clip(np.nan_to_num(idx, nan=0.0, posinf=bins - 1, neginf=0.0), 0, bins - 1).astype(np.int64)
        keys = (cell_ids * bins + idx)[np.broadcast_to(valid, x.shape)]
        counts = np.bincount(keys, minlength=lo.size * bins).reshape(lo.shape + (bins,)).astype(np.float64)
        n = counts.sum(axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = counts / n
        return (p + eps) / (1.0 + bins * eps), n[..., 0]

    p, n_g = probs(gen, vg)
    q, n_c = probs(cts, vc)
    per_dim = np.sum(p * np.log(p / q), axis=-1)
    per_dim = np.where(flat_range, 0.0, per_dim)
    per_dim = np.where((n_g < 2) | (n_c < 2), np.nan, per_dim)
    per_ic = _aggregate(per_dim, aggregate)
    return ErrorAccumulation(per_ic, per_dim, np.isnan(per_ic).sum(axis=0), aggregate)


# --------------------------------------------------------------------------
# bootstrap


def bootstrap_band(
    per_ic,
    replicates: int = 100,
    level: float = 0.95,
    seed: int | np.random.Generator = 0,
    statistic: Callable[[np.ndarray], np.ndarray] | None = None,
):
    """Percentile band of ``statistic`` over IC resamples (with replacement).

    ``per_ic`` has the IC axis first; ``statistic`` maps a resampled array to
    the metric (default: NaN-aware mean over ICs).
    """
    x = np.asarray(per_ic, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("bootstrapping needs at least two ICs")
    statistic = statistic or _nanmean0
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    M = x.shape[0]
    reps = np.stack([statistic(x[rng.integers(0, M, size=M)]) for _ in range(replicates)])
    alpha = (1.0 - level) / 2.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN lead times stay NaN
        lo, hi = np.nanpercentile(reps, [100 * alpha, 100 * (1 - alpha)], axis=0)
    return lo, hi


def rmse_statistic(se):
    return np.sqrt(_nanmean0(se))


def spread_skill_statistic(stacked):
    """Spread/skill from per-IC ``[M, 2, T]`` arrays of (variance, squared error)."""
    spread = np.sqrt(_nanmean0(stacked[:, 0]))
    skill = np.sqrt(_nanmean0(stacked[:, 1]))
    return _ratio(spread, skill)[0]
