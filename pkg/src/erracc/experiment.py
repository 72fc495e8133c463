"""Experiment orchestration: data generation, training the roster and evaluation.

Evaluation streams over chunks of initial conditions. For each chunk every
model (and the CTS reference) is sampled, reduced to per-IC statistics and
discarded, so memory stays bounded for long horizons.
"""
from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import NEEDS_CTS, TRAINED, ConfigError, ExperimentConfig
from .data import PROTOCOLS, DataError, Dataset, Protocol, Standardizer, generate_dataset, load_dataset
from .forecasters import ClimatologyCTS, Forecaster, RandomWalkBaseline, load_model
from .metrics import (
    MetricCurve,
    _masked_moments,
    _nanmean0,
    bootstrap_band,
    crps_ensemble_cells,
    error_accum_gaussian,
    error_accum_histogram,
    rmse_statistic,
    spread_skill_statistic,
    write_csv,
)
from .training import TrainConfig, train_ar_mle, train_ar_regularized, train_ar_rollout, train_cts

logger = logging.getLogger(__name__)

# choices that are not fixed by the method description and are in force for every run
DECISIONS = {
    "kl_dimension_aggregation": "mean over dimensions (per-variable curves also emitted)",
    "ensemble_std": "population (denominator N)",
    "histogram": "30 equal-width bins on pooled range, 1e-6 smoothing",
    "skill_zero": "NaN sentinel with skill_zero flag",
    "per_location_floor": "squared error floored at 1e-8, count reported",
    "cts_lead_feature": "t / t_max",
    "explosion": "members beyond 1e6 standardized units are frozen and excluded",
    "test_split": "all rows after the validation split",
    "l96_y_forcing_sign": "-1 (h c / b * X_k subtracted in dY)",
}

METRICS = ("rmse", "spread", "spread_skill", "spread_skill_loc", "crps", "delta_gaussian", "delta_histogram")


@dataclass
class RunMetadata:
    config_hash: str
    seeds: dict
    software_version: str
    wall_time: float
    decisions: dict
    noise: dict = field(default_factory=dict)
    platform: str = field(default_factory=platform.platform)
    n_ics: int = 0
    exploded_at_final_lead: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


# --------------------------------------------------------------------------
# data and training


def resolve_protocol(cfg: ExperimentConfig) -> Protocol:
    """A named protocol, or an inline object with the ``Protocol`` fields."""
    protocol = cfg.data.get("protocol", cfg.system)
    if isinstance(protocol, dict):
        try:
            p = Protocol(**{**protocol, "observed": tuple(protocol.get("observed", ()))})
        except TypeError as exc:
            raise ConfigError(f"bad inline data protocol: {exc}") from exc
    elif protocol in PROTOCOLS:
        p = PROTOCOLS[protocol]
    else:
        raise ConfigError(f"unknown data protocol {protocol!r}; choose from {sorted(PROTOCOLS)}")
    if p.system != cfg.system:
        raise ConfigError(f"data protocol is for {p.system}, config is for {cfg.system}")
    return p


def generate(cfg: ExperimentConfig) -> Dataset:
    prefix = cfg.dataset_path
    return generate_dataset(resolve_protocol(cfg), prefix.parent, prefix.name, seed=int(cfg.data.get("seed", 0)))


def open_dataset(cfg: ExperimentConfig) -> Dataset:
    prefix = cfg.dataset_path
    if not Path(f"{prefix}.meta.json").exists():
        raise DataError(f"no dataset at {prefix} (run gen-data first)")
    return load_dataset(prefix)


def train_model(cfg: ExperimentConfig, kind: str, dataset: Dataset | None = None, cts=None):
    """Train one roster model and write its checkpoint and JSON-lines log."""
    if kind not in TRAINED:
        raise ConfigError(f"{kind!r} is not a trainable model; choose from {list(TRAINED)}")
    dataset = dataset if dataset is not None else open_dataset(cfg)
    tc: TrainConfig = cfg.train_config(kind)
    ckpt = cfg.checkpoint(kind)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log = ckpt.with_suffix(".jsonl")
    log.unlink(missing_ok=True)
    if kind in NEEDS_CTS and cts is None:
        path = cfg.checkpoint("cts")
        if not path.exists():
            raise DataError(f"{kind} needs a trained CTS; no checkpoint at {path} (train 'cts' first)")
        cts = load_model(path)
    if kind == "cts":
        return train_cts(dataset, tc, ckpt, log)
    if kind == "gen":
        return train_ar_mle(dataset, tc, ckpt, log, tag=kind)
    if kind == "gen-rollout":
        return train_ar_rollout(dataset, tc, ckpt, log, tag=kind)
    if kind == "gen-noise":
        tc = TrainConfig(**{**asdict(tc), "lam": 0.0})
        return train_ar_regularized(dataset, None, tc, ckpt, log, tag=kind)
    if kind == "gen-penalty":
        tc = TrainConfig(**{**asdict(tc), "noise_fraction": 0.0})
        return train_ar_regularized(dataset, cts, tc, ckpt, log, tag=kind)
    return train_ar_regularized(dataset, cts, tc, ckpt, log, tag=kind)


def train_roster(cfg: ExperimentConfig, dataset: Dataset | None = None) -> dict:
    dataset = dataset if dataset is not None else open_dataset(cfg)
    reports = {}
    cts = None
    kinds = [k for k in cfg.roster if k in TRAINED]
    if any(k in NEEDS_CTS for k in kinds) or any(k != "cts" for k in kinds):
        if "cts" not in kinds:
            kinds.insert(0, "cts")
    for kind in sorted(kinds, key=lambda k: k != "cts"):
        model, report = train_model(cfg, kind, dataset, cts)
        if kind == "cts":
            cts = model
        reports[kind] = report
    return reports


# --------------------------------------------------------------------------
# evaluation


def select_ics(dataset: Dataset, n_ics: int, horizon: int, seed: int) -> np.ndarray:
    """Sorted row indices of ``n_ics`` distinct test-split starts with ``horizon`` rows after them."""
    lo, hi = dataset.splits.test
    available = hi - lo - horizon
    if available < n_ics:
        raise DataError(f"test split has room for {max(available, 0)} initial conditions, {n_ics} requested")
    rng = np.random.default_rng(seed)
    return np.sort(lo + rng.choice(available, size=n_ics, replace=False))


def build_models(cfg: ExperimentConfig, dataset: Dataset) -> dict[str, Forecaster]:
    models: dict[str, Forecaster] = {}
    needed = list(cfg.roster)
    if any(k in TRAINED for k in needed) and "cts" not in needed:
        needed.insert(0, "cts")
    for kind in needed:
        if kind in TRAINED:
            path = cfg.checkpoint(kind)
            if not path.exists():
                raise DataError(f"missing checkpoint for {kind}: {path}")
            models[kind] = load_model(path)
            models[kind].tag = kind
        elif kind == "random-walk":
            std = dataset.standardizer
            if cfg.random_walk_units == "raw":
                std = Standardizer.identity(dataset.dim)
            models[kind] = RandomWalkBaseline(std, cfg.random_walk_std)
        elif kind == "climatology":
            models[kind] = ClimatologyCTS(**cfg.climatology)
    return models


def reference_for(kind: str, models: dict) -> str | None:
    """The ensemble each model's error accumulation is measured against."""
    if kind == "random-walk" and "climatology" in models:
        return "climatology"
    if kind in ("cts", "climatology"):
        return kind  # self-comparison smoke row
    return "cts" if "cts" in models else None


class _Accumulator:
    """Per-IC, per-dimension statistics for one model, filled chunk by chunk."""

    def __init__(self, M: int, T: int, D: int):
        shape = (M, T, D)
        self.se = np.full(shape, np.nan)
        self.var = np.full(shape, np.nan)
        self.loc_ratio = np.full(shape, np.nan)
        self.floored = np.zeros(shape, dtype=bool)
        self.crps = np.full(shape, np.nan)
        self.kl_gauss = np.full(shape, np.nan)
        self.kl_hist = np.full(shape, np.nan)
        self.explosions = np.zeros(T, dtype=np.int64)

    def add(self, rows, samples, exploded, truth, ref, bins):
        mean, var, _ = _masked_moments(samples, exploded)
        err2 = (mean - truth) ** 2
        self.se[rows] = err2
        self.var[rows] = var
        self.floored[rows] = err2 < 1e-8
        self.loc_ratio[rows] = np.sqrt(var / np.maximum(err2, 1e-8))
        self.crps[rows] = crps_ensemble_cells(samples, truth, exploded)
        self.explosions += exploded.sum(axis=(0, 1))
        if ref is not None:
            r_samples, r_exploded = ref
            self.kl_gauss[rows] = error_accum_gaussian(samples, r_samples, exploded, r_exploded).per_dim
            self.kl_hist[rows] = error_accum_histogram(samples, r_samples, bins, exploded, r_exploded).per_dim


def _chunk_size(N: int, T: int, D: int, budget_bytes: float = 1.5e8) -> int:
    return max(1, int(budget_bytes // (N * T * D * 8 * 6)))


def evaluate(cfg: ExperimentConfig, dataset: Dataset | None = None, models: dict | None = None):
    """Sample every roster model on shared ICs and write ``metrics.csv`` plus ``run_meta.json``.

    Returns ``(curves, meta)``.
    """
    t_start = time.perf_counter()
    ev = cfg.eval
    dataset = dataset if dataset is not None else open_dataset(cfg)
    models = models if models is not None else build_models(cfg, dataset)
    T, N = ev.horizon, ev.n_members
    starts = select_ics(dataset, ev.n_ics, T, ev.seed)
    obs = dataset.observed_raw()
    M, D = len(starts), dataset.dim
    kinds = list(models)
    acc = {k: _Accumulator(M, T, D) for k in kinds}
    chunk = _chunk_size(N, T, D)
    for c0 in range(0, M, chunk):
        rows = slice(c0, min(M, c0 + chunk))
        idx = starts[rows]
        ics = obs[idx]
        truth = obs[idx[:, None] + np.arange(1, T + 1)]
        ic_ids = np.arange(rows.start, rows.stop)
        drawn = {}
        for kind in kinds:
            drawn[kind] = models[kind].sample(ics, T, N, ev.seed, ic_ids)
        for kind in kinds:
            ref_kind = reference_for(kind, models)
            ref = drawn[ref_kind] if ref_kind is not None else None
            acc[kind].add(rows, *drawn[kind], truth, ref, ev.histogram_bins)
        logger.info("evaluated ICs %d..%d of %d", rows.start, rows.stop, M)
    curves = []
    variables = [("all", list(range(D)))]
    if ev.per_variable:
        variables += [(name, [d]) for d, name in enumerate(cfg.variables[:D])]
    for kind in kinds:
        a = acc[kind]
        ref_kind = reference_for(kind, models)
        for var, dims in variables:
            curves.extend(_curves_for(kind, var, dims, a, ref_kind, ev, M, N))
    rows_out = [r for c in curves for r in c.rows(cfg.system)]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows_out, out / "metrics.csv")
    meta = RunMetadata(
        config_hash=cfg.digest(),
        seeds={"run": cfg.seed, "data": cfg.data.get("seed"), "eval": ev.seed, **{k: v.seed for k, v in cfg.train.items()}},
        software_version=__version__,
        wall_time=time.perf_counter() - t_start,
        decisions={**DECISIONS, "kl_dimension_aggregation": ev.aggregate},
        noise={k: {"units": v.noise_units, "target": v.noise_target} for k, v in cfg.train.items() if v.noise_fraction > 0},
        n_ics=M,
        exploded_at_final_lead={k: int(acc[k].explosions[-1]) for k in kinds},
    )
    # wall time varies between runs, so it lives in the metadata, not the CSV
    meta.save(out / "run_meta.json")
    return curves, meta


def _curves_for(kind, var, dims, a: _Accumulator, ref_kind, ev, M, N) -> list[MetricCurve]:
    T = a.se.shape[1]
    leads = np.arange(1, T + 1)
    se = a.se[..., dims].mean(axis=-1)
    var_ = a.var[..., dims].mean(axis=-1)
    base = dict(model=kind, variable=var, n_ic=M, n_members=N)
    out = []

    def band(curve, per_ic, statistic=None):
        curve.per_ic = per_ic
        lo, hi = bootstrap_band(per_ic, ev.replicates, ev.level, ev.seed, statistic)
        return curve.with_band(lo, hi)

    rmse = MetricCurve(leads, rmse_statistic(se), "rmse", **base)
    out.append(band(rmse, se, rmse_statistic))
    spread = MetricCurve(leads, rmse_statistic(var_), "spread", **base)
    out.append(band(spread, var_, rmse_statistic))
    stacked = np.stack([var_, se], axis=1)
    ratio = spread_skill_statistic(stacked)
    ss = MetricCurve(leads, ratio, "spread_skill", **base)
    if np.any(np.isnan(ratio)):
        ss.flags.append("skill_zero")
    out.append(band(ss, stacked, spread_skill_statistic))
    loc = a.loc_ratio[..., dims].mean(axis=-1)
    floored = int(a.floored[..., dims].sum())
    sl = MetricCurve(leads, _nanmean0(loc), "spread_skill_loc", **base)
    if floored:
        sl.flags.append(f"floored={floored}")
    out.append(band(sl, loc))
    crps = a.crps[..., dims].mean(axis=-1)
    out.append(band(MetricCurve(leads, _nanmean0(crps), "crps", **base), crps))
    if ref_kind is not None:
        agg = np.mean if ev.aggregate == "mean" else np.sum
        for metric, per_dim in (("delta_gaussian", a.kl_gauss), ("delta_histogram", a.kl_hist)):
            per_ic = agg(per_dim[..., dims], axis=-1)
            skipped = int(np.isnan(per_ic).sum())
            c = MetricCurve(leads, _nanmean0(per_ic), metric, **base)
            c.flags += [f"ref={ref_kind}", f"agg={ev.aggregate}"]
            if skipped:
                c.flags.append(f"skipped={skipped}")
            out.append(band(c, per_ic))
    return out
