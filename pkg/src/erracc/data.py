"""Truth datasets: generation, persistence, standardization, windowing, noise."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .dynamics import (
    IntegratorConfig,
    L63Params,
    L96Params,
    Trajectory,
    integrate,
)

logger = logging.getLogger(__name__)

__all__ = [
    "Trajectory",
    "Protocol",
    "SplitSpec",
    "Standardizer",
    "NoiseSchedule",
    "WindowBatch",
    "Dataset",
    "PROTOCOLS",
    "generate_dataset",
    "load_dataset",
    "make_windows",
    "corrupt_with_noise",
]


class DataError(Exception):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def __post_init__(self):
        bounds = [self.train, self.val, self.test]
        for lo, hi in bounds:
            if not 0 <= lo < hi:
                raise DataError(f"empty or negative split range {(lo, hi)}")
        if not (self.train[1] == self.val[0] and self.val[1] == self.test[0]):
            raise DataError("splits must be contiguous and ordered train < val < test")

    def __getitem__(self, name: str) -> tuple[int, int]:
        return getattr(self, name)

    @classmethod
    def from_sizes(cls, n_rows: int, n_train: int, n_val: int) -> "SplitSpec":
        return cls((0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_rows))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape:
            raise DataError("mean and std shapes differ")
        if np.any(~(self.std > 0)):
            raise DataError("standard deviations must be positive")

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), x.std(axis=0))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def _check(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.mean.shape[0]:
            raise DataError(
                f"last dimension {x.shape[-1]} does not match standardizer dimension {self.mean.shape[0]}"
            )
        return x

    def standardize(self, x) -> np.ndarray:
        return (self._check(x) - self.mean) / self.std

    def destandardize(self, z) -> np.ndarray:
        return self._check(z) * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"]), np.array(d["std"]))


@dataclass(frozen=True)
class NoiseSchedule:
    """Random-walk noise variance ``var(t) = slope * t + intercept``."""

    slope: float
    intercept: float = 0.0

    def variance(self, t) -> np.ndarray:
        v = self.slope * np.asarray(t, dtype=np.float64) + self.intercept
        if np.any(v < 0):
            raise DataError("noise schedule gives negative variance at a requested lead time")
        return v


@dataclass
class WindowBatch:
    """Training windows in standardized units.

    ``prev`` is the state fed to a one-step model for predicting ``target``;
    ``offsets`` holds the lead ``t`` of ``target`` relative to ``context``.
    """

    starts: np.ndarray  # [B] row index of the context state
    offsets: np.ndarray  # [B] t in 1..n
    context: np.ndarray  # [B, D] x_c
    prev: np.ndarray  # [B, D] x_{t+c-1}
    target: np.ndarray  # [B, D] x_{t+c}
    noisy: np.ndarray | None = None  # [B] bool, rows whose prev was corrupted

    def __len__(self) -> int:
        return self.starts.shape[0]


@dataclass(frozen=True)
class Protocol:
    system: str
    dt: float
    save_every: int
    n_rows: int  # rows kept after the burn-in discard
    n_train: int
    n_val: int
    discard: int = 200
    observed: tuple[int, ...] = ()

    @property
    def n_generated(self) -> int:
        return self.n_rows + self.discard


_L96_OBS = tuple(range(L96Params().K))

PROTOCOLS: dict[str, Protocol] = {
    "l63": Protocol("l63", 0.01, 1, 1_500_000 - 200, 900_000, 100_000, observed=(0, 1)),
    "l96": Protocol("l96", 0.001, 5, 9_000_000 - 200, 1_000_000, 100_000, observed=_L96_OBS),
    "l63-desk": Protocol("l63", 0.01, 1, 170_000, 100_000, 20_000, observed=(0, 1)),
    "l96-desk": Protocol("l96", 0.001, 5, 260_000, 200_000, 20_000, observed=_L96_OBS),
}


@dataclass
class Dataset:
    values: np.ndarray  # [T, D_full] raw float64 (possibly a memmap)
    dt_between_rows: float
    system: str
    splits: SplitSpec
    standardizer: Standardizer
    observed: tuple[int, ...]
    meta: dict = field(default_factory=dict)
    _obs_cache: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return len(self.observed)

    def observed_std(self, dtype=np.float32) -> np.ndarray:
        """All rows of the observed variables, standardized."""
        if self._obs_cache is None or self._obs_cache.dtype != dtype:
            raw = np.asarray(self.values[:, list(self.observed)], dtype=np.float64)
            self._obs_cache = self.standardizer.standardize(raw).astype(dtype)
        return self._obs_cache

    def observed_raw(self, split: str | None = None) -> np.ndarray:
        rows = slice(None) if split is None else slice(*self.splits[split])
        return np.asarray(self.values[rows][:, list(self.observed)], dtype=np.float64)


def _initial_condition(system: str, params, rng: np.random.Generator) -> np.ndarray:
    if system == "l63":
        return np.array([1.0, 1.0, 1.0])
    u = rng.standard_normal(params.K)
    v = rng.standard_normal(params.J * params.K)
    return np.concatenate([params.F + u, 0.1 * v])


def generate_dataset(
    protocol: Protocol | str,
    out_dir: str | Path,
    name: str | None = None,
    seed: int = 0,
    params=None,
    chunk_rows: int = 200_000,
) -> Dataset:
    """Integrate the truth system, discard burn-in, split, standardize, persist.

    Writes ``<name>.f64`` (row-major little-endian float64, all state
    variables) and ``<name>.meta.json``.
    """
    if isinstance(protocol, str):
        protocol = PROTOCOLS[protocol]
    system = protocol.system
    if params is None:
        params = L63Params() if system == "l63" else L96Params()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = name or system
    rng = np.random.default_rng(seed)
    ic = _initial_condition(system, params, rng)

    data_path = out_dir / f"{name}.f64"
    # Integrate in chunks so paper-scale runs never hold the whole record in
    # memory; each chunk restarts from the last saved state, which is
    # equivalent to one uninterrupted run.
    state = ic
    remaining = protocol.n_generated
    to_skip = protocol.discard
    n_written = 0
    with open(data_path, "wb") as fh:
        while remaining > 0:
            n = min(chunk_rows, remaining)
            traj = integrate(system, state, IntegratorConfig(protocol.dt, protocol.save_every, n), params)
            state = traj.values[-1]
            rows = traj.values
            if to_skip:
                drop = min(to_skip, n)
                rows = rows[drop:]
                to_skip -= drop
            fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())
            n_written += rows.shape[0]
            remaining -= n
    d_full = ic.shape[0]
    splits = SplitSpec.from_sizes(n_written, protocol.n_train, protocol.n_val)
    values = np.memmap(data_path, dtype="<f8", mode="r", shape=(n_written, d_full))
    train = np.asarray(values[slice(*splits.train)][:, list(protocol.observed)])
    standardizer = Standardizer.fit(train)

    meta = {
        "system": system,
        "shape": [n_written, d_full],
        "dtype": "<f8",
        "dt_between_rows": protocol.dt * protocol.save_every,
        "integrator": {"dt": protocol.dt, "save_every": protocol.save_every, "scheme": "rk4"},
        "discarded": protocol.discard,
        "splits": {k: list(splits[k]) for k in ("train", "val", "test")},
        "observed": list(protocol.observed),
        "standardizer": standardizer.to_json(),
        "seed": seed,
        "params": asdict(params),
        "initial_condition": ic.tolist(),
        "choices": {
            "initial_condition": "l63 (1,1,1); l96 X=F+N(0,1), Y=0.1*N(0,1), seeded",
            "burn_in": f"first {protocol.discard} saved rows discarded",
        },
    }
    (out_dir / f"{name}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    logger.info("wrote %s (%d rows x %d)", data_path, n_written, d_full)
    return Dataset(values, meta["dt_between_rows"], system, splits, standardizer, protocol.observed, meta)


def load_dataset(prefix: str | Path) -> Dataset:
    prefix = Path(prefix)
    if prefix.suffix in (".f64", ".json"):
        prefix = prefix.with_suffix("")
        if prefix.suffix == ".meta":
            prefix = prefix.with_suffix("")
    meta_path = prefix.parent / f"{prefix.name}.meta.json"
    data_path = prefix.parent / f"{prefix.name}.f64"
    if not meta_path.exists() or not data_path.exists():
        raise DataError(f"dataset files for {prefix} not found")
    meta = json.loads(meta_path.read_text())
    shape = tuple(meta["shape"])
    values = np.memmap(data_path, dtype="<f8", mode="r", shape=shape)
    s = meta["splits"]
    splits = SplitSpec(tuple(s["train"]), tuple(s["val"]), tuple(s["test"]))
    return Dataset(
        values,
        meta["dt_between_rows"],
        meta["system"],
        splits,
        Standardizer.from_json(meta["standardizer"]),
        tuple(meta["observed"]),
        meta,
    )


def make_windows(
    series: np.ndarray,
    split: tuple[int, int],
    horizon: int,
    batch_size: int,
    rng: np.random.Generator,
    n_batches: int | None = None,
) -> Iterator[WindowBatch]:
    """Yield batches of windows drawn uniformly from ``series[split]``.

    Each window starts at a context row ``s`` with ``s + horizon`` still
    inside the split, and carries one lead time ``t`` uniform in 1..horizon.
    """
    lo, hi = split
    if horizon < 1:
        raise DataError("horizon must be >= 1")
    n_starts = hi - lo - horizon
    if n_starts < 1:
        raise DataError(f"horizon {horizon} does not fit in split of length {hi - lo}")
    produced = 0
    while n_batches is None or produced < n_batches:
        starts = lo + rng.integers(0, n_starts, size=batch_size)
        offsets = rng.integers(1, horizon + 1, size=batch_size)
        yield WindowBatch(
            starts=starts,
            offsets=offsets,
            context=series[starts],
            prev=series[starts + offsets - 1],
            target=series[starts + offsets],
        )
        produced += 1


def corrupt_with_noise(
    batch: WindowBatch,
    schedule: NoiseSchedule,
    fraction: float,
    rng: np.random.Generator,
    scale=None,
) -> WindowBatch:
    """Add random-walk noise ``N(0, var(t))`` to ``prev`` on a fraction of rows.

    ``scale`` multiplies the noise std per dimension; pass ``1 / std`` of a
    standardizer to add noise defined in raw units to standardized data.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DataError("noise fraction must be in [0, 1]")
    var = schedule.variance(batch.offsets)
    n = len(batch)
    k = int(round(fraction * n))
    if k == 0:
        return batch
    rows = np.sort(rng.choice(n, size=k, replace=False))
    prev = batch.prev.copy()
    std = np.sqrt(var[rows])[:, None]
    noise = rng.standard_normal((k, prev.shape[1])) * std
    if scale is not None:
        noise = noise * np.asarray(scale, dtype=np.float64)
    prev[rows] = (prev[rows] + noise).astype(prev.dtype)
    noisy = np.zeros(n, dtype=bool)
    noisy[rows] = True
    return replace(batch, prev=prev, noisy=noisy)
