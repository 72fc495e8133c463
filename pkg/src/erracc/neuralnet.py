"""Small dense networks with a diagonal-Gaussian head, trained by hand-written backprop.

The network maps ``[B, in_dim]`` inputs to a mean and a log-scale, each
``[B, out_dim]``. ``sigma = exp(raw)`` clamped to ``[SIGMA_MIN, SIGMA_MAX]``.
Parameters are tagged with a group id so the optimizer can give the
sigma head its own learning rate.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SIGMA_MIN = 1e-4
SIGMA_MAX = 1e3
LOG_SIGMA_MIN = math.log(SIGMA_MIN)
LOG_SIGMA_MAX = math.log(SIGMA_MAX)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

BODY = "body"
SIGMA_HEAD = "sigma-head"


class TrainingDivergence(FloatingPointError):
    """Non-finite activations or loss."""


class GraphConsumedError(RuntimeError):
    pass


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0))).astype(np.asarray(x).dtype)


@dataclass(frozen=True)
class MLPConfig:
    in_dim: int
    out_dim: int
    depth: int = 3
    width: int = 32

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("input and output dims must be >= 1")


@dataclass
class GaussianPrediction:
    mean: np.ndarray
    sigma: np.ndarray

    @property
    def log_sigma(self) -> np.ndarray:
        return np.log(self.sigma)


class Tape:
    """Activations saved by a forward pass; consumed by one backward pass."""

    __slots__ = ("inputs", "pre", "sigma_in_range", "consumed")

    def __init__(self):
        self.inputs: list[np.ndarray] = []
        self.pre: list[np.ndarray] = []
        self.sigma_in_range: np.ndarray | None = None
        self.consumed = False


class MLP:
    def __init__(self, config: MLPConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.groups: dict[str, str] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [config.in_dim] + [config.width] * config.depth
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self._add(f"W{i}", _glorot(rng, fan_in, fan_out), BODY)
            self._add(f"b{i}", np.zeros(fan_out), BODY)
        self._add("W_mean", _glorot(rng, config.width, config.out_dim), BODY)
        self._add("b_mean", np.zeros(config.out_dim), BODY)
        self._add("W_sigma", _glorot(rng, config.width, config.out_dim), SIGMA_HEAD)
        self._add("b_sigma", np.zeros(config.out_dim), SIGMA_HEAD)

    def _add(self, name, value, group):
        self.params[name] = np.asarray(value, dtype=self.dtype)
        self.groups[name] = group

    def copy(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.config = self.config
        other.dtype = self.dtype
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.groups = dict(self.groups)
        return other

    def astype(self, dtype) -> "MLP":
        other = self.copy()
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in other.params.items()}
        return other

    def forward(self, x) -> tuple[np.ndarray, np.ndarray, Tape]:
        """Return ``(mean, log_sigma, tape)`` for a ``[B, in_dim]`` batch."""
        h = np.asarray(x, dtype=self.dtype)
        if h.ndim != 2 or h.shape[1] != self.config.in_dim:
            raise ValueError(f"expected input [B, {self.config.in_dim}], got {h.shape}")
        tape = Tape()
        p = self.params
        for i in range(self.config.depth):
            tape.inputs.append(h)
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            tape.pre.append(z)
            h = elu(z)
        tape.inputs.append(h)
        mean = h @ p["W_mean"] + p["b_mean"]
        raw = h @ p["W_sigma"] + p["b_sigma"]
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(raw))):
            raise TrainingDivergence("non-finite network output")
        tape.sigma_in_range = (raw > LOG_SIGMA_MIN) & (raw < LOG_SIGMA_MAX)
        log_sigma = np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mean, log_sigma, tape

    def predict(self, x) -> GaussianPrediction:
        mean, log_sigma, _ = self.forward(x)
        return GaussianPrediction(mean, np.exp(log_sigma))

    def backward(self, tape: Tape, d_mean, d_log_sigma) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its gradients w.r.t. the outputs."""
        if tape.consumed:
            raise GraphConsumedError("this forward pass was already used for a backward pass")
        tape.consumed = True
        p = self.params
        d_mean = np.asarray(d_mean, dtype=self.dtype)
        d_raw = np.where(tape.sigma_in_range, d_log_sigma, 0).astype(self.dtype)
        h = tape.inputs[-1]
        grads = {
            "W_mean": h.T @ d_mean,
            "b_mean": d_mean.sum(axis=0),
            "W_sigma": h.T @ d_raw,
            "b_sigma": d_raw.sum(axis=0),
        }
        dh = d_mean @ p["W_mean"].T + d_raw @ p["W_sigma"].T
        for i in reversed(range(self.config.depth)):
            dz = dh * elu_grad(tape.pre[i])
            grads[f"W{i}"] = tape.inputs[i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            if i:
                dh = dz @ p[f"W{i}"].T
        return grads

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.params])

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in self.params:
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def gaussian_nll(mean, log_sigma, target):
    """Batch-mean diagonal Gaussian NLL, summed over dimensions.

    Returns ``(loss, d_mean, d_log_sigma, per_row)``; gradients are for the
    batch-mean loss.
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_sigma = np.asarray(log_sigma, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mean.shape != target.shape or log_sigma.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    # the clamp may have been applied in float32, so allow its rounding
    if np.any(log_sigma < LOG_SIGMA_MIN - 1e-5) or np.any(log_sigma > LOG_SIGMA_MAX + 1e-5):
        raise ValueError("sigma outside the clamp bounds")
    n = target.shape[0]
    inv_var = np.exp(-2.0 * log_sigma)
    resid = target - mean
    per_row = (log_sigma + HALF_LOG_2PI + 0.5 * resid**2 * inv_var).sum(axis=1)
    d_mean = -resid * inv_var / n
    d_log_sigma = (1.0 - resid**2 * inv_var) / n
    return float(per_row.mean()), d_mean, d_log_sigma, per_row


def gaussian_kl_grad(mean1, log_sigma1, mean2, log_sigma2):
    """KL(N1 || N2) per row (summed over dims) and its gradient w.r.t. N1.

    Returns ``(kl_rows, d_mean1, d_log_sigma1)`` for the *sum* over rows; the
    caller scales.
    """
    m1 = np.asarray(mean1, dtype=np.float64)
    s1 = np.asarray(log_sigma1, dtype=np.float64)
    m2 = np.asarray(mean2, dtype=np.float64)
    s2 = np.asarray(log_sigma2, dtype=np.float64)
    var_ratio = np.exp(2.0 * (s1 - s2))
    inv_var2 = np.exp(-2.0 * s2)
    diff = m1 - m2
    kl = (s2 - s1 + 0.5 * (var_ratio + diff**2 * inv_var2) - 0.5).sum(axis=1)
    return kl, diff * inv_var2, var_ratio - 1.0


class Adam:
    """Adam with bias correction and per-group learning rates."""

    def __init__(self, params: dict, groups: dict, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.groups = groups
        group_ids = set(groups.values())
        self.lr = dict(lr) if isinstance(lr, dict) else {g: float(lr) for g in group_ids}
        missing = group_ids - set(self.lr)
        if missing:
            raise ValueError(f"no learning rate for groups {sorted(missing)}")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def set_lr(self, group: str, lr: float):
        self.lr[group] = float(lr)

    def step(self, grads: dict):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            p -= (self.lr[self.groups[k]] * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def save_checkpoint(path: str | Path, net: MLP, meta: dict | None = None) -> Path:
    """JSON header line followed by the parameters as little-endian float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "config": asdict(net.config),
        "params": [[k, list(v.shape), net.groups[k]] for k, v in net.params.items()],
        "dtype": "<f4",
        "meta": meta or {},
    }
    blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in net.params.values())
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[MLP, dict]:
    raw = Path(path).read_bytes()
    line_end = raw.index(b"\n")
    header = json.loads(raw[:line_end])
    blob = np.frombuffer(raw[line_end + 1 :], dtype="<f4")
    net = MLP.__new__(MLP)
    net.config = MLPConfig(**header["config"])
    net.dtype = np.dtype(np.float32)
    net.params, net.groups = {}, {}
    offset = 0
    for name, shape, group in header["params"]:
        size = int(np.prod(shape))
        net.params[name] = blob[offset : offset + size].reshape(shape).astype(np.float32)
        net.groups[name] = group
        offset += size
    if offset != blob.size:
        raise ValueError("checkpoint blob size does not match its header")
    return net, header["meta"]
