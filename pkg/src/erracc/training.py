"""Training objectives for the direct-horizon (CTS) and autoregressive models.

* ``train_cts``: Gaussian NLL of ``x_{c+t}`` given ``(x_c, t)``.
* ``train_ar_mle``: one-step Gaussian NLL.
* ``train_ar_rollout``: NLL accumulated along the model's own K-step rollouts.
* ``train_ar_regularized``: one-step NLL plus ``lam / n`` times
  ``KL(gen || cts)``, with the previous state optionally corrupted by
  random-walk noise.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset, NoiseSchedule, WindowBatch, corrupt_with_noise, make_windows
from .forecasters import ARModel, CTSModel
from .neuralnet import (
    MLP,
    SIGMA_HEAD,
    Adam,
    MLPConfig,
    TrainingDivergence,
    gaussian_kl_grad,
    gaussian_nll,
)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    steps_per_epoch: int | None = None  # default: training rows // batch size
    lr: float = 3e-4
    sigma_lr: float | None = None  # sigma-head rate after the drop
    sigma_lr_drop_epoch: int | None = None
    lam: float = 0.0
    noise_fraction: float = 0.0
    noise_start_epoch: int = 0
    noise_slope: float = 0.0
    noise_intercept: float = 0.0
    noise_target: str = "both"  # "both": NLL and penalty see the corrupted state; "penalty": only the KL term
    noise_units: str = "standardized"  # or "raw": the schedule's variance is in data units
    horizon: int = 1
    rollout_k: int = 2
    rollout_stop_gradient: bool = True
    max_rollout_rows: int = 2_000_000
    t_max: int = 200
    policy: str = "freeze"
    depth: int = 3
    width: int = 32
    val_batches: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError("noise_fraction must be in [0, 1]")
        if self.noise_fraction > 0 and not 0 <= self.noise_start_epoch <= self.epochs:
            raise ValueError("noise_start_epoch must lie in [0, epochs]")
        if self.noise_target not in ("both", "penalty"):
            raise ValueError("noise_target must be 'both' or 'penalty'")
        if self.noise_units not in ("standardized", "raw"):
            raise ValueError("noise_units must be 'standardized' or 'raw'")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lam must be finite and >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    @property
    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.noise_slope, self.noise_intercept)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    best_epoch: int | None = None

    def log(self, record: dict, jsonl_path: str | Path | None = None):
        if self.epochs and record["epoch"] <= self.epochs[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        self.epochs.append(record)
        if jsonl_path is not None:
            with open(jsonl_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _streams(seed: int):
    """Independent generators for init, windows, noise, rollout sampling and validation."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]


def _steps(dataset: Dataset, cfg: TrainConfig) -> int:
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    lo, hi = dataset.splits.train
    return max(1, (hi - lo) // cfg.batch_size)


def _val_batches(series, dataset, horizon, cfg, rng):
    try:
        return list(make_windows(series, dataset.splits.val, horizon, cfg.batch_size, rng, cfg.val_batches))
    except Exception:  # validation split too short for this horizon
        return []


def _finish(report: TrainReport, net: MLP, model, checkpoint: str | Path | None, cfg: TrainConfig):
    if checkpoint is not None:
        model.save(checkpoint, {"train_config": asdict(cfg), "epochs": len(report.epochs)})
        report.checkpoint = str(checkpoint)


# --------------------------------------------------------------------------
# per-batch losses (loss value and gradients w.r.t. the network outputs)


def one_step_loss(
    net: MLP,
    prev,
    target,
    cts_mean=None,
    cts_log_sigma=None,
    lam: float = 0.0,
    horizon: int = 1,
    penalty_prev=None,
):
    """``mean_b[ NLL(target | prev) + lam / horizon * KL(gen || cts) ]`` and its parameter gradients.

    The KL term evaluates the generator at ``penalty_prev`` when given,
    otherwise at ``prev``. Returns ``(loss, nll, penalty, grads)``.
    """
    prev = np.asarray(prev, dtype=net.dtype)
    mean, log_sigma, tape = net.forward(prev)
    pred = prev + mean
    nll, d_mean, d_log_sigma, _ = gaussian_nll(pred, log_sigma, target)
    penalty = 0.0
    extra = None
    if lam > 0:
        w = lam / horizon
        scale = w / prev.shape[0]
        if penalty_prev is None:
            kl, dk_mean, dk_log_sigma = gaussian_kl_grad(pred, log_sigma, cts_mean, cts_log_sigma)
            d_mean = d_mean + scale * dk_mean
            d_log_sigma = d_log_sigma + scale * dk_log_sigma
        else:
            p_prev = np.asarray(penalty_prev, dtype=net.dtype)
            p_mean, p_log_sigma, p_tape = net.forward(p_prev)
            kl, dk_mean, dk_log_sigma = gaussian_kl_grad(p_prev + p_mean, p_log_sigma, cts_mean, cts_log_sigma)
            extra = net.backward(p_tape, scale * dk_mean, scale * dk_log_sigma)
        penalty = w * float(kl.mean())
    loss = nll + penalty
    if not np.isfinite(loss):
        raise TrainingDivergence("non-finite loss")
    grads = net.backward(tape, d_mean, d_log_sigma)
    if extra is not None:
        grads = {k: grads[k] + extra[k] for k in grads}
    return loss, nll, penalty, grads


def rollout_loss(net: MLP, window, rng: np.random.Generator, stop_gradient: bool = True):
    """Mean NLL of ``window[:, j]`` under the conditional emitted at rollout step ``j``.

    ``window`` is ``[B, K + 1, D]``; column 0 is the context. The model's own
    samples are fed back. With ``stop_gradient`` the fed-back states are
    constants; otherwise gradients flow through the reparameterized samples.
    """
    window = np.asarray(window)
    B, K1, D = window.shape
    K = K1 - 1
    state = window[:, 0].astype(net.dtype)
    total = 0.0
    grads: dict | None = None
    saved = []
    for j in range(1, K + 1):
        mean, log_sigma, tape = net.forward(state)
        pred = state + mean
        nll, d_mean, d_log_sigma, _ = gaussian_nll(pred, log_sigma, window[:, j])
        total += nll
        eps = rng.standard_normal((B, D))
        nxt = (pred.astype(np.float64) + np.exp(log_sigma.astype(np.float64)) * eps).astype(net.dtype)
        if stop_gradient:
            if K > 1:
                d_mean = d_mean / K
                d_log_sigma = d_log_sigma / K
            g = net.backward(tape, d_mean, d_log_sigma)
            grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
        else:
            saved.append((tape, d_mean / K, d_log_sigma / K, eps, log_sigma))
        state = nxt
    if not stop_gradient:
        grads = _rollout_bptt(net, saved)
    loss = total / K
    if not np.isfinite(loss):
        raise TrainingDivergence("non-finite loss")
    return loss, grads


def _rollout_bptt(net: MLP, saved):
    """Reverse pass through the sampled rollout (reparameterized samples)."""
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    d_state_next = None  # gradient w.r.t. the state fed into the following step
    for tape, d_mean, d_log_sigma, eps, log_sigma in reversed(saved):
        d_pred = np.asarray(d_mean, dtype=np.float64)
        d_ls = np.asarray(d_log_sigma, dtype=np.float64)
        if d_state_next is not None:
            # next = pred + exp(log_sigma) * eps
            d_pred = d_pred + d_state_next
            d_ls = d_ls + d_state_next * np.exp(log_sigma.astype(np.float64)) * eps
        g, d_in = _backward_with_input(net, tape, d_pred, d_ls)
        # pred = state + mean, so the state also receives d_pred directly
        d_state_next = d_in + d_pred
        for k in grads:
            grads[k] += g[k]
    return grads


def _backward_with_input(net: MLP, tape, d_mean, d_log_sigma):
    p = net.params
    d_mean = np.asarray(d_mean, dtype=net.dtype)
    d_raw = np.where(tape.sigma_in_range, d_log_sigma, 0).astype(net.dtype)
    dh = d_mean @ p["W_mean"].T + d_raw @ p["W_sigma"].T
    for i in reversed(range(net.config.depth)):
        dz = dh * np.where(tape.pre[i] > 0, 1.0, np.exp(np.minimum(tape.pre[i], 0))).astype(net.dtype)
        dh = dz @ p[f"W{i}"].T
    grads = net.backward(tape, d_mean, d_raw)
    return grads, dh.astype(np.float64)


# --------------------------------------------------------------------------
# training loops


def train_cts(dataset: Dataset, cfg: TrainConfig, checkpoint=None, jsonl=None) -> tuple[CTSModel, TrainReport]:
    """Fit the direct-horizon model on leads ``t`` uniform in ``1..t_max``.

    The weights of the epoch with the lowest validation NLL are kept.
    """
    series = dataset.observed_std()
    D = dataset.dim
    r_init, r_win, _, _, r_val = _streams(cfg.seed)
    net = MLP(MLPConfig(D + 1, D, cfg.depth, cfg.width), r_init)
    model = CTSModel(net, dataset.standardizer, cfg.t_max, cfg.policy, tag="cts")
    opt = Adam(net.params, net.groups, cfg.lr)
    report = TrainReport()
    if cfg.epochs == 0:
        _finish(report, net, model, checkpoint, cfg)
        return model, report
    val = _val_batches(series, dataset, cfg.t_max, cfg, r_val)
    windows = make_windows(series, dataset.splits.train, cfg.t_max, cfg.batch_size, r_win)
    n_steps = _steps(dataset, cfg)

    def batch_loss(b: WindowBatch):
        mean, log_sigma, tape = net.forward(model.features(b.context, b.offsets))
        nll, d_mean, d_ls, _ = gaussian_nll(b.context + mean, log_sigma, b.target)
        return nll, tape, d_mean, d_ls

    best = (np.inf, None, None)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        snapshot = {k: v.copy() for k, v in net.params.items()}
        losses = []
        try:
            for _ in range(n_steps):
                nll, tape, d_mean, d_ls = batch_loss(next(windows))
                if not np.isfinite(nll):
                    raise TrainingDivergence("non-finite loss")
                opt.step(net.backward(tape, d_mean, d_ls))
                losses.append(nll)
        except TrainingDivergence as exc:
            _abort(net, snapshot, model, checkpoint, cfg, report, exc)
        val_nll = float(np.mean([batch_loss(b)[0] for b in val])) if val else float("nan")
        rec = _record(epoch, losses, val_nll, 0.0, t0)
        report.log(rec, jsonl)
        logger.info("cts epoch %d: %s", epoch, rec)
        if val and val_nll < best[0]:
            best = (val_nll, epoch, {k: v.copy() for k, v in net.params.items()})
    if best[2] is not None:
        net.params.update(best[2])
        opt.params = net.params
        report.best_epoch = best[1]
    _finish(report, net, model, checkpoint, cfg)
    return model, report


def _record(epoch, losses, val_nll, penalty, t0):
    return {
        "epoch": epoch,
        "train_nll": float(np.mean(losses)) if losses else float("nan"),
        "val_nll": val_nll,
        "penalty": float(penalty),
        "wall_time": time.perf_counter() - t0,
    }


def _abort(net, snapshot, model, checkpoint, cfg, report, exc):
    net.params.update(snapshot)
    _finish(report, net, model, checkpoint, cfg)
    exc.report = report
    raise exc


def _ar_val_nll(net: MLP, val: list[WindowBatch]) -> float:
    if not val:
        return float("nan")
    out = []
    for b in val:
        mean, log_sigma, _ = net.forward(b.prev)
        out.append(gaussian_nll(b.prev + mean, log_sigma, b.target)[0])
    return float(np.mean(out))


def _train_ar(dataset: Dataset, cfg: TrainConfig, cts: CTSModel | None, tag: str, checkpoint, jsonl):
    series = dataset.observed_std()
    D = dataset.dim
    r_init, r_win, r_noise, _, r_val = _streams(cfg.seed)
    net = MLP(MLPConfig(D, D, cfg.depth, cfg.width), r_init)
    model = ARModel(net, dataset.standardizer, tag=tag)
    opt = Adam(net.params, net.groups, cfg.lr)
    report = TrainReport()
    if cfg.epochs == 0:
        _finish(report, net, model, checkpoint, cfg)
        return model, report
    use_penalty = cfg.lam > 0
    if use_penalty and cts is None:
        raise ValueError("the KL penalty needs a trained CTS")
    if use_penalty and cfg.horizon > cts.t_max:
        raise ValueError("training horizon exceeds the CTS lead-time cap")
    schedule = cfg.noise_schedule
    noise_scale = 1.0 / dataset.standardizer.std if cfg.noise_units == "raw" else None
    val = _val_batches(series, dataset, 1, cfg, r_val)
    windows = make_windows(series, dataset.splits.train, cfg.horizon, cfg.batch_size, r_win)
    n_steps = _steps(dataset, cfg)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.sigma_lr_drop_epoch is not None and epoch > cfg.sigma_lr_drop_epoch:
            opt.set_lr(SIGMA_HEAD, cfg.sigma_lr)
        noisy = cfg.noise_fraction > 0 and epoch > cfg.noise_start_epoch
        snapshot = {k: v.copy() for k, v in net.params.items()}
        losses, penalties = [], []
        try:
            for _ in range(n_steps):
                b = next(windows)
                penalty_prev = None
                if noisy:
                    corrupted = corrupt_with_noise(b, schedule, cfg.noise_fraction, r_noise, noise_scale)
                    if cfg.noise_target == "both":
                        b = corrupted
                    else:
                        penalty_prev = corrupted.prev
                if use_penalty:
                    cts_mean, cts_ls = cts.conditional(b.context, b.offsets)
                    loss, nll, pen, grads = one_step_loss(
                        net, b.prev, b.target, cts_mean, cts_ls, cfg.lam, cfg.horizon, penalty_prev
                    )
                else:
                    loss, nll, pen, grads = one_step_loss(net, b.prev, b.target)
                opt.step(grads)
                losses.append(nll)
                penalties.append(pen)
        except TrainingDivergence as exc:
            _abort(net, snapshot, model, checkpoint, cfg, report, exc)
        rec = _record(epoch, losses, _ar_val_nll(net, val), np.mean(penalties), t0)
        rec["noise"] = bool(noisy)
        report.log(rec, jsonl)
        logger.info("%s epoch %d: %s", tag, epoch, rec)
    _finish(report, net, model, checkpoint, cfg)
    return model, report


def train_ar_mle(dataset: Dataset, cfg: TrainConfig, checkpoint=None, jsonl=None, tag="gen"):
    """One-step maximum likelihood. ``lam`` and the noise options are ignored."""
    clean = TrainConfig(**{**asdict(cfg), "lam": 0.0, "noise_fraction": 0.0})
    return _train_ar(dataset, clean, None, tag, checkpoint, jsonl)


def train_ar_regularized(dataset: Dataset, cts: CTSModel | None, cfg: TrainConfig, checkpoint=None, jsonl=None, tag="gen-ours"):
    """One-step NLL plus the ``lam / n`` weighted ``KL(gen || cts)`` penalty.

    By default both terms see the same (possibly noise-corrupted) previous
    state; ``noise_target="penalty"`` corrupts only the input of the KL term.
    The CTS conditional is evaluated at the window's context and true lead
    time. The CTS is only read.
    """
    return _train_ar(dataset, cfg, cts, tag, checkpoint, jsonl)


def train_ar_rollout(dataset: Dataset, cfg: TrainConfig, checkpoint=None, jsonl=None, tag="gen-rollout"):
    K = cfg.rollout_k
    if K < 1:
        raise ValueError("rollout length must be >= 1")
    if K * cfg.batch_size > cfg.max_rollout_rows:
        raise MemoryError(f"rollout of {K} steps x batch {cfg.batch_size} exceeds max_rollout_rows")
    series = dataset.observed_std()
    D = dataset.dim
    r_init, r_win, _, r_roll, r_val = _streams(cfg.seed)
    net = MLP(MLPConfig(D, D, cfg.depth, cfg.width), r_init)
    model = ARModel(net, dataset.standardizer, tag=tag)
    opt = Adam(net.params, net.groups, cfg.lr)
    report = TrainReport()
    if cfg.epochs == 0:
        _finish(report, net, model, checkpoint, cfg)
        return model, report
    val = _val_batches(series, dataset, 1, cfg, r_val)
    windows = make_windows(series, dataset.splits.train, K, cfg.batch_size, r_win)
    n_steps = _steps(dataset, cfg)
    offsets = np.arange(K + 1)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.sigma_lr_drop_epoch is not None and epoch > cfg.sigma_lr_drop_epoch:
            opt.set_lr(SIGMA_HEAD, cfg.sigma_lr)
        snapshot = {k: v.copy() for k, v in net.params.items()}
        losses = []
        try:
            for _ in range(n_steps):
                b = next(windows)
                window = series[b.starts[:, None] + offsets]
                loss, grads = rollout_loss(net, window, r_roll, cfg.rollout_stop_gradient)
                opt.step(grads)
                losses.append(loss)
        except TrainingDivergence as exc:
            _abort(net, snapshot, model, checkpoint, cfg, report, exc)
        report.log(_record(epoch, losses, _ar_val_nll(net, val), 0.0, t0), jsonl)
    _finish(report, net, model, checkpoint, cfg)
    return model, report
