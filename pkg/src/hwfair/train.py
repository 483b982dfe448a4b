"""Deterministic minibatch SGD under a virtual hardware profile."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import vhw
from .errors import DivergedError, GradCheckFailure, NumericalOverflow
from .fairlab import boundary_distance
from .models import Model
from .numkit import backprop
from .numkit.ops import finite_difference_gradient

SCHEDULES = ("constant", "linear_warmup_decay")
DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "constant"
    shuffle_seed: int = 0
    mitigation_lambda: float = 0.0
    prob_clamp: float = backprop.P_CLAMP
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if not (math.isfinite(self.mitigation_lambda) and self.mitigation_lambda >= 0):
            raise ValueError("mitigation_lambda must be finite and >= 0")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.prob_clamp != backprop.P_CLAMP:
            raise ValueError("probability clamp is fixed at 1e-12")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **kw})

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def lr_at(self, step: int, total: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        warm = max(1, int(round(self.warmup_fraction * total)))
        if step < warm:
            return self.learning_rate * (step + 1) / warm
        return self.learning_rate * max(total - step, 0) / max(total - warm, 1)


@dataclass(frozen=True, eq=False)
class TrainedModel:
    model: Model
    profile_id: str
    init_seed: int | None
    shuffle_seed: int
    config_hash: str
    trace: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def params(self):
        return self.model.params

    @property
    def param_hash(self) -> str:
        return self.model.params.sha256()

    # so diagnostics accept trained models wherever a Model is expected
    def with_values(self, values):
        return self.model.with_values(values)

    def sample_gradients(self, data, profile=None):
        return self.model.sample_gradients(data, profile)

    def sample_losses(self, data, profile=None):
        return self.model.sample_losses(data, profile)


class PenaltyResult(NamedTuple):
    penalty: float
    per_group_delta: np.ndarray  # NaN for groups absent from the batch
    absent: tuple[int, ...]


def _penalty_parts(delta: np.ndarray, groups: np.ndarray, n_groups: int):
    n = delta.shape[0]
    counts = np.bincount(groups, minlength=n_groups).astype(np.float64)
    sums = np.bincount(groups, weights=delta, minlength=n_groups)
    present = counts > 0
    means = np.full(n_groups, np.nan)
    means[present] = sums[present] / counts[present]
    overall = float(delta.mean())
    dev = np.where(present, means - overall, 0.0)
    penalty = float(np.sum(dev * dev))
    # d penalty / d delta_i = 2 dev_{a_i} / n_{a_i} - (2 / n) sum_a dev_a
    d_delta = 2.0 * dev[groups] / counts[groups] - 2.0 * dev.sum() / n
    return penalty, means, d_delta


def mitigation_penalty(probs, groups, group_universe=None) -> PenaltyResult:
    """Sum over present groups of (mean group distance - mean batch distance)^2.

    Distances are 1 - sum_i p_i^2 per sample. Absent groups are skipped and
    listed in ``absent``.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    g = np.asarray(groups, dtype=np.int64)
    n_groups = len(group_universe) if group_universe is not None else int(g.max()) + 1
    delta = boundary_distance(p)
    pen, means, _ = _penalty_parts(delta, g, n_groups)
    absent = tuple(int(a) for a in np.flatnonzero(np.isnan(means)))
    return PenaltyResult(pen, means, absent)


def _delta_logit_grad(head: str, probs: np.ndarray) -> np.ndarray:
    """d(1 - sum p^2)/dz for each sample, shape (n, out_dim)."""
    if head == "sigmoid":
        f = probs[:, 1]
        return (2.0 * f * (1.0 - f) * (1.0 - 2.0 * f))[:, None]
    s = np.sum(probs * probs, axis=1, keepdims=True)
    return -2.0 * probs * (probs - s)


class BatchObjective(NamedTuple):
    loss: float
    penalty: float
    grad: np.ndarray
    group_delta: np.ndarray | None


def batch_objective(spec, theta, x, targets, groups, n_groups, lam, profile=None, part: str = "total") -> BatchObjective:
    """Mean loss + lam * penalty on one batch and its gradient.

    Per-sample contributions come from the backward pass; the sum over the
    batch follows ``profile``. ``part`` may be "loss" or "penalty" to get the
    gradient of one term only (used by the gradient check).
    """
    layers, layout = spec.layers(), spec.layout()
    z, cache = backprop.forward(layers, layout, theta, x, profile)
    losses, dz = backprop.head_loss(spec.head, z, targets)
    n = x.shape[0]
    pen, gmeans = 0.0, None
    if part not in ("total", "loss", "penalty"):
        raise ValueError(f"unknown objective part {part!r}")
    if lam > 0 or part == "penalty":
        if spec.head == "linear":
            raise ValueError("the boundary-distance penalty needs a classification head")
        probs = backprop.head_probs(spec.head, z)
        delta = boundary_distance(probs)
        pen, gmeans, d_delta = _penalty_parts(delta, groups, n_groups)
        if part != "loss":
            dpen = d_delta[:, None] * _delta_logit_grad(spec.head, probs)
            if part == "penalty":
                dz = n * dpen
            else:
                dz = dz + n * lam * dpen
    grads = backprop.backward(layers, layout, theta, cache, dz)
    g = vhw.reduce(grads, profile, axis=0) / n
    loss = vhw.reduce(losses, profile) / n
    return BatchObjective(loss, pen, g, gmeans)


def _epoch_stats(spec, theta, ds):
    z, cache = backprop.forward(spec.layers(), spec.layout(), theta, ds.features)
    losses, dz = backprop.head_loss(spec.head, z, ds.targets(spec.head))
    g = vhw.reduce(backprop.backward(spec.layers(), spec.layout(), theta, cache, dz), None, axis=0) / len(ds)
    dtb = [float("nan")] * ds.n_groups
    if spec.head != "linear":
        delta = boundary_distance(backprop.head_probs(spec.head, z))
        for a in ds.present_groups:
            dtb[a] = float(delta[ds.groups == a].mean())
    return vhw.reduce(losses) / len(ds), float(np.linalg.norm(g)), dtb


def _hash_order(h, order):
    h.update(np.asarray(order, dtype="<i8").tobytes())


def sgd_train(
    model0: Model,
    ds,
    cfg: TrainConfig,
    profile: vhw.VirtualHardwareProfile | None = None,
    init_seed: int | None = None,
    trace: bool = True,
) -> TrainedModel:
    """Momentum SGD; batch order comes from ``cfg.shuffle_seed`` alone.

    Forward inner products and the per-sample gradient sum use ``profile``;
    momentum and weight decay updates are binary64.
    """
    profile = profile or vhw.REFERENCE
    spec = model0.spec
    if ds.dim != spec.input_dim:
        raise ValueError(f"dataset has {ds.dim} features, model expects {spec.input_dim}")
    theta = model0.params.values.copy()
    vel = np.zeros_like(theta)
    n = len(ds)
    bs = min(cfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = cfg.epochs * per_epoch
    rng = np.random.default_rng(cfg.shuffle_seed)
    x_all, t_all, g_all = ds.features, ds.targets(spec.head), ds.groups
    order_hash = hashlib.sha256()
    records = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        _hash_order(order_hash, order)
        pens = []
        for s in range(per_epoch):
            idx = order[s * bs:(s + 1) * bs]
            try:
                obj = batch_objective(
                    spec, theta, x_all[idx], t_all[idx], g_all[idx], ds.n_groups, cfg.mitigation_lambda, profile
                )
            except NumericalOverflow:
                raise DivergedError(epoch, step, float("inf")) from None
            value = obj.loss + cfg.mitigation_lambda * obj.penalty
            if not math.isfinite(value) or value > DIVERGENCE_LOSS or not np.all(np.isfinite(obj.grad)):
                raise DivergedError(epoch, step, value)
            pens.append(obj.penalty)
            g = obj.grad + cfg.weight_decay * theta if cfg.weight_decay else obj.grad
            vel = cfg.momentum * vel + g
            theta = theta - cfg.lr_at(step, total) * vel
            step += 1
        if not np.all(np.isfinite(theta)):
            raise DivergedError(epoch, step, float("nan"))
        if trace:
            loss, gnorm, dtb = _epoch_stats(spec, theta, ds)
            records.append(
                {"epoch": epoch + 1, "train_loss": loss, "grad_norm": gnorm,
                 "penalty": float(np.mean(pens)) if pens else 0.0, "dtb": dtb}
            )
    provenance = {
        "profile_id": profile.id,
        "init_param_sha256": model0.params.sha256(),
        "data_order_sha256": order_hash.hexdigest(),
        "dataset_sha256": ds.sha256(),
        "config_hash": cfg.config_hash,
        "init_seed": init_seed,
        "shuffle_seed": cfg.shuffle_seed,
        "steps": total,
    }
    return TrainedModel(model0.with_values(theta), profile.id, init_seed, cfg.shuffle_seed, cfg.config_hash, records, provenance)


def write_trace_csv(tm: TrainedModel, path, group_names=None) -> None:
    n_groups = len(tm.trace[0]["dtb"]) if tm.trace else 0
    names = list(group_names or [str(a) for a in range(n_groups)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "grad_norm", "penalty"] + [f"dtb_{g}" for g in names])
        for r in tm.trace:
            w.writerow([r["epoch"]] + [format(v, ".17g") for v in (r["train_loss"], r["grad_norm"], r["penalty"], *r["dtb"])])


@dataclass(frozen=True)
class GradCheckReport:
    passed: bool
    max_coordinate: int
    analytic: float
    numeric: float
    max_violation: float  # |analytic - numeric| / allowed, <= 1 when passing
    tolerance_scale: float


def penalty_gradient_check(batch, model: Model, lam: float, rtol: float = 1e-4, rel_step: float = 1e-5) -> GradCheckReport:
    """Compare the analytic gradient of loss + lam * penalty with central differences.

    Coordinate j passes when |a_j - fd_j| <= rtol * (|fd_j| + s), where
    s = ||grad loss||_inf + lam * ||grad penalty||_inf.
    """
    if len(batch) > 64 or len(model.params) > 500:
        raise ValueError("gradient check is for batches <= 64 and models <= 500 params")
    spec = model.spec
    theta = model.params.values
    args = (batch.features, batch.targets(spec.head), batch.groups, batch.n_groups)

    def value(th):
        o = batch_objective(spec, th, *args, lam)
        return o.loss + lam * o.penalty

    analytic = batch_objective(spec, theta, *args, lam).grad
    numeric = finite_difference_gradient(value, theta, rel_step)
    g_loss = batch_objective(spec, theta, *args, 0.0, part="loss").grad
    scale = float(np.max(np.abs(g_loss)))
    if lam > 0:
        g_pen = batch_objective(spec, theta, *args, lam, part="penalty").grad
        scale += lam * float(np.max(np.abs(g_pen)))
    allowed = rtol * (np.abs(numeric) + scale)
    ratio = np.abs(analytic - numeric) / np.maximum(allowed, 1e-300)
    j = int(np.argmax(ratio))
    report = GradCheckReport(bool(ratio[j] <= 1.0), j, float(analytic[j]), float(numeric[j]), float(ratio[j]), scale)
    if not report.passed:
        raise GradCheckFailure(j, report.analytic, report.numeric)
    return report
