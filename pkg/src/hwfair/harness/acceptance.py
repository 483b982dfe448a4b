"""Acceptance criteria, runnable from the CLI (``verify``) and from pytest.

Every criterion returns a CriterionResult with the measured quantities; a
criterion passes only when its property holds and it finished inside its
runtime budget.
"""

from __future__ import annotations

import math
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import spearmanr

from .. import data, fairlab, models, train, vhw
from ..errors import DiagnosticWarning, IllConditionedWarning
from ..numkit import eigen, hessian, ops
from . import runner
from .config import config_from_dict

U32 = 2.0**-24  # unit roundoff of binary32


@dataclass
class CriterionResult:
    cid: int
    name: str
    holds: bool
    measured: dict
    seconds: float = 0.0
    budget: float = math.inf

    @property
    def passed(self) -> bool:
        return self.holds and self.seconds <= self.budget

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        vals = ", ".join(f"{k}={_short(v)}" for k, v in self.measured.items())
        return f"[{status}] criterion {self.cid} ({self.name}): {vals}; runtime {self.seconds:.1f}s / {self.budget:.0f}s"


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


@dataclass
class Criterion:
    cid: int
    name: str
    budget: float
    suites: tuple[str, ...]
    check: Callable[[], tuple[bool, dict]] = field(repr=False)

    def run(self) -> CriterionResult:
        t = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DiagnosticWarning)
            warnings.simplefilter("ignore", IllConditionedWarning)
            holds, measured = self.check()
        return CriterionResult(self.cid, self.name, bool(holds), measured, time.perf_counter() - t, self.budget)


def _benchmark(seed: int = 0, scale: float = 1.0, **kw) -> data.GroupedDataset:
    sizes = tuple(max(2, int(round(s * scale))) for s in kw.pop("sizes", (600, 300, 100)))
    return data.gen_synthetic(data.imbalance_margin_spec(seed=seed, sizes=sizes, **kw))


BENCH_TRAIN = train.TrainConfig(epochs=20, batch_size=64, learning_rate=0.1)


def _profiles_models(m0, ds, cfg, profiles):
    return {p.id: train.sgd_train(m0, ds, cfg, p, trace=False) for p in profiles}


# ---------------------------------------------------------------- 1


def zoo(seed: int = 0):
    """Small instances of every supported architecture with matching data."""
    specs = [
        models.ArchSpec(3, (), "sigmoid"),
        models.ArchSpec(3, (), "linear"),
        models.ArchSpec(3, ((5, "tanh"),), "sigmoid"),
        models.ArchSpec(3, ((4, "relu"), (4, "tanh")), "softmax", 3),
        models.ArchSpec(3, ((6, "tanh"),), "linear"),
    ]
    rng = np.random.default_rng(seed)
    out = []
    for spec in specs:
        n = 24
        ds = data.GroupedDataset(rng.normal(size=(n, 3)), rng.integers(0, 2, n), rng.integers(0, spec.n_classes, n),
                                 2, spec.n_classes)
        out.append((models.init_model(spec, seed), ds))
    return out


def random_symmetric(rng, dim: int, negative: bool) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    lam = rng.uniform(-1.0, 1.0, dim)
    if negative:
        lam[0] = -10.0  # magnitude dominated by a negative eigenvalue
    return (q * lam) @ q.T


def check_numerics():
    grad_err = 0.0
    for model, ds in zoo():
        g = ops.gradient(model, ds)
        fd = ops.finite_difference_gradient(lambda th: ops.loss(model.with_values(th), ds), model.params.values)
        grad_err = max(grad_err, float(np.max(ops.relative_errors(g, fd))))
    rng = np.random.default_rng(1)
    sym_err = 0.0
    for model, ds in zoo():
        k = len(model.params)
        u, v = rng.normal(size=k), rng.normal(size=k)
        a = float(u @ hessian.hvp(model, ds, v))
        b = float(v @ hessian.hvp(model, ds, u))
        sym_err = max(sym_err, abs(a - b) / max(abs(a), abs(b), 1e-12))
    eig_err = 0.0
    for i in range(20):
        m = random_symmetric(rng, int(rng.integers(4, 30)), negative=i % 2 == 1)
        res = eigen.max_eigenvalue(eigen.LinearOperator.from_matrix(m), seed=i, tol=1e-13, max_iters=200_000)
        eig_err = max(eig_err, abs(res.lambda_max - float(np.linalg.eigvalsh(m)[-1])))
    holds = grad_err <= 1e-5 and sym_err <= 1e-6 and eig_err <= 1e-6
    return holds, {"grad_rel_err": grad_err, "hvp_asym": sym_err, "eig_abs_err": eig_err}


# ---------------------------------------------------------------- 2


def check_taylor_exact():
    profiles = vhw.builtin_profiles().subset(["hw_ref", "hw_seq32", "hw_pair32"])
    spec = models.ArchSpec(2, (), "linear")
    slacks = []
    for seed in range(10):
        ds = _benchmark(seed)
        cfg = BENCH_TRAIN.replace(shuffle_seed=seed, learning_rate=0.05)
        tms = _profiles_models(models.init_model(spec, seed), ds, cfg, profiles)
        rep = fairlab.taylor_bound_report(tms, "hw_ref", ds, seed=seed)
        slacks.extend(rep.slack.tolist())
    ok = sum(s >= -1e-9 for s in slacks)
    return ok == len(slacks), {"checks_ok": f"{ok}/{len(slacks)}", "min_slack": min(slacks)}


# ---------------------------------------------------------------- 3, 7


def _taylor_sweep(n_seeds: int, profiles):
    ds = _benchmark(0)
    spec = models.ArchSpec(2, (), "sigmoid")
    reps = []
    for seed in range(n_seeds):
        tms = _profiles_models(models.init_model(spec, seed), ds, BENCH_TRAIN.replace(shuffle_seed=seed), profiles)
        reps.append((fairlab.taylor_bound_report(tms, "hw_ref", ds, seed=seed), ds))
    return reps


def check_taylor_empirical():
    reps = _taylor_sweep(20, vhw.builtin_profiles())
    within = np.concatenate([r.within_allowance() for r, _ in reps])
    tight = np.concatenate([r.tight() for r, _ in reps])
    holds = within.mean() >= 0.95 and tight.mean() >= 0.80
    return holds, {"within_allowance": float(within.mean()), "tight": float(tight.mean()), "checks": within.size}


def check_disparity():
    reps = _taylor_sweep(5, vhw.builtin_profiles())
    minority_wins, rhos = 0, []
    for rep, ds in reps:
        sizes = ds.group_sizes[rep.groups]
        minority, majority = int(np.argmin(sizes)), int(np.argmax(sizes))
        minority_wins += rep.delta[minority] > rep.delta[majority]
        rhos.append(float(spearmanr(rep.delta, rep.grad_norm)[0]))
    frac = minority_wins / len(reps)
    med = float(np.median(rhos))
    return frac >= 0.8 and med >= 0.6, {"minority_larger": frac, "spearman_median": med}


# ---------------------------------------------------------------- 4, 5


STATIONARY = train.TrainConfig(epochs=400, batch_size=1, learning_rate=1.0, momentum=0.9, weight_decay=0.0)


def train_to_stationarity(ds, seed: int):
    cfg = STATIONARY.replace(batch_size=len(ds), shuffle_seed=seed)
    tm = train.sgd_train(models.init_model(models.ArchSpec(ds.dim, (), "sigmoid"), seed), ds, cfg, trace=False)
    return tm, float(np.linalg.norm(ops.gradient(tm.model, ds)))


def check_two_groups():
    wins, worst = 0, 0.0
    for seed in range(20):
        ds = _benchmark(seed, sizes=(900, 100), margins=(2.0, 0.8))
        tm, gnorm = train_to_stationarity(ds, seed)
        worst = max(worst, gnorm)
        gg = fairlab.group_gradient_norms(tm, ds)
        wins += gnorm < 1e-6 and gg.norms[1] > gg.norms[0]
    return wins == 20, {"minority_larger": f"{wins}/20", "max_total_grad": worst}


def check_three_groups():
    certified = hits = 0
    worst = 0.0
    for seed in range(20):
        ds = _benchmark(seed)
        tm, gnorm = train_to_stationarity(ds, seed)
        worst = max(worst, gnorm)
        ar = fairlab.gradient_angle_matrix(tm, ds)
        if ar.certified and gnorm < 1e-6:
            certified += 1
            hits += ar.largest_norm_group == ar.minority
    return hits == certified, {"certified": f"{certified}/20", "minority_largest": f"{hits}/{certified}",
                               "max_total_grad": worst}


# ---------------------------------------------------------------- 6


def check_hessian_bound():
    held, worst = 0, math.inf
    spec = models.ArchSpec(2, ((8, "tanh"),), "sigmoid")
    for seed in range(20):
        ds = _benchmark(seed, scale=0.2)
        tm = train.sgd_train(models.init_model(spec, seed), ds,
                             train.TrainConfig(epochs=30, batch_size=32, shuffle_seed=seed), trace=False)
        rep = fairlab.hessian_bound_report(tm, ds)
        held += bool(rep.holds.all())
        worst = min(worst, float(np.min(rep.bound - rep.lambda_max)))
    f = np.linspace(0.0, 1.0, 1001)
    close = fairlab.distance_to_boundary(np.stack([1.0 - f, f], axis=1)).closeness
    grid_ok = close[500] == 0.25 and close.max() == 0.25 and int(np.argmax(close)) == 500 and close[0] == 0 and close[-1] == 0
    return held == 20 and grid_ok, {"seeds_bound_holds": f"{held}/20", "min_margin": worst, "closeness_grid": grid_ok}


# ---------------------------------------------------------------- 8


def mitigation_config(output) -> dict:
    return {
        "dataset": {"kind": "imbalance_margin", "seed": 0},
        "model": {"input_dim": 2, "hidden": [], "head": "sigmoid"},
        "train": {"epochs": 20, "batch_size": 64, "learning_rate": 0.1},
        "sweep": {"seeds": [0, 1, 2, 3, 4], "curvature": False},
        "mitigation": {"lambdas": [0.0, 1e-3, 1e-2, 1e-1], "accuracy_budget": 0.02},
        "output": {"dir": str(output)},
    }


def check_mitigation():
    with tempfile.TemporaryDirectory() as tmp:
        rep = runner.mitigation_study(config_from_dict(mitigation_config(Path(tmp) / "mit")))
    good = [s for s in rep["per_seed"] if s["reduction"] >= 0.2 and s["accuracy_drop"] <= 0.02]
    return len(good) >= 4, {
        "seeds_reduced_20pct": f"{len(good)}/{len(rep['per_seed'])}",
        "reductions": [round(s["reduction"], 3) for s in rep["per_seed"]],
        "lambda_star": [s["lambda_star"] for s in rep["per_seed"]],
    }


# ---------------------------------------------------------------- 9


def determinism_config(output) -> dict:
    return {
        "dataset": {"kind": "imbalance_margin", "seed": 0},
        "model": {"input_dim": 2, "hidden": [], "head": "sigmoid"},
        "train": {"epochs": 5, "batch_size": 64, "learning_rate": 0.1},
        "sweep": {"seeds": [0, 1], "curvature": False},
        "output": {"dir": str(output)},
    }


def check_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        a = runner.run_experiment(config_from_dict(determinism_config(Path(tmp) / "a")))
        b = runner.run_experiment(config_from_dict(determinism_config(Path(tmp) / "b")))
        hashes_equal = [r["param_sha256"] for r in a.manifest["runs"]] == [r["param_sha256"] for r in b.manifest["runs"]]
        csv_equal = (a.out_dir / "metrics.csv").read_bytes() == (b.out_dir / "metrics.csv").read_bytes()
        isolation = runner.profile_isolation(a.manifest)
        audit = runner.check_determinism(a.out_dir)
        rho = fairlab.param_distance(
            {p: a.models[runner.run_id(p, 0, 0.0)] for p in ("hw_seq32", "hw_pair32")}, "hw_seq32")
    holds = hashes_equal and csv_equal and not isolation and audit.ok and rho > 0
    return holds, {"hashes_equal": hashes_equal, "metrics_identical": csv_equal,
                   "isolation_diffs": len(isolation), "audit_mismatches": len(audit.mismatches), "rho_seq_pair": rho}


# ---------------------------------------------------------------- 10


def gamma(n: int, u: float = U32) -> float:
    return n * u / (1.0 - n * u)


def check_summation():
    rng = np.random.default_rng(10)
    seq = vhw.builtin_profiles()["hw_seq32"]
    pair = vhw.builtin_profiles()["hw_pair32"]
    n = 10_000
    worst_seq = worst_pair = 0.0
    for i in range(100):
        x = rng.uniform(0.0, 1.0, n) if i % 2 == 0 else rng.normal(size=n)
        x32 = x.astype(np.float32).astype(np.float64)
        exact = math.fsum(x32)
        scale = math.fsum(np.abs(x32))
        worst_seq = max(worst_seq, abs(vhw.reduce(x, seq) - exact) / (gamma(n - 1) * scale))
        worst_pair = max(worst_pair, abs(vhw.reduce(x, pair) - exact) / (gamma(math.ceil(math.log2(n))) * scale))
    return worst_seq <= 1.0 and worst_pair <= 1.0, {"seq_err_over_bound": worst_seq, "pair_err_over_bound": worst_pair}


CRITERIA = {
    1: Criterion(1, "numerics core", 30, ("fast",), check_numerics),
    2: Criterion(2, "Taylor bound, quadratic loss", 20, ("fast", "theorems"), check_taylor_exact),
    3: Criterion(3, "Taylor bound, logistic", 300, ("theorems",), check_taylor_empirical),
    4: Criterion(4, "two-group gradient norms", 60, ("theorems",), check_two_groups),
    5: Criterion(5, "three-group gradient norms", 120, ("theorems",), check_three_groups),
    6: Criterion(6, "group Hessian bound", 120, ("theorems",), check_hessian_bound),
    7: Criterion(7, "hardware disparity", 180, ("mitigation",), check_disparity),
    8: Criterion(8, "mitigation", 300, ("mitigation",), check_mitigation),
    9: Criterion(9, "determinism and isolation", 60, ("fast",), check_determinism),
    10: Criterion(10, "summation error bounds", 10, ("fast",), check_summation),
}

SUITES = ("fast", "theorems", "mitigation", "all")


def suite_ids(suite: str) -> list[int]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    return [c for c, crit in CRITERIA.items() if suite == "all" or suite in crit.suites]


def verify(suite: str, echo: Callable[[str], None] | None = print) -> list[CriterionResult]:
    results = []
    for cid in suite_ids(suite):
        res = CRITERIA[cid].run()
        if echo:
            echo(res.line())
        results.append(res)
    return results
