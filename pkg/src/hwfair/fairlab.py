"""Per-group fairness diagnostics for models trained under different profiles.

All losses, gradients and curvature here are evaluated in reference mode
(binary64, sequential order), so differences between models reflect their
parameters only.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DiagnosticWarning, IllConditionedWarning, LayoutError, OracleTooLarge, UnsupportedHead
from .numkit import eigen, hessian
from .numkit.ops import gradient, loss


def _unwrap(m):
    """Accept either a Model or a TrainedModel."""
    return getattr(m, "model", m)


def _reference_first(models_by_profile: dict, reference_id: str) -> list[str]:
    if reference_id not in models_by_profile:
        raise KeyError(f"reference profile {reference_id!r} missing")
    return [reference_id] + [p for p in models_by_profile if p != reference_id]


# ------------------------------------------------------------ boundary distance


@dataclass(frozen=True)
class BoundaryDistance:
    delta: np.ndarray | float  # 1 - sum_i p_i^2
    closeness: np.ndarray | float | None  # f (1 - f) for two-class inputs


def boundary_distance(probs) -> np.ndarray:
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    return 1.0 - np.sum(p * p, axis=1)


def distance_to_boundary(probs) -> BoundaryDistance:
    """Distance to the decision boundary of one distribution or a (n, K) batch.

    For K = 2 the closeness term f(1 - f), with f = p[1], is returned as well;
    in that case delta = 2 f (1 - f).
    """
    arr = np.asarray(probs, dtype=np.float64)
    single = arr.ndim == 1
    p = np.atleast_2d(arr)
    delta = boundary_distance(p)
    closeness = None
    if p.shape[1] == 2:
        f = p[:, 1]
        closeness = f * (1.0 - f)
    if single:
        return BoundaryDistance(float(delta[0]), None if closeness is None else float(closeness[0]))
    return BoundaryDistance(delta, closeness)


# ------------------------------------------------------------ sensitivity


def group_loss(model, ds, group_id: int) -> float:
    """Reference-mode mean loss over the samples of one group."""
    return loss(_unwrap(model), ds.group(group_id))


def sensitivity_from_losses(losses: dict, reference_id: str) -> float:
    """max over other profiles of |L_ref - L_other|."""
    order = _reference_first(losses, reference_id)
    if len(order) < 2:
        warnings.warn("one profile only; sensitivity is 0", DiagnosticWarning, stacklevel=2)
        return 0.0
    ref = losses[reference_id]
    return max(abs(ref - losses[p]) for p in order[1:])


def hardware_sensitivity(models_by_profile: dict, reference_id: str, ds, group_id: int) -> float:
    losses = {p: group_loss(m, ds, group_id) for p, m in models_by_profile.items()}
    return sensitivity_from_losses(losses, reference_id)


def violation_from_deltas(deltas) -> tuple[float, tuple[int, int] | None]:
    """Largest pairwise |delta_a - delta_b| and the (a, b) pair achieving it."""
    d = [float(v) for v in deltas]
    if len(d) < 2:
        warnings.warn("one group only; fairness violation is 0", DiagnosticWarning, stacklevel=2)
        return 0.0, None
    best, pair = -1.0, None
    for a, b in itertools.combinations(range(len(d)), 2):
        gap = abs(d[a] - d[b])
        if gap > best:
            best, pair = gap, (a, b)
    return best, pair


def fairness_violation(models_by_profile: dict, reference_id: str, ds):
    deltas = [hardware_sensitivity(models_by_profile, reference_id, ds, a) for a in ds.present_groups]
    xi, pair = violation_from_deltas(deltas)
    if pair is not None:
        groups = ds.present_groups
        pair = (groups[pair[0]], groups[pair[1]])
    return xi, pair


def param_distance(models_by_profile: dict, reference_id: str) -> float:
    """rho: largest L2 distance from the reference parameters to any other model."""
    order = _reference_first(models_by_profile, reference_id)
    ref = _unwrap(models_by_profile[reference_id])
    rho = 0.0
    for p in order[1:]:
        other = _unwrap(models_by_profile[p])
        if getattr(other, "spec", None) != getattr(ref, "spec", None) or other.params.layout != ref.params.layout:
            raise LayoutError(f"model for {p!r} has a different architecture")
        rho = max(rho, ref.params.distance(other.params))
    return rho


@dataclass
class SensitivityReport:
    reference_id: str
    profile_ids: list[str]
    groups: list[int]
    group_names: list[str]
    losses: np.ndarray  # (groups, profiles), reference-mode group losses
    delta: np.ndarray
    xi: float
    xi_pair: tuple[int, int] | None
    rho: float

    def to_dict(self) -> dict:
        return {
            "reference_id": self.reference_id,
            "xi": self.xi,
            "xi_pair": list(self.xi_pair) if self.xi_pair else None,
            "rho": self.rho,
            "groups": [
                {"group": name, "delta": float(d), "loss": dict(zip(self.profile_ids, map(float, row)))}
                for name, d, row in zip(self.group_names, self.delta, self.losses)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "profile_id", "loss", "delta"])
        for name, d, row in zip(self.group_names, self.delta, self.losses):
            for pid, value in zip(self.profile_ids, row):
                w.writerow([name, pid, format(value, ".17g"), format(d, ".17g")])
        return buf.getvalue()


def sensitivity_report(models_by_profile: dict, reference_id: str, ds) -> SensitivityReport:
    order = _reference_first(models_by_profile, reference_id)
    groups = ds.present_groups
    table = np.array([[group_loss(models_by_profile[p], ds, a) for p in order] for a in groups])
    if len(order) < 2:
        warnings.warn("one profile only; sensitivity is 0", DiagnosticWarning, stacklevel=2)
        delta = np.zeros(len(groups))
    else:
        delta = np.max(np.abs(table[:, 1:] - table[:, :1]), axis=1)
    xi, pair = violation_from_deltas(delta) if len(groups) > 1 else (0.0, None)
    if pair is not None:
        pair = (groups[pair[0]], groups[pair[1]])
    return SensitivityReport(
        reference_id, order, groups, [ds.group_names[a] for a in groups], table, delta, xi, pair,
        param_distance(models_by_profile, reference_id),
    )


# ------------------------------------------------------------ gradient flows


@dataclass(frozen=True)
class GroupGradients:
    groups: list[int]
    sizes: np.ndarray
    grads: np.ndarray  # (groups, k)
    norms: np.ndarray
    directions: np.ndarray  # unit rows; zero rows where the gradient vanishes
    zero: np.ndarray  # bool flags


def group_gradient_norms(model, ds) -> GroupGradients:
    """Reference-mode gradient of each group's mean loss, with norm and direction."""
    m = _unwrap(model)
    groups = list(range(ds.n_groups))
    grads = np.stack([gradient(m, ds.group(a)) for a in groups])
    norms = np.linalg.norm(grads, axis=1)
    zero = norms == 0.0
    dirs = np.where(zero[:, None], 0.0, grads / np.where(zero, 1.0, norms)[:, None])
    return GroupGradients(groups, ds.group_sizes[groups], grads, norms, dirs, zero)


@dataclass(frozen=True)
class AngleReport:
    angles: np.ndarray  # radians; NaN where undefined
    undefined: np.ndarray  # bool, zero-norm gradient involved
    minority: int
    certified: bool  # all pairs of non-minority groups strictly below pi / 2
    norms: np.ndarray

    @property
    def largest_norm_group(self) -> int:
        return int(np.argmax(self.norms))


def angles_from_directions(dirs: np.ndarray, zero: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cos = np.clip(dirs @ dirs.T, -1.0, 1.0)
    ang = np.arccos(cos)
    undefined = zero[:, None] | zero[None, :]
    ang = np.where(undefined, np.nan, ang)
    ang = 0.5 * (ang + ang.T)
    np.fill_diagonal(ang, 0.0)
    np.fill_diagonal(undefined, False)
    return ang, undefined


def gradient_angle_matrix(model, ds) -> AngleReport:
    """Pairwise angles between group gradients and the acute-angle certificate.

    The minority is the smallest group (lowest id on ties).
    """
    gg = group_gradient_norms(model, ds)
    ang, undefined = angles_from_directions(gg.directions, gg.zero)
    minority = int(np.argmin(gg.sizes))
    others = [a for a in range(len(gg.groups)) if a != minority]
    certified = all(
        not undefined[a, b] and ang[a, b] < math.pi / 2 for a, b in itertools.combinations(others, 2)
    )
    return AngleReport(ang, undefined, minority, certified, gg.norms)


# ------------------------------------------------------------ curvature


def group_hessian_lmax(model, ds, group_id: int, seed: int = 0, tol: float = 1e-9, max_iters: int = 5000):
    """Largest Hessian eigenvalue of one group's mean loss via power iteration on HVPs."""
    op = hessian.hvp_operator(_unwrap(model), ds.group(group_id))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        return eigen.max_eigenvalue(op, seed=seed, tol=tol, max_iters=max_iters)


@dataclass
class TaylorReport:
    reference_id: str
    groups: list[int]
    group_names: list[str]
    delta: np.ndarray
    grad_norm: np.ndarray
    lambda_max: np.ndarray
    term1: np.ndarray
    term2: np.ndarray
    rho: float
    eigen_converged: np.ndarray

    @property
    def rhs(self) -> np.ndarray:
        return self.term1 + self.term2

    @property
    def slack(self) -> np.ndarray:
        return self.rhs - self.delta

    @property
    def kappa(self) -> float:
        """Third-order allowance constant: 10 times the largest group eigenvalue."""
        return 10.0 * max(float(np.max(self.lambda_max)), 0.0)

    @property
    def allowance(self) -> float:
        return self.kappa * self.rho**3

    def within_allowance(self) -> np.ndarray:
        return self.slack >= -self.allowance

    def tight(self, factor: float = 10.0) -> np.ndarray:
        """RHS within ``factor`` of LHS (both zero counts as tight)."""
        lhs, rhs = self.delta, self.rhs
        both_zero = (lhs == 0) & (rhs == 0)
        return both_zero | ((rhs <= factor * lhs) & (rhs * factor >= lhs) & (lhs > 0))

    def rows(self) -> list[dict]:
        return [
            {
                "group": self.group_names[i], "delta": float(self.delta[i]), "grad_norm": float(self.grad_norm[i]),
                "lambda_max": float(self.lambda_max[i]), "term1": float(self.term1[i]), "term2": float(self.term2[i]),
                "rhs": float(self.rhs[i]), "slack": float(self.slack[i]),
                "eigen_converged": bool(self.eigen_converged[i]),
            }
            for i in range(len(self.groups))
        ]

    def to_dict(self) -> dict:
        return {"reference_id": self.reference_id, "rho": self.rho, "kappa": self.kappa, "groups": self.rows()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["group", "delta", "grad_norm", "lambda_max", "term1", "term2", "rhs", "slack", "eigen_converged"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows():
            w.writerow([r[c] if isinstance(r[c], (str, bool)) else format(r[c], ".17g") for c in cols])
        return buf.getvalue()


def taylor_bound_report(
    models_by_profile: dict, reference_id: str, ds, seed: int = 0, tol: float = 1e-9,
    lambda_max=None, converged=None,
) -> TaylorReport:
    """Per group: Delta against ||g_a|| rho + 1/2 lambda(H_a) rho^2 at the reference model.

    A negative group eigenvalue contributes nothing to the second term, which
    keeps both terms non-negative. Precomputed eigenvalues (indexed by group
    id) may be passed in; NaN entries leave the second term undefined.
    """
    ref = _unwrap(models_by_profile[reference_id])
    sens = sensitivity_report(models_by_profile, reference_id, ds)
    gg = group_gradient_norms(ref, ds)
    groups = sens.groups
    if lambda_max is None:
        lam, conv = [], []
        for a in groups:
            res = group_hessian_lmax(ref, ds, a, seed=seed, tol=tol)
            lam.append(res.lambda_max)
            conv.append(res.converged)
    else:
        lam = [lambda_max[a] for a in groups]
        conv = [bool(converged[a]) if converged is not None else True for a in groups]
    lam = np.array(lam, dtype=np.float64)
    rho = sens.rho
    norms = gg.norms[groups]
    term1 = norms * rho
    term2 = 0.5 * np.maximum(lam, 0.0) * rho * rho
    return TaylorReport(
        reference_id, groups, sens.group_names, sens.delta, norms, lam, term1, term2, rho, np.array(conv),
    )


# ------------------------------------------------------------ Hessian bound


@dataclass
class HessianBoundReport:
    groups: list[int]
    group_names: list[str]
    lambda_max: np.ndarray  # dense-oracle lambda(H_a)
    bound: np.ndarray
    dtb_mean: np.ndarray  # mean closeness f (1 - f)
    kind: str
    samples: dict = field(default_factory=dict)  # per-sample term table

    @property
    def holds(self) -> np.ndarray:
        return self.lambda_max <= self.bound

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "groups": [
                {"group": n, "lambda_max": float(l), "bound": float(b), "dtb_mean": float(d), "holds": bool(l <= b)}
                for n, l, b, d in zip(self.group_names, self.lambda_max, self.bound, self.dtb_mean)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def samples_csv(self) -> str:
        buf = io.StringIO()
        cols = ["group", "f", "closeness", "grad_sq", "error", "lambda_out", "term"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for i in range(len(self.samples.get("group", []))):
            w.writerow([int(self.samples["group"][i])] + [format(self.samples[c][i], ".17g") for c in cols[1:]])
        return buf.getvalue()


def output_hessian_lmax(model, x, kind: str = "logit", seed: int = 0, tol: float = 1e-8, max_iters: int = 2000):
    """lambda_max of the parameter Hessian of the scalar output, one per row of x.

    All rows are iterated in lockstep; each Hessian-vector product is a central
    difference of per-sample output gradients.
    """
    m = _unwrap(model)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    theta = m.params.values

    def apply_rows(vs, rows):
        def grad_at(p):
            return m.output_gradients(x[rows], theta=p, kind=kind)[1]

        out, _ = hessian.fd_hvp_rows(grad_at, theta, vs)
        return out

    return eigen.max_eigenvalues(apply_rows, x.shape[0], len(m.params), seed=seed, tol=tol, max_iters=max_iters)


def hessian_bound_report(model, ds, kind: str = "logit", seed: int = 0, tol: float = 1e-8) -> HessianBoundReport:
    """Group Hessian eigenvalue against its closeness-plus-error bound.

    The bound per group is the mean over its samples of
    f(1 - f) ||grad z||^2 + |f - y| lambda(Hess z), where z is the network
    output selected by ``kind``: the pre-sigmoid logit ("logit", default) or
    the sigmoid probability itself ("probability").
    """
    m = _unwrap(model)
    if m.spec.head != "sigmoid":
        raise UnsupportedHead(f"the Hessian bound covers binary sigmoid heads, not {m.spec.head!r}")
    if len(m.params) > hessian.MAX_ORACLE_PARAMS:
        raise OracleTooLarge("per-sample eigenvalue extraction needs k <= 512")
    f, grads = m.output_gradients(ds.features, kind=kind)
    lam_out, _, _ = output_hessian_lmax(m, ds.features, kind=kind, seed=seed, tol=tol)
    closeness = f * (1.0 - f)
    grad_sq = np.sum(grads * grads, axis=1)
    err = np.abs(f - ds.labels)
    term = closeness * grad_sq + err * lam_out
    groups = ds.present_groups
    lhs, bound, dtb = [], [], []
    for a in groups:
        mask = ds.groups == a
        lhs.append(float(np.max(np.linalg.eigvalsh(hessian.full_hessian(m, ds.group(a))))))
        bound.append(float(np.mean(term[mask])))
        dtb.append(float(np.mean(closeness[mask])))
    samples = {"group": ds.groups, "f": f, "closeness": closeness, "grad_sq": grad_sq,
               "error": err, "lambda_out": lam_out, "term": term}
    return HessianBoundReport(groups, [ds.group_names[a] for a in groups], np.array(lhs), np.array(bound),
                              np.array(dtb), kind, samples)
