"""Grouped datasets: synthetic Gaussian mixtures, CSV ingestion, splits, standardization."""

from __future__ import annotations

import csv
import hashlib
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSpec, EmptySubset, ParseError, SchemaError, SplitWarning


@dataclass(frozen=True, eq=False)
class GroupedDataset:
    """Samples (x, a, y) in a fixed index order.

    Every sequential reduction over samples follows this order. ``n_groups``
    and ``n_classes`` describe the id universe, which survives subsetting.
    """

    features: np.ndarray
    groups: np.ndarray
    labels: np.ndarray
    n_groups: int
    n_classes: int
    group_names: tuple[str, ...] = ()
    label_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, ndmin=2)
        g = np.asarray(self.groups, dtype=np.int64).reshape(-1)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not (x.shape[0] == g.shape[0] == y.shape[0]):
            raise SchemaError("shape", "features, groups and labels disagree in length")
        if not np.all(np.isfinite(x)):
            raise SchemaError("features", "features contain NaN or infinite values")
        if g.size and (g.min() < 0 or g.max() >= self.n_groups):
            raise SchemaError("group", f"group ids must lie in [0, {self.n_groups})")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise SchemaError("label", f"labels must lie in [0, {self.n_classes})")
        for arr in (x, g, y):
            arr.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "groups", g)
        object.__setattr__(self, "labels", y)
        if not self.group_names:
            object.__setattr__(self, "group_names", tuple(str(i) for i in range(self.n_groups)))
        if not self.label_names:
            object.__setattr__(self, "label_names", tuple(str(i) for i in range(self.n_classes)))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.n_groups)

    @property
    def present_groups(self) -> list[int]:
        return [int(a) for a in np.flatnonzero(self.group_sizes)]

    def targets(self, head: str = "sigmoid") -> np.ndarray:
        return self.labels.astype(np.float64) if head == "linear" else self.labels

    def subset(self, index) -> "GroupedDataset":
        idx = np.asarray(index)
        if idx.dtype != bool:
            idx = idx.astype(np.int64, copy=False)
        return GroupedDataset(
            self.features[idx], self.groups[idx], self.labels[idx],
            self.n_groups, self.n_classes, self.group_names, self.label_names, self.meta,
        )

    def group(self, a: int) -> "GroupedDataset":
        mask = self.groups == a
        if not mask.any():
            raise EmptySubset(f"group {a} has no samples")
        return self.subset(np.flatnonzero(mask))

    def with_features(self, features) -> "GroupedDataset":
        return GroupedDataset(
            features, self.groups, self.labels, self.n_groups, self.n_classes,
            self.group_names, self.label_names, self.meta,
        )

    def sha256(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features.astype("<f8"), self.groups.astype("<i8"), self.labels.astype("<i8")):
            h.update(arr.tobytes())
        return h.hexdigest()

    def same_as(self, other: "GroupedDataset") -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.groups, other.groups)
            and np.array_equal(self.labels, other.labels)
            and self.n_groups == other.n_groups
            and self.n_classes == other.n_classes
            and self.group_names == other.group_names
            and self.label_names == other.label_names
        )


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class GroupSpec:
    size: int
    class_means: tuple[tuple[float, ...], ...]
    sigma: float
    class_fractions: tuple[float, ...] | None = None

    def class_counts(self) -> list[int]:
        k = len(self.class_means)
        fr = self.class_fractions or (1.0 / k,) * k
        counts = [int(math.floor(self.size * f)) for f in fr]
        for i in range(self.size - sum(counts)):
            counts[i % k] += 1
        return counts

    @property
    def margin(self) -> float:
        """Smallest distance between two class means of this group."""
        mu = np.asarray(self.class_means, dtype=np.float64)
        return min(float(np.linalg.norm(mu[i] - mu[j])) for i, j in itertools.combinations(range(len(mu)), 2))


@dataclass(frozen=True)
class SyntheticSpec:
    dim: int
    groups: tuple[GroupSpec, ...]
    seed: int = 0
    group_names: tuple[str, ...] = ()

    @property
    def n_classes(self) -> int:
        return len(self.groups[0].class_means)

    @property
    def margins(self) -> list[float]:
        return [g.margin for g in self.groups]

    def validate(self) -> None:
        if not self.groups:
            raise DegenerateSpec("no groups")
        k = self.n_classes
        if k < 2:
            raise DegenerateSpec("need at least two classes")
        for a, g in enumerate(self.groups):
            if g.size < 2:
                raise DegenerateSpec(f"group {a} has size {g.size} < 2")
            if not g.sigma > 0:
                raise DegenerateSpec(f"group {a} has sigma {g.sigma}")
            if len(g.class_means) != k or any(len(m) != self.dim for m in g.class_means):
                raise DegenerateSpec(f"group {a} class means do not match ({k} classes, dim {self.dim})")
            if g.margin <= 0:
                raise DegenerateSpec(f"group {a} has identical class means")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "seed": self.seed,
            "group_names": list(self.group_names),
            "groups": [
                {
                    "size": g.size,
                    "sigma": g.sigma,
                    "class_means": [list(m) for m in g.class_means],
                    **({"class_fractions": list(g.class_fractions)} if g.class_fractions else {}),
                }
                for g in self.groups
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        groups = tuple(
            GroupSpec(
                int(g["size"]),
                tuple(tuple(float(v) for v in m) for m in g["class_means"]),
                float(g["sigma"]),
                tuple(g["class_fractions"]) if g.get("class_fractions") else None,
            )
            for g in d["groups"]
        )
        return cls(int(d["dim"]), groups, int(d.get("seed", 0)), tuple(d.get("group_names", ())))


def gen_synthetic(spec: SyntheticSpec) -> GroupedDataset:
    """Draw |D_{a,y}| points from N(mu_{a,y}, sigma_a^2 I), group-major then class-major."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    xs, gs, ys = [], [], []
    for a, g in enumerate(spec.groups):
        for y, (mu, count) in enumerate(zip(g.class_means, g.class_counts())):
            xs.append(rng.normal(loc=np.asarray(mu, dtype=np.float64), scale=g.sigma, size=(count, spec.dim)))
            gs.append(np.full(count, a))
            ys.append(np.full(count, y))
    meta = {"margins": spec.margins, "sigmas": [g.sigma for g in spec.groups], "synthetic": spec.to_dict()}
    return GroupedDataset(
        np.concatenate(xs), np.concatenate(gs), np.concatenate(ys),
        len(spec.groups), spec.n_classes, tuple(spec.group_names), (), meta,
    )


def imbalance_margin_spec(
    seed: int = 0,
    sizes=(600, 300, 100),
    margins=(2.0, 2.0, 0.8),
    sigma: float = 1.0,
    minority_sigma: float | None = None,
) -> SyntheticSpec:
    """Default benchmark: 2-d, two classes, groups that differ in size and margin.

    Each group's classes sit symmetrically around a group center, separated by
    ``margin * sigma`` along the first axis; group centers are spread along the
    second axis so groups occupy different regions of input space.
    """
    groups = []
    n = len(sizes)
    for a, (size, m) in enumerate(zip(sizes, margins)):
        half = 0.5 * m * sigma
        cy = (a - (n - 1) / 2.0) * 1.5 * sigma
        s = sigma if (minority_sigma is None or a != n - 1) else minority_sigma
        groups.append(GroupSpec(int(size), ((-half, cy), (half, cy)), s))
    names = tuple(f"g{a}" for a in range(n))
    return SyntheticSpec(2, tuple(groups), seed, names)


# ---------------------------------------------------------------- CSV


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_csv(ds: GroupedDataset, path, feature_names=None) -> None:
    names = list(feature_names or ds.meta.get("feature_names") or [f"x{j}" for j in range(ds.dim)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ["group", "label"])
        for x, a, y in zip(ds.features, ds.groups, ds.labels):
            w.writerow([_fmt(v) for v in x] + [ds.group_names[a], ds.label_names[y]])


def load_csv(path, features=None, group: str = "group", label: str = "label") -> GroupedDataset:
    """Parse rows in file order; group/label strings get dense ids by first appearance."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("header", "file has no header row") from None
        cols = features if features is not None else [c for c in header if c not in (group, label)]
        for c in list(cols) + [group, label]:
            if c not in header:
                raise SchemaError(c)
        fidx = [header.index(c) for c in cols]
        gi, li = header.index(group), header.index(label)
        gmap: dict[str, int] = {}
        lmap: dict[str, int] = {}
        xs, gs, ys = [], [], []
        for r, row in enumerate(reader, start=1):
            vals = []
            for c, j in zip(cols, fidx):
                cell = row[j] if j < len(row) else ""
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(r, c, cell) from None
                if not math.isfinite(v):
                    raise ParseError(r, c, cell)
                vals.append(v)
            xs.append(vals)
            gs.append(gmap.setdefault(row[gi], len(gmap)))
            ys.append(lmap.setdefault(row[li], len(lmap)))
    if not xs:
        raise EmptySubset(f"{path} has no data rows")
    meta = {"feature_names": list(cols), "group_mapping": gmap, "label_mapping": lmap, "source": str(path)}
    return GroupedDataset(
        np.asarray(xs), np.asarray(gs), np.asarray(ys), len(gmap), max(len(lmap), 2),
        tuple(gmap), tuple(lmap) + tuple(str(i) for i in range(len(lmap), 2)), meta,
    )


# ---------------------------------------------------------------- splits


def split(ds: GroupedDataset, train_fraction: float, seed: int):
    """Stratified by (group, label); both halves keep the original index order."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for a in range(ds.n_groups):
        for y in range(ds.n_classes):
            idx = np.flatnonzero((ds.groups == a) & (ds.labels == y))
            c = idx.size
            if c == 0:
                continue
            if c == 1:
                warnings.warn(f"stratum (group={a}, label={y}) has one sample; kept in train", SplitWarning, stacklevel=2)
                train.append(idx)
                continue
            perm = rng.permutation(idx)
            k = min(max(int(round(c * train_fraction)), 1), c - 1)
            train.append(perm[:k])
            test.append(perm[k:])
    tr = np.sort(np.concatenate(train))
    te = np.sort(np.concatenate(test)) if test else np.array([], dtype=np.int64)
    return ds.subset(tr), ds.subset(te)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, ds: GroupedDataset) -> "Standardizer":
        mean = ds.features.mean(axis=0)
        std = ds.features.std(axis=0)
        return cls(mean, np.where(std > 0, std, 1.0))

    def apply(self, ds: GroupedDataset) -> GroupedDataset:
        return ds.with_features((ds.features - self.mean) / self.std)


def prepare(ds: GroupedDataset, train_fraction: float = 0.8, seed: int = 0):
    """Split, then standardize both halves with train statistics."""
    train, test = split(ds, train_fraction, seed)
    st = Standardizer.fit(train)
    return st.apply(train), st.apply(test)
