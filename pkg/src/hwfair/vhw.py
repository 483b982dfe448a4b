"""Virtual hardware profiles.

A profile is a deterministic floating-point reduction plan: inputs are first
rounded to an element precision, then accumulated in an accumulator precision
following a fixed order. Different plans give bitwise different sums for the
same data, which is how accelerator-dependent accumulation noise is simulated
without any real parallel execution.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError

ORDER_POLICIES = ("sequential", "permuted", "pairwise", "chunked_tree")
_PRECISIONS = {"binary32": np.float32, "binary64": np.float64}


@dataclass(frozen=True)
class VirtualHardwareProfile:
    id: str
    order_policy: str = "sequential"
    accumulator_precision: str = "binary64"
    element_precision: str = "binary64"
    seed: int | None = None
    chunk_size: int | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("profile id must be non-empty")
        if self.order_policy not in ORDER_POLICIES:
            raise ValueError(f"unknown order policy {self.order_policy!r}")
        for prec in (self.accumulator_precision, self.element_precision):
            if prec not in _PRECISIONS:
                raise ValueError(f"unknown precision {prec!r}")
        if self.order_policy == "permuted" and self.seed is None:
            raise ValueError("permuted policy needs a seed")
        if self.order_policy == "chunked_tree" and (self.chunk_size is None or self.chunk_size < 2):
            raise ValueError("chunked_tree needs chunk_size >= 2")

    @property
    def element_dtype(self):
        return _PRECISIONS[self.element_precision]

    @property
    def accumulator_dtype(self):
        return _PRECISIONS[self.accumulator_precision]

    @property
    def is_exact_reference(self) -> bool:
        return (
            self.order_policy == "sequential"
            and self.accumulator_precision == "binary64"
            and self.element_precision == "binary64"
        )

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "VirtualHardwareProfile":
        return cls(**d)


REFERENCE = VirtualHardwareProfile("hw_ref")


@functools.lru_cache(maxsize=256)
def _permutation(seed: int, n: int) -> np.ndarray:
    # Generator.permutation is a Fisher-Yates shuffle driven by the seeded PCG64 stream.
    perm = np.random.default_rng(seed).permutation(n)
    perm.flags.writeable = False
    return perm


def _sequential(x: np.ndarray) -> np.ndarray:
    # add.accumulate is a strict left fold, unlike add.reduce which is pairwise.
    return np.cumsum(x, axis=-1, dtype=x.dtype)[..., -1]


def _pairwise(x: np.ndarray) -> np.ndarray:
    while x.shape[-1] > 1:
        n = x.shape[-1]
        even = n - (n % 2)
        paired = x[..., 0:even:2] + x[..., 1:even:2]
        if n % 2:
            paired = np.concatenate([paired, x[..., -1:]], axis=-1)
        x = paired
    return x[..., 0]


def _chunked_tree(x: np.ndarray, chunk: int) -> np.ndarray:
    n = x.shape[-1]
    pad = (-n) % chunk
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,), dtype=x.dtype)], axis=-1)
    chunks = x.reshape(x.shape[:-1] + (x.shape[-1] // chunk, chunk))
    return _pairwise(_sequential(chunks))


def reduce(values, profile: VirtualHardwareProfile | None = None, axis: int = -1):
    """Sum ``values`` along ``axis`` following ``profile``'s reduction plan.

    Returns a Python float for 1-d input, otherwise a float64 array with
    ``axis`` removed. Overflow yields +-inf; callers check finiteness.
    """
    p = profile or REFERENCE
    arr = np.asarray(values)
    if arr.ndim == 0 or arr.shape[axis] == 0:
        raise ShapeError("reduce needs a non-empty sequence")
    x = np.moveaxis(arr, axis, -1)
    with np.errstate(over="ignore", invalid="ignore"):
        x = x.astype(p.element_dtype, copy=False).astype(p.accumulator_dtype, copy=False)
        if p.order_policy == "sequential":
            out = _sequential(x)
        elif p.order_policy == "permuted":
            out = _sequential(x[..., _permutation(p.seed, x.shape[-1])])
        elif p.order_policy == "pairwise":
            out = _pairwise(x)
        else:
            out = _chunked_tree(x, p.chunk_size)
    out = np.asarray(out, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def _products(a: np.ndarray, b: np.ndarray, profile: VirtualHardwareProfile) -> np.ndarray:
    dt = profile.element_dtype
    with np.errstate(over="ignore", invalid="ignore"):
        return a.astype(dt, copy=False) * b.astype(dt, copy=False)


def dot(xs, ys, profile: VirtualHardwareProfile | None = None) -> float:
    """Inner product: products rounded to element precision, then ``reduce``."""
    p = profile or REFERENCE
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeError(f"dot needs equal-length vectors, got {x.shape} and {y.shape}")
    return reduce(_products(x, y, p), p)


def affine_inputs(a: np.ndarray, w: np.ndarray, profile: VirtualHardwareProfile | None = None) -> np.ndarray:
    """Batched ``w @ a`` with every inner product reduced under ``profile``.

    ``a`` has shape (n, in); ``w`` is (out, in) or per-sample (n, out, in).
    """
    p = profile or REFERENCE
    prods = _products(a[..., None, :], w, p)
    with np.errstate(over="ignore", invalid="ignore"):
        return reduce(prods, p, axis=-1)


@dataclass(frozen=True)
class ProfileRegistry:
    profiles: tuple[VirtualHardwareProfile, ...]
    reference_id: str

    def __post_init__(self):
        ids = [p.id for p in self.profiles]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate profile ids in {ids}")
        if self.reference_id not in ids:
            raise ValueError(f"reference {self.reference_id!r} not among profiles {ids}")

    def __len__(self):
        return len(self.profiles)

    def __iter__(self):
        return iter(self.profiles)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.profiles]

    @property
    def reference(self) -> VirtualHardwareProfile:
        return self[self.reference_id]

    def __getitem__(self, pid: str) -> VirtualHardwareProfile:
        for p in self.profiles:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def subset(self, ids) -> "ProfileRegistry":
        ids = list(ids)
        ref = self.reference_id if self.reference_id in ids else ids[0]
        return ProfileRegistry(tuple(self[i] for i in ids), ref)

    def to_dict(self) -> dict:
        return {"reference": self.reference_id, "custom": [p.to_dict() for p in self.profiles]}

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileRegistry":
        """Build from a config section.

        Accepts ``ids`` (names from the builtin catalog), ``custom`` (inline
        profile tables) or both; ``reference`` defaults to the first profile.
        """
        catalog = {p.id: p for p in builtin_profiles()}
        profiles: list[VirtualHardwareProfile] = []
        for pid in d.get("ids", []):
            if pid not in catalog:
                raise KeyError(f"unknown builtin profile {pid!r}")
            profiles.append(catalog[pid])
        for entry in d.get("custom", []):
            profiles.append(VirtualHardwareProfile.from_dict(entry))
        if not profiles:
            raise ValueError("profile section lists no profiles")
        return cls(tuple(profiles), d.get("reference", profiles[0].id))


def builtin_profiles() -> ProfileRegistry:
    return ProfileRegistry(
        (
            REFERENCE,
            VirtualHardwareProfile("hw_seq32", "sequential", "binary32", "binary32"),
            VirtualHardwareProfile("hw_pair32", "pairwise", "binary32", "binary32"),
            VirtualHardwareProfile("hw_perm32_s7", "permuted", "binary32", "binary32", seed=7),
            VirtualHardwareProfile("hw_warp32", "chunked_tree", "binary32", "binary32", chunk_size=32),
        ),
        "hw_ref",
    )
