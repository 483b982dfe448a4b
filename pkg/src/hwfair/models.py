"""Model zoo: logistic regression and small MLPs, plus quadratic probes."""

from __future__ import annotations

import functools
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import vhw
from .errors import LayoutError, SchemaError, ShapeError
from .numkit import backprop
from .numkit.params import Layout, ParamVector

HEADS = ("sigmoid", "softmax", "linear")
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ArchSpec:
    """input_dim -> hidden layers -> head.

    ``head`` is "sigmoid" (binary cross-entropy, one output), "softmax"
    (cross-entropy over ``n_classes`` outputs) or "linear" (one output,
    squared error; labels are used as regression targets).
    """

    input_dim: int
    hidden: tuple[tuple[int, str], ...] = ()
    head: str = "sigmoid"
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple((int(w), str(a)) for w, a in self.hidden))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        for width, act in self.hidden:
            if width < 1:
                raise ValueError("hidden widths must be >= 1")
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "softmax" and self.n_classes < 2:
            raise ValueError("softmax head needs n_classes >= 2")
        if self.head != "softmax" and self.n_classes != 2:
            raise ValueError(f"{self.head} head is binary; n_classes must be 2")

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.head == "softmax" else 1

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [w for w, _ in self.hidden] + [self.out_dim]

    @functools.lru_cache(maxsize=None)
    def layers(self) -> tuple[backprop.DenseLayer, ...]:
        acts = [a for _, a in self.hidden] + [None]
        return tuple(backprop.DenseLayer(f"layer{i}.weight", f"layer{i}.bias", act) for i, act in enumerate(acts))

    @functools.lru_cache(maxsize=None)
    def layout(self) -> Layout:
        w = self.widths
        shapes = []
        for i in range(len(w) - 1):
            shapes.append((f"layer{i}.weight", (w[i + 1], w[i])))
            shapes.append((f"layer{i}.bias", (w[i + 1],)))
        return Layout.from_shapes(shapes)

    @property
    def n_params(self) -> int:
        return self.layout().size

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": [list(h) for h in self.hidden],
            "head": self.head,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden=tuple(tuple(h) for h in d.get("hidden", ())),
            head=d.get("head", "sigmoid"),
            n_classes=int(d.get("n_classes", 2)),
        )


def _check_labels(spec: ArchSpec, labels: np.ndarray):
    if spec.head == "linear":
        return
    if labels.size and (labels.min() < 0 or labels.max() >= spec.n_classes):
        raise SchemaError("label", f"labels must lie in [0, {spec.n_classes})")


@dataclass(frozen=True, eq=False)
class Model:
    spec: ArchSpec
    params: ParamVector

    def __post_init__(self):
        if self.params.layout != self.spec.layout():
            raise LayoutError("parameter layout does not match the architecture")

    def with_values(self, values) -> "Model":
        return Model(self.spec, self.params.replace(values))

    def _inputs(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.spec.input_dim:
            raise ShapeError(f"expected {self.spec.input_dim} features, got {x.shape[1]}")
        return x

    def forward(self, x, profile=None, theta=None):
        """Raw outputs (n, out_dim) and the backward cache.

        ``theta`` overrides the parameters; it may hold one row per sample.
        """
        th = self.params.values if theta is None else theta
        return backprop.forward(self.spec.layers(), self.spec.layout(), th, self._inputs(x), profile)

    def backward(self, cache, d_out, theta=None) -> np.ndarray:
        th = self.params.values if theta is None else theta
        return backprop.backward(self.spec.layers(), self.spec.layout(), th, cache, d_out)

    def sample_losses(self, data, profile=None) -> np.ndarray:
        _check_labels(self.spec, data.labels)
        z, _ = self.forward(data.features, profile)
        losses, _ = backprop.head_loss(self.spec.head, z, data.targets(self.spec.head))
        return losses

    def sample_gradients(self, data, profile=None):
        _check_labels(self.spec, data.labels)
        z, cache = self.forward(data.features, profile)
        losses, d_out = backprop.head_loss(self.spec.head, z, data.targets(self.spec.head))
        return losses, self.backward(cache, d_out)

    def output_gradients(self, x, theta=None, kind: str = "logit"):
        """Per-sample gradient of the scalar network output.

        ``kind="logit"`` differentiates the pre-sigmoid output z;
        ``kind="probability"`` differentiates f = sigmoid(z).
        Returns (f, grads) with f the sigmoid probabilities.
        """
        if self.spec.out_dim != 1:
            raise ShapeError("output gradients need a single-output head")
        if kind not in ("logit", "probability"):
            raise ValueError(f"unknown output kind {kind!r}")
        z, cache = self.forward(x, None, theta)
        f = backprop.sigmoid(z[:, 0])
        seed = np.ones_like(z) if kind == "logit" else (f * (1.0 - f))[:, None]
        return f, self.backward(cache, seed, theta)

    def probs(self, x, profile=None) -> np.ndarray:
        """Unclamped class-probability matrix (n, K)."""
        z, _ = self.forward(x, profile)
        return backprop.head_probs(self.spec.head, z)

    def predict(self, x, profile=None) -> np.ndarray:
        return np.argmax(self.probs(x, profile), axis=1)

    def accuracy(self, data) -> float:
        return float(np.mean(self.predict(data.features) == data.labels))


def predict_proba(model: Model, x, profile: vhw.VirtualHardwareProfile | None = None, clamp: bool = True):
    """Forward pass with inner products under ``profile``.

    Sigmoid heads give f in [0, 1] (scalar for a single x); softmax heads give
    a probability vector. Probabilities are clamped to [1e-12, 1 - 1e-12].
    """
    single = np.asarray(x).ndim == 1
    p = model.probs(x, profile)
    if clamp:
        p = np.clip(p, backprop.P_CLAMP, 1.0 - backprop.P_CLAMP)
    if model.spec.head == "sigmoid":
        p = p[:, 1]
    return p[0] if single else p


def init_model(spec: ArchSpec, seed: int) -> Model:
    """Glorot-uniform weights from a seeded generator; zero biases."""
    rng = np.random.default_rng(seed)
    layout = spec.layout()
    values = np.zeros(layout.size)
    for block in layout.blocks:
        if block.name.endswith(".weight"):
            fan_out, fan_in = block.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            values[block.offset:block.stop] = rng.uniform(-bound, bound, size=block.size)
    return Model(spec, ParamVector(values, layout))


def zeros_model(spec: ArchSpec) -> Model:
    layout = spec.layout()
    return Model(spec, ParamVector(np.zeros(layout.size), layout))


@dataclass(frozen=True, eq=False)
class QuadraticProbe:
    """Objective 1/2 theta^T A_a theta per sample of group a; data-independent otherwise.

    With one matrix every sample shares it, so the mean loss over any view is
    exactly 1/2 theta^T A theta.
    """

    matrices: tuple[np.ndarray, ...]
    params: ParamVector

    @classmethod
    def create(cls, matrices, theta) -> "QuadraticProbe":
        mats = [np.array(m, dtype=np.float64) for m in (matrices if isinstance(matrices, (list, tuple)) else [matrices])]
        k = mats[0].shape[0]
        layout = Layout.from_shapes([("theta", (k,))])
        return cls(tuple(mats), ParamVector(np.asarray(theta, dtype=np.float64), layout))

    def with_values(self, values) -> "QuadraticProbe":
        return QuadraticProbe(self.matrices, self.params.replace(values))

    def _mats(self, data):
        if len(self.matrices) == 1:
            return np.broadcast_to(self.matrices[0], (len(data),) + self.matrices[0].shape)
        return np.stack([self.matrices[a] for a in data.groups])

    def sample_gradients(self, data, profile=None):
        th = self.params.values
        g = self._mats(data) @ th
        return 0.5 * g @ th, g

    def sample_losses(self, data, profile=None):
        return self.sample_gradients(data, profile)[0]


_MAGIC = b"HWFCKPT1"


def save_checkpoint(path, model: Model, header: dict | None = None) -> None:
    """Write magic, u32 header length, JSON header, little-endian float64 params."""
    meta = dict(header or {})
    meta["spec"] = model.spec.to_dict()
    meta["n_params"] = len(model.params)
    meta["param_sha256"] = model.params.sha256()
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(model.params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    spec = ArchSpec.from_dict(header["spec"])
    values = np.frombuffer(raw[12 + hlen:], dtype="<f8").astype(np.float64)
    if values.shape[0] != header["n_params"]:
        raise LayoutError("checkpoint parameter block has the wrong length")
    return Model(spec, ParamVector(values, spec.layout())), header
