from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..errors import LayoutError


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class Layout:
    """Frozen mapping block name -> (offset, shape) over a flat vector."""

    blocks: tuple[Block, ...]

    @classmethod
    def from_shapes(cls, named_shapes) -> "Layout":
        blocks, off = [], 0
        for name, shape in named_shapes:
            b = Block(name, off, tuple(int(s) for s in shape))
            blocks.append(b)
            off = b.stop
        return cls(tuple(blocks))

    @property
    def size(self) -> int:
        return self.blocks[-1].stop if self.blocks else 0

    def __getitem__(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def view(self, values: np.ndarray, name: str) -> np.ndarray:
        """Reshaped view of one block; leading batch axes of ``values`` are kept."""
        b = self[name]
        return values[..., b.offset:b.stop].reshape(values.shape[:-1] + b.shape)


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.layout.size:
            raise LayoutError(f"expected {self.layout.size} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise LayoutError("parameter vector contains non-finite entries")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParamVector)
            and self.layout == other.layout
            and np.array_equal(self.values, other.values)
        )

    def replace(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def block(self, name: str) -> np.ndarray:
        return self.layout.view(self.values, name)

    def distance(self, other: "ParamVector") -> float:
        if self.layout != other.layout:
            raise LayoutError("parameter layouts differ")
        return float(np.linalg.norm(self.values - other.values))

    def sha256(self) -> str:
        return hashlib.sha256(self.values.astype("<f8").tobytes()).hexdigest()
