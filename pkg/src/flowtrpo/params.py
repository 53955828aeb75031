"""Flat parameter vectors with a named layout.

TRPO treats the whole policy as one vector (the CG solve, step scaling and
line search all operate on it), while networks want named weight matrices.
``FlatParams`` holds the vector plus an ordered (name, shape, offset) layout;
``ParamViews`` exposes the same layout as tape tensors so gradients w.r.t.
the flat leaf assemble automatically.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ShapeError


class LayoutBuilder:
    """Accumulates named blocks in registration order."""

    def __init__(self):
        self.entries = []  # (name, shape, offset)
        self.size = 0
        self._names = set()

    def add(self, name: str, shape) -> None:
        if name in self._names:
            raise ShapeError(f"duplicate parameter name '{name}'")
        shape = tuple(int(s) for s in shape)
        self._names.add(name)
        self.entries.append((name, shape, self.size))
        self.size += int(np.prod(shape)) if shape else 1

    def build(self) -> tuple:
        return tuple(self.entries)


def layout_size(layout) -> int:
    total = 0
    for _, shape, offset in layout:
        count = int(np.prod(shape)) if shape else 1
        if offset != total:
            raise ShapeError("layout offsets are not contiguous")
        total += count
    return total


class FlatParams:
    """One float64 vector plus the layout that names its pieces."""

    def __init__(self, vector: np.ndarray, layout):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.ndim != 1:
            raise ShapeError("parameter vector must be 1-D")
        if layout_size(layout) != vector.size:
            raise ShapeError(
                f"layout covers {layout_size(layout)} values, vector has {vector.size}"
            )
        self.vector = vector
        self.layout = tuple(layout)
        self._index = {name: (shape, offset) for name, shape, offset in layout}

    @property
    def size(self) -> int:
        return self.vector.size

    def view(self, name: str) -> np.ndarray:
        """Reshaped view into the vector (writes propagate)."""
        shape, offset = self._index[name]
        count = int(np.prod(shape)) if shape else 1
        return self.vector[offset : offset + count].reshape(shape)

    def names(self):
        return [name for name, _, _ in self.layout]

    def copy(self) -> "FlatParams":
        return FlatParams(self.vector.copy(), self.layout)

    def replace(self, vector: np.ndarray) -> "FlatParams":
        return FlatParams(np.asarray(vector, dtype=np.float64), self.layout)

    @staticmethod
    def from_blocks(layout, blocks: dict) -> "FlatParams":
        """Assemble a vector from name -> array, in layout order."""
        vector = np.empty(layout_size(layout), dtype=np.float64)
        for name, shape, offset in layout:
            block = np.asarray(blocks[name], dtype=np.float64)
            if block.shape != shape:
                raise ShapeError(
                    f"block '{name}' has shape {block.shape}, layout says {shape}"
                )
            count = block.size if shape else 1
            vector[offset : offset + count] = block.reshape(-1)
        return FlatParams(vector, layout)


class ParamViews:
    """Named tensor views of a (possibly tape-tracked) flat vector.

    Slices lazily and caches, so each block is a single slice+reshape on the
    tape no matter how often a network asks for it.
    """

    def __init__(self, theta: ad.Tensor, layout):
        if theta.data.ndim != 1:
            raise ShapeError("parameter leaf must be 1-D")
        self.theta = theta
        self._index = {name: (shape, offset) for name, shape, offset in layout}
        self._cache = {}

    def __getitem__(self, name: str) -> ad.Tensor:
        cached = self._cache.get(name)
        if cached is not None:
            return cached
        shape, offset = self._index[name]
        count = int(np.prod(shape)) if shape else 1
        block = ad.narrow(self.theta, 0, offset, count)
        if shape != (count,):
            block = ad.reshape(block, shape)
        self._cache[name] = block
        return block
