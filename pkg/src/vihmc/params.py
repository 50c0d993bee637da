"""Flat parameter vectors and the layout that maps them to network blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LayoutEntry:
    """One contiguous block of the flat parameter vector."""

    layer_id: str
    role: str  # "weight" or "bias"
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def name(self) -> str:
        return f"{self.layer_id}.{self.role}"

    @property
    def stop(self) -> int:
        return self.offset + self.size


class ParamVector:
    """Immutable flat float64 vector together with its block layout."""

    def __init__(self, values, layout):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("parameter values must be a flat vector")
        layout = tuple(layout)
        total = sum(e.size for e in layout)
        if total != values.size:
            raise ValueError(f"layout covers {total} entries but vector has {values.size}")
        pos = 0
        for e in layout:
            if e.offset != pos:
                raise ValueError(f"layout block {e.name} starts at {e.offset}, expected {pos}")
            pos = e.stop
        values.setflags(write=False)
        self.values = values
        self.layout = layout

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"ParamVector(n={self.values.size}, blocks={len(self.layout)})"

    def to_blocks(self) -> dict[str, np.ndarray]:
        """Structured view: ``{block name: array of the block's shape}``."""
        return {e.name: self.values[e.offset : e.stop].reshape(e.shape) for e in self.layout}

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray], layout) -> ParamVector:
        flat = np.concatenate([np.asarray(blocks[e.name], dtype=np.float64).ravel() for e in layout])
        return cls(flat, layout)

    def with_values(self, values) -> ParamVector:
        return ParamVector(values, self.layout)


def index_labels(layout) -> list[str]:
    """Human-readable label for every flat index, e.g. ``layer0.weight[1,0]``."""
    labels = []
    for e in layout:
        for idx in np.ndindex(*e.shape) if e.shape else [()]:
            suffix = "[" + ",".join(str(i) for i in idx) + "]" if idx else ""
            labels.append(e.name + suffix)
    return labels


def layer_of_index(layout) -> list[str]:
    """Block name owning every flat index."""
    out = []
    for e in layout:
        out.extend([e.name] * e.size)
    return out
