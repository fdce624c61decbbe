"""Partition weight tensors into scaling groups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import Grouping, ModelManifest, WeightTensor


@dataclass(frozen=True)
class QuantGroup:
    """A contiguous slice ``[start, stop)`` of a tensor's flattened weights.

    ``exponent`` stays ``None`` until the quantizer fills it in.
    """

    index: int
    start: int
    stop: int
    exponent: int | None = None

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def indices(self) -> range:
        return range(self.start, self.stop)

    def view(self, tensor: WeightTensor | np.ndarray) -> np.ndarray:
        flat = tensor.values.reshape(-1) if isinstance(tensor, WeightTensor) else np.asarray(tensor).reshape(-1)
        return flat[self.start:self.stop]


def parse_grouping(value) -> Grouping:
    if isinstance(value, Grouping):
        return value
    try:
        return Grouping[str(value).upper()]
    except KeyError:
        raise ValueError(f"unknown grouping {value!r}; expected lw or cw") from None


def partition(tensor: WeightTensor, scheme) -> list[QuantGroup]:
    # output-channel-major ordering matches the exponent order in FXQ1
    scheme = parse_grouping(scheme)
    s = tensor.shape
    if scheme is Grouping.LW:
        return [QuantGroup(0, 0, s.size)]
    per = s.i * s.h * s.w
    return [QuantGroup(k, k * per, (k + 1) * per) for k in range(s.o)]


def groups_per_layer(manifest: ModelManifest, scheme) -> list[int]:
    scheme = parse_grouping(scheme)
    return [1 if scheme is Grouping.LW else s.o for s in manifest.layers]


def group_count(manifest: ModelManifest, scheme) -> int:
    return sum(groups_per_layer(manifest, scheme))


def group_matrix(values: np.ndarray, scheme) -> np.ndarray:
    """Reshape a weight array to ``(groups, group_length)`` without copying."""
    scheme = parse_grouping(scheme)
    v = np.asarray(values)
    if scheme is Grouping.LW:
        return v.reshape(1, -1)
    return v.reshape(v.shape[0], -1)
