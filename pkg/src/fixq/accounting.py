"""Model size arithmetic and quantization error statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .grouping import group_matrix, groups_per_layer, parse_grouping
from .quantizer import decode_layer, parse_scheme
from .store import (
    DimensionError,
    FloatModel,
    Grouping,
    ModelManifest,
    QuantizedModel,
    Scheme,
)

MB = 10**6
FLOAT_HEADER = 8
FLOAT_LAYER_HEADER = 16
QUANT_HEADER = 12
QUANT_LAYER_HEADER = 20
LLOYD_LAYER_HEADER = 4


def original_model_size(manifest: ModelManifest) -> int:
    """Bytes of 32-bit float weights."""
    return sum(4 * s.size for s in manifest.layers)


@dataclass(frozen=True)
class ProposedSize:
    weight_bytes: int
    sf_bytes: Fraction
    sf_bytes_serialized: int

    @property
    def total(self) -> Fraction:
        return self.weight_bytes + self.sf_bytes

    @property
    def total_serialized(self) -> int:
        return self.weight_bytes + self.sf_bytes_serialized


def proposed_model_size(manifest: ModelManifest, grouping) -> ProposedSize:
    """8-bit weights plus half a byte per scale exponent.

    ``sf_bytes`` is the exact fractional figure; ``sf_bytes_serialized``
    rounds each layer's nibbles up to whole bytes, as stored on disk.
    """
    counts = groups_per_layer(manifest, grouping)
    return ProposedSize(
        weight_bytes=manifest.num_params,
        sf_bytes=Fraction(sum(counts), 2),
        sf_bytes_serialized=sum((g + 1) // 2 for g in counts),
    )


def float_overhead_bytes(manifest: ModelManifest) -> int:
    return FLOAT_HEADER + FLOAT_LAYER_HEADER * len(manifest)


def fxq1_overhead_bytes(manifest: ModelManifest, grouping, scheme=Scheme.NLQ, lloyd_k: int = 64) -> int:
    """Container bytes beyond weight codes and exponent nibbles."""
    n = QUANT_HEADER + QUANT_LAYER_HEADER * len(manifest)
    if parse_scheme(scheme) is Scheme.LLOYD:
        g = sum(groups_per_layer(manifest, grouping))
        n += LLOYD_LAYER_HEADER * len(manifest) + 4 * lloyd_k * g
    return n


def _bytes(x) -> str:
    x = Fraction(x)
    return str(x.numerator) if x.denominator == 1 else f"{float(x):.1f}"


@dataclass(frozen=True)
class LayerSize:
    index: int
    params: int
    groups: int
    original: int
    weight_bytes: int
    sf_bytes: Fraction
    sf_bytes_serialized: int


@dataclass(frozen=True)
class SizeReport:
    grouping: Grouping
    original: int
    proposed: ProposedSize
    layers: tuple[LayerSize, ...]

    @property
    def ratio(self) -> float:
        return float(self.proposed.total / self.original)

    def records(self) -> list[dict]:
        out = []
        for ls in self.layers:
            out.append({
                "record": "layer",
                "layer": ls.index,
                "params": ls.params,
                "groups": ls.groups,
                "original_bytes": ls.original,
                "weight_bytes": ls.weight_bytes,
                "sf_bytes": float(ls.sf_bytes),
                "sf_bytes_serialized": ls.sf_bytes_serialized,
            })
        out.append({
            "record": "total",
            "grouping": self.grouping.name.lower(),
            "original_bytes": self.original,
            "weight_bytes": self.proposed.weight_bytes,
            "sf_bytes": float(self.proposed.sf_bytes),
            "sf_bytes_serialized": self.proposed.sf_bytes_serialized,
            "proposed_bytes": float(self.proposed.total),
            "proposed_bytes_serialized": self.proposed.total_serialized,
            "ratio": self.ratio,
        })
        return out

    def json_lines(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records())

    def table(self) -> str:
        p = self.proposed
        rows = [
            ("original", self.original, self.original),
            ("weights", p.weight_bytes, p.weight_bytes),
            ("scale factors", p.sf_bytes, p.sf_bytes_serialized),
            ("proposed", p.total, p.total_serialized),
        ]
        lines = [
            f"Model size  grouping={self.grouping.name}  layers={len(self.layers)}",
            f"{'':<14}{'MB':>12}{'bytes':>14}{'serialized':>14}",
        ]
        for name, exact, ser in rows:
            lines.append(f"{name:<14}{float(exact) / MB:>12.4f}{_bytes(exact):>14}{ser:>14d}")
        lines.append(f"{'ratio':<14}{100 * self.ratio:>11.2f}%")
        return "\n".join(lines)


def size_report(manifest: ModelManifest, grouping) -> SizeReport:
    grouping = parse_grouping(grouping)
    counts = groups_per_layer(manifest, grouping)
    layers = tuple(
        LayerSize(k, s.size, g, 4 * s.size, s.size, Fraction(g, 2), (g + 1) // 2)
        for k, (s, g) in enumerate(zip(manifest.layers, counts))
    )
    return SizeReport(grouping, original_model_size(manifest), proposed_model_size(manifest, grouping), layers)


@dataclass(frozen=True)
class ErrorStats:
    mse: float
    max_abs: float
    zero_fraction: float
    count: int

    def record(self, **keys) -> dict:
        return {**keys, "mse": self.mse, "max_abs_error": self.max_abs,
                "zero_fraction": self.zero_fraction, "count": self.count}


def _stats(err: np.ndarray, zero: np.ndarray) -> ErrorStats:
    n = err.size
    return ErrorStats(
        float(np.mean(err**2)) if n else 0.0,
        float(np.max(np.abs(err))) if n else 0.0,
        float(np.mean(zero)) if n else 0.0,
        int(n),
    )


@dataclass(frozen=True)
class QuantErrorReport:
    groups: tuple[tuple[ErrorStats, ...], ...]
    layers: tuple[ErrorStats, ...]
    model: ErrorStats

    def records(self) -> list[dict]:
        out = []
        for k, (gs, ls) in enumerate(zip(self.groups, self.layers)):
            out.extend(g.record(record="group", layer=k, group=j) for j, g in enumerate(gs))
            out.append(ls.record(record="layer", layer=k))
        out.append(self.model.record(record="model"))
        return out

    def summary(self) -> str:
        m = self.model
        return (f"weight MSE {m.mse:.6e}  max abs error {m.max_abs:.6e}  "
                f"zero fraction {m.zero_fraction:.4f}  ({m.count} weights)")


def quant_error_stats(model: FloatModel, qm: QuantizedModel) -> QuantErrorReport:
    """Error of the dequantized weights against the originals, per group, layer and model."""
    if model.manifest != qm.manifest:
        raise DimensionError("float and quantized models have different manifests")
    groups, layers, errs, zeros = [], [], [], []
    for k, t in enumerate(model.tensors):
        q = decode_layer(qm, k)
        deq = np.ldexp(q, qm.exponents[k][:, None])
        err = deq - group_matrix(t.values, qm.grouping)
        zero = q == 0
        groups.append(tuple(_stats(e, z) for e, z in zip(err, zero)))
        layers.append(_stats(err, zero))
        errs.append(err.reshape(-1))
        zeros.append(zero.reshape(-1))
    model_stats = _stats(np.concatenate(errs), np.concatenate(zeros))
    return QuantErrorReport(tuple(groups), tuple(layers), model_stats)
