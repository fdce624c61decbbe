"""Power-of-two group scaling and the LQ / NLQ / Lloyd quantizers.

Weights of one group are shifted into (-2, 2) by ``sf = 2**-E`` with
``E = floor(log2(max|w|))`` and then mapped onto one of three code sets:

* LQ: a uniform grid with step ``2**-FL``.
* NLQ: a memory-free three-region grid with steps ``2**-(FL-1)`` on
  ``[0.5, 2)``, ``2**-FL`` on ``[0.25, 0.5)`` and ``2**-(FL+2)`` below.
* LLOYD: a per-group codebook fitted by Lloyd iterations.

Rounding everywhere is floor plus a flag that is set only when the fractional
part is strictly above one half, so exact ties round toward minus infinity.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .grouping import group_matrix, parse_grouping
from .store import (
    EXP_MAX,
    EXP_MIN,
    FixedPointFormat,
    FloatModel,
    FormatError,
    Grouping,
    QuantizedModel,
    Scheme,
    WeightTensor,
)

DEFAULT_FORMAT = FixedPointFormat()


class DomainError(ValueError):
    pass


class UnsupportedCombinationError(ValueError):
    pass


class ExponentRangeError(ValueError):
    pass


def parse_scheme(value) -> Scheme:
    if isinstance(value, Scheme):
        return value
    try:
        return Scheme[str(value).upper()]
    except KeyError:
        raise ValueError(f"unknown scheme {value!r}; expected lq, nlq or lloyd") from None


def _scalar_or_array(orig, out):
    return float(out) if np.ndim(orig) == 0 else out


def _check_range(sw, lo_closed=False) -> np.ndarray:
    arr = np.asarray(sw, dtype=np.float64)
    lo_bad = arr < -2.0 if lo_closed else arr <= -2.0
    if not np.isfinite(arr).all() or lo_bad.any() or (arr >= 2.0).any():
        raise DomainError("scaled weights must be finite and lie in (-2, 2)")
    return arr


def exponents_of(maxabs) -> np.ndarray:
    """``floor(log2(m))`` for each magnitude, exactly; 0 for zero entries."""
    m = np.asarray(maxabs, dtype=np.float64)
    _, e = np.frexp(m)
    return np.where(m > 0, e - 1, 0).astype(np.int64)


def lq_exponents(gm: np.ndarray) -> np.ndarray:
    """Group exponents for LQ, one per row of ``gm``.

    A group whose largest magnitude is a negative exact power of two ``-2**k``
    is scaled by ``2**-(k-1)`` so that it lands on the LQ code -2. This is
    what keeps quantize -> dequantize -> quantize a fixed point, since LQ
    saturation can round a group minimum onto ``-2 * 2**E``.
    """
    mx = np.max(np.abs(gm), axis=1)
    exps = exponents_of(mx)
    mant, _ = np.frexp(mx)
    edge = (mant == 0.5) & (np.max(gm, axis=1) < mx)
    return exps - edge


def scale_exponent(weights) -> int:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise DomainError("empty group")
    return int(exponents_of(np.max(np.abs(w))))


def scale_group(weights, exponent: int):
    return _scalar_or_array(weights, np.ldexp(np.asarray(weights, dtype=np.float64), -int(exponent)))


def unscale_group(values, exponent: int):
    return _scalar_or_array(values, np.ldexp(np.asarray(values, dtype=np.float64), int(exponent)))


def round_flag(x: float) -> int:
    frac = x - math.floor(x)
    return 1 if frac > 0.5 else 0


def quantize_lq(sw, fl_eff: int = DEFAULT_FORMAT.fl):
    # -2 is itself an LQ grid point, so it is accepted to keep Q(Q(x)) = Q(x)
    arr = _check_range(sw, lo_closed=True)
    return _scalar_or_array(sw, kernels.lq_quantize(arr, int(fl_eff)))


def quantize_nlq(sw, fmt: FixedPointFormat = DEFAULT_FORMAT):
    arr = _check_range(sw)
    return _scalar_or_array(sw, kernels.nlq_quantize(arr, fmt.fl))


def nlq_max(fmt: FixedPointFormat = DEFAULT_FORMAT) -> float:
    return 2.0 - 2.0 ** (1 - fmt.fl)


def nlq_encode(q, fmt: FixedPointFormat = DEFAULT_FORMAT):
    arr = np.asarray(q, dtype=np.float64)
    codes, ok = kernels.nlq_encode(arr, fmt.fl)
    if not np.all(ok):
        bad = arr.reshape(-1)[np.flatnonzero(~np.asarray(ok).reshape(-1))[0]]
        raise DomainError(f"{bad!r} is not a representable NLQ value")
    return int(codes) if np.ndim(q) == 0 else codes


def nlq_decode(code, fmt: FixedPointFormat = DEFAULT_FORMAT):
    vals, ok = kernels.nlq_decode(np.asarray(code), fmt.fl)
    if not np.all(ok):
        bad = np.asarray(code).reshape(-1)[np.flatnonzero(~np.asarray(ok).reshape(-1))[0]]
        raise FormatError(f"invalid NLQ code 0x{int(bad):02X}")
    return _scalar_or_array(code, vals)


def lq_encode(q, fmt: FixedPointFormat = DEFAULT_FORMAT):
    n = np.ldexp(np.asarray(q, dtype=np.float64), fmt.fl)
    lim = 1 << (fmt.fl + 1)
    if (n != np.floor(n)).any() or (n < -lim).any() or (n > lim - 1).any():
        raise DomainError("value is not on the LQ grid")
    codes = (n.astype(np.int64) & 0xFF).astype(np.uint8)
    return int(codes) if np.ndim(q) == 0 else codes


def lq_decode(code, fmt: FixedPointFormat = DEFAULT_FORMAT):
    n = np.asarray(code).astype(np.uint8).view(np.int8).astype(np.int64)
    lim = 1 << (fmt.fl + 1)
    if (n < -lim).any() or (n > lim - 1).any():
        raise FormatError(f"LQ code outside the {{1,{fmt.il},{fmt.fl}}} range")
    return _scalar_or_array(code, np.ldexp(n.astype(np.float64), -fmt.fl))


@dataclass
class LloydCodebook:
    codewords: np.ndarray
    iterations: int
    mse: float
    history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.codewords.size


def lloyd_init_grid(k: int, fmt: FixedPointFormat = DEFAULT_FORMAT) -> np.ndarray:
    edge = 2.0 - 2.0**-fmt.fl
    return np.linspace(-edge, edge, k)


def _assignment_mse(xs, cb):
    labels = kernels.nearest_codeword(xs, cb)
    return labels, float(np.mean((xs - cb[labels]) ** 2))


def _reseed_empty(xs, labels, cb, counts):
    """Move empty codewords to the midpoints of the widest occupied spans."""
    occupied = np.flatnonzero(counts)
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return cb
    lo = np.full(cb.size, np.inf)
    hi = np.full(cb.size, -np.inf)
    np.minimum.at(lo, labels, xs)
    np.maximum.at(hi, labels, xs)
    spans = [(hi[j] - lo[j], lo[j], hi[j], cb[j]) for j in occupied]
    taken = set(cb[occupied].tolist())
    new = cb.copy()
    for j in empty:
        spans.sort(key=lambda s: -s[0])
        placed = False
        for idx, (width, a, b, centre) in enumerate(spans):
            if width <= 0:
                break
            mid = 0.5 * (a + b)
            if mid in taken:
                mid = 0.5 * (a + centre)
            if mid in taken or not a < mid < b:
                continue
            new[j] = mid
            taken.add(mid)
            spans[idx:idx + 1] = [(mid - a, a, mid, 0.5 * (a + mid)), (b - mid, mid, b, 0.5 * (mid + b))]
            placed = True
            break
        if not placed:
            # no splittable span left; an old empty codeword never collides with a centroid
            taken.add(new[j])
    return np.sort(new)


class _Segments:
    """Contiguous clusters of sorted 1-D data, costed through prefix sums."""

    def __init__(self, xs):
        self.xs = xs
        self.c1 = np.concatenate([[0.0], np.cumsum(xs)])
        self.c2 = np.concatenate([[0.0], np.cumsum(xs * xs)])
        self._p1 = self.c1.tolist()
        self._p2 = self.c2.tolist()
        self.eps = 1e-13 * (self.sse1(0, xs.size) + 1e-300)
        # windows already known to admit no improving re-split
        self._settled: set[tuple[int, ...]] = set()

    def sse1(self, a: int, b: int) -> float:
        if b <= a:
            return 0.0
        s = self._p1[b] - self._p1[a]
        v = (self._p2[b] - self._p2[a]) - s * s / (b - a)
        return v if v > 0.0 else 0.0

    def sse(self, a, b):
        # empty or reversed ranges give 0 here; callers mask them where it matters
        s = self.c1[b] - self.c1[a]
        return np.maximum((self.c2[b] - self.c2[a]) - s * s / np.maximum(b - a, 1), 0.0)

    def total(self, st) -> float:
        return sum(self.sse1(a, b) for a, b in zip(st[:-1], st[1:]))

    def means(self, st):
        st = np.asarray(st)
        return (self.c1[st[1:]] - self.c1[st[:-1]]) / (st[1:] - st[:-1])

    def from_codebook(self, cb):
        counts = np.bincount(kernels.nearest_codeword(self.xs, cb), minlength=cb.size)
        return np.concatenate([[0], np.cumsum(counts)])

    def best_cut(self, a, c):
        if c - a < 2:
            return None, 0.0
        t = np.arange(a + 1, c)
        v = self.sse(a, t) + self.sse(t, c)
        j = int(np.argmin(v))
        return a + 1 + j, self.sse1(a, c) - float(v[j])

    def fill_empty(self, st):
        st = list(st)
        while True:
            empty = np.flatnonzero(np.diff(st) == 0)
            if empty.size == 0:
                return np.array(st)
            st.pop(int(empty[0]) + 1)
            best = None
            for i in range(len(st) - 1):
                t, g = self.best_cut(st[i], st[i + 1])
                if t is not None and (best is None or g > best[1]):
                    best = (i, g, t)
            st.insert(best[0] + 1, best[2])

    def lloyd(self, st, max_iter):
        m = self.total(st)
        for _ in range(max_iter):
            new = self.fill_empty(self.from_codebook(self.means(st)))
            m2 = self.total(new)
            if not m2 < m - self.eps:
                break
            st, m = new, m2
        return st

    def resplit_pairs(self, st):
        st = [int(v) for v in st]
        dirty = set(range(len(st) - 2))
        while dirty:
            j = min(dirty)
            dirty.discard(j)
            a, b, c = st[j], st[j + 1], st[j + 2]
            if (a, b, c) in self._settled:
                continue
            t, g = self.best_cut(a, c)
            if t is not None and t != b and self.sse1(a, c) - g < self.sse1(a, b) + self.sse1(b, c) - self.eps:
                st[j + 1] = t
                dirty.update(i for i in (j - 1, j + 1) if 0 <= i < len(st) - 2)
            else:
                self._settled.add((a, b, c))
        return st

    def resplit_triples(self, st, cap=1500):
        changed = False
        for j in range(len(st) - 3):
            a, d = st[j], st[j + 3]
            key = (a, st[j + 1], st[j + 2], d)
            if d - a < 3 or d - a > cap or key in self._settled:
                continue
            t = np.arange(a + 1, d)
            tot = self.sse(a, t)[:, None] + self.sse(t[:, None], t[None, :]) + self.sse(t, d)[None, :]
            tot = np.where(t[:, None] < t[None, :], tot, np.inf)
            i1, i2 = np.unravel_index(int(np.argmin(tot)), tot.shape)
            cur = self.sse1(a, st[j + 1]) + self.sse1(st[j + 1], st[j + 2]) + self.sse1(st[j + 2], d)
            if tot[i1, i2] < cur - self.eps:
                st[j + 1], st[j + 2] = int(t[i1]), int(t[i2])
                changed = True
            else:
                self._settled.add(key)
        return st, changed

    def descend(self, st, max_iter):
        m = self.total(st)
        while True:
            cand = list(st)
            while True:
                cand = self.resplit_pairs(cand)
                cand, changed = self.resplit_triples(cand)
                if not changed:
                    break
            cand = self.lloyd(np.array(cand), max_iter)
            m2 = self.total(cand)
            if not m2 < m - self.eps:
                return np.asarray(st), m
            st, m = cand, m2

    def jump(self, st, m, max_iter, trials):
        """Merge two neighbours and split another cluster, then descend."""
        k = len(st) - 1
        if k < 3:
            return None
        merge = [self.sse1(st[j], st[j + 2]) - self.sse1(st[j], st[j + 1]) - self.sse1(st[j + 1], st[j + 2])
                 for j in range(k - 1)]
        split = [self.best_cut(st[i], st[i + 1]) for i in range(k)]
        cands = sorted(
            (merge[j] - split[i][1], j, i)
            for j in range(k - 1)
            for i in range(k)
            if i not in (j, j + 1) and split[i][0] is not None
        )
        st = [int(v) for v in st]
        for _, j, i in cands[:trials]:
            new = sorted([s for idx, s in enumerate(st) if idx != j + 1] + [split[i][0]])
            new, m2 = self.descend(np.array(new), max_iter)
            if m2 < m - self.eps:
                return new, m2
        return None


def _refine(xs, cb, max_iter, rounds=None, trials=16):
    seg = _Segments(xs)
    st = seg.fill_empty(seg.from_codebook(cb))
    st, m = seg.descend(st, max_iter)
    for _ in range(rounds if rounds is not None else 2 * cb.size):
        r = seg.jump(st, m, max_iter, trials)
        if r is None:
            break
        st, m = r
    return seg.means(st)


def lloyd_codebook(
    sw,
    k: int | None = None,
    max_iter: int = 200,
    tol: float = 1e-12,
    fmt: FixedPointFormat = DEFAULT_FORMAT,
    init: np.ndarray | None = None,
    refine: bool = True,
) -> LloydCodebook:
    """Fit a ``k``-level scalar codebook to ``sw`` by Lloyd iterations.

    Starts from the uniform grid over ``[-2 + 2**-FL, 2 - 2**-FL]`` and stops
    once one round improves the MSE by less than ``tol``. With ``refine`` the
    Lloyd fixed point is then improved by exact re-splits of adjacent cluster
    pairs and triples and by merge/split moves, each followed by further
    Lloyd rounds; a refined codebook is kept only if it lowers the MSE.
    """
    xs = np.sort(np.asarray(sw, dtype=np.float64).reshape(-1))
    k = (1 << fmt.fl) if k is None else int(k)
    if k < 1:
        raise DomainError("codebook size must be >= 1")
    if xs.size < k:
        raise DomainError(f"need at least k={k} samples, got {xs.size}")
    if not np.isfinite(xs).all():
        raise DomainError("weights must be finite")
    cb = lloyd_init_grid(k, fmt) if init is None else np.sort(np.asarray(init, dtype=np.float64))
    labels, mse = _assignment_mse(xs, cb)
    history = [mse]
    it = 0
    while it < max_iter:
        counts = np.bincount(labels, minlength=k)
        sums = np.bincount(labels, weights=xs, minlength=k)
        cand = np.where(counts > 0, sums / np.maximum(counts, 1), cb)
        cand = _reseed_empty(xs, labels, cand, counts)
        new_labels, new_mse = _assignment_mse(xs, cand)
        if new_mse > mse:
            # centroid rounding can cost an ulp; keep the better codebook
            break
        it += 1
        improvement = mse - new_mse
        cb, labels, mse = cand, new_labels, new_mse
        history.append(mse)
        if improvement < tol:
            break
    if refine and k > 1:
        cand = _refine(xs, cb, max_iter)
        if np.all(np.diff(cand) > 0):
            _, new_mse = _assignment_mse(xs, cand)
            if new_mse < mse:
                cb, mse = cand, new_mse
                history.append(mse)
    return LloydCodebook(cb, it, mse, history)


def _to_f32_codebook(cb: np.ndarray) -> np.ndarray:
    out = cb.astype(np.float32)
    for j in range(1, out.size):
        if out[j] <= out[j - 1]:
            out[j] = np.nextafter(out[j - 1], np.float32(np.inf))
    return out.astype(np.float64)


def _env_workers() -> int:
    try:
        return max(1, int(os.environ.get("FIXQ_THREADS", "1")))
    except ValueError:
        return 1


def quantize_values(values: np.ndarray, scheme, grouping, fmt=DEFAULT_FORMAT, *, layer=0, lloyd_k=None,
                    lloyd_max_iter=200, lloyd_tol=1e-12, check_range=True):
    """Quantize one layer; returns ``(codes, exponents, codebooks | None)``."""
    scheme = parse_scheme(scheme)
    gm = group_matrix(np.asarray(values, dtype=np.float64), grouping)
    exps = lq_exponents(gm) if scheme is Scheme.LQ else exponents_of(np.max(np.abs(gm), axis=1))
    if check_range:
        bad = np.flatnonzero((exps < EXP_MIN) | (exps > EXP_MAX))
        if bad.size:
            g = int(bad[0])
            raise ExponentRangeError(
                f"layer {layer} group {g}: scale exponent {int(exps[g])} "
                f"outside 4-bit range [{EXP_MIN}, {EXP_MAX}]"
            )
    sw = np.ldexp(gm, -exps[:, None])
    if scheme is Scheme.LQ:
        codes = lq_encode(kernels.lq_quantize(sw, fmt.fl), fmt)
        books = None
    elif scheme is Scheme.NLQ:
        codes = nlq_encode(kernels.nlq_quantize(sw, fmt.fl), fmt)
        books = None
    else:
        codes = np.empty(sw.shape, dtype=np.uint8)
        books = []
        for g, row in enumerate(sw):
            cb = _to_f32_codebook(
                lloyd_codebook(row, lloyd_k, lloyd_max_iter, lloyd_tol, fmt).codewords
            )
            codes[g] = kernels.nearest_codeword(row, cb)
            books.append(cb)
        books = np.stack(books)
    return np.asarray(codes, dtype=np.uint8).reshape(-1), exps, books


def quantize_model(model: FloatModel, scheme, grouping, fmt: FixedPointFormat = DEFAULT_FORMAT, *,
                   lloyd_k=None, lloyd_max_iter=200, lloyd_tol=1e-12, workers=None) -> QuantizedModel:
    scheme = parse_scheme(scheme)
    grouping = parse_grouping(grouping)
    if scheme is Scheme.LLOYD and grouping is Grouping.CW:
        raise UnsupportedCombinationError(
            "Lloyd codebooks with channel-wise grouping are refused: "
            "it is not feasible to memorize LUTs for all the channels"
        )
    workers = _env_workers() if workers is None else max(1, int(workers))

    def job(k):
        return quantize_values(model.tensors[k].values, scheme, grouping, fmt, layer=k, lloyd_k=lloyd_k,
                               lloyd_max_iter=lloyd_max_iter, lloyd_tol=lloyd_tol)

    idx = range(len(model.tensors))
    if workers == 1:
        results = [job(k) for k in idx]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, idx))
    return QuantizedModel(
        model.manifest,
        scheme,
        grouping,
        fmt,
        [r[0] for r in results],
        [r[1] for r in results],
        [r[2] for r in results] if scheme is Scheme.LLOYD else None,
    )


def decode_layer(qm: QuantizedModel, k: int) -> np.ndarray:
    """Scaled-domain values of layer ``k`` as a ``(groups, length)`` matrix."""
    g = qm.exponents[k].size
    codes = qm.codes[k].reshape(g, -1)
    if qm.scheme is Scheme.LQ:
        return lq_decode(codes, qm.fmt)
    if qm.scheme is Scheme.NLQ:
        return nlq_decode(codes, qm.fmt)
    cb = np.asarray(qm.codebooks[k], dtype=np.float64).reshape(g, -1)
    if int(codes.max(initial=0)) >= cb.shape[1]:
        raise FormatError(f"layer {k}: code exceeds codebook size")
    return np.take_along_axis(cb, codes.astype(np.int64), axis=1)


def dequantize_model(qm: QuantizedModel) -> FloatModel:
    tensors = []
    for k, s in enumerate(qm.manifest.layers):
        vals = np.ldexp(decode_layer(qm, k), qm.exponents[k][:, None])
        tensors.append(WeightTensor(vals.reshape(s.dims)))
    return FloatModel(tensors)


@dataclass(frozen=True)
class SweepPoint:
    offset: int
    fl_eff: int
    mse: float
    zero_fraction: float


def precision_sweep(model: FloatModel, grouping, offsets=(0, 1, 2, 3),
                    fmt: FixedPointFormat = DEFAULT_FORMAT) -> list[SweepPoint]:
    """Weight-domain error of LQ at refined steps ``2**-(FL + offset)``.

    Offsets above zero exceed the 8-bit budget; the results are for analysis
    only and never become a QuantizedModel.
    """
    offsets = [int(e) for e in offsets]
    bad = [e for e in offsets if e not in (0, 1, 2, 3)]
    if bad:
        raise ValueError(f"precision offsets must be in {{0, 1, 2, 3}}, got {bad}")
    grouping = parse_grouping(grouping)
    mats = []
    for t in model.tensors:
        gm = group_matrix(t.values, grouping)
        exps = lq_exponents(gm)
        mats.append((gm, exps, np.ldexp(gm, -exps[:, None])))
    total = model.manifest.num_params
    out = []
    for e in offsets:
        sq = 0.0
        zeros = 0
        for gm, exps, sw in mats:
            q = kernels.lq_quantize(sw, fmt.fl + e)
            sq += float(np.sum((np.ldexp(q, exps[:, None]) - gm) ** 2))
            zeros += int(np.count_nonzero(q == 0))
        out.append(SweepPoint(e, fmt.fl + e, sq / total, zeros / total))
    return out
