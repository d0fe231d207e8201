"""MaxK top-k sparsification and the CBSR (compressed balanced sparse row) format.

A CBSR matrix stores exactly ``k`` entries per row as two N x k blocks:
``sp_data`` (values) and ``sp_index`` (column ids into the original
``dim_origin``-wide row), with indices ascending inside each row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, LengthError, NumericError, PatternError

CBSR_MAGIC = b"CBSR"
CBSR_VERSION = 1
_CBSR_HEADER = struct.Struct("<4sIQIIB")
_INDEX_DTYPES = {1: np.dtype("<u1"), 2: np.dtype("<u2"), 4: np.dtype("<u4")}

DEFAULT_MAX_ITERATIONS = 10


def index_width_for(dim_origin: int) -> int:
    """Smallest of 1, 2, 4 bytes able to hold ``dim_origin - 1``."""
    top = max(dim_origin - 1, 0)
    for width in (1, 2, 4):
        if top < 1 << (8 * width):
            return width
    raise DimensionError(f"dim_origin {dim_origin} does not fit a 4-byte index")


def _resolve_width(index_width, dim_origin: int) -> int:
    if index_width in (None, "auto", 0):
        return index_width_for(dim_origin)
    width = int(index_width)
    if width not in _INDEX_DTYPES:
        raise DimensionError(f"index width must be 1, 2 or 4 bytes, got {index_width}")
    if dim_origin - 1 >= 1 << (8 * width):
        raise DimensionError(f"{width}-byte index cannot address dim_origin={dim_origin}")
    return width


@dataclass(frozen=True, eq=False)
class CbsrMatrix:
    sp_data: np.ndarray
    sp_index: np.ndarray
    dim_origin: int

    def __post_init__(self):
        data = np.ascontiguousarray(self.sp_data)
        index = np.ascontiguousarray(self.sp_index)
        if data.ndim != 2 or data.shape != index.shape:
            raise DimensionError(f"sp_data {data.shape} and sp_index {index.shape} must be equal 2-D shapes")
        if index.dtype not in _INDEX_DTYPES.values():
            raise DimensionError(f"sp_index dtype must be uint8/16/32, got {index.dtype}")
        n, k = data.shape
        if not 1 <= k <= self.dim_origin:
            if not (n == 0 and k == 0):
                raise DimensionError(f"dim_k={k} must lie in [1, dim_origin={self.dim_origin}]")
        object.__setattr__(self, "sp_data", data)
        object.__setattr__(self, "sp_index", index)
        object.__setattr__(self, "dim_origin", int(self.dim_origin))

    @property
    def num_rows(self) -> int:
        return self.sp_data.shape[0]

    @property
    def dim_k(self) -> int:
        return self.sp_data.shape[1]

    @property
    def index_width(self) -> int:
        return self.sp_index.dtype.itemsize

    @property
    def sparsity(self) -> float:
        """Fraction of zeroed features, ``1 - k / dim_origin``."""
        return 1.0 - self.dim_k / self.dim_origin

    def with_data(self, sp_data: np.ndarray) -> CbsrMatrix:
        """Same pattern, new values (e.g. gradients aligned to ``sp_index``)."""
        return CbsrMatrix(sp_data, self.sp_index, self.dim_origin)

    def check_canonical(self) -> None:
        idx = self.sp_index.astype(np.int64)
        if idx.size and idx.max() >= self.dim_origin:
            raise PatternError("sp_index entry >= dim_origin")
        if self.dim_k > 1 and np.any(np.diff(idx, axis=1) <= 0):
            raise PatternError("sp_index rows must be strictly increasing")

    def __eq__(self, other):
        if not isinstance(other, CbsrMatrix):
            return NotImplemented
        return (
            self.dim_origin == other.dim_origin
            and self.sp_index.dtype == other.sp_index.dtype
            and np.array_equal(self.sp_index, other.sp_index)
            and np.array_equal(self.sp_data, other.sp_data)
        )


@dataclass(frozen=True)
class PivotStats:
    iterations: int
    converged_exactly: bool
    fallback_used: bool


@dataclass(frozen=True)
class PivotSummary:
    """Per-row pivot statistics from one :func:`maxk_forward` call."""

    iterations: np.ndarray
    converged_exactly: np.ndarray
    fallback_used: np.ndarray

    @property
    def median_iterations(self) -> float:
        return float(np.median(self.iterations)) if self.iterations.size else 0.0

    @property
    def fallback_count(self) -> int:
        return int(self.fallback_used.sum())

    def row(self, r: int) -> PivotStats:
        return PivotStats(int(self.iterations[r]), bool(self.converged_exactly[r]), bool(self.fallback_used[r]))


def _exact_topk_mask(x: np.ndarray, k: int) -> np.ndarray:
    """Top-k by value per row, ties to the lowest column index."""
    # stable sort on -x keeps equal values in column order
    order = np.argsort(-x, axis=1, kind="stable")[:, :k]
    mask = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def _pivot_bisect(x: np.ndarray, k: int, max_iterations: int):
    """Vectorised bisection of ``(min + max) / 2`` pivots over all rows.

    Returns per-row thresholds, iteration counts and a converged flag. A row
    is converged once exactly ``k`` of its values are strictly greater than
    its pivot.
    """
    n, d = x.shape
    iters = np.zeros(n, dtype=np.int64)
    if k == d:
        return np.full(n, -np.inf), iters, np.ones(n, dtype=bool)
    lo = x.min(axis=1).astype(np.float64)
    hi = x.max(axis=1).astype(np.float64)
    pivot = np.empty(n)
    done = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iterations):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        p = 0.5 * (lo[rows] + hi[rows])
        pivot[rows] = p
        iters[rows] += 1
        count = (x[rows] > p[:, None]).sum(axis=1)
        hit = count == k
        done[rows[hit]] = True
        over = count > k
        lo[rows[over]] = p[over]
        under = count < k
        hi[rows[under]] = p[under]
        # once lo and hi collapse no pivot can separate the row
        stuck = hi[rows] <= lo[rows]
        active[rows[hit | stuck]] = False
    return pivot, iters, done


def pivot_select_row(row, k: int, max_iterations: int = DEFAULT_MAX_ITERATIONS):
    """Threshold for the top-``k`` values of one row.

    Returns ``(threshold, stats)``. On convergence the selected set is
    ``row > threshold``. Otherwise the exact sort-based selection is used and
    ``threshold`` is the k-th largest value; callers that need the exact set
    under ties should use :func:`select_mask`.
    """
    v = np.asarray(row)
    if v.ndim != 1 or not 1 <= k <= v.size:
        raise DimensionError(f"need 1 <= k <= len(row), got k={k}, len={v.size}")
    thr, iters, done = _pivot_bisect(v[None, :], k, max_iterations)
    if done[0]:
        return float(thr[0]), PivotStats(int(iters[0]), True, False)
    kth = float(np.sort(v)[::-1][k - 1])
    return kth, PivotStats(int(iters[0]), False, True)


def select_mask(x: np.ndarray, k: int, max_iterations: int = DEFAULT_MAX_ITERATIONS):
    """Boolean top-k mask per row plus a :class:`PivotSummary`."""
    x = np.asarray(x)
    n, d = x.shape
    thr, iters, done = _pivot_bisect(x, k, max_iterations)
    mask = x > thr[:, None]
    fallback = ~done
    if fallback.any():
        mask[fallback] = _exact_topk_mask(x[fallback], k)
    return mask, PivotSummary(iters, done, fallback)


def maxk_forward(
    x,
    k: int,
    index_width="auto",
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
) -> tuple[CbsrMatrix, PivotSummary]:
    """Keep the ``k`` largest values of every row of ``x`` in CBSR form.

    Selection is by value, not magnitude. The dtype of ``x`` is preserved for
    float64 inputs; anything else is computed in float32.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {x.shape}")
    if x.dtype != np.float64:
        x = x.astype(np.float32)
    n, d = x.shape
    if not 1 <= k <= d:
        raise DimensionError(f"k={k} must lie in [1, dim_origin={d}]")
    if not np.all(np.isfinite(x)):
        raise NumericError("maxk_forward input contains non-finite values")
    width = _resolve_width(index_width, d)
    mask, summary = select_mask(x, k, max_iterations)
    # row-major nonzero order gives ascending columns per row
    cols = np.nonzero(mask)[1].reshape(n, k)
    sp_index = cols.astype(_INDEX_DTYPES[width])
    sp_data = np.take_along_axis(x, cols, axis=1)
    return CbsrMatrix(sp_data, sp_index, d), summary


def densify(c: CbsrMatrix) -> np.ndarray:
    out = np.zeros((c.num_rows, c.dim_origin), dtype=c.sp_data.dtype)
    if c.num_rows:
        np.put_along_axis(out, c.sp_index.astype(np.intp), c.sp_data, axis=1)
    return out


def gather(dense, pattern: CbsrMatrix) -> CbsrMatrix:
    """Values of ``dense`` at ``pattern``'s positions, as a CBSR matrix."""
    dense = np.asarray(dense)
    if dense.shape != (pattern.num_rows, pattern.dim_origin):
        raise DimensionError(f"dense shape {dense.shape} does not match pattern")
    vals = np.take_along_axis(dense, pattern.sp_index.astype(np.intp), axis=1)
    return pattern.with_data(vals)


def maxk_backward(upstream: CbsrMatrix, forward: CbsrMatrix | None = None) -> np.ndarray:
    """Scatter CBSR-aligned gradients back to a dense ``N x dim_origin`` array.

    If ``forward`` is given, ``upstream`` must carry the same pattern.
    """
    if forward is not None:
        if (
            upstream.dim_origin != forward.dim_origin
            or upstream.sp_index.shape != forward.sp_index.shape
            or not np.array_equal(upstream.sp_index, forward.sp_index)
        ):
            raise PatternError("upstream gradient pattern differs from the forward selection")
    return densify(upstream)


# -- binary dump --------------------------------------------------------------


def save_cbsr(c: CbsrMatrix, path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(_CBSR_HEADER.pack(CBSR_MAGIC, CBSR_VERSION, c.num_rows, c.dim_origin, c.dim_k, c.index_width))
        fh.write(c.sp_index.astype(_INDEX_DTYPES[c.index_width], copy=False).tobytes())
        fh.write(c.sp_data.astype("<f4", copy=False).tobytes())


def load_cbsr(path) -> CbsrMatrix:
    data = Path(path).read_bytes()
    if len(data) < _CBSR_HEADER.size:
        raise LengthError(f"{path}: file shorter than header")
    magic, version, n, d, k, width = _CBSR_HEADER.unpack_from(data)
    if magic != CBSR_MAGIC or version != CBSR_VERSION:
        raise FormatError(f"{path}: not a CBSR v{CBSR_VERSION} file")
    if width not in _INDEX_DTYPES:
        raise FormatError(f"{path}: bad index width {width}")
    idx_bytes = n * k * width
    if len(data) != _CBSR_HEADER.size + idx_bytes + n * k * 4:
        raise LengthError(f"{path}: payload size does not match header")
    off = _CBSR_HEADER.size
    sp_index = np.frombuffer(data, _INDEX_DTYPES[width], n * k, off).reshape(n, k).copy()
    sp_data = np.frombuffer(data, "<f4", n * k, off + idx_bytes).reshape(n, k).astype(np.float32)
    return CbsrMatrix(sp_data, sp_index, d)
