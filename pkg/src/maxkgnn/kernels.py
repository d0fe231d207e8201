"""Aggregation kernels over a CSR adjacency.

``spgemm_forward`` is the row-wise product of a CSR adjacency with a CBSR
feature matrix, producing a dense output. Each edge group accumulates into a
private ``dim_origin``-long scratch buffer (the shared-memory buffer on a
GPU) which is then added into its output row.

``sspmm_backward`` is the outer-product form of ``A^T @ dX`` sampled at the
forward sparsity pattern: row ``i`` of ``dX`` is prefetched once, then every
edge ``(i, j)`` adds ``e_ij * dX[i, sp_index[j]]`` into ``sp_data[j]``.

Both kernels run either ``deterministic`` (groups in plan order, one thread)
or ``parallel`` (chunks of groups on a thread pool; output updates go through
striped locks standing in for atomic adds).
"""

from __future__ import annotations

import enum
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cbsr import CbsrMatrix
from .errors import BoundsError, DimensionError
from .graph import CsrGraph, TransposeView
from .partition import EdgeGroupPlan

VALUE_BYTES = 4  # kernels model float32 storage
DEFAULT_THREADS = 4
_CHUNK_ELEMS = 1 << 22
_LOCK_STRIPES = 64


class ExecMode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    PARALLEL = "parallel"

    @classmethod
    def parse(cls, value) -> ExecMode:
        if isinstance(value, cls):
            return value
        aliases = {"det": cls.DETERMINISTIC, "par": cls.PARALLEL}
        return aliases.get(value) or cls(value)


@dataclass
class TrafficCounter:
    """Simulated global-memory traffic, ignoring caches.

    One counter is kept per task and merged at the end, so no counter is
    shared between threads.
    """

    read_bytes: int = 0
    write_bytes: int = 0
    atomic_ops: int = 0

    def merge(self, other: TrafficCounter) -> TrafficCounter:
        self.read_bytes += other.read_bytes
        self.write_bytes += other.write_bytes
        self.atomic_ops += other.atomic_ops
        return self


class _StripedLocks:
    def __init__(self, n=_LOCK_STRIPES):
        self._locks = [threading.Lock() for _ in range(n)]

    def __getitem__(self, row):
        return self._locks[row % len(self._locks)]


def _unwrap(a) -> CsrGraph:
    return a.base if isinstance(a, TransposeView) else a


def _group_chunks(plan: EdgeGroupPlan, width: int, pieces: int = 1):
    """Contiguous ``[g0, g1)`` group ranges bounded by scratch size."""
    n = len(plan)
    if n == 0:
        return []
    per = max(1, _CHUNK_ELEMS // max(width, 1))
    if pieces > 1:
        per = min(per, max(1, -(-n // pieces)))
    return [(g0, min(n, g0 + per)) for g0 in range(0, n, per)]


def _run(tasks, mode: ExecMode, threads: int | None):
    if mode is ExecMode.PARALLEL and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads or DEFAULT_THREADS) as pool:
            return list(pool.map(lambda t: t(), tasks))
    return [t() for t in tasks]


def _result_dtype(*arrays):
    dt = np.result_type(*arrays)
    return np.float64 if dt == np.float64 else np.float32


def spgemm_forward(
    a: CsrGraph,
    xs: CbsrMatrix,
    plan: EdgeGroupPlan,
    mode: ExecMode | str = ExecMode.DETERMINISTIC,
    *,
    threads: int | None = None,
    counter: TrafficCounter | None = None,
) -> np.ndarray:
    """Dense ``A @ densify(xs)`` computed edge group by edge group."""
    mode = ExecMode.parse(mode)
    a = _unwrap(a)
    if xs.num_rows != a.num_nodes:
        raise DimensionError(f"xs has {xs.num_rows} rows, graph has {a.num_nodes} nodes")
    plan.check_against(a)
    d, k = xs.dim_origin, xs.dim_k
    dtype = _result_dtype(xs.sp_data)
    out = np.zeros((a.num_nodes, d), dtype=dtype)
    sp_data = xs.sp_data.astype(dtype, copy=False)
    sp_index = xs.sp_index.astype(np.int64)
    edge_val = a.edge_val.astype(dtype, copy=False)
    locks = _StripedLocks() if mode is ExecMode.PARALLEL else None

    def task(g0, g1):
        local = TrafficCounter()
        e0 = plan.edge_start[g0]
        e1 = plan.edge_start[g1 - 1] + plan.edge_count[g1 - 1]
        cols = a.col_idx[e0:e1]
        gid = np.repeat(np.arange(g1 - g0), plan.edge_count[g0:g1])
        # Buf_w[sp_index[j, :]] += e_ij * sp_data[j, :]
        vals = edge_val[e0:e1, None] * sp_data[cols]
        slots = gid[:, None] * d + sp_index[cols]
        bufs = np.zeros((g1 - g0) * d, dtype=dtype)
        np.add.at(bufs, slots.ravel(), vals.ravel())
        bufs = bufs.reshape(g1 - g0, d)
        local.read_bytes += int(e1 - e0) * k * (VALUE_BYTES + xs.index_width)
        local.atomic_ops += (g1 - g0) * d
        rows = plan.rows[g0:g1]
        if locks is None:
            np.add.at(out, rows, bufs)
        else:
            for r, buf in zip(rows.tolist(), bufs):
                with locks[r]:
                    out[r] += buf
        return local

    pieces = (threads or DEFAULT_THREADS) if mode is ExecMode.PARALLEL else 1
    chunks = _group_chunks(plan, d, pieces)
    results = _run([lambda c=c: task(*c) for c in chunks], mode, threads)
    if counter is not None:
        for r in results:
            counter.merge(r)
    return out


def _pattern_index(pattern, n: int, d: int) -> tuple[np.ndarray, int]:
    if isinstance(pattern, CbsrMatrix):
        if pattern.dim_origin != d:
            raise DimensionError(f"pattern dim_origin {pattern.dim_origin} != {d}")
        idx, width = pattern.sp_index, pattern.index_width
    else:
        idx = np.asarray(pattern)
        width = idx.dtype.itemsize if idx.dtype.kind == "u" else 4
    if idx.ndim != 2 or idx.shape[0] != n:
        raise DimensionError(f"pattern shape {idx.shape} does not match {n} rows")
    idx = idx.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= d):
        raise BoundsError(f"pattern index outside [0, dim_origin={d})")
    return idx, width


def sspmm_backward(
    a: CsrGraph | TransposeView,
    dxl,
    pattern,
    plan: EdgeGroupPlan,
    mode: ExecMode | str = ExecMode.DETERMINISTIC,
    *,
    threads: int | None = None,
    counter: TrafficCounter | None = None,
) -> np.ndarray:
    """``(A^T @ dxl)`` sampled at ``pattern``, returned as ``N x dim_k`` values.

    ``a`` is the forward adjacency (or its transpose view; both name the same
    storage). ``pattern`` is the forward ``sp_index`` or its CBSR matrix.
    """
    mode = ExecMode.parse(mode)
    a = _unwrap(a)
    dxl = np.asarray(dxl)
    if dxl.ndim != 2 or dxl.shape[0] != a.num_nodes:
        raise DimensionError(f"dxl shape {dxl.shape} does not match {a.num_nodes} nodes")
    n, d = dxl.shape
    idx, width = _pattern_index(pattern, n, d)
    k = idx.shape[1]
    plan.check_against(a)
    dtype = _result_dtype(dxl)
    # stage 1: each dense gradient row is fetched once into its buffer
    buf = dxl.astype(dtype, copy=True)
    edge_val = a.edge_val.astype(dtype, copy=False)
    out = np.zeros((n, k), dtype=dtype)
    locks = _StripedLocks() if mode is ExecMode.PARALLEL else None

    def task(g0, g1):
        local = TrafficCounter()
        e0 = plan.edge_start[g0]
        e1 = plan.edge_start[g1 - 1] + plan.edge_count[g1 - 1]
        src = np.repeat(plan.rows[g0:g1], plan.edge_count[g0:g1])
        dst = a.col_idx[e0:e1]
        # sp_data[j, :] += e_ij * Buf_i[sp_index[j, :]]
        vals = edge_val[e0:e1, None] * buf[src[:, None], idx[dst]]
        ne = int(e1 - e0)
        local.read_bytes += ne * k * (width + VALUE_BYTES)
        local.write_bytes += ne * k * VALUE_BYTES
        local.atomic_ops += ne * k
        if locks is None:
            np.add.at(out, dst, vals)
        else:
            for j, v in zip(dst.tolist(), vals):
                with locks[j]:
                    out[j] += v
        return local

    pieces = (threads or DEFAULT_THREADS) if mode is ExecMode.PARALLEL else 1
    chunks = _group_chunks(plan, k, pieces)
    results = _run([lambda c=c: task(*c) for c in chunks], mode, threads)
    if counter is not None:
        counter.read_bytes += n * d * VALUE_BYTES
        for r in results:
            counter.merge(r)
    return out


def dense_spmm(
    a: CsrGraph,
    x,
    *,
    plan: EdgeGroupPlan | None = None,
    counter: TrafficCounter | None = None,
) -> np.ndarray:
    """Plain CSR x dense product, accumulating each row in ascending column order.

    Doubles as the reference oracle and as the SpMM baseline for traffic
    counts: every edge reads a full ``dim``-wide feature row. Output atomics
    are counted per edge group when ``plan`` is given, else per nonempty row.
    """
    a = _unwrap(a)
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != a.num_nodes:
        raise DimensionError(f"x has shape {x.shape}, graph has {a.num_nodes} nodes")
    dtype = _result_dtype(x)
    out = np.zeros((a.num_nodes, x.shape[1]), dtype=dtype)
    if a.num_edges:
        vals = a.edge_val.astype(dtype, copy=False)[:, None] * x.astype(dtype, copy=False)[a.col_idx]
        np.add.at(out, a.edge_rows, vals)
    if counter is not None:
        if plan is not None:
            plan.check_against(a)
            groups = len(plan)
        else:
            groups = int(np.count_nonzero(a.degrees))
        counter.read_bytes += a.num_edges * x.shape[1] * VALUE_BYTES
        counter.atomic_ops += groups * x.shape[1]
    return out
