"""Adjacency storage in CSR form, file loaders, and aggregator normalization."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BoundsError, FormatError, LengthError

MXKG_MAGIC = b"MXKG"
MXKG_VERSION = 1
_MXKG_HEADER = struct.Struct("<4sIQQ")
_MXKG_RECORD = np.dtype([("src", "<u4"), ("dst", "<u4"), ("weight", "<f4")])


class NormalizationKind(str, enum.Enum):
    NONE = "none"
    MEAN = "mean"  # SAGE mean aggregator, 1/d_i
    SYMMETRIC = "symmetric"  # GCN, 1/sqrt(d_i d_j)


@dataclass(frozen=True, eq=False)
class CsrGraph:
    """Square sparse adjacency matrix with float32 edge weights.

    Arrays are made read-only on construction; a graph is safe to share
    between threads.
    """

    num_nodes: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    edge_val: np.ndarray

    def __post_init__(self):
        row_ptr = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        col_idx = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        edge_val = np.ascontiguousarray(self.edge_val)
        if edge_val.dtype not in (np.float32, np.float64):
            edge_val = edge_val.astype(np.float32)
        for name, arr in (("row_ptr", row_ptr), ("col_idx", col_idx), ("edge_val", edge_val)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "num_nodes", int(self.num_nodes))
        self.validate()

    @property
    def num_edges(self) -> int:
        return int(self.col_idx.shape[0])

    nnz = num_edges

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    @property
    def avgdeg(self) -> float:
        return self.num_edges / self.num_nodes if self.num_nodes else 0.0

    @property
    def edge_rows(self) -> np.ndarray:
        """Row id of every stored edge (length nnz)."""
        return np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
        return self.col_idx[lo:hi], self.edge_val[lo:hi]

    def validate(self) -> None:
        n = self.num_nodes
        rp, ci = self.row_ptr, self.col_idx
        if n < 0 or rp.shape != (n + 1,):
            raise FormatError(f"row_ptr must have {n + 1} entries, got {rp.shape[0]}")
        if rp[0] != 0 or rp[-1] != ci.shape[0] or np.any(np.diff(rp) < 0):
            raise FormatError("row_ptr must be non-decreasing from 0 to nnz")
        if self.edge_val.shape != ci.shape:
            raise FormatError("edge_val and col_idx lengths differ")
        if ci.size:
            if ci.min() < 0 or ci.max() >= n:
                raise BoundsError(f"column index outside [0, {n})")
            # strictly increasing inside each row: every step up except at row starts
            steps = np.diff(ci)
            starts = np.zeros(ci.size, dtype=bool)
            starts[rp[1:-1][rp[1:-1] < ci.size]] = True
            if np.any((steps <= 0) & ~starts[1:]):
                raise FormatError("column indices must be strictly increasing within rows")
        if not np.all(np.isfinite(self.edge_val)):
            raise FormatError("edge values must be finite")

    def astype(self, dtype) -> CsrGraph:
        return CsrGraph(self.num_nodes, self.row_ptr, self.col_idx, self.edge_val.astype(dtype))

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        out = np.zeros((self.num_nodes, self.num_nodes), dtype=dtype)
        out[self.edge_rows, self.col_idx] = self.edge_val
        return out

    def __eq__(self, other):
        if not isinstance(other, CsrGraph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.edge_val, other.edge_val)
        )

    def __repr__(self):
        return f"CsrGraph(num_nodes={self.num_nodes}, num_edges={self.num_edges})"


def from_coo(num_nodes: int, rows, cols, vals=None, dtype=np.float32) -> CsrGraph:
    """Build a canonical CSR graph; duplicate (row, col) pairs are summed."""
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    if rows.shape != cols.shape:
        raise FormatError("rows and cols differ in length")
    if vals is None:
        vals = np.ones(rows.shape, dtype=dtype)
    vals = np.asarray(vals, dtype=dtype).ravel()
    if rows.size and (min(rows.min(), cols.min()) < 0 or max(rows.max(), cols.max()) >= num_nodes):
        raise BoundsError(f"node index outside [0, {num_nodes})")
    key = rows * max(num_nodes, 1) + cols
    order = np.argsort(key, kind="stable")
    key, vals = key[order], vals[order]
    uniq, first = np.unique(key, return_index=True)
    if uniq.size != key.size:
        # sum duplicates in input order for a deterministic result
        vals = np.add.reduceat(vals, first).astype(dtype) if key.size else vals
    else:
        vals = vals.copy()
    urows = uniq // max(num_nodes, 1)
    ucols = uniq % max(num_nodes, 1)
    row_ptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(urows, minlength=num_nodes), out=row_ptr[1:])
    return CsrGraph(num_nodes, row_ptr, ucols, vals)


def identity(num_nodes: int, dtype=np.float32) -> CsrGraph:
    idx = np.arange(num_nodes)
    return from_coo(num_nodes, idx, idx, dtype=dtype)


def from_dense(a: np.ndarray, dtype=np.float32) -> CsrGraph:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise FormatError("adjacency must be square")
    r, c = np.nonzero(a)
    return from_coo(a.shape[0], r, c, a[r, c], dtype=dtype)


def add_self_loops(g: CsrGraph, value: float = 1.0) -> CsrGraph:
    """Return ``g`` with every missing diagonal entry set to ``value``."""
    rows = g.edge_rows
    has_loop = np.zeros(g.num_nodes, dtype=bool)
    has_loop[rows[rows == g.col_idx]] = True
    missing = np.flatnonzero(~has_loop)
    return from_coo(
        g.num_nodes,
        np.concatenate([rows, missing]),
        np.concatenate([g.col_idx, missing]),
        np.concatenate([g.edge_val, np.full(missing.size, value, dtype=g.edge_val.dtype)]),
        dtype=g.edge_val.dtype,
    )


def normalize(g: CsrGraph, kind: NormalizationKind | str) -> CsrGraph:
    """Rewrite edge weights for an aggregator.

    Degrees are stored-edge counts per row. For ``symmetric`` a node with an
    empty row that still appears as a column uses degree 1.
    """
    kind = NormalizationKind(kind)
    if kind is NormalizationKind.NONE:
        return CsrGraph(g.num_nodes, g.row_ptr, g.col_idx, g.edge_val.copy())
    deg = g.degrees.astype(np.float64)
    rows = g.edge_rows
    if kind is NormalizationKind.MEAN:
        vals = 1.0 / deg[rows]
    else:
        d = np.maximum(deg, 1.0)
        vals = 1.0 / np.sqrt(d[rows] * d[g.col_idx])
    return CsrGraph(g.num_nodes, g.row_ptr, g.col_idx, vals.astype(g.edge_val.dtype))


class TransposeView:
    """Read-only handle presenting the CSR arrays of ``A`` as ``A^T`` in CSC form.

    Column ``j`` of ``A^T`` is row ``j`` of ``A``; no arrays are copied.
    """

    __slots__ = ("base",)

    def __init__(self, base: CsrGraph):
        self.base = base

    @property
    def shape(self) -> tuple[int, int]:
        return (self.base.num_nodes, self.base.num_nodes)

    @property
    def col_ptr(self) -> np.ndarray:
        return self.base.row_ptr

    @property
    def row_idx(self) -> np.ndarray:
        return self.base.col_idx

    @property
    def values(self) -> np.ndarray:
        return self.base.edge_val

    def column(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Row ids and values of the nonzeros in column ``j``."""
        return self.base.row(j)

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        n = self.base.num_nodes
        out = np.zeros((n, n), dtype=dtype)
        out[self.base.col_idx, self.base.edge_rows] = self.base.edge_val
        return out


def transpose_view(g: CsrGraph) -> TransposeView:
    return TransposeView(g)


# -- Matrix Market -----------------------------------------------------------


def load_matrix_market(path) -> CsrGraph:
    """Read a coordinate Matrix Market file (1-based indices)."""
    path = Path(path)
    with path.open("r", encoding="ascii", errors="strict") as fh:
        lines = iter(enumerate(fh, start=1))
        try:
            lineno, banner = next(lines)
        except StopIteration:
            raise FormatError("empty file", 1) from None
        parts = banner.split()
        if len(parts) != 5 or parts[0].lower() != "%%matrixmarket":
            raise FormatError("missing %%MatrixMarket banner", lineno)
        obj, fmt, field, symmetry = (p.lower() for p in parts[1:])
        if obj != "matrix" or fmt != "coordinate":
            raise FormatError(f"unsupported layout {obj} {fmt}", lineno)
        if field not in ("pattern", "real", "integer", "double"):
            raise FormatError(f"unsupported field {field!r}", lineno)
        if symmetry not in ("general", "symmetric", "skew-symmetric"):
            raise FormatError(f"unsupported symmetry {symmetry!r}", lineno)

        size = None
        for lineno, line in lines:
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            try:
                size = [int(t) for t in s.split()]
            except ValueError:
                raise FormatError(f"bad size line {s!r}", lineno) from None
            break
        if size is None or len(size) != 3:
            raise FormatError("missing size line", lineno)
        nrows, ncols, declared = size
        if nrows != ncols:
            raise FormatError(f"adjacency must be square, got {nrows}x{ncols}", lineno)

        want = 2 if field == "pattern" else 3
        rows = np.empty(declared, dtype=np.int64)
        cols = np.empty(declared, dtype=np.int64)
        vals = np.ones(declared, dtype=np.float64)
        count = 0
        for lineno, line in lines:
            toks = line.split()
            if not toks or toks[0].startswith("%"):
                continue
            if len(toks) != want:
                raise FormatError(f"expected {want} fields, got {len(toks)}", lineno)
            if count >= declared:
                raise FormatError(f"more than {declared} entries", lineno)
            try:
                i, j = int(toks[0]), int(toks[1])
                if want == 3:
                    vals[count] = float(toks[2])
            except ValueError:
                raise FormatError(f"cannot parse entry {line.strip()!r}", lineno) from None
            if not (1 <= i <= nrows and 1 <= j <= ncols):
                raise BoundsError(f"line {lineno}: index ({i}, {j}) outside declared {nrows}x{ncols}")
            rows[count], cols[count] = i - 1, j - 1
            count += 1
        if count != declared:
            raise FormatError(f"expected {declared} entries, found {count}", lineno)

    if symmetry != "general":
        off = rows != cols
        sign = -1.0 if symmetry == "skew-symmetric" else 1.0
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, sign * vals[off]]),
        )
    return from_coo(nrows, rows, cols, vals)


def save_matrix_market(g: CsrGraph, path) -> None:
    """Write ``g`` as a general real coordinate file."""
    rows = g.edge_rows + 1
    cols = g.col_idx + 1
    with Path(path).open("w", encoding="ascii", newline="\n") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{g.num_nodes} {g.num_nodes} {g.num_edges}\n")
        fh.writelines(
            f"{i} {j} {float(v)!r}\n" for i, j, v in zip(rows.tolist(), cols.tolist(), g.edge_val.tolist())
        )


# -- binary edge list ---------------------------------------------------------


def save_edge_list_binary(g: CsrGraph, path) -> None:
    rec = np.empty(g.num_edges, dtype=_MXKG_RECORD)
    rec["src"] = g.edge_rows
    rec["dst"] = g.col_idx
    rec["weight"] = g.edge_val
    with Path(path).open("wb") as fh:
        fh.write(_MXKG_HEADER.pack(MXKG_MAGIC, MXKG_VERSION, g.num_nodes, g.num_edges))
        fh.write(rec.tobytes())


def load_edge_list_binary(path) -> CsrGraph:
    data = Path(path).read_bytes()
    if len(data) < _MXKG_HEADER.size:
        raise LengthError(f"{path}: file shorter than {_MXKG_HEADER.size}-byte header")
    magic, version, n, nnz = _MXKG_HEADER.unpack_from(data)
    if magic != MXKG_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MXKG_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = len(data) - _MXKG_HEADER.size
    if body != nnz * _MXKG_RECORD.itemsize:
        raise LengthError(f"{path}: header declares {nnz} edges, body holds {body} bytes")
    rec = np.frombuffer(data, dtype=_MXKG_RECORD, offset=_MXKG_HEADER.size)
    return from_coo(n, rec["src"], rec["dst"], rec["weight"])


def load_graph(path) -> CsrGraph:
    """Dispatch on content: MXKG binary or Matrix Market text."""
    with Path(path).open("rb") as fh:
        head = fh.read(4)
    if head == MXKG_MAGIC:
        return load_edge_list_binary(path)
    return load_matrix_market(path)
