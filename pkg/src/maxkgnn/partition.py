"""Edge-group partitioning and warp-lane packing for the aggregation kernels.

Each adjacency row is cut into runs of at most ``w`` consecutive edges
(edge groups). Groups are then packed into 32-lane warps: when
``dim_k <= 16`` a warp hosts ``32 // dim_k`` groups side by side, otherwise
each warp owns one group and loops over ``dim_k`` in 32-lane strides.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, LengthError, ParameterError, PlanError
from .graph import CsrGraph

WARP_SIZE = 32
DEFAULT_W = 32

EGPL_MAGIC = b"EGPL"
EGPL_VERSION = 1
_EGPL_HEADER = struct.Struct("<4sIIIQ")
_EGPL_RECORD = np.dtype([("row", "<u4"), ("edge_start", "<u8"), ("edge_count", "<u4")])


@dataclass(frozen=True)
class EdgeGroup:
    row: int
    edge_start: int
    edge_count: int


@dataclass(frozen=True, eq=False)
class EdgeGroupPlan:
    """Edge groups in row order, stored column-wise.

    ``warp_assignments`` is a ``(G, 3)`` array of ``(warp_id, lane_start,
    lane_stop)``. ``ops`` counts the elementary steps taken by
    :func:`build_plan` (rows visited plus groups emitted).
    """

    rows: np.ndarray
    edge_start: np.ndarray
    edge_count: np.ndarray
    w: int
    dim_k: int
    num_nodes: int
    num_edges: int
    ops: int = field(default=0, compare=False)

    def __post_init__(self):
        for name in ("rows", "edge_start", "edge_count"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return int(self.rows.shape[0])

    @property
    def num_groups(self) -> int:
        return len(self)

    @property
    def groups_per_warp(self) -> int:
        return WARP_SIZE // self.dim_k if self.dim_k <= WARP_SIZE // 2 else 1

    @property
    def lane_iterations(self) -> int:
        """Passes a warp makes over one group's ``dim_k`` features."""
        return -(-self.dim_k // WARP_SIZE) if self.dim_k > WARP_SIZE // 2 else 1

    @property
    def warp_assignments(self) -> np.ndarray:
        g = np.arange(len(self), dtype=np.int64)
        per = self.groups_per_warp
        out = np.empty((len(self), 3), dtype=np.int64)
        out[:, 0] = g // per
        if self.dim_k <= WARP_SIZE // 2:
            out[:, 1] = (g % per) * self.dim_k
            out[:, 2] = out[:, 1] + self.dim_k
        else:
            out[:, 1] = 0
            out[:, 2] = WARP_SIZE
        return out

    @property
    def num_warps(self) -> int:
        return -(-len(self) // self.groups_per_warp)

    def group(self, i: int) -> EdgeGroup:
        return EdgeGroup(int(self.rows[i]), int(self.edge_start[i]), int(self.edge_count[i]))

    def __iter__(self):
        return (self.group(i) for i in range(len(self)))

    def edge_group_ids(self) -> np.ndarray:
        """Group id of every edge, in CSR edge order."""
        return np.repeat(np.arange(len(self), dtype=np.int64), self.edge_count)

    def check_against(self, g: CsrGraph) -> None:
        """Raise :class:`PlanError` unless the groups tile exactly ``g``'s edges."""
        if self.num_nodes != g.num_nodes or self.num_edges != g.num_edges:
            raise PlanError(
                f"plan built for N={self.num_nodes}, nnz={self.num_edges}; "
                f"graph has N={g.num_nodes}, nnz={g.num_edges}"
            )
        if len(self) == 0:
            if g.num_edges:
                raise PlanError("plan has no groups but graph has edges")
            return
        if np.any(self.edge_count < 1) or np.any(self.edge_count > self.w):
            raise PlanError("group sizes must lie in [1, w]")
        ends = self.edge_start + self.edge_count
        if self.edge_start[0] != 0 or ends[-1] != g.num_edges or np.any(self.edge_start[1:] != ends[:-1]):
            raise PlanError("groups do not tile [0, nnz) contiguously")
        rp = g.row_ptr
        if np.any(self.rows < 0) or np.any(self.rows >= g.num_nodes):
            raise PlanError("group row out of range")
        if np.any(self.edge_start < rp[self.rows]) or np.any(ends > rp[self.rows + 1]):
            raise PlanError("a group crosses its row's CSR slice")

    def to_bytes(self) -> bytes:
        rec = np.empty(len(self), dtype=_EGPL_RECORD)
        rec["row"] = self.rows
        rec["edge_start"] = self.edge_start
        rec["edge_count"] = self.edge_count
        return _EGPL_HEADER.pack(EGPL_MAGIC, EGPL_VERSION, self.w, self.dim_k, len(self)) + rec.tobytes()


def build_plan(g: CsrGraph, dim_k: int, w: int = DEFAULT_W) -> EdgeGroupPlan:
    """Split every row into ``ceil(degree / w)`` groups of at most ``w`` edges.

    One pass over the rows; trailing groups may be short, no padding is added.
    """
    if w < 1:
        raise ParameterError(f"w must be >= 1, got {w}")
    if dim_k < 1:
        raise ParameterError(f"dim_k must be >= 1, got {dim_k}")
    rows: list[int] = []
    starts: list[int] = []
    counts: list[int] = []
    ops = 0
    rp = g.row_ptr.tolist()
    for i in range(g.num_nodes):
        ops += 1
        lo, hi = rp[i], rp[i + 1]
        for s in range(lo, hi, w):
            ops += 1
            rows.append(i)
            starts.append(s)
            counts.append(min(w, hi - s))
    return EdgeGroupPlan(
        np.array(rows, dtype=np.int64),
        np.array(starts, dtype=np.int64),
        np.array(counts, dtype=np.int64),
        w=w,
        dim_k=dim_k,
        num_nodes=g.num_nodes,
        num_edges=g.num_edges,
        ops=ops,
    )


@dataclass(frozen=True)
class PlanStats:
    group_count: int
    max_group_size: int
    min_group_size: int
    warps_used: int
    imbalance_ratio: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def plan_stats(p: EdgeGroupPlan) -> PlanStats:
    """Summary figures; imbalance is max group size over mean group size."""
    if len(p) == 0:
        return PlanStats(0, 0, 0, 0, 1.0)
    sizes = p.edge_count
    return PlanStats(
        group_count=len(p),
        max_group_size=int(sizes.max()),
        min_group_size=int(sizes.min()),
        warps_used=p.num_warps,
        imbalance_ratio=float(sizes.max() / sizes.mean()),
    )


def save_plan(p: EdgeGroupPlan, path) -> None:
    Path(path).write_bytes(p.to_bytes())


def load_plan(path, g: CsrGraph | None = None) -> EdgeGroupPlan:
    """Read an EGPL file.

    The file does not record N or nnz; they are taken from ``g`` when given
    (and the plan is checked against it), otherwise inferred from the records.
    """
    data = Path(path).read_bytes()
    if len(data) < _EGPL_HEADER.size:
        raise LengthError(f"{path}: file shorter than header")
    magic, version, w, dim_k, count = _EGPL_HEADER.unpack_from(data)
    if magic != EGPL_MAGIC or version != EGPL_VERSION:
        raise FormatError(f"{path}: not an EGPL v{EGPL_VERSION} file")
    if len(data) != _EGPL_HEADER.size + count * _EGPL_RECORD.itemsize:
        raise LengthError(f"{path}: header declares {count} groups, payload size differs")
    rec = np.frombuffer(data, _EGPL_RECORD, count, _EGPL_HEADER.size)
    rows = rec["row"].astype(np.int64)
    starts = rec["edge_start"].astype(np.int64)
    counts = rec["edge_count"].astype(np.int64)
    if g is not None:
        n, nnz = g.num_nodes, g.num_edges
    else:
        n = int(rows.max()) + 1 if count else 0
        nnz = int((starts + counts).max()) if count else 0
    plan = EdgeGroupPlan(rows, starts, counts, w=w, dim_k=dim_k, num_nodes=n, num_edges=nnz)
    if g is not None:
        plan.check_against(g)
    return plan
