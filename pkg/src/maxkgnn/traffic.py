"""Closed-form global-memory traffic for SpMM, CBSR SpGEMM and SSpMM.

All counts are pre-cache: every byte a kernel's access pattern requests from
global memory is counted once per request. Feature values are 4 bytes; index
entries are ``index_bytes`` wide. Adjacency arrays are not counted (they are
read identically by every kernel).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .errors import ParameterError
from .kernels import VALUE_BYTES, TrafficCounter
from .partition import DEFAULT_W

KERNELS = ("spmm", "spgemm", "sspmm")
_INDEX_BYTES = (0, 1, 2, 4)  # 0 = index cost ignored (bound case)

# Published graph sizes (nodes, edges) usable as --dataset presets.
GRAPH_STATS = {
    "am": (881_680, 5_668_682),
    "amazon0505": (410_236, 4_878_874),
    "amazon0601": (403_394, 5_478_357),
    "artist": (50_515, 1_638_396),
    "citation": (2_927_963, 30_387_995),
    "collab": (235_868, 2_358_104),
    "com-amazon": (334_863, 1_851_744),
    "DD": (334_925, 1_686_092),
    "ddi": (4_267, 2_135_822),
    "Flickr": (89_250, 989_006),
    "ogbn-arxiv": (169_343, 1_166_243),
    "ogbn-products": (2_449_029, 123_718_280),
    "ogbn-proteins": (132_534, 79_122_504),
    "OVCAR-8H": (1_889_542, 3_946_402),
    "ppa": (576_289, 42_463_862),
    "PROTEINS_full": (43_466, 162_088),
    "pubmed": (19_717, 99_203),
    "ppi": (56_944, 818_716),
    "Reddit": (232_965, 114_615_891),
    "SW-620H": (1_888_584, 3_944_206),
    "TWITTER-Partial": (580_768, 1_435_116),
    "Yeast": (1_710_902, 3_636_546),
    "Yelp": (716_847, 13_954_819),
    "youtube": (1_138_499, 5_980_886),
}

# Profiler-measured total traffic (GB) on Reddit with dim_origin=256, dim_k=32.
# Includes cache effects, so the model is only expected to match in order.
PROFILED_REDDIT_GB = {"spmm": 138.05, "spgemm": 13.13, "sspmm": 14.02}

CACHE_CAVEAT = (
    "model counts pre-cache global-memory requests; profiled figures include "
    "L1/L2 cache effects and agree only in order of magnitude"
)


@dataclass(frozen=True)
class TrafficParams:
    num_nodes: int
    nnz: int
    dim_origin: int
    dim_k: int
    index_bytes: int = 1
    w: int = DEFAULT_W

    def __post_init__(self):
        if self.index_bytes not in _INDEX_BYTES:
            raise ParameterError(f"index_bytes must be one of {_INDEX_BYTES}, got {self.index_bytes}")
        for name in ("num_nodes", "nnz", "dim_origin", "dim_k", "w"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.w < 1:
            raise ParameterError("w must be >= 1")
        if self.dim_k > self.dim_origin:
            raise ParameterError("dim_k cannot exceed dim_origin")

    @property
    def avgdeg(self) -> float:
        return self.nnz / self.num_nodes if self.num_nodes else 0.0


@dataclass(frozen=True)
class TrafficReport:
    kernel: str
    read_bytes: int
    write_bytes: int
    atomic_ops: float
    reduction_vs_spmm_pct: float
    params: TrafficParams
    write_reduction_pct: float | None = None
    source: str = "model"
    notes: tuple = field(default=())

    @property
    def total_bytes(self) -> int:
        return self.read_bytes + self.write_bytes

    @property
    def no_benefit(self) -> bool:
        return self.reduction_vs_spmm_pct <= 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("params")
        d.update(asdict(self.params))
        d["total_bytes"] = self.total_bytes
        d["no_benefit"] = self.no_benefit
        d["notes"] = "; ".join(self.notes)
        return d


def _params(num_nodes, nnz, dim_origin, dim_k, index_bytes, w=DEFAULT_W) -> TrafficParams:
    return TrafficParams(num_nodes, nnz, dim_origin, dim_k, index_bytes, w)


def _atomics(p: TrafficParams, group_count: int | None) -> float:
    # group-level buffers flush dim_origin atomics each; without a plan,
    # nnz / w groups are assumed (N * dim_origin * avgdeg / w)
    if group_count is not None:
        return group_count * p.dim_origin
    return p.num_nodes * p.dim_origin * (p.avgdeg / p.w)


def read_reduction_pct(dim_origin: int, dim_k: int, index_bytes: int) -> float:
    """Percent of SpMM feature reads saved by CBSR fetching."""
    spmm = VALUE_BYTES * dim_origin
    return 100.0 * (spmm - (VALUE_BYTES + index_bytes) * dim_k) / spmm


def traffic_spmm(num_nodes, nnz, dim_origin, w=DEFAULT_W, *, group_count=None) -> TrafficReport:
    p = _params(num_nodes, nnz, dim_origin, dim_origin, 0, w)
    return TrafficReport(
        "spmm",
        read_bytes=VALUE_BYTES * dim_origin * nnz,
        write_bytes=0,
        atomic_ops=_atomics(p, group_count),
        reduction_vs_spmm_pct=0.0,
        params=p,
    )


def traffic_spgemm_forward(
    num_nodes, nnz, dim_origin, dim_k, index_bytes=1, w=DEFAULT_W, *, group_count=None
) -> TrafficReport:
    """Each edge fetches one CBSR row: ``(4 + index_bytes) * dim_k`` bytes."""
    p = _params(num_nodes, nnz, dim_origin, dim_k, index_bytes, w)
    return TrafficReport(
        "spgemm",
        read_bytes=(VALUE_BYTES + index_bytes) * dim_k * nnz,
        write_bytes=0,
        atomic_ops=_atomics(p, group_count),
        reduction_vs_spmm_pct=read_reduction_pct(dim_origin, dim_k, index_bytes),
        params=p,
    )


def traffic_sspmm_backward(num_nodes, nnz, dim_origin, dim_k, index_bytes=1, w=DEFAULT_W) -> TrafficReport:
    """Dense rows prefetched once, then per edge one index row, one data row read and written.

    Savings are measured against a naive outer-product SpMM that reads the
    same dense rows plus a full ``dim_origin`` row per edge and writes one.
    """
    p = _params(num_nodes, nnz, dim_origin, dim_k, index_bytes, w)
    prefetch = VALUE_BYTES * num_nodes * dim_origin
    read = prefetch + (VALUE_BYTES + index_bytes) * dim_k * nnz
    write = VALUE_BYTES * dim_k * nnz
    naive_read = prefetch + VALUE_BYTES * dim_origin * nnz
    naive_write = VALUE_BYTES * dim_origin * nnz
    return TrafficReport(
        "sspmm",
        read_bytes=read,
        write_bytes=write,
        atomic_ops=dim_k * nnz,
        reduction_vs_spmm_pct=100.0 * (naive_read - read) / naive_read if naive_read else 0.0,
        write_reduction_pct=100.0 * (naive_write - write) / naive_write if naive_write else 0.0,
        params=p,
    )


def sspmm_reduction_bytes(nnz, dim_origin, dim_k, index_bytes=1) -> tuple[int, int]:
    """(read, write) bytes saved against the naive outer-product SpMM."""
    return (
        (VALUE_BYTES * dim_origin - (VALUE_BYTES + index_bytes) * dim_k) * nnz,
        (VALUE_BYTES * dim_origin - VALUE_BYTES * dim_k) * nnz,
    )


def predict(kernel: str, params: TrafficParams, *, group_count=None) -> TrafficReport:
    p = params
    if kernel == "spmm":
        return traffic_spmm(p.num_nodes, p.nnz, p.dim_origin, p.w, group_count=group_count)
    if kernel == "spgemm":
        return traffic_spgemm_forward(
            p.num_nodes, p.nnz, p.dim_origin, p.dim_k, p.index_bytes, p.w, group_count=group_count
        )
    if kernel == "sspmm":
        return traffic_sspmm_backward(p.num_nodes, p.nnz, p.dim_origin, p.dim_k, p.index_bytes, p.w)
    raise ParameterError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


def measured_traffic(kernel: str, counter: TrafficCounter, params: TrafficParams) -> TrafficReport:
    """Wrap an instrumented kernel run's counter as a report."""
    model = predict(kernel, params)
    if kernel == "sspmm":
        naive_read = VALUE_BYTES * params.num_nodes * params.dim_origin + VALUE_BYTES * params.dim_origin * params.nnz
    else:
        naive_read = VALUE_BYTES * params.dim_origin * params.nnz
    # with no edges the ratio is 0/0; the per-entry model value still applies
    red = 100.0 * (naive_read - counter.read_bytes) / naive_read if naive_read else model.reduction_vs_spmm_pct
    return TrafficReport(
        kernel,
        read_bytes=counter.read_bytes,
        write_bytes=counter.write_bytes,
        atomic_ops=counter.atomic_ops,
        reduction_vs_spmm_pct=red,
        write_reduction_pct=model.write_reduction_pct,
        params=params,
        source="measured",
    )


def reddit_consistency(dim_origin=256, dim_k=32, index_bytes=1) -> list[dict]:
    """Model vs. profiled traffic on the Reddit graph, in GB (1e9 bytes)."""
    n, nnz = GRAPH_STATS["Reddit"]
    rows = []
    for rep in (
        traffic_spmm(n, nnz, dim_origin),
        traffic_spgemm_forward(n, nnz, dim_origin, dim_k, index_bytes),
        traffic_sspmm_backward(n, nnz, dim_origin, dim_k, index_bytes),
    ):
        model_gb = rep.read_bytes / 1e9
        measured = PROFILED_REDDIT_GB[rep.kernel]
        rows.append(
            {
                "kernel": rep.kernel,
                "model_gb": model_gb,
                "profiled_gb": measured,
                "ratio": model_gb / measured,
                "caveat": CACHE_CAVEAT,
            }
        )
    return rows


# -- rendering ----------------------------------------------------------------

_COLUMNS = (
    "kernel",
    "source",
    "num_nodes",
    "nnz",
    "dim_origin",
    "dim_k",
    "index_bytes",
    "w",
    "read_bytes",
    "write_bytes",
    "total_bytes",
    "atomic_ops",
    "reduction_vs_spmm_pct",
    "write_reduction_pct",
    "no_benefit",
    "notes",
)


def reports_to_csv(reports, metadata: dict | None = None) -> str:
    buf = io.StringIO()
    for key, value in (metadata or {}).items():
        buf.write(f"# {key}: {value}\n")
    writer = csv.DictWriter(buf, fieldnames=_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.as_dict())
    return buf.getvalue()


def reports_to_json(reports, metadata: dict | None = None) -> str:
    body = {"metadata": metadata or {}, "reports": [r.as_dict() for r in reports]}
    return json.dumps(body, indent=2)


def reports_table(reports) -> str:
    head = f"{'kernel':<8}{'read GB':>12}{'write GB':>12}{'atomics':>16}{'reduction %':>14}"
    lines = [head, "-" * len(head)]
    for r in reports:
        flag = "  (no benefit)" if r.kernel != "spmm" and r.no_benefit else ""
        lines.append(
            f"{r.kernel:<8}{r.read_bytes / 1e9:>12.4f}{r.write_bytes / 1e9:>12.4f}"
            f"{r.atomic_ops:>16.4g}{r.reduction_vs_spmm_pct:>14.3f}{flag}"
        )
    return "\n".join(lines)
