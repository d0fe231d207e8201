"""Synthetic graphs and node feature/label files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, LengthError
from .graph import CsrGraph, from_coo

_HEADER = struct.Struct("<4sIQQ")
_FEAT = (b"FEAT", np.dtype("<f4"))
_LABL = (b"LABL", np.dtype("<u4"))


@dataclass
class NodeDataset:
    graph: CsrGraph
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.ndim == 1 else self.labels.shape[1]


def sbm_graph(block_sizes, p_in: float, p_out: float, seed: int = 0) -> tuple[CsrGraph, np.ndarray]:
    """Undirected stochastic block model without self-loops, unit weights."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(block_sizes)), block_sizes)
    n = labels.size
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    src, dst = iu[keep], ju[keep]
    g = from_coo(n, np.concatenate([src, dst]), np.concatenate([dst, src]))
    return g, labels


def random_splits(n: int, train: float = 0.6, val: float = 0.2, seed: int = 0):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train, n_val = int(round(train * n)), int(round(val * n))
    train_mask = np.zeros(n, dtype=bool)
    val_mask = np.zeros(n, dtype=bool)
    train_mask[perm[:n_train]] = True
    val_mask[perm[n_train : n_train + n_val]] = True
    return train_mask, val_mask


def class_features(labels, dim: int, signal: float = 1.0, seed: int = 0) -> np.ndarray:
    """Gaussian noise plus a per-class mean direction of norm ``signal``."""
    rng = np.random.default_rng(seed)
    num_classes = int(labels.max()) + 1
    centers = rng.standard_normal((num_classes, dim))
    centers *= signal / np.linalg.norm(centers, axis=1, keepdims=True)
    return (centers[labels] + rng.standard_normal((labels.size, dim))).astype(np.float32)


def sbm_dataset(
    num_nodes: int = 1000,
    blocks: int = 4,
    p_in: float = 0.05,
    p_out: float = 0.005,
    feature_dim: int = 32,
    signal: float = 0.5,
    seed: int = 0,
) -> NodeDataset:
    sizes = [num_nodes // blocks + (1 if b < num_nodes % blocks else 0) for b in range(blocks)]
    g, labels = sbm_graph(sizes, p_in, p_out, seed)
    feats = class_features(labels, feature_dim, signal, seed + 1)
    train_mask, val_mask = random_splits(num_nodes, seed=seed + 2)
    return NodeDataset(g, feats, labels, train_mask, val_mask)


# -- feature / label files ------------------------------------------------------


def _save_binary(arr: np.ndarray, path, magic: bytes, dtype: np.dtype) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr[:, None]
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(magic, 1, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _load_binary(path, magic: bytes, dtype: np.dtype) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise LengthError(f"{path}: file shorter than header")
    got, version, rows, cols = _HEADER.unpack_from(data)
    if got != magic or version != 1:
        raise FormatError(f"{path}: expected {magic.decode()} v1 header")
    if len(data) - _HEADER.size != rows * cols * dtype.itemsize:
        raise LengthError(f"{path}: payload does not match {rows}x{cols}")
    return np.frombuffer(data, dtype, rows * cols, _HEADER.size).reshape(rows, cols).copy()


def save_features(x, path) -> None:
    if str(path).endswith(".csv"):
        np.savetxt(path, np.asarray(x, dtype=np.float32), delimiter=",", fmt="%.9g")
    else:
        _save_binary(x, path, *_FEAT)


def load_features(path) -> np.ndarray:
    with Path(path).open("rb") as fh:
        head = fh.read(4)
    if head == _FEAT[0]:
        return _load_binary(path, *_FEAT).astype(np.float32)
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float32, comments="#"))


def save_labels(y, path) -> None:
    if str(path).endswith(".csv"):
        np.savetxt(path, np.asarray(y, dtype=np.int64), delimiter=",", fmt="%d")
    else:
        _save_binary(y, path, *_LABL)


def load_labels(path) -> np.ndarray:
    """Single-label files (one column) come back 1-D; multi-label stays 2-D."""
    with Path(path).open("rb") as fh:
        head = fh.read(4)
    if head == _LABL[0]:
        y = _load_binary(path, *_LABL).astype(np.int64)
    else:
        y = np.loadtxt(path, delimiter=",", dtype=np.int64, comments="#", ndmin=2)
    return y[:, 0] if y.shape[1] == 1 else y
