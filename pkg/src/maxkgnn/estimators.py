"""scikit-learn compatible wrappers.

``MaxK`` is a stateless transformer, ``MaxKGNNClassifier`` trains a
full-batch node classifier on a fixed graph, and ``MaxKMLPRegressor`` is the
one-hidden-layer network used for the function-approximation demo.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cbsr import DEFAULT_MAX_ITERATIONS, densify, maxk_forward
from .errors import DimensionError
from .gnn import MlpApproxModel, TrainConfig, build_gnn, fit_mlp, train_full_batch
from .graph import CsrGraph, add_self_loops, normalize
from .partition import DEFAULT_W


class MaxK(TransformerMixin, BaseEstimator):
    """Zero all but the ``k`` largest entries of each row.

    Parameters
    ----------
    k : int
        Entries kept per row.
    output : {"dense", "cbsr"}
        ``"cbsr"`` returns a :class:`~maxkgnn.cbsr.CbsrMatrix` instead of a
        dense array.
    """

    def __init__(self, k=8, output="dense", index_width="auto", max_iterations=DEFAULT_MAX_ITERATIONS):
        self.k = k
        self.output = output
        self.index_width = index_width
        self.max_iterations = max_iterations

    def fit(self, X, y=None):
        X = check_array(X, dtype=[np.float32, np.float64])
        if not 1 <= self.k <= X.shape[1]:
            raise DimensionError(f"k={self.k} must lie in [1, {X.shape[1]}]")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=[np.float32, np.float64])
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        xs, self.pivot_summary_ = maxk_forward(X, self.k, self.index_width, self.max_iterations)
        return xs if self.output == "cbsr" else densify(xs)


class MaxKGNNClassifier(ClassifierMixin, BaseEstimator):
    """Node classifier trained full-batch on one graph.

    ``X`` holds one feature row per node. The graph is passed to ``fit`` and
    reused by ``predict`` unless another one is supplied. ``train_mask``
    selects the labelled nodes; unlabeled entries of ``y`` are ignored.
    """

    def __init__(
        self,
        hidden=64,
        k=8,
        nonlinearity="maxk",
        num_layers=2,
        normalization="symmetric",
        self_loops=True,
        epochs=200,
        lr=0.1,
        momentum=0.9,
        w=DEFAULT_W,
        mode="deterministic",
        threads=None,
        seed=0,
    ):
        self.hidden = hidden
        self.k = k
        self.nonlinearity = nonlinearity
        self.num_layers = num_layers
        self.normalization = normalization
        self.self_loops = self_loops
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.w = w
        self.mode = mode
        self.threads = threads
        self.seed = seed

    def _prepare(self, graph: CsrGraph) -> CsrGraph:
        if self.self_loops:
            graph = add_self_loops(graph)
        return normalize(graph, self.normalization)

    def fit(self, X, y, graph: CsrGraph, train_mask=None, val_mask=None):
        X, y = check_X_y(X, y, dtype=np.float32)
        if X.shape[0] != graph.num_nodes:
            raise DimensionError(f"X has {X.shape[0]} rows, graph has {graph.num_nodes} nodes")
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        codes = self.label_encoder_.transform(y)
        self.graph_ = self._prepare(graph)
        self.model_ = build_gnn(
            X.shape[1],
            self.hidden,
            len(self.classes_),
            num_layers=self.num_layers,
            k=self.k,
            nonlinearity=self.nonlinearity,
            seed=self.seed,
            w=self.w,
            mode=self.mode,
            threads=self.threads,
        )
        config = TrainConfig(epochs=self.epochs, lr=self.lr, momentum=self.momentum, seed=self.seed)
        self.log_ = train_full_batch(self.model_, self.graph_, X, codes, config, train_mask, val_mask)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X, graph: CsrGraph | None = None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float32)
        g = self.graph_ if graph is None else self._prepare(graph)
        return self.model_.forward(g, X)

    def predict_proba(self, X, graph: CsrGraph | None = None):
        z = self.decision_function(X, graph).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X, graph: CsrGraph | None = None):
        return self.classes_[self.decision_function(X, graph).argmax(axis=1)]


class MaxKMLPRegressor(RegressorMixin, BaseEstimator):
    """``h(x W + b) W' + b'`` with MaxK (``k = ceil(r / 4)`` by default) or ReLU."""

    def __init__(self, hidden_units=64, k=None, nonlinearity="maxk", epochs=3000, lr=1e-2, seed=0):
        self.hidden_units = hidden_units
        self.k = k
        self.nonlinearity = nonlinearity
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True)
        self._y_1d = y.ndim == 1
        Y = y[:, None] if self._y_1d else y
        k = math.ceil(self.hidden_units / 4) if self.k is None else self.k
        rng = np.random.default_rng([self.seed, self.hidden_units])
        self.model_ = MlpApproxModel(X.shape[1], self.hidden_units, Y.shape[1], k, rng, nonlinearity=self.nonlinearity)
        self.train_mse_ = fit_mlp(self.model_, X, Y, self.epochs, self.lr)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        out = self.model_.forward(X)
        return out[:, 0] if self._y_1d else out
