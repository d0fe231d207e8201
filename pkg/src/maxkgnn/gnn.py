"""Full-batch GNN training with MaxK layers and hand-written backward passes.

A layer computes ``A @ h(X W + b)`` where ``h`` is MaxK (CBSR output fed to
the SpGEMM kernel), ReLU, or the identity (both fed to plain SpMM). The
backward pass of a MaxK layer runs the SSpMM kernel on the cached forward
pattern, scatters the result densely, and finishes with the linear backward.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cbsr import CbsrMatrix, maxk_backward, maxk_forward, select_mask
from .errors import DimensionError, DivergenceError, NumericError, ParameterError, StateError
from .graph import CsrGraph, NormalizationKind, from_coo, transpose_view
from .kernels import ExecMode, dense_spmm, spgemm_forward, sspmm_backward
from .partition import DEFAULT_W, EdgeGroupPlan, build_plan

NONLINEARITIES = ("maxk", "relu", "none")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class LinearLayer:
    """``Y = X @ weight + bias`` with gradient buffers of matching shapes."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        self.weight = np.array(weight)
        self.bias = np.zeros(self.weight.shape[1], dtype=self.weight.dtype) if bias is None else np.array(bias)
        if self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> LinearLayer:
        return cls(glorot(rng, fan_in, fan_out, dtype), np.zeros(fan_out, dtype=dtype))

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"input has {x.shape[-1]} features, layer expects {self.in_features}")
        self._x = x
        return x @ self.weight + self.bias

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("linear backward called before forward")
        self.grad_weight += self._x.T @ dy
        self.grad_bias += dy.sum(axis=0)
        return dy @ self.weight.T

    def parameters(self):
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]

    def zero_grad(self):
        self.grad_weight.fill(0)
        self.grad_bias.fill(0)


class MaxkGnnLayer:
    """Linear transform, nonlinearity, then neighbourhood aggregation.

    ``nonlinearity="maxk"`` keeps the top ``k`` features of each row and
    aggregates with the CBSR kernels; ``"relu"`` and ``"none"`` aggregate
    densely and serve as baselines.
    """

    def __init__(
        self,
        linear: LinearLayer,
        k: int | None = None,
        nonlinearity: str = "maxk",
        aggregator: NormalizationKind | str = NormalizationKind.SYMMETRIC,
        w: int = DEFAULT_W,
        mode: ExecMode | str = ExecMode.DETERMINISTIC,
        threads: int | None = None,
        index_width="auto",
    ):
        if nonlinearity not in NONLINEARITIES:
            raise ParameterError(f"nonlinearity must be one of {NONLINEARITIES}")
        self.linear = linear
        self.k = linear.out_features if k is None else int(k)
        if nonlinearity == "maxk" and not 1 <= self.k <= linear.out_features:
            raise DimensionError(f"k={self.k} must lie in [1, {linear.out_features}]")
        self.nonlinearity = nonlinearity
        self.aggregator = NormalizationKind(aggregator)
        self.w = w
        self.mode = ExecMode.parse(mode)
        self.threads = threads
        self.index_width = index_width
        self.pattern: CbsrMatrix | None = None
        self.pivot_summary = None
        self._relu_mask = None
        self._plans: dict = {}

    def plan_for(self, g: CsrGraph) -> EdgeGroupPlan:
        key = (id(g), g.num_nodes, g.num_edges)
        plan = self._plans.get(key)
        if plan is None:
            self._plans = {key: build_plan(g, self.k, self.w)}
            plan = self._plans[key]
        return plan

    def forward(self, g: CsrGraph, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != g.num_nodes:
            raise DimensionError(f"features have {x.shape[0]} rows, graph has {g.num_nodes} nodes")
        y = self.linear.forward(x)
        if self.nonlinearity == "maxk":
            xs, self.pivot_summary = maxk_forward(y, self.k, self.index_width)
            self.pattern = xs
            return spgemm_forward(g, xs, self.plan_for(g), self.mode, threads=self.threads)
        if self.nonlinearity == "relu":
            self._relu_mask = y > 0
            y = np.where(self._relu_mask, y, 0).astype(y.dtype)
        self.pattern = None
        return dense_spmm(g, y)

    def backward(self, g: CsrGraph, upstream: np.ndarray) -> np.ndarray:
        if self.nonlinearity == "maxk":
            if self.pattern is None:
                raise StateError("MaxK layer backward called without a cached forward pattern")
            grads = sspmm_backward(
                transpose_view(g), upstream, self.pattern, self.plan_for(g), self.mode, threads=self.threads
            )
            dy = maxk_backward(self.pattern.with_data(grads), self.pattern)
        else:
            dy = _transpose_spmm(g, upstream)
            if self.nonlinearity == "relu":
                if self._relu_mask is None:
                    raise StateError("ReLU layer backward called before forward")
                dy = np.where(self._relu_mask, dy, 0).astype(dy.dtype)
        return self.linear.backward(dy)

    def parameters(self):
        return self.linear.parameters()

    def zero_grad(self):
        self.linear.zero_grad()


_TRANSPOSE_CACHE: dict = {}


def _transpose_spmm(g: CsrGraph, x: np.ndarray) -> np.ndarray:
    """``A^T @ x`` with an explicit transposed CSR (dense-path baselines only)."""
    key = id(g)
    cached = _TRANSPOSE_CACHE.get(key)
    if cached is None or cached[0] is not g:
        gt = from_coo(g.num_nodes, g.col_idx, g.edge_rows, g.edge_val, dtype=g.edge_val.dtype)
        _TRANSPOSE_CACHE.clear()
        _TRANSPOSE_CACHE[key] = cached = (g, gt)
    return dense_spmm(cached[1], x)


class GnnModel:
    """A stack of :class:`MaxkGnnLayer`; the last layer's output are the logits."""

    def __init__(self, layers: list[MaxkGnnLayer]):
        if not layers:
            raise ParameterError("model needs at least one layer")
        self.layers = list(layers)

    def forward(self, g: CsrGraph, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(g, x)
        return x

    def backward(self, g: CsrGraph, upstream: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            upstream = layer.backward(g, upstream)
        return upstream

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def state(self) -> list[np.ndarray]:
        return [p.copy() for p, _ in self.parameters()]


def build_gnn(
    in_dim: int,
    hidden: int,
    out_dim: int,
    *,
    num_layers: int = 2,
    k: int | None = None,
    nonlinearity: str = "maxk",
    seed: int = 0,
    dtype=np.float32,
    **layer_kwargs,
) -> GnnModel:
    """Hidden layers use ``nonlinearity``; the output layer aggregates raw logits."""
    rng = np.random.default_rng(seed)
    dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == num_layers - 1
        layers.append(
            MaxkGnnLayer(
                LinearLayer.init(a, b, rng, dtype),
                k=None if last else k,
                nonlinearity="none" if last else nonlinearity,
                **layer_kwargs,
            )
        )
    return GnnModel(layers)


# -- losses ---------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray):
    """Mean cross-entropy over ``mask`` rows; returns ``(loss, dlogits)``."""
    idx = np.flatnonzero(mask)
    z = logits[idx].astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = labels[idx]
    loss = -logp[np.arange(idx.size), y].mean() if idx.size else 0.0
    grad = np.zeros_like(logits)
    if idx.size:
        p = np.exp(logp)
        p[np.arange(idx.size), y] -= 1.0
        grad[idx] = (p / idx.size).astype(logits.dtype)
    return float(loss), grad


def sigmoid_bce(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean binary cross-entropy with logits over all entries of ``mask`` rows."""
    idx = np.flatnonzero(mask)
    z = logits[idx].astype(np.float64)
    t = targets[idx].astype(np.float64)
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean() if idx.size else 0.0
    grad = np.zeros_like(logits)
    if idx.size:
        grad[idx] = ((1.0 / (1.0 + np.exp(-z)) - t) / z.size).astype(logits.dtype)
    return float(loss), grad


LOSSES = {"softmax-ce": softmax_cross_entropy, "bce": sigmoid_bce}


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray, loss: str = "softmax-ce") -> float:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return float("nan")
    if loss == "bce":
        return float(((logits[idx] > 0) == (labels[idx] > 0.5)).mean())
    return float((logits[idx].argmax(axis=1) == labels[idx]).mean())


# -- optimisers -----------------------------------------------------------------


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._vel = [np.zeros_like(p) for p, _ in params]

    def step(self):
        for (p, g), v in zip(self.params, self._vel):
            step = g + self.weight_decay * p if self.weight_decay else g
            if self.momentum:
                v *= self.momentum
                v += step
                step = v
            p -= (self.lr * step).astype(p.dtype)


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p, dtype=np.float64) for p, _ in params]
        self._v = [np.zeros_like(p, dtype=np.float64) for p, _ in params]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for (p, g), m, v in zip(self.params, self._m, self._v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# -- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    loss: str = "softmax-ce"
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ParameterError(f"loss must be one of {tuple(LOSSES)}")
        if self.optimizer not in ("sgd", "adam"):
            raise ParameterError("optimizer must be 'sgd' or 'adam'")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    epoch_seconds: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("epoch", "loss", "train_acc", "val_acc", "epoch_seconds")

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def to_csv(self, include_timing: bool = True) -> str:
        buf = io.StringIO()
        for key, value in self.metadata.items():
            buf.write(f"# {key}: {value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.records:
            row = asdict(r)
            if not include_timing:
                row["epoch_seconds"] = 0.0
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in self.COLUMNS])
        return buf.getvalue()


def train_full_batch(
    model: GnnModel,
    g: CsrGraph,
    features: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    train_mask: np.ndarray | None = None,
    val_mask: np.ndarray | None = None,
) -> TrainingLog:
    """Full-graph gradient descent.

    Row 0 of the log evaluates the initial parameters; row ``e`` evaluates the
    parameters after ``e`` updates (``loss`` is the training loss).
    """
    n = g.num_nodes
    if features.shape[0] != n or labels.shape[0] != n:
        raise DimensionError("features and labels need one row per node")
    train_mask = np.ones(n, dtype=bool) if train_mask is None else np.asarray(train_mask, dtype=bool)
    val_mask = np.zeros(n, dtype=bool) if val_mask is None else np.asarray(val_mask, dtype=bool)
    loss_fn = LOSSES[config.loss]
    params = model.parameters()
    if config.optimizer == "adam":
        opt = Adam(params, lr=config.lr)
    else:
        opt = SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    log = TrainingLog(metadata={"seed": config.seed, **{f"config.{k}": v for k, v in asdict(config).items()}})

    def evaluate(epoch, seconds):
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                logits = model.forward(g, features)
            except NumericError as exc:
                raise DivergenceError(f"non-finite activations at epoch {epoch}") from exc
            loss, grad = loss_fn(logits, labels, train_mask)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite training loss {loss} at epoch {epoch}")
        log.records.append(
            EpochRecord(
                epoch,
                loss,
                accuracy(logits, labels, train_mask, config.loss),
                accuracy(logits, labels, val_mask, config.loss),
                seconds,
            )
        )
        return grad

    t0 = time.perf_counter()
    grad = evaluate(0, time.perf_counter() - t0)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        model.zero_grad()
        with np.errstate(over="ignore", invalid="ignore"):
            model.backward(g, grad)
            opt.step()
        grad = evaluate(epoch, 0.0)
        log.records[-1].epoch_seconds = time.perf_counter() - t0
    return log


# -- universal-approximation demo -----------------------------------------------


class MlpApproxModel:
    """One hidden layer: ``g(x) = h(x W + b) W' + b'`` with ``h`` MaxK or ReLU."""

    def __init__(self, input_dim: int, hidden_units: int, output_dim: int, k: int | None, rng, dtype=np.float64,
                 nonlinearity: str = "maxk"):
        self.hidden_units = hidden_units
        self.k = hidden_units if k is None else int(k)
        if nonlinearity == "maxk" and not 1 <= self.k <= hidden_units:
            raise DimensionError(f"need 1 <= k <= r, got k={self.k}, r={hidden_units}")
        self.nonlinearity = nonlinearity
        self.hidden = LinearLayer(
            rng.uniform(-1, 1, size=(input_dim, hidden_units)).astype(dtype),
            rng.uniform(-1, 1, size=hidden_units).astype(dtype),
        )
        self.readout = LinearLayer(glorot(rng, hidden_units, output_dim, dtype), np.zeros(output_dim, dtype=dtype))
        self._mask = None

    @property
    def input_dim(self):
        return self.hidden.in_features

    @property
    def output_dim(self):
        return self.readout.out_features

    def forward(self, x):
        z = self.hidden.forward(x)
        if self.nonlinearity == "maxk":
            self._mask, _ = select_mask(z, self.k)
        elif self.nonlinearity == "relu":
            self._mask = z > 0
        else:
            self._mask = np.ones(z.shape, dtype=bool)
        return self.readout.forward(np.where(self._mask, z, 0))

    def backward(self, dy):
        dh = self.readout.backward(dy)
        return self.hidden.backward(np.where(self._mask, dh, 0))

    def parameters(self):
        return self.hidden.parameters() + self.readout.parameters()

    def zero_grad(self):
        self.hidden.zero_grad()
        self.readout.zero_grad()


TARGETS = {
    "square": lambda x: x**2,
    "zero": lambda x: np.zeros_like(x),
}


def fit_mlp(model: MlpApproxModel, x, y, epochs: int, lr: float = 1e-2, cosine: bool = True) -> float:
    """Full-batch Adam on mean squared error; returns the final MSE.

    With ``cosine`` the step size decays from ``lr`` to zero over the run.
    """
    opt = Adam(model.parameters(), lr=lr)
    n = x.shape[0]
    for e in range(epochs):
        if cosine:
            opt.lr = 0.5 * lr * (1.0 + math.cos(math.pi * e / epochs))
        pred = model.forward(x)
        diff = pred - y
        model.zero_grad()
        model.backward(2.0 * diff / (n * y.shape[1]))
        opt.step()
    return float(np.mean((model.forward(x) - y) ** 2))


def approx_demo(
    target: str = "square",
    hidden_units=(4, 16, 64, 256),
    *,
    epochs: int = 3000,
    lr: float = 1e-2,
    seed: int = 0,
    nonlinearity: str = "maxk",
    grid_points: int = 201,
) -> list[tuple[int, float]]:
    """Fit ``target`` on ``[-1, 1]`` for each hidden width ``r`` with ``k = ceil(r / 4)``."""
    if target not in TARGETS:
        raise ParameterError(f"target must be one of {tuple(TARGETS)}")
    x = np.linspace(-1.0, 1.0, grid_points)[:, None]
    y = TARGETS[target](x)
    table = []
    for r in hidden_units:
        if r < 4:
            raise ParameterError(f"hidden units must be >= 4, got {r}")
        rng = np.random.default_rng([seed, r])
        model = MlpApproxModel(1, r, 1, math.ceil(r / 4), rng, nonlinearity=nonlinearity)
        table.append((int(r), fit_mlp(model, x, y, epochs, lr)))
    return table
