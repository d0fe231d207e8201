import numpy as np
import pytest

from maxkgnn.graph import from_coo


def random_graph(rng, n, density=0.3, weighted=True):
    mask = rng.random((n, n)) < density
    r, c = np.nonzero(mask)
    vals = rng.uniform(-1.0, 1.0, r.size) if weighted else None
    return from_coo(n, r, c, vals)


def naive_spmm(g, x):
    """Triple loop over rows, stored edges and features, in float64."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((g.num_nodes, x.shape[1]))
    rp, ci, ev = g.row_ptr.tolist(), g.col_idx.tolist(), g.edge_val.tolist()
    for i in range(g.num_nodes):
        for e in range(rp[i], rp[i + 1]):
            for f in range(x.shape[1]):
                out[i, f] += ev[e] * x[ci[e], f]
    return out


def sort_oracle_topk(row, k):
    """Column ids of the k largest values, ties to lower index, ascending."""
    order = sorted(range(len(row)), key=lambda j: (-row[j], j))
    return sorted(order[:k])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def layer_gradcheck(layer, g, x, upstream, step=1e-4, floor=1e-6):
    """Max relative error of analytic vs. central-difference gradients of
    ``sum(layer(x) * upstream)`` over all parameters and inputs."""

    def objective():
        return float(np.sum(layer.forward(g, x) * upstream))

    layer.zero_grad()
    layer.forward(g, x)
    dx = layer.backward(g, upstream)
    checks = [(p, grad.copy()) for p, grad in layer.parameters()] + [(x, dx)]
    worst = 0.0
    for arr, analytic in checks:
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + step
            up = objective()
            arr[idx] = keep - step
            down = objective()
            arr[idx] = keep
            numeric = (up - down) / (2 * step)
            err = abs(numeric - analytic[idx]) / max(abs(numeric), abs(analytic[idx]), floor)
            worst = max(worst, err)
    return worst


def maxk_layer_instance(rng, n=12, f_in=5, f_out=8, k=3, density=0.35):
    from maxkgnn.gnn import LinearLayer, MaxkGnnLayer
    from maxkgnn.graph import add_self_loops, normalize

    g = normalize(add_self_loops(random_graph(rng, n, density, weighted=False)), "symmetric")
    g = g.astype(np.float64)
    layer = MaxkGnnLayer(LinearLayer.init(f_in, f_out, rng, np.float64), k=k)
    layer.linear.bias[:] = rng.standard_normal(f_out)
    x = rng.standard_normal((n, f_in))
    upstream = rng.standard_normal((n, f_out))
    return layer, g, x, upstream


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
