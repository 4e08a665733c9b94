import mpmath
import numpy as np
import pytest

from hardbatch import init_network, make_batches, standardize, synth_imbalanced_blobs


def naive_matmul(a, b):
    """Straight triple loop, float64, no numpy kernels."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def _mp_loss(weights, biases, activations, x, y):
    total = mpmath.mpf(0)
    for row, label in zip(x, y):
        h = row
        for w, b, act in zip(weights, biases, activations):
            z = [mpmath.fsum(h[i] * w[i][j] for i in range(len(h))) + b[j] for j in range(len(b))]
            h = [v if v > 0 else mpmath.mpf(0) for v in z] if act == "relu" else z
        total += mpmath.log(mpmath.fsum(mpmath.exp(v) for v in h)) - h[int(label)]
    return total / len(y)


def numeric_gradients(net, x, y, eps="1e-15", dps=40):
    """Central differences of the mean cross-entropy, evaluated with mpmath.

    Independent of the package's forward pass. At 40 digits and a 1e-15
    step, round-off and truncation are far below float64 resolution and no
    ReLU kink is crossed unless a pre-activation sits within ~1e-15 of zero.
    """
    with mpmath.workdps(dps):
        step = mpmath.mpf(eps)
        xs = [[mpmath.mpf(float(v)) for v in row] for row in np.asarray(x, dtype=np.float64)]
        weights = [[[mpmath.mpf(float(v)) for v in r] for r in l.weights] for l in net.layers]
        biases = [[mpmath.mpf(float(v)) for v in l.bias] for l in net.layers]
        acts = [l.activation for l in net.layers]

        def loss():
            return _mp_loss(weights, biases, acts, xs, y)

        grads = []
        for k, layer in enumerate(net.layers):
            for target, shape in ((weights[k], layer.weights.shape), (biases[k], layer.bias.shape)):
                g = np.zeros(shape)
                for idx in np.ndindex(shape):
                    if len(idx) == 2:
                        cell, j = target[idx[0]], idx[1]
                    else:
                        cell, j = target, idx[0]
                    old = cell[j]
                    cell[j] = old + step
                    up = loss()
                    cell[j] = old - step
                    down = loss()
                    cell[j] = old
                    g[idx] = float((up - down) / (2 * step))
                grads.append(g)
        return grads


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def small_blobs():
    train, test = synth_imbalanced_blobs(400, [0.5, 0.5], 4, 6.0, 1.0, seed=3)
    return standardize(train, test)


@pytest.fixture
def small_plan(small_blobs):
    train, test = small_blobs
    # 320 train samples / 32 -> N = 10
    return make_batches(train, test, 32, shuffle_seed=5)


@pytest.fixture
def small_net():
    return init_network([4, 8, 2], seed=11)


@pytest.fixture
def criterion(request):
    """Record an acceptance verdict; printed by ``pytest_terminal_summary``."""
    log = request.config.__dict__.setdefault("_acceptance_lines", [])

    def report(number, title, ok, detail=""):
        log.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
