"""Shared test utilities: primitive case builders and a finite-difference oracle.

The gradient sweep evaluates each op as a scalar loss sum(op(inputs) * w)
with fixed random weights w, compares backward against central differences
computed purely from forward evaluations.
"""

import numpy as np

from recurseg import autodiff as ad


def fd_loss_grads(loss_of_arrays, arrays, eps=1e-5):
    """Central-difference gradients of a scalar function of numpy arrays."""
    grads = []
    for ai, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_of_arrays(arrays)
            flat[i] = orig - eps
            lo = loss_of_arrays(arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def max_rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def _away_from(arr, pivot, gap):
    """Push values within `gap` of pivot outward so kinks stay off the fd path."""
    shifted = np.where(np.abs(arr - pivot) < gap, pivot + np.sign(arr - pivot + 0.5) * gap * 2, arr)
    return shifted


def _gapped_pair(rng, shape, gap=1e-3):
    a = rng.uniform(-2, 2, shape)
    b = rng.uniform(-2, 2, shape)
    close = np.abs(a - b) < gap
    b = np.where(close, a + np.where(b >= a, gap * 3, -gap * 3), b)
    return a, b


def _pool_safe(rng, h, w, c, gap=1e-3):
    # resample until every 2x2 window has a clear argmax
    while True:
        x = rng.uniform(0, 10, (h, w, c))
        win = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(-1, 4, c)
        s = np.sort(win, axis=1)
        if np.all(s[:, 3, :] - s[:, 2, :] > gap):
            return x


def primitive_cases(rng):
    """One random case per primitive: (name, inputs, attrs, diff_mask)."""
    h, w = 2 * rng.integers(2, 4), 2 * rng.integers(2, 4)
    c, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    m, k, n = (int(rng.integers(1, 5)) for _ in range(3))
    a, b = _gapped_pair(rng, (h, w, c))
    cases = [
        ("add", [rng.normal(size=(h, w, c)), rng.normal(size=(h, w, c))], {}),
        ("sub", [rng.normal(size=(3, 1)), rng.normal(size=(3, 4))], {}),
        ("mul", [rng.normal(size=(h, w, c)), rng.normal(size=(h, w, c))], {}),
        ("div", [rng.normal(size=(2, 3)), np.sign(rng.normal(size=(2, 3))) * rng.uniform(0.5, 2, (2, 3))], {}),
        ("neg", [rng.normal(size=(h, w))], {}),
        ("exp", [rng.uniform(-2, 2, (2, 3))], {}),
        ("log", [rng.uniform(0.2, 3, (2, 3))], {}),
        ("sigmoid", [rng.normal(size=(h, w))], {}),
        ("tanh", [rng.normal(size=(h, w))], {}),
        ("relu", [_away_from(rng.normal(size=(h, w)), 0.0, 1e-3)], {}),
        ("maximum", [a, b], {}),
        ("minimum", [a, b], {}),
        ("clip", [_away_from(_away_from(rng.uniform(-2, 2, (h, w)), -1.0, 1e-3), 1.0, 1e-3)], {"lo": -1.0, "hi": 1.0}),
        ("sum", [rng.normal(size=(h, w, c))], {"axis": int(rng.integers(0, 3))}),
        ("softmax", [rng.normal(size=(m + 1, k + 1))], {"axis": -1}),
        ("matmul", [rng.normal(size=(m, k)), rng.normal(size=(k, n))], {}),
        ("conv2d", [rng.normal(size=(h, w, c)), rng.normal(size=(3, 3, c, co))], {}),
        ("conv2d", [rng.normal(size=(h, w, c)), rng.normal(size=(3, 3, c, co))], {"stride": 2}),
        ("deconv2d", [rng.normal(size=(h // 2, w // 2, c)), rng.normal(size=(3, 3, c, co))], {}),
        ("maxpool2", [_pool_safe(rng, h, w, c)], {}),
        ("concat", [rng.normal(size=(h, w, c)), rng.normal(size=(h, w, co))], {"axis": -1}),
        ("reshape", [rng.normal(size=(h, w))], {"shape": (w * h,)}),
        ("transpose2d", [rng.normal(size=(m, k))], {}),
        ("stuff2", [rng.normal(size=(h // 2, w // 2, c))], {}),
        ("flip2d", [rng.normal(size=(3, 3, c, co))], {}),
    ]
    return cases


def check_primitive_gradient(name, inputs, attrs, rng, tol=1e-4, eps=1e-5):
    """Gradient-check one primitive case at f64. Returns max relative error."""
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    with ad.using_dtype(np.float64):
        probe = _apply(name, inputs, attrs)
        wgt = rng.normal(size=probe.shape)

        def loss_arrays(arrays):
            with ad.no_grad():
                out = _apply(name, arrays, attrs)
            return float((out.value * wgt).sum())

        tens = [ad.parameter(x) for x in inputs]
        out = _apply(name, tens, attrs)
        loss = ad.sum_(out * ad.constant(wgt))
        ad.backward(loss)
        numeric = fd_loss_grads(loss_arrays, inputs, eps=eps)
        worst = 0.0
        for t, gnum in zip(tens, numeric):
            gana = t.grad if t.grad is not None else np.zeros_like(t.value)
            worst = max(worst, max_rel_err(gana, gnum))
    return worst


def _apply(name, inputs, attrs):
    tens = [x if isinstance(x, ad.Tensor) else ad.Tensor(x) for x in inputs]
    return ad.primitive_forward(name, tens, **attrs)
