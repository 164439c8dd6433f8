"""Shared oracles for the test suite: finite differences, relative error,
and a least-squares linear probe."""

import numpy as np


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_diff(fn, arr, h=1e-5):
    """Central finite differences of a scalar function over every entry of arr
    (mutates arr in place while probing, restores it)."""
    grads = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        up = fn()
        arr[idx] = orig - h
        down = fn()
        arr[idx] = orig
        grads[idx] = (up - down) / (2 * h)
        it.iternext()
    return grads


def sampled_central_diff(fn, arr, analytic, rng, probes=6, h=1e-5):
    """Check a random subset of coordinates of arr against finite differences;
    returns the worst relative error over the probed entries."""
    flat_idx = rng.choice(arr.size, size=min(probes, arr.size), replace=False)
    worst = 0.0
    view = arr.reshape(-1)
    grad = analytic.reshape(-1)
    for idx in flat_idx:
        orig = view[idx]
        view[idx] = orig + h
        up = fn()
        view[idx] = orig - h
        down = fn()
        view[idx] = orig
        fd = (up - down) / (2 * h)
        worst = max(worst, float(rel_err(grad[idx], fd)))
    return worst


def probe_accuracy(x_train, y_train, x_eval, y_eval):
    """Least-squares linear probe (with intercept) on +/-1 targets."""
    a = np.hstack([x_train, np.ones((len(x_train), 1))])
    w, *_ = np.linalg.lstsq(a, 2.0 * y_train - 1.0, rcond=None)
    preds = (np.hstack([x_eval, np.ones((len(x_eval), 1))]) @ w) > 0
    return float((preds == y_eval.astype(bool)).mean())


def model_arrays(params):
    out = []
    for comp in (params.featurizer, params.classifier):
        for layer in comp:
            out.append(layer.weight)
            out.append(layer.bias)
    if params.domain_head is not None:
        for layer in params.domain_head:
            out.append(layer.weight)
            out.append(layer.bias)
    return out


def grads_arrays(grads, include_head=False):
    out = []
    for comp in (grads.featurizer, grads.classifier):
        for gw, gb in comp:
            out.append(gw)
            out.append(gb)
    if include_head and grads.domain_head is not None:
        for gw, gb in grads.domain_head:
            out.append(gw)
            out.append(gb)
    return out


def params_equal(a_layers, b_layers):
    return all(
        np.array_equal(x.weight, y.weight) and np.array_equal(x.bias, y.bias)
        for x, y in zip(a_layers, b_layers)
    )
