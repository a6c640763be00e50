"""Slow, obviously-correct reference implementations used only by tests."""

import numpy as np


def box_mean_bruteforce(plane, k):
    """Window mean with replicate padding, one pixel at a time."""
    h, w = plane.shape
    r = k // 2
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii = min(max(i + di, 0), h - 1)
                    jj = min(max(j + dj, 0), w - 1)
                    acc += float(plane[ii, jj])
            out[i, j] = acc / (k * k)
    return out


def pca_by_covariance(x, k):
    """Top-k eigenvectors of the sample covariance, largest eigenvalue first."""
    x = np.asarray(x, dtype=np.float64)
    c = np.cov(x, rowvar=False, ddof=1)
    c = np.atleast_2d(c)
    vals, vecs = np.linalg.eigh(c)
    order = np.argsort(vals)[::-1][:k]
    return vals[order], vecs[:, order].T


def xyz_by_summation(spectrum, wavelengths, table_rows):
    """XYZ by explicit loops over a (wl, xbar, ybar, zbar, illuminant) table.

    Only wavelengths present in both the spectrum grid and the table count;
    all grids here are 5 nm so each term carries the same band width.
    """
    lookup = {float(r[0]): r for r in table_rows}
    x = y = z = 0.0
    white = 0.0
    for s, wl in zip(spectrum, wavelengths):
        row = lookup.get(float(wl))
        if row is None:
            continue
        x += s * row[1]
        y += s * row[2]
        z += s * row[3]
        white += row[4] * row[2]
    return np.array([x, y, z]) / white


def finite_difference_grads(loss_fn, params, h=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params``."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss_fn()
            p[idx] = orig - h
            down = loss_fn()
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def relative_error(analytic, numeric, floor=1e-6):
    """Entry-wise |a - n| / max(|a|, |n|, floor)."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def random_tiny_model(seed):
    """64-bit model with D <= 8, widths <= 8 and perturbed norm parameters/buffers."""
    from hsident.mlp import MlpModel

    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 9))
    c = int(rng.integers(2, 6))
    hidden = tuple(int(v) for v in rng.integers(1, 9, size=4))
    model = MlpModel(d, c, hidden=hidden, dropout=float(rng.choice([0.0, 0.3])), dtype=np.float64, rng=rng)
    for name, p in model.params.items():
        if not name.startswith("W"):
            p += rng.normal(0, 0.5, p.shape)
    for name, b in model.buffers.items():
        b[...] = rng.normal(size=b.shape) if "mean" in name else rng.uniform(0.5, 2.0, b.shape)
    model.feature_mean = rng.normal(size=d)
    model.feature_std = rng.uniform(0.5, 2.0, size=d)
    n = int(rng.integers(3, 12))
    x = rng.normal(size=(n, d))
    y = rng.integers(0, c, size=n)
    return model, x, y


def logistic_separable(x, y, epochs=2000):
    """Perceptron on {-1, +1} labels; True if it reaches zero training errors."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    t = np.where(y == 1, 1.0, -1.0)
    w = np.zeros(xb.shape[1])
    for _ in range(epochs):
        errors = 0
        for xi, ti in zip(xb, t):
            if ti * (xi @ w) <= 0:
                w += ti * xi
                errors += 1
        if errors == 0:
            return True
    return False
