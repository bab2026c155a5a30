"""Shared oracles for the test suite."""

import math

import numpy as np

from modinfuser import tensor as T
from modinfuser.metrics import MS_SSIM_WEIGHTS


def numeric_grad(f, arrays, i, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[i]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(*base)
        x[idx] = old - h
        fm = f(*base)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_grads(fn, *arrays, h=1e-6):
    """Largest relative error between taped and numeric gradients of ``sum(fn(...) * w)``.

    A fixed random weighting ``w`` keeps the check sensitive to every output.
    """
    out = fn(*[T.Tensor(a) for a in arrays])
    w = np.random.default_rng(1234).normal(size=out.shape)

    def scalar(*xs):
        with T.no_grad():
            return float((fn(*[T.Tensor(a) for a in xs]).data * w).sum())

    leaves = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    T.backward(T.sum_(fn(*leaves) * T.Tensor(w)))
    return max(rel_error(leaf.grad, numeric_grad(scalar, arrays, i, h)) for i, leaf in enumerate(leaves))


# per-window SSIM oracles for [-1, 1] images -------------------------------------

L = 2.0
C1, C2 = (0.01 * L) ** 2, (0.03 * L) ** 2


def window_2d(size=11, sigma=1.5):
    w = np.array([[math.exp(-((i - 5) ** 2 + (j - 5) ** 2) / (2 * sigma**2)) for j in range(size)] for i in range(size)])
    return w / w.sum()


def ssim_terms_loop(a, b):
    """Per-window luminance*cs and cs, visiting every 11x11 window position."""
    w = window_2d()
    h, wd = a.shape
    full, cs_all = [], []
    for i in range(h - 10):
        for j in range(wd - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            cs = (2 * cov + C2) / (va + vb + C2)
            full.append((2 * ma * mb + C1) / (ma**2 + mb**2 + C1) * cs)
            cs_all.append(cs)
    return float(np.mean(full)), float(np.mean(cs_all))


def ms_ssim_loop(a, b, scales):
    w = np.array(MS_SSIM_WEIGHTS[:scales])
    w = w / w.sum()
    out = 1.0
    for s in range(scales):
        full, cs = ssim_terms_loop(a, b)
        out *= max(full if s == scales - 1 else cs, 0.0) ** w[s]
        a = (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2]) / 4
        b = (b[0::2, 0::2] + b[1::2, 0::2] + b[0::2, 1::2] + b[1::2, 1::2]) / 4
    return out
