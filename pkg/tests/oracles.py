"""Independent oracles used by the test suite.

Everything here is deliberately written against plain Python floats / numpy
loops, never against the library's tape, so tests compare two independent
computation paths.
"""

from __future__ import annotations

import math

import numpy as np


def central_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar fn at x (flat iteration)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: float, b: float, floor: float = 1e-3) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grad_fd(
    fn,
    params: list[np.ndarray],
    grads: list[np.ndarray],
    n_probes: int = 100,
    h: float = 1e-5,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
    floor: float = 1e-3,
) -> float:
    """Probe random coordinates of params; fn(params) -> float re-evaluates.

    Returns the max relative error over probed coordinates and asserts the
    tolerance. Mutates param entries in place, restoring them afterwards.
    """
    rng = rng or np.random.default_rng(0)
    coords = []
    for pi, p in enumerate(params):
        for _ in range(max(1, n_probes // len(params))):
            coords.append((pi, rng.integers(p.size)))
    worst = 0.0
    for pi, j in coords:
        flat = params[pi].reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = fn(params)
        flat[j] = orig - h
        fm = fn(params)
        flat[j] = orig
        fd = (fp - fm) / (2.0 * h)
        an = grads[pi].reshape(-1)[j]
        err = rel_err(an, fd, floor)
        worst = max(worst, err)
        assert err < tol, f"param {pi} coord {j}: analytic {an} vs fd {fd} (rel {err:.2e})"
    return worst


def scalar_mlp_forward(layers, activation: str, x_row) -> list[float]:
    """Pure-Python MLP forward on one input row (float arithmetic only)."""
    h = [float(v) for v in x_row]
    n = len(layers)
    for li, (w, b) in enumerate(layers):
        rows, cols = len(w), len(w[0])
        out = []
        for j in range(cols):
            acc = float(b[j])
            for i in range(rows):
                acc += h[i] * float(w[i][j])
            out.append(acc)
        if li < n - 1:
            if activation == "relu":
                out = [v if v > 0.0 else 0.0 for v in out]
            elif activation == "tanh":
                out = [math.tanh(v) for v in out]
        h = out
    return h


def scalar_adam(param: float, grads: list[float], lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> float:
    """Reference scalar Adam trajectory (bias-corrected)."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        param = param - lr * m_hat / (math.sqrt(v_hat) + eps)
    return param


def brute_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def brute_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def ray_parity_inside(radius_fn, points: np.ndarray, direction=None, n_coarse: int = 800) -> np.ndarray:
    """Ray-casting parity containment test for a star-shaped surface.

    radius_fn(u) -> surface radius for unit directions u (vectorized n x 3).
    Casts a ray from each point along a fixed irrational direction, counts
    crossings of g(s) = |x + s d| - r(dir(x + s d)) by sign changes on a fine
    grid with bisection refinement, and returns odd-parity (inside) flags.
    """
    points = np.atleast_2d(points)
    d = np.array([0.57735026, 0.51449576, 0.63245553]) if direction is None else np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    # far enough to exit any shape contained in [-2, 2]^3
    smax = 6.0
    s_grid = np.linspace(0.0, smax, n_coarse)
    inside = np.zeros(len(points), dtype=bool)
    for i, x in enumerate(points):
        p = x[None, :] + s_grid[:, None] * d[None, :]
        nrm = np.linalg.norm(p, axis=1)
        safe = np.maximum(nrm, 1e-12)
        g = nrm - radius_fn(p / safe[:, None])
        crossings = 0
        sign = np.sign(g)
        for j in range(len(s_grid) - 1):
            if sign[j] == 0.0:
                crossings += 1
            elif sign[j] * sign[j + 1] < 0:
                lo, hi = s_grid[j], s_grid[j + 1]
                for _ in range(40):
                    mid = 0.5 * (lo + hi)
                    pm = x + mid * d
                    gm = np.linalg.norm(pm) - float(radius_fn((pm / max(np.linalg.norm(pm), 1e-12))[None, :])[0])
                    if np.sign(gm) == sign[j]:
                        lo = mid
                    else:
                        hi = mid
                crossings += 1
        inside[i] = crossings % 2 == 1
    return inside
