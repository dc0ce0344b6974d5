"""Independent reference computations used by the tests.

Nothing here calls the autodiff graph; every check goes through plain numpy
on a different route from the code under test.
"""

from __future__ import annotations

import itertools

import numpy as np


def central_fd(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# plain-numpy forward passes --------------------------------------------------


def np_log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def np_mlp_logits(params, x):
    h = np.asarray(x, dtype=np.float64)
    n = len(params) // 2
    for i in range(n):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n - 1:
            h = np.maximum(h, 0.0)
    return h


def np_ce(z, y):
    lp = np_log_softmax(z)
    return float(-lp[np.arange(len(y)), y].mean())


def np_kl(zp, zq):
    lp, lq = np_log_softmax(zp), np_log_softmax(zq)
    return float((np.exp(lp) * (lp - lq)).sum(axis=1).mean())


def np_margin(z, y, kappa=0.0):
    rows = np.arange(len(y))
    others = z.copy()
    others[rows, y] = -np.inf
    raw = z[rows, y] - others.max(axis=1)
    return float(np.maximum(raw, -kappa).mean())


# closed forms ----------------------------------------------------------------


def softplus(t):
    return np.logaddexp(0.0, t)


def logistic_ce(margin):
    """Two-class cross-entropy as a function of the true-minus-other logit gap."""
    return softplus(-np.asarray(margin))


def logistic_lambda_A(kl_main, kl_aux):
    """exp(kl_aux) / (exp(kl_main) + exp(kl_aux)) evaluated directly."""
    a, m = np.exp(kl_aux), np.exp(kl_main)
    return a / (a + m)


# search / enumeration ----------------------------------------------------------


def grid_worst_case_2d(loss_at, x, eps, n=201):
    """Maximum of ``loss_at(point)`` over an n x n grid on the eps-box around ``x``."""
    axis = np.linspace(-eps, eps, n)
    best = -np.inf
    for a in axis:
        pts = np.stack([np.full(n, x[0] + a), x[1] + axis], axis=1)
        best = max(best, float(np.max(loss_at(pts))))
    return best


def gaussian_mle_grid(samples, mu_grid, sigma_grid):
    """Argmax of the Gaussian log-likelihood over an explicit parameter grid."""
    s = np.asarray(samples, dtype=np.float64)
    n = s.size
    best, arg = -np.inf, None
    for mu in mu_grid:
        ss = ((s - mu) ** 2).sum()
        ll = -n * np.log(sigma_grid) - ss / (2 * sigma_grid**2)
        k = int(np.argmax(ll))
        if ll[k] > best:
            best, arg = ll[k], (float(mu), float(sigma_grid[k]))
    return arg


def enumerate_hiders(pred_by_epoch: dict[int, np.ndarray], y, i: int, j: int) -> list[int]:
    """Indices correct at epoch i and wrong at epoch j, by a plain loop."""
    out = []
    for idx in range(len(y)):
        if pred_by_epoch[i][idx] == y[idx] and pred_by_epoch[j][idx] != y[idx]:
            out.append(idx)
    return out


def enumerate_proportions(pred_adv, pred_clean, y, epochs, intervals):
    """Loop-based hider proportions.

    ``pred_adv[e][f]`` is epoch f's prediction on the adversarial set crafted
    against epoch e; ``pred_clean[e]`` is epoch e's clean prediction.
    """
    rows = []
    for e in epochs:
        for k in intervals:
            if e + k not in epochs:
                continue
            base = [n for n in range(len(y)) if pred_adv[e][e][n] == y[n]]
            if base:
                fails = sum(1 for n in base if pred_adv[e][e + k][n] != y[n])
                rows.append((e, k, "adversarial", fails / len(base)))
            base = [n for n in range(len(y)) if pred_clean[e][n] == y[n]]
            if base:
                fails = sum(1 for n in base if pred_clean[e + k][n] != y[n])
                rows.append((e, k, "natural", fails / len(base)))
    return rows


def all_sign_vertices(d):
    return np.array(list(itertools.product([-1.0, 1.0], repeat=d)))


# planted snapshot instances --------------------------------------------------

EPS = 0.1
THRESHOLDS = {1: 0.0, 2: 0.3, 3: -0.2}


def threshold_model(t: float, epoch: int, s: float = 4.0):
    """Class 1 iff x0 > t (ties to class 0); x1 is ignored."""
    from hfat.model import MlpSpec, ModelWeights

    w = np.array([[-s / 2, s / 2], [0.0, 0.0]])
    b = np.array([s * t / 2, -s * t / 2])
    return ModelWeights(MlpSpec((2, 2)), (w, b), epoch)


def planted(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.uniform(-0.6, 0.6, n), rng.standard_normal(n)])
    y = rng.integers(0, 2, n)
    snaps = {e: threshold_model(t, e) for e, t in THRESHOLDS.items()}
    return snaps, x, y


def by_hand(x0, t):
    return np.array([1 if v > t else 0 for v in x0])


def worst_case(x, y):
    # the sign attack on a threshold model pushes x0 across towards the wrong class
    out = x.copy()
    out[:, 0] = x[:, 0] + np.where(y == 1, -EPS, EPS)
    return out
