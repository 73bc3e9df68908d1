"""Small deterministic synthetic tasks standing in for image benchmarks."""

import numpy as np

from ..diffcore.rng import make_rng
from .dataset import Dataset

KINDS = ("two_gaussians", "two_regime_regression", "ring")


def _gen(seed, kind):
    return make_rng(seed, 0, f"synth:{kind}").generator()


def two_gaussians(n, seed, separation=3.0, nuisance_dims=0, dims=2):
    """Two isotropic unit Gaussians whose means differ by ``separation`` along axis 0.

    ``nuisance_dims`` appends pure-noise features that a model can overfit.
    """
    g = _gen(seed, "two_gaussians")
    y = (g.random(n) < 0.5).astype(np.int64)
    X = g.normal(size=(n, dims + nuisance_dims))
    X[:, 0] += np.where(y == 1, 0.5, -0.5) * separation
    return Dataset(X, y, n_classes=2)


def two_regime_regression(n, seed, dims=8, classify=False):
    """Regression data mixing two regimes with different best L2 strengths.

    The sign of feature 0 (placed at +/-2) selects the regime. Regime A is a
    clean linear response on the first half of the remaining features, so it
    favors weak regularization; regime B is a weak response buried in heavy
    noise on the other half, so it favors strong regularization. With
    ``classify`` the target is thresholded at 0 into two classes.
    """
    if dims < 3:
        raise ValueError("two_regime_regression needs dims >= 3")
    g = _gen(seed, "two_regime_regression")
    regime = (g.random(n) < 0.5).astype(np.int64)
    X = g.normal(size=(n, dims))
    X[:, 0] = np.where(regime == 1, 2.0, -2.0) + 0.3 * g.normal(size=n)
    half = 1 + (dims - 1) // 2
    w_a = g.normal(size=half - 1)
    w_b = g.normal(size=dims - half)
    y_a = X[:, 1:half] @ w_a + 0.1 * g.normal(size=n)
    y_b = 0.3 * (X[:, half:] @ w_b) + 1.5 * g.normal(size=n)
    y = np.where(regime == 0, y_a, y_b)
    if classify:
        return Dataset(X, (y > 0).astype(np.int64), n_classes=2)
    return Dataset(X, y, n_classes=0)


def ridge_1d(n, seed, w_train=1.0, w_val=0.5, noise=0.5):
    """Train/validation pair whose slopes disagree, plus the exact best L2 strength.

    Both splits are ``y = w x + noise``, with ``w_train`` on the training split and
    ``w_val`` on the validation split. For a linear model with an intercept,
    trained on mean squared error plus ``λ w²``, the fitted slope is
    ``cov(x, y) / (var(x) + λ)``. Validation error is minimized by the slope
    ``w*`` fit on the validation split around the training means, which gives
    ``λ* = cov / w* - var``.

    Returns:
        (train, val, lam_star). ``lam_star`` may be nonpositive for unlucky
        draws when ``w_val`` is close to ``w_train``.
    """
    g = _gen(seed, "ridge_1d")
    xt, xv = g.normal(size=n), g.normal(size=n)
    yt = w_train * xt + noise * g.normal(size=n)
    yv = w_val * xv + noise * g.normal(size=n)
    mx, my = xt.mean(), yt.mean()
    var = np.mean((xt - mx) ** 2)
    cov = np.mean((xt - mx) * (yt - my))
    dv, ev = xv - mx, yv - my
    w_star = np.sum(dv * ev) / np.sum(dv * dv)
    lam_star = float(cov / w_star - var)
    return Dataset(xt[:, None], yt, n_classes=0), Dataset(xv[:, None], yv, n_classes=0), lam_star


def ring(n, seed, radius=1.0, noise=0.15):
    """Class 1 inside a disc of ``radius``, class 0 on a surrounding annulus."""
    g = _gen(seed, "ring")
    y = (g.random(n) < 0.5).astype(np.int64)
    r = np.where(y == 1, g.uniform(0.0, radius * 0.8, n), g.uniform(radius * 1.2, radius * 2.0, n))
    r = r + noise * g.normal(size=n)
    theta = g.uniform(0.0, 2 * np.pi, n)
    X = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return Dataset(X, y, n_classes=2)


def synth(kind, n, seed, **kwargs):
    if kind == "two_gaussians":
        return two_gaussians(n, seed, **kwargs)
    if kind == "two_regime_regression":
        return two_regime_regression(n, seed, **kwargs)
    if kind == "ring":
        return ring(n, seed, **kwargs)
    raise ValueError(f"unknown synthetic task {kind!r}; choose from {KINDS}")
