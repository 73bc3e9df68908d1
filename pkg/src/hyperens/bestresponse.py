"""Desk-scale check of linear best-response approximations.

For a convex regularized problem ``min_w g(w) + λ0/2 ‖w‖²`` with solution
``w(λ0)``, a best-response model predicts ``w(λ0) ≈ U e(λ0)`` for a fixed
embedding ``e``. ``U`` is fit by minimizing the objective averaged over a
log-uniform λ0 distribution Q. The quality guarantee compares the fitted
gap with the gap of the least-squares regression of ``w(·)`` onto ``e(·)``:

    E_Q[λ0 ‖U e − w‖²] ≤ E_Q[(L + λ0) ‖Δ_app‖²] + optimization error

with ``L`` the gradient-Lipschitz constant of ``g``.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
from scipy.linalg import solve_sylvester
from scipy.optimize import minimize_scalar

from .diffcore import ops
from .diffcore.optim import OptimizerState, optimizer_step
from .diffcore.tensor import Tensor, as_tensor
from .layers import Embedding, glorot

LOSSES = ("squared", "logistic")
MAX_CONDITION = 1e12


class IllConditionedError(np.linalg.LinAlgError):
    pass


class LowRankSelfTuningDense:
    """Dense layer with weights ``W + (G ∘ e(λ)) Hᵀ`` (rank-h modulation).

    ``G`` is (r, h) and ``H`` is (s, h); row i of the output is
    ``x_i W + ((x_i G) ∘ e(λ_i)) Hᵀ + b``. With h = s and ``H = I`` this is
    the self-tuning layer ``W + Δ ∘ e(λ)ᵀ`` with ``Δ = G``.
    """

    def __init__(self, r, s, h, schema, gen, embedding="linear"):
        if h < 1:
            raise ValueError("rank h must be >= 1")
        self.h = h
        self.schema = schema
        self.W = Tensor.param(glorot(gen, (r, s), r, s), name="W")
        self.G = Tensor.param(glorot(gen, (r, h), r, h), name="G")  # nonzero, else G and e stay at 0
        self.H = Tensor.param(glorot(gen, (s, h), s, h), name="H")
        self.b = Tensor.param(np.zeros(s), name="b")
        self.embedding = Embedding(schema, h, embedding, gen)

    def params(self):
        out = {"W": self.W, "G": self.G, "H": self.H, "b": self.b}
        out.update({f"emb.{k}": v for k, v in self.embedding.params().items()})
        return out

    def param_count(self):
        return sum(p.values.size for p in self.params().values())

    def __call__(self, X, lam):
        X = as_tensor(X)
        e, _ = self.embedding(lam)
        return X @ self.W + ((X @ self.G) * e) @ ops.transpose(self.H) + self.b


@dataclass
class RidgeProblem:
    """``g(w) = mean ℓ(y, Φ w)`` with ℓ squared (½(y − t)²) or logistic (y in ±1)."""

    Phi: np.ndarray
    y: np.ndarray
    lam_range: tuple = (1e-2, 1e-1)
    loss: str = "squared"

    def __post_init__(self):
        self.Phi = np.asarray(self.Phi, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        lo, hi = self.lam_range
        if not 0 < lo < hi:
            raise ValueError("need 0 < λ0_min < λ0_max")
        if self.loss == "logistic" and not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise ValueError("logistic targets must be ±1")
        if np.linalg.eigvalsh(self.gram + lo * np.eye(self.k)).min() <= 0:
            raise ValueError("ΦᵀΦ/n + λ0 I is not positive definite over the range")

    @property
    def n(self):
        return self.Phi.shape[0]

    @property
    def k(self):
        return self.Phi.shape[1]

    @property
    def gram(self):
        return self.Phi.T @ self.Phi / self.n

    @property
    def smoothness(self):
        """Gradient-Lipschitz constant L of g."""
        top = float(np.linalg.eigvalsh(self.gram).max())
        return top if self.loss == "squared" else top / 4.0

    def grad_g(self, w):
        t = self.Phi @ w
        if self.loss == "squared":
            return self.Phi.T @ (t - self.y) / self.n
        return -self.Phi.T @ (self.y * _sigmoid(-self.y * t)) / self.n

    def objective(self, w, lam0):
        t = self.Phi @ w
        if self.loss == "squared":
            g = 0.5 * np.mean((self.y - t) ** 2)
        else:
            g = np.mean(np.logaddexp(0.0, -self.y * t))
        return g + 0.5 * lam0 * w @ w


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def ridge_closed_form(problem, lam0):
    """Exact minimizer w(λ0); Newton iterations for the logistic loss."""
    if lam0 <= 0:
        raise ValueError("λ0 must be positive")
    A = problem.gram + lam0 * np.eye(problem.k)
    cond = np.linalg.cond(A)
    if cond > MAX_CONDITION:
        raise IllConditionedError(f"condition estimate {cond:.3e} exceeds {MAX_CONDITION:.0e}")
    if problem.loss == "squared":
        return np.linalg.solve(A, problem.Phi.T @ problem.y / problem.n)
    w = np.zeros(problem.k)
    for _ in range(100):
        grad = problem.grad_g(w) + lam0 * w
        p = _sigmoid(problem.Phi @ w)
        hess = (problem.Phi.T * (p * (1 - p))) @ problem.Phi / problem.n + lam0 * np.eye(problem.k)
        step = np.linalg.solve(hess, grad)
        w = w - step
        if np.max(np.abs(step)) < 1e-15 * max(1.0, np.max(np.abs(w))):
            break
    return w


def optimality_residual(problem, w, lam0):
    return float(np.max(np.abs(problem.grad_g(w) + lam0 * w)))


class PolyEmbedding:
    """Legendre features of normalized ln λ0: ``e_j(λ0) = P_j(z)``, j < h."""

    def __init__(self, h, lam_range):
        if h < 1:
            raise ValueError("h must be >= 1")
        self.h = h
        self.lo, self.hi = np.log(lam_range[0]), np.log(lam_range[1])

    def __call__(self, lam0):
        z = 2.0 * (np.log(np.asarray(lam0, dtype=np.float64)) - self.lo) / (self.hi - self.lo) - 1.0
        return legendre.legvander(z, self.h - 1)


def q_grid(lam_range, n=256):
    """Midpoint quadrature nodes for the log-uniform Q on ``lam_range``."""
    lo, hi = np.log(lam_range[0]), np.log(lam_range[1])
    return np.exp(lo + (np.arange(n) + 0.5) / n * (hi - lo))


def solution_path(problem, grid):
    return np.stack([ridge_closed_form(problem, lam) for lam in grid])


@dataclass
class BestResponseFit:
    U: np.ndarray
    objective_history: list = field(default_factory=list)
    final_objective: float = float("nan")


def expected_objective(problem, U, embedding, grid):
    """F(U) under Q, estimated on the quadrature grid."""
    E = embedding(grid)
    return float(np.mean([problem.objective(U @ e, lam) for e, lam in zip(E, grid)]))


def fit_bestresponse(problem, embedding, steps, rng, lam_batch=16, learning_rate=0.05,
                     data_batch=None, tail_fraction=0.5, U0=None):
    """Stochastic minimization of E_{λ0~Q}[g(U e(λ0)) + λ0/2 ‖U e(λ0)‖²].

    Each step draws ``lam_batch`` log-uniform λ0 values (and, if
    ``data_batch`` is set, a data minibatch) and takes an Adam step with a
    1/(1 + t/1000) learning-rate decay. The returned U is the average of the
    iterates over the last ``tail_fraction`` of the run.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    gen = rng.generator() if hasattr(rng, "generator") else rng
    lo, hi = np.log(problem.lam_range[0]), np.log(problem.lam_range[1])
    q = embedding.h
    U = Tensor.param(np.zeros((problem.k, q)) if U0 is None else np.array(U0, dtype=np.float64), name="U")
    opt = OptimizerState(kind="adam", learning_rate=learning_rate)
    tail_start = int(steps * (1.0 - tail_fraction))
    avg = np.zeros_like(U.values)
    n_avg = 0
    history = []
    for t in range(steps):
        lams = np.exp(gen.uniform(lo, hi, lam_batch))
        E = embedding(lams)  # (B, q)
        if data_batch:
            rows = gen.integers(0, problem.n, data_batch)
            Phi, y = problem.Phi[rows], problem.y[rows]
        else:
            Phi, y = problem.Phi, problem.y
        Wb = E @ U.values.T  # (B, k), one w per λ
        T = Phi @ Wb.T  # (n_b, B)
        if problem.loss == "squared":
            R = (T - y[:, None]) / len(y)
            value = 0.5 * np.mean(np.sum((T - y[:, None]) ** 2, axis=0) / len(y))
        else:
            R = -(y[:, None] * _sigmoid(-y[:, None] * T)) / len(y)
            value = np.mean(np.sum(np.logaddexp(0.0, -y[:, None] * T), axis=0) / len(y))
        value += 0.5 * np.mean(lams * np.sum(Wb ** 2, axis=1))
        Gw = Phi.T @ R + (Wb * lams[:, None]).T  # (k, B) gradient per λ w.r.t. w
        grad = Gw @ E / lam_batch
        opt.learning_rate = learning_rate / (1.0 + t / 1000.0)
        optimizer_step(opt, [U], [grad], ["U"])
        history.append(float(value))
        if t >= tail_start:
            avg += U.values
            n_avg += 1
    U_final = avg / max(n_avg, 1)
    return BestResponseFit(U_final, history, expected_objective(problem, U_final, embedding,
                                                                q_grid(problem.lam_range)))


def solve_bestresponse_exact(problem, embedding, grid=None):
    """Exact minimizer of the grid-averaged objective for the squared loss.

    Stationarity reads ``A U Σ + U C = M`` with ``A = ΦᵀΦ/n``,
    ``Σ = E[e eᵀ]``, ``C = E[λ0 e eᵀ]``, ``M = Φᵀy E[e]ᵀ / n``; right
    multiplying by ``Σ⁻¹`` gives a Sylvester equation.
    """
    if problem.loss != "squared":
        raise ValueError("closed form only for the squared loss")
    grid = q_grid(problem.lam_range) if grid is None else grid
    E = embedding(grid)
    Sigma = E.T @ E / len(grid)
    C = (E * grid[:, None]).T @ E / len(grid)
    M = np.outer(problem.Phi.T @ problem.y / problem.n, E.mean(axis=0))
    Sinv = np.linalg.inv(Sigma)
    return solve_sylvester(problem.gram, C @ Sinv, M @ Sinv)


def oracle_regression(problem, embedding, grid=None):
    """Least-squares fit of w(λ0) onto e(λ0) over the grid: returns (U_app, Δ_app rows)."""
    grid = q_grid(problem.lam_range) if grid is None else grid
    Wpath = solution_path(problem, grid)
    E = embedding(grid)
    coef, *_ = np.linalg.lstsq(E, Wpath, rcond=None)
    U_app = coef.T
    return U_app, E @ coef - Wpath


@dataclass
class GapReport:
    rows: list  # (λ0, gap, gap·sqrt(λ0))
    expected_sq_gap: float
    expected_weighted_sq_gap: float  # E[λ0 ‖Δ‖²]


def gap_report(U, embedding, problem, grid, path=None):
    """Per-λ0 distance ``‖U e(λ0) − w(λ0)‖`` with expectation summaries."""
    grid = np.asarray(grid, dtype=np.float64)
    Wpath = solution_path(problem, grid)
    E = embedding(grid)
    gaps = np.linalg.norm(E @ np.asarray(U).T - Wpath, axis=1)
    rows = [(float(lam), float(g), float(g * np.sqrt(lam))) for lam, g in zip(grid, gaps)]
    report = GapReport(rows, float(np.mean(gaps ** 2)), float(np.mean(grid * gaps ** 2)))
    if path:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["lambda0", "gap", "gap_sqrt_lambda0"])
            for row in rows:
                w.writerow([repr(v) for v in row])
    return report


@dataclass
class BoundCheck:
    lhs: float  # E[λ0 ‖U e − w‖²]
    bound: float  # E[(L + λ0) ‖Δ_app‖²]
    slack: float

    @property
    def passed(self):
        return self.lhs <= self.slack * self.bound


def gap_bound_check(problem, U, embedding, slack=2.0, grid=None):
    """Compare the fitted best-response gap with the oracle-regression bound.

    The bound weights the squared least-squares residual of ``w(λ)`` on
    ``e(λ)`` by ``(smoothness + λ)`` and averages over ``grid``; the check
    passes when the measured gap stays within ``slack`` times that bound.
    """
    grid = q_grid(problem.lam_range) if grid is None else grid
    _, delta_app = oracle_regression(problem, embedding, grid)
    bound = float(np.mean((problem.smoothness + grid) * np.sum(delta_app ** 2, axis=1)))
    lhs = gap_report(U, embedding, problem, grid).expected_weighted_sq_gap
    return BoundCheck(lhs, bound, slack)


def covariance_check(embedding, lam_range, grid=None):
    """Smallest eigenvalues of Σ = E[e eᵀ] and C = E[λ0 e eᵀ] (both must be > 0)."""
    grid = q_grid(lam_range) if grid is None else grid
    E = embedding(grid)
    Sigma = E.T @ E / len(grid)
    C = (E * grid[:, None]).T @ E / len(grid)
    return float(np.linalg.eigvalsh(Sigma).min()), float(np.linalg.eigvalsh(C).min())


def make_ridge_problem(n, k, seed, lam_range=(1e-2, 1e-1), noise=0.5, loss="squared"):
    """Random design with a planted weight vector."""
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    Phi = gen.normal(size=(n, k))
    w_true = gen.normal(size=k)
    t = Phi @ w_true
    if loss == "squared":
        y = t + noise * gen.normal(size=n)
    else:
        y = np.where(gen.random(n) < _sigmoid(t), 1.0, -1.0)
    return RidgeProblem(Phi, y, lam_range, loss)


def optimal_ridge_lambda(X_train, y_train, X_val, y_val, bounds=(1e-6, 1e3)):
    """Validation-MSE-optimal λ0 for ``mean (y − Xw − c)²/2 + λ0/2 ‖w‖²``.

    The intercept is unregularized, so both splits are centered with the
    training means before the closed-form solve.
    """
    mx, my = X_train.mean(axis=0), y_train.mean()
    Xc, yc = X_train - mx, y_train - my
    n = len(yc)
    gram, rhs = Xc.T @ Xc / n, Xc.T @ yc / n

    def val_mse(log_lam):
        w = np.linalg.solve(gram + np.exp(log_lam) * np.eye(len(rhs)), rhs)
        return float(np.mean((y_val - (X_val - mx) @ w - my) ** 2))

    lo, hi = np.log(bounds[0]), np.log(bounds[1])
    grid = np.linspace(lo, hi, 400)
    vals = [val_mse(g) for g in grid]
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(val_mse, bounds=(a, b), method="bounded", options={"xatol": 1e-10})
    return float(np.exp(res.x))
