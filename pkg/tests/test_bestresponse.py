import numpy as np
import pytest

from hyperens import bestresponse as br
from hyperens.diffcore import make_rng
from hyperens.hyperdist import HyperSchema
from hyperens.layers import STNDense


def test_closed_form_scaled_identity():
    k = 4
    Phi = np.sqrt(k) * np.eye(k)
    y = np.sqrt(k) * np.eye(k)[0]
    prob = br.RidgeProblem(Phi, y, (0.1, 1.0))
    for lam in (0.1, 0.5, 3.0):
        np.testing.assert_allclose(br.ridge_closed_form(prob, lam), np.eye(k)[0] / (1 + lam), rtol=1e-14)


@pytest.mark.parametrize("loss", ["squared", "logistic"])
def test_closed_form_residual_and_limit(loss):
    prob = br.make_ridge_problem(80, 5, 3, loss=loss)
    for lam in (1e-2, 5e-2, 1e-1):
        w = br.ridge_closed_form(prob, lam)
        assert br.optimality_residual(prob, w, lam) < 1e-10
    big = br.ridge_closed_form(prob, 1e6)
    assert np.linalg.norm(big) < 1e-4 * np.linalg.norm(br.ridge_closed_form(prob, 1.0))
    with pytest.raises(ValueError):
        br.ridge_closed_form(prob, 0.0)


def test_ill_conditioned_and_invalid_problems():
    Phi = np.ones((10, 2))
    prob = br.RidgeProblem(Phi, np.arange(10.0), (1e-14, 1.0))
    with pytest.raises(br.IllConditionedError):
        br.ridge_closed_form(prob, 1e-14)
    with pytest.raises(ValueError):
        br.RidgeProblem(Phi, np.arange(10.0), (1.0, 0.5))
    with pytest.raises(ValueError):
        br.RidgeProblem(Phi, np.arange(10.0), loss="logistic")


def test_low_rank_reduces_to_self_tuning_dense(gen):
    schema = HyperSchema(["l2_w", "dropout"], [(1e-3, 10.0), (0.01, 0.5)], ["l2", "dropout"])
    r, s = 3, 4
    lr_layer = br.LowRankSelfTuningDense(r, s, s, schema, np.random.default_rng(0))
    stn = STNDense(r, s, schema, np.random.default_rng(1))
    lr_layer.H.values[...] = np.eye(s)
    lr_layer.W.values[...] = stn.W.values
    lr_layer.G.values[...] = stn.Delta.values
    stn.delta.values[...] = 0.0
    for name, p in stn.embedding.params().items():
        p.values[...] = gen.normal(size=p.values.shape)
        lr_layer.embedding.params()[name].values[...] = p.values
    X = gen.normal(size=(5, r))
    lam = np.column_stack([np.exp(gen.uniform(np.log(1e-3), np.log(10), 5)), gen.uniform(0.01, 0.5, 5)])
    np.testing.assert_allclose(lr_layer(X, lam).values, stn(X, lam=lam).values, rtol=1e-13, atol=1e-14)
    assert lr_layer.param_count() == sum(p.values.size for p in lr_layer.params().values())


def test_point_mass_converges_to_solution():
    lam = 0.05
    prob = br.make_ridge_problem(60, 4, 0, (lam, lam * (1 + 1e-9)))
    emb = br.PolyEmbedding(1, prob.lam_range)
    fit = br.fit_bestresponse(prob, emb, 4000, make_rng(0))
    w = br.ridge_closed_form(prob, lam)
    pred = fit.U @ emb(np.array([lam]))[0]
    assert np.linalg.norm(pred - w) <= 1e-3 * np.linalg.norm(w)
    report = br.gap_report(fit.U, emb, prob, [lam])
    assert report.rows[0][1] < 1e-3


def test_zero_target_gives_zero_map():
    prob = br.make_ridge_problem(40, 3, 1)
    prob.y = np.zeros_like(prob.y)
    fit = br.fit_bestresponse(prob, br.PolyEmbedding(2, prob.lam_range), 2000, make_rng(1))
    assert np.max(np.abs(fit.U)) < 1e-3


def test_objective_decreases_over_windows():
    prob = br.make_ridge_problem(100, 5, 2)
    # small steps keep the run in its descent phase, where sampling noise is below the drift
    fit = br.fit_bestresponse(prob, br.PolyEmbedding(2, prob.lam_range), 2000, make_rng(2),
                              lam_batch=64, learning_rate=0.002)
    windows = np.array(fit.objective_history).reshape(-1, 100).mean(axis=1)
    assert np.all(np.diff(windows) <= 1e-9 * np.abs(windows[1:]))


def test_exact_solution_is_stationary():
    prob = br.make_ridge_problem(50, 3, 4)
    emb = br.PolyEmbedding(2, prob.lam_range)
    grid = br.q_grid(prob.lam_range)
    U = br.solve_bestresponse_exact(prob, emb, grid)
    base = br.expected_objective(prob, U, emb, grid)
    g = np.random.default_rng(0)
    for _ in range(5):
        assert br.expected_objective(prob, U + 1e-4 * g.normal(size=U.shape), emb, grid) > base
    with pytest.raises(ValueError):
        br.solve_bestresponse_exact(br.make_ridge_problem(50, 3, 4, loss="logistic"), emb)


def test_gap_report_matches_regression_residual(tmp_path):
    prob = br.make_ridge_problem(50, 3, 5)
    emb = br.PolyEmbedding(2, prob.lam_range)
    grid = br.q_grid(prob.lam_range, 32)
    U_app, delta = br.oracle_regression(prob, emb, grid)
    path = tmp_path / "gap.csv"
    report = br.gap_report(U_app, emb, prob, grid, path=str(path))
    gaps = np.array([r[1] for r in report.rows])
    np.testing.assert_allclose(gaps, np.linalg.norm(delta, axis=1), rtol=1e-10, atol=1e-15)
    assert np.all(gaps >= 0)
    assert report.expected_sq_gap == pytest.approx(np.mean(gaps ** 2))
    lines = path.read_text().splitlines()
    assert lines[0] == "lambda0,gap,gap_sqrt_lambda0" and len(lines) == 33


def test_richer_embedding_smaller_gap_and_bound():
    prob = br.make_ridge_problem(200, 5, 0, (0.01, 0.1))
    gaps = []
    for h in (1, 2, 4):
        emb = br.PolyEmbedding(h, prob.lam_range)
        fit = br.fit_bestresponse(prob, emb, 3000, make_rng(0, h, "bestresponse"))
        check = br.gap_bound_check(prob, fit.U, emb)
        assert check.passed, check
        gaps.append(br.gap_report(fit.U, emb, prob, br.q_grid(prob.lam_range)).expected_sq_gap)
        s_min, c_min = br.covariance_check(emb, prob.lam_range)
        assert s_min > 0 and c_min > 0
    assert gaps[0] >= gaps[1] >= gaps[2]


def test_logistic_point_mass():
    lam = 0.05
    prob = br.make_ridge_problem(80, 3, 6, (lam, lam * (1 + 1e-9)), loss="logistic")
    emb = br.PolyEmbedding(1, prob.lam_range)
    fit = br.fit_bestresponse(prob, emb, 4000, make_rng(6))
    w = br.ridge_closed_form(prob, lam)
    assert np.linalg.norm(fit.U[:, 0] - w) <= 1e-3 * np.linalg.norm(w)


def test_optimal_ridge_lambda_is_validation_minimum():
    g = np.random.default_rng(0)
    w_true = 0.3 * g.normal(size=3)
    X = g.normal(size=(15, 3))
    y = X @ w_true + g.normal(size=15)
    Xv = g.normal(size=(200, 3))
    yv = Xv @ w_true + g.normal(size=200)
    lam = br.optimal_ridge_lambda(X, y, Xv, yv)
    assert 1e-3 < lam < 1e2

    def mse(l):
        mx, my = X.mean(0), y.mean()
        w = np.linalg.solve((X - mx).T @ (X - mx) / 15 + l * np.eye(3), (X - mx).T @ (y - my) / 15)
        return np.mean((yv - (Xv - mx) @ w - my) ** 2)

    for f in (0.9, 1.1):
        assert mse(lam) <= mse(lam * f) + 1e-12
