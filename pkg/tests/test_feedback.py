import csv
import logging

import numpy as np
import pytest

from hcfeedback.basis import DomainMap, build_index_set, eval_basis_rows
from hcfeedback.errors import ContractError, MetricError
from hcfeedback.feedback import (
    ClosedLoopResult,
    ValueModel,
    eval_feedback,
    eval_value,
    eval_value_gradient,
    simulate_closed_loop,
    validation_errors,
    write_series_csv,
)
from hcfeedback.integrate import TimeGrid
from hcfeedback.openloop import solve_open_loop
from hcfeedback.problems import LinearQuadraticProblem
from hcfeedback.regression import fit
from hcfeedback.sampling import split

from oracles import central_diff


@pytest.fixture(scope="module")
def lqr_model(lqr, lqr_dataset):
    train, _ = split(lqr_dataset, 40)
    res = fit(lqr_dataset, train, build_index_set(2, 2), "legendre", "apl2")
    return ValueModel.from_fit(res, lqr.beta)


@pytest.fixture(scope="module")
def vdp_model(vdp, vdp_dataset):
    train, _ = split(vdp_dataset, 40)
    res = fit(vdp_dataset, train, build_index_set(2, 16), "legendre", "apl1", lam=0.01, alpha=1.0)
    return ValueModel.from_fit(res, vdp.beta)


def quadratic_model(P, lower, upper):
    """Exact model of x^T P x in the s=2 Legendre basis on a box (by least squares)."""
    I = build_index_set(2, 2)
    dm = DomainMap(lower, upper)
    X = dm.from_unit(np.random.default_rng(0).uniform(-1, 1, (40, 2)))
    Phi, _ = eval_basis_rows(I, "legendre", dm.to_unit(X), gradient=False)
    theta = np.linalg.lstsq(Phi, np.einsum("ni,ij,nj->n", X, P, X), rcond=None)[0]
    return ValueModel(I, "legendre", theta, dm)


def test_model_value_and_gradient_in_original_coordinates():
    # no cross term: x1*x2 needs index (1, 1), which is outside HC(2, 2)
    P = np.diag([2.0, 1.0])
    m = quadratic_model(P, [-3.0, -1.0], [3.0, 2.0])
    x = np.array([[1.0, 0.5], [-2.0, 1.5]])
    np.testing.assert_allclose(eval_value(m, x), np.einsum("ni,ij,nj->n", x, P, x), atol=1e-10)
    np.testing.assert_allclose(eval_value_gradient(m, x), 2 * x @ P, atol=1e-10)
    fd = central_diff(m.value, x[0])
    np.testing.assert_allclose(m.gradient(x[0]), fd, rtol=1e-6)


def test_model_contracts():
    I = build_index_set(2, 2)
    dm = DomainMap([-1.0, -1.0], [1.0, 1.0])
    with pytest.raises(ContractError):
        ValueModel(I, "legendre", np.zeros(I.q + 1), dm)
    with pytest.raises(ContractError):
        ValueModel(I, "legendre", np.zeros(I.q), DomainMap([-1.0], [1.0]))
    m = ValueModel(I, "legendre", np.zeros(I.q), dm)
    assert m.value(np.zeros(2)) == 0.0
    with pytest.raises(ContractError):
        m.value(np.zeros(3))


def test_extrapolation_is_logged(caplog):
    m = quadratic_model(np.eye(2), [-1.0, -1.0], [1.0, 1.0])
    with caplog.at_level(logging.WARNING):
        v = m.value(np.array([[2.0, 0.0], [0.0, 0.0]]))
    assert v[0] == pytest.approx(4.0)
    assert m.excursions == 1
    assert "extrapolation" in caplog.text


def test_lqr_fit_recovers_riccati_value(lqr_dataset, lqr_model, riccati):
    _, val = split(lqr_dataset, 40)
    X = lqr_dataset.X[val]
    V = np.einsum("ni,ij,nj->n", X, riccati, X)
    assert np.max(np.abs(lqr_model.value(X) - V) / V) < 1e-2


def test_lqr_feedback_matches_riccati_gain(lqr, lqr_dataset, lqr_model, riccati):
    _, val = split(lqr_dataset, 40)
    X = lqr_dataset.X[val]
    u = eval_feedback(lqr_model, lqr, X)
    ref = -(1 / (2 * lqr.beta)) * (2 * X @ riccati) @ lqr.B
    assert np.linalg.norm(u - ref) / np.linalg.norm(ref) < 2e-2


def test_lqr_closed_loop_cost_near_optimal(lqr, lqr_model):
    x0 = np.array([0.6, -0.7])
    grid = TimeGrid(lqr.T, lqr.default_dt)
    cl = simulate_closed_loop(lqr, lqr_model, x0, grid)
    opt = solve_open_loop(lqr, x0, grid)
    assert not cl.diverged
    assert abs(cl.cost - opt.cost) / opt.cost < 0.02


def test_vanderpol_closed_loop_ordering(vdp, vdp_model):
    x0 = np.array([2.0, -1.0])
    grid = TimeGrid(vdp.T, 1e-3)
    fitted = simulate_closed_loop(vdp, vdp_model, x0, grid)
    free = simulate_closed_loop(vdp, None, x0, grid)
    opt = solve_open_loop(vdp, x0, grid, scheme="rk4")
    assert opt.cost <= fitted.cost < free.cost
    assert fitted.cost <= 1.2 * opt.cost


def test_vanderpol_validation_errors_match_reported_magnitude(vdp_dataset, vdp_model):
    _, val = split(vdp_dataset, 40)
    l2, h1 = validation_errors(vdp_model, vdp_dataset, val)
    assert 0.5 * 1.20e-2 <= l2 <= 5 * 1.20e-2
    assert 0.5 * 2.05e-2 <= h1 <= 5 * 2.05e-2


def test_cn_closed_loop_agrees_with_rk4(lqr, lqr_model):
    grid = TimeGrid(lqr.T, 1e-2)
    a = simulate_closed_loop(lqr, lqr_model, np.array([0.5, 0.5]), grid, "rk4")
    b = simulate_closed_loop(lqr, lqr_model, np.array([0.5, 0.5]), grid, "cn")
    assert np.max(np.abs(a.states - b.states)) < 1e-3


def test_divergence_is_reported_not_raised():
    pr = LinearQuadraticProblem(A=[[50.0]], B=[[1.0]], Q=[[1.0]], T=2.0)
    res = simulate_closed_loop(pr, None, np.array([1.0]), TimeGrid(2.0, 0.01))
    assert res.diverged and res.cost == np.inf
    assert 0 < res.truncation_time < 2.0
    assert np.isnan(res.states[-1, 0])


def test_simulate_contracts(lqr):
    with pytest.raises(ContractError):
        simulate_closed_loop(lqr, None, np.array([np.nan, 0.0]))
    with pytest.raises(ContractError):
        simulate_closed_loop(lqr, None, np.zeros(2), scheme="euler")


def test_validation_errors_hand_values(lqr_dataset):
    m = quadratic_model(np.zeros((2, 2)), [-1.0, -1.0], [1.0, 1.0])
    idx = np.arange(5)
    l2, h1 = validation_errors(m, lqr_dataset, idx)
    assert l2 == pytest.approx(1.0) and h1 == pytest.approx(1.0)
    with pytest.raises(MetricError):
        validation_errors(m, lqr_dataset, [])


def test_series_csv(tmp_path, lqr, lqr_model):
    grid = TimeGrid(lqr.T, 0.1)
    x0 = np.array([0.5, -0.5])
    runs = {
        "fitted": simulate_closed_loop(lqr, lqr_model, x0, grid),
        "optimal": ClosedLoopResult.from_open_loop(lqr, solve_open_loop(lqr, x0, grid)),
    }
    p = tmp_path / "cl.csv"
    write_series_csv(p, runs)
    rows = list(csv.reader(p.open()))
    assert rows[0][0] == "t" and "fitted_state_norm" in rows[0] and "optimal_control_norm" in rows[0]
    assert len(rows) == grid.K + 2
    assert float(rows[1][rows[0].index("fitted_state_norm")]) == pytest.approx(np.linalg.norm(x0))
    with pytest.raises(ContractError):
        write_series_csv(p, {"a": runs["fitted"], "b": simulate_closed_loop(lqr, None, x0, TimeGrid(2.0, 0.5))})


def test_cucker_smale_diagnostics_in_series(cs_small):
    x0 = np.linspace(-1, 1, cs_small.n)
    res = simulate_closed_loop(cs_small, None, x0, TimeGrid(cs_small.T, 0.05))
    s = res.series()
    assert "consensus_variance" in s and s["consensus_variance"].shape == (res.grid.K + 1,)
    # uncontrolled alignment does not increase the velocity spread
    assert s["consensus_variance"][-1] <= s["consensus_variance"][0]
