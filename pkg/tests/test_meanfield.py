import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from mfgtrade import (
    AgentClass,
    DivergenceError,
    MarketParams,
    ParameterError,
    TimeGrid,
    mean_field_response,
    solve_mean_field_heterogeneous,
    solve_mean_field_identical,
)
from mfgtrade.core.params import three_asset_example
from mfgtrade.core.strategy import speed_components

from conftest import moderate_params, scalar_params

DESK_E0 = np.array([1e5, 5e4, -2.5e4])


def dense_scheme(params, E0, grid):
    """Independent oracle: the implicit scheme assembled as a dense matrix, unknowns (x_0, y_0, ..., x_N, y_N)."""
    d, N, dt = params.d, grid.n_steps, grid.dt
    Vq = np.diag(params.liquidity)
    Al = np.diag(params.alpha)
    I = np.eye(d)
    n = 2 * d * (N + 1)
    M = np.zeros((n, n))
    b = np.zeros(n)
    X = lambda k: slice(2 * d * k, 2 * d * k + d)  # noqa: E731
    Y = lambda k: slice(2 * d * k + d, 2 * d * (k + 1))  # noqa: E731
    r = 0
    M[r:r + d, X(0)] = I
    b[r:r + d] = E0
    r += d
    for k in range(1, N + 1):
        M[r:r + d, X(k)] = I
        M[r:r + d, X(k - 1)] = -I
        M[r:r + d, Y(k - 1)] = -dt * I
        r += d
        M[r:r + d, Y(k)] = I + dt * 2.0 * Vq @ Al
        M[r:r + d, Y(k - 1)] = -I
        M[r:r + d, X(k)] = -dt * 2.0 * params.gamma * Vq @ params.Sigma
        r += d
    M[r:r + d, X(N)] = 4.0 * Vq @ np.diag(params.A_term)
    M[r:r + d, Y(N)] = I
    z = np.linalg.solve(M, b).reshape(N + 1, 2, d)
    return z[:, 0], z[:, 1]


def test_matches_dense_assembly_of_the_scheme():
    p = moderate_params(d=3, gamma=0.8, seed=11)
    grid = TimeGrid(30)
    E0 = np.array([2.0, -1.0, 0.5])
    sol = solve_mean_field_identical(p, E0, grid)
    x, y = dense_scheme(p, E0, grid)
    np.testing.assert_allclose(sol.E, x, rtol=1e-11, atol=1e-13)
    np.testing.assert_allclose(sol.Edot, y, rtol=1e-11, atol=1e-13)
    np.testing.assert_array_equal(sol.mu, sol.Edot)


def test_discrete_relations_hold_exactly_at_desk_scale():
    p = three_asset_example()
    grid = TimeGrid(100)
    s = solve_mean_field_identical(p, DESK_E0, grid)
    dt, Vq = grid.dt, p.liquidity
    np.testing.assert_array_equal(s.E[0], DESK_E0)
    scale = np.abs(DESK_E0).max()
    assert np.abs(s.E[1:] - s.E[:-1] - dt * s.Edot[:-1]).max() <= 1e-9 * scale
    r2 = s.Edot[1:] - s.Edot[:-1] - dt * (2 * p.gamma * (Vq[:, None] * p.Sigma @ s.E[1:].T).T - 2 * Vq * p.alpha * s.Edot[1:])
    assert np.abs(r2).max() <= 1e-9 * np.abs(s.Edot).max()
    assert s.boundary_residual() <= 1e-8 * (1 + np.linalg.norm(DESK_E0))


@pytest.mark.parametrize("A,V,eta,E0", [(2.5, 2e6, 0.1, 1e5), (1.0, 10.0, 1.0, -3.0), (0.2, 1e3, 0.5, 7.5e4)])
def test_no_impact_no_risk_analytic(A, V, eta, E0):
    p = scalar_params(A=A, V=V, eta=eta)
    grid = TimeGrid(100)
    s = solve_mean_field_identical(p, [E0], grid)
    Vq = V / (4 * eta)
    expected = E0 - 4 * Vq * A * E0 * grid.nodes / (1 + 4 * Vq * A)
    assert np.abs(s.E[:, 0] - expected).max() <= 1e-8 * abs(E0)
    assert s.boundary_residual() <= 1e-8 * (1 + abs(E0))


def test_zero_initial_inventory_gives_zero_everything():
    s = solve_mean_field_identical(three_asset_example(), np.zeros(3), TimeGrid(50))
    for arr in (s.E, s.Edot, s.mu, s.Hs, s.h):
        assert not np.any(arr)


def test_desk_portfolio_liquidation_shape():
    s = solve_mean_field_identical(three_asset_example(gamma=5e-5), DESK_E0, TimeGrid(100))
    dE = np.diff(s.E, axis=0)
    tol = 1e-12 * np.abs(DESK_E0).max()
    assert np.all(dE[:, 0] <= tol) and np.all(dE[:, 1] <= tol)
    assert np.all(dE[:, 2] >= -tol)
    assert np.all(np.abs(s.E[-1]) < 1e-3 * np.abs(DESK_E0))


def test_shape_and_input_checks():
    with pytest.raises(ParameterError):
        solve_mean_field_identical(three_asset_example(), [1.0, 2.0], TimeGrid(10))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5000), st.floats(-1e5, 1e5), st.floats(-1e5, 1e5))
def test_linearity_property(seed, a, b):
    p = moderate_params(d=2, gamma=1.0, seed=seed)
    grid = TimeGrid(40)
    rng = np.random.default_rng(seed)
    e1, e2 = rng.normal(size=2), rng.normal(size=2)
    s1 = solve_mean_field_identical(p, e1, grid)
    s2 = solve_mean_field_identical(p, e2, grid)
    s12 = solve_mean_field_identical(p, a * e1 + b * e2, grid)
    scale = 1 + abs(a) + abs(b)
    np.testing.assert_allclose(s12.E, a * s1.E + b * s2.E, rtol=0, atol=1e-12 * scale)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5000), st.floats(1e-6, 10.0), st.integers(2, 200))
def test_boundary_residual_property(seed, gamma, n):
    p = moderate_params(d=3, gamma=gamma, seed=seed)
    E0 = np.random.default_rng(seed).normal(scale=1e5, size=3)
    s = solve_mean_field_identical(p, E0, TimeGrid(n))
    assert s.boundary_residual() <= 1e-8 * (1 + np.linalg.norm(E0))


def test_response_is_the_linear_map():
    p = three_asset_example()
    grid = TimeGrid(100)
    resp = mean_field_response(p, grid)
    s = solve_mean_field_identical(p, DESK_E0, grid)
    np.testing.assert_allclose(resp.inventory(DESK_E0), s.E, rtol=1e-10, atol=1e-6)
    np.testing.assert_allclose(resp.speed(DESK_E0), s.Edot, rtol=1e-10, atol=1e-4)


def test_decoupling_of_block_diagonal_markets():
    p = MarketParams(sigma=[0.7, 1.3, 0.4], corr=[[1, 0.5, 0], [0.5, 1, 0], [0, 0, 1]], V=[3.0, 8.0, 5.0],
                     eta=[0.2, 0.3, 1.0], alpha=[0.1, 0.2, 0.3], A_term=[1.5, 4.0, 2.0], gamma=0.7)
    grid = TimeGrid(80)
    E0 = np.array([1.0, -2.0, 3.0])
    s = solve_mean_field_identical(p, E0, grid)
    a = solve_mean_field_identical(p.subset([0, 1]), E0[:2], grid)
    b = solve_mean_field_identical(p.subset([2]), E0[2:], grid)
    np.testing.assert_allclose(s.E, np.hstack([a.E, b.E]), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(s.Hs, np.hstack([a.Hs, b.Hs]), rtol=1e-10, atol=1e-14)


def test_first_order_convergence():
    p = moderate_params(d=3, gamma=0.8, seed=1)
    E0 = np.array([1.0, -0.5, 0.3])
    vals = [solve_mean_field_identical(p, E0, TimeGrid(n)) for n in (50, 100, 200, 400)]
    # compare on the common coarse nodes
    errs = []
    for coarse, fine in zip(vals[:-1], vals[1:]):
        errs.append(np.abs(coarse.E - fine.E[::2]).max())
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 0.9)


def _linear_coefficient_oracle(p, s, grid):
    d = p.d
    Vq = np.diag(p.liquidity)

    def riccati_rhs(t, h):
        H = h.reshape(d, d)
        return (-2.0 * H @ Vq @ H + p.gamma * p.Sigma).ravel()

    Hf = solve_ivp(riccati_rhs, (1.0, 0.0), (-2.0 * np.diag(p.A_term)).ravel(), method="Radau",
                   rtol=1e-12, atol=1e-14, dense_output=True).sol
    Hs = np.zeros(d)
    out = [Hs]
    for k in range(grid.n_steps - 1, -1, -1):
        mu_k = s.mu[k]

        def rhs(t, y):
            return -p.alpha * mu_k - 2.0 * Hf(t).reshape(d, d) @ Vq @ y

        Hs = solve_ivp(rhs, (grid.nodes[k + 1], grid.nodes[k]), Hs, method="Radau", rtol=1e-12, atol=1e-14).y[:, -1]
        out.append(Hs)
    return np.array(out[::-1])


def test_linear_coefficient_matches_ode_oracle():
    # Hs' = -Al mu - 2 H Vq Hs with mu held at its node value on each step, solved adaptively;
    # the exponential integrator freezes H at the step midpoint in the source, a second-order error
    p = moderate_params(d=2, gamma=0.8, seed=7)
    errs = []
    for n in (25, 50, 100):
        grid = TimeGrid(n)
        s = solve_mean_field_identical(p, np.array([1.0, -2.0]), grid)
        ref = _linear_coefficient_oracle(p, s, grid)
        assert np.array_equal(s.Hs[-1], np.zeros(2))
        errs.append(np.abs(s.Hs - ref).max() / np.abs(ref).max())
    assert errs[1] < 2e-3
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.8)


def test_value_constant_properties():
    s = solve_mean_field_identical(moderate_params(d=2, seed=2), np.array([1.0, 1.0]), TimeGrid(60))
    assert s.h[-1] == 0.0
    assert np.all(np.diff(s.h) <= 1e-15) and np.all(s.h >= 0)


def test_speed_form_equivalence_converges():
    p = moderate_params(d=3, gamma=0.8, seed=1)
    E0 = np.array([1.0, -0.5, 0.3])
    gaps = []
    for n in (100, 200, 400):
        s = solve_mean_field_identical(p, E0, TimeGrid(n))
        gaps.append(max(np.abs(sum(speed_components(k, s.E[k], s)) - s.Edot[k]).max() for k in range(n + 1)))
    assert gaps[0] < 0.05 * np.abs(E0).max() * 4 and gaps[-1] < gaps[0] / 3.5


# ----- heterogeneous classes -----

def test_single_class_equals_identical_solver():
    p = three_asset_example()
    grid = TimeGrid(100)
    het = solve_mean_field_heterogeneous(p, [AgentClass(1.0, p.gamma, p.A_term, DESK_E0)], grid)
    ref = solve_mean_field_identical(p, DESK_E0, grid)
    for a, b in ((het.classes[0].E, ref.E), (het.classes[0].Edot, ref.Edot), (het.mu, ref.mu)):
        assert np.abs(a - b).max() <= 1e-10 * max(1.0, np.abs(b).max())


def test_no_impact_decouples_classes():
    p = moderate_params(d=3, seed=1, alpha=np.zeros(3))
    grid = TimeGrid(100)
    classes = [AgentClass(0.3, 0.2, [1, 2, 3], [1, 0, -1]), AgentClass(0.7, 1.5, [0.5, 0.5, 4], [0, 2, 1])]
    het = solve_mean_field_heterogeneous(p, classes, grid)
    # the first iteration already gives the answer; the second only confirms it
    assert het.iterations <= 2 and het.residuals[-1] <= 1e-12 * het.residuals[0]
    for c, sol in zip(classes, het.classes):
        ref = solve_mean_field_identical(p.replace(gamma=c.gamma, A_term=c.A_term), c.E0, grid)
        np.testing.assert_allclose(sol.E, ref.E, rtol=1e-12, atol=1e-14)


def two_classes():
    return [
        AgentClass(0.6, 5e-3, [2.5, 2.5, 2.5], [1e5, 5e4, -2.5e4]),
        AgentClass(0.4, 5e-2, [10.0, 1.0, 5.0], [-3e4, 2e4, 4e4]),
    ]


def test_fixed_point_relation_holds():
    p = three_asset_example(gamma=5e-3)
    het = solve_mean_field_heterogeneous(p, two_classes(), TimeGrid(200))
    flow = sum(w * c.Edot for w, c in zip(het.weights, het.classes))
    assert np.abs(flow - het.mu).max() <= 1e-9 * np.abs(het.mu).max()
    for c in het.classes:
        assert c.boundary_residual() <= 1e-8 * (1 + np.abs(c.E[0]).max())


def test_plain_iteration_diverges_at_desk_impact():
    p = three_asset_example(gamma=5e-3)
    with pytest.raises(DivergenceError) as info:
        solve_mean_field_heterogeneous(p, two_classes(), TimeGrid(200), method="plain")
    err = info.value
    assert err.coupling == pytest.approx(8e-4)
    assert len(err.history) >= 3 and err.history[-1] > err.history[0]


def test_plain_iteration_contracts_at_weak_impact():
    p = moderate_params(d=2, seed=3, alpha=np.array([1e-3, 2e-3]))
    classes = [AgentClass(0.5, 0.2, [1, 2], [1, 0]), AgentClass(0.5, 1.5, [2, 1], [0, 1])]
    plain = solve_mean_field_heterogeneous(p, classes, TimeGrid(50), method="plain")
    agg = solve_mean_field_heterogeneous(p, classes, TimeGrid(50))
    np.testing.assert_allclose(plain.mu, agg.mu, rtol=1e-9, atol=1e-12)


def test_heterogeneous_input_checks():
    p = three_asset_example()
    with pytest.raises(ParameterError):
        solve_mean_field_heterogeneous(p, [AgentClass(0.5, 1e-3, [1, 1, 1], [1, 1, 1])], TimeGrid(10))
    with pytest.raises(ParameterError):
        solve_mean_field_heterogeneous(p, two_classes(), TimeGrid(10), damping=0.0)
    with pytest.raises(ParameterError):
        solve_mean_field_heterogeneous(p, [], TimeGrid(10))
