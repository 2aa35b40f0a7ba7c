import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from batchloop.errors import DomainError, LinearizationError
from batchloop.lifted_model import (
    LiftedBatchModel,
    LtvMatrices,
    build_lifted,
    incremental_predict,
    linearize,
    predict_batch,
)
from batchloop.reactor_sim import BatchTimeGrid, ReactorParams, integrate_step, ReactorState


def random_ltv(rng, n_x, T, n_u=1, n_d=1, n_z=2, n_y=2):
    return LtvMatrices(
        A=rng.normal(scale=0.7, size=(T, n_x, n_x)),
        B_u=rng.normal(size=(T, n_x, n_u)),
        B_d=rng.normal(size=(T, n_x, n_d)),
        F_obs=rng.normal(size=(T, n_z, n_x)),
        C_T=rng.normal(size=(n_y, n_x)),
    )


def recursion(ltv, x0, u, d):
    """Step-by-step propagation of the LTV model, stacked over t = 1..T."""
    x = np.asarray(x0, float)
    out = []
    n_u, n_d = ltv.B_u.shape[2], ltv.B_d.shape[2]
    for t in range(ltv.T):
        x = ltv.A[t] @ x + ltv.B_u[t] @ u[t * n_u:(t + 1) * n_u] + ltv.B_d[t] @ d[t * n_d:(t + 1) * n_d]
        out.append(x)
    return np.concatenate(out)


def test_hand_assembled_two_step_case():
    ltv = LtvMatrices(np.ones((2, 1, 1)), np.ones((2, 1, 1)), np.ones((2, 1, 1)),
                      np.ones((2, 1, 1)), np.ones((1, 1)))
    m = build_lifted(ltv)
    np.testing.assert_array_equal(m.Phi, [[1], [1]])
    np.testing.assert_array_equal(m.Psi_u, [[1, 0], [1, 1]])
    np.testing.assert_array_equal(m.Gamma, [[0, 1]])


def test_zero_dynamics_give_block_diagonal(rng):
    ltv = random_ltv(rng, 3, 4)
    ltv.A[:] = 0.0
    m = build_lifted(ltv)
    for i in range(4):
        for j in range(4):
            blk = m.Psi_u[3 * i:3 * i + 3, j:j + 1]
            if i == j:
                np.testing.assert_array_equal(blk, ltv.B_u[i])
            else:
                assert not blk.any()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 5))
def test_lifted_equals_recursion(seed, n_x, T):
    rng = np.random.default_rng(seed)
    ltv = random_ltv(rng, n_x, T)
    m = build_lifted(ltv)
    x0, u, d = rng.normal(size=n_x), rng.normal(size=T), rng.normal(size=T)
    np.testing.assert_allclose(predict_batch(m, x0, u, d), recursion(ltv, x0, u, d), rtol=0, atol=1e-12)
    # observation stack and terminal quality
    x = predict_batch(m, x0, u, d)
    z = np.concatenate([ltv.F_obs[t] @ x[t * n_x:(t + 1) * n_x] for t in range(T)])
    np.testing.assert_allclose(m.Omega @ x, z, atol=1e-12)
    np.testing.assert_allclose(m.Gamma @ x, ltv.C_T @ x[-n_x:], atol=1e-12)


def test_structure_of_lifted_matrices(rng):
    m = build_lifted(random_ltv(rng, 3, 5))
    for i in range(5):
        for j in range(i + 1, 5):
            assert not m.Psi_u[3 * i:3 * i + 3, j].any()
            assert not m.Psi_d[3 * i:3 * i + 3, j].any()
            assert not m.Omega[2 * i:2 * i + 2, 3 * j:3 * j + 3].any()
    assert not m.Gamma[:, :-3].any()


def test_causality(rng):
    ltv = random_ltv(rng, 2, 5)
    m = build_lifted(ltv)
    u = rng.normal(size=5)
    base = predict_batch(m, np.zeros(2), u, np.zeros(5))
    for j in range(5):
        du = np.zeros(5)
        du[j] = 1.0
        diff = predict_batch(m, np.zeros(2), u + du, np.zeros(5)) - base
        assert not diff[:2 * j].any()
        assert diff[2 * j:2 * j + 2].any()


def test_trivial_predictions(rng):
    m = build_lifted(random_ltv(rng, 3, 4))
    assert not predict_batch(m, np.zeros(3), np.zeros(4), np.zeros(4)).any()
    x0 = rng.normal(size=3)
    np.testing.assert_array_equal(predict_batch(m, x0, np.zeros(4), np.zeros(4)), m.Phi @ x0)
    x = rng.normal(size=12)
    np.testing.assert_array_equal(incremental_predict(m, x, np.zeros(4)), x)


def test_incremental_is_difference_of_batch_predictions(rng):
    m = build_lifted(random_ltv(rng, 3, 4))
    x0, u, d, du = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)
    diff = predict_batch(m, x0, u + du, d) - predict_batch(m, x0, u, d)
    np.testing.assert_allclose(diff, m.Psi_u @ du, atol=1e-12)
    # same initial state across batches: incremental form reproduces the absolute one
    np.testing.assert_allclose(incremental_predict(m, predict_batch(m, x0, u, d), du),
                               predict_batch(m, x0, u + du, d), atol=1e-12)


def test_partial_sum_matches_truncated_full_form(rng):
    ltv = random_ltv(rng, 2, 6)
    m = build_lifted(ltv)
    t = 3
    du = rng.normal(size=6)
    du[t:] = 0.0
    # direct summation over the blocks j < t
    direct = sum(m.psi_u_col(j)[:, 0] * du[j] for j in range(t))
    np.testing.assert_allclose(incremental_predict(m, np.zeros(12), du), direct, atol=1e-12)


def test_split_point_identity(rng):
    """x(T) = x(t) + Psi_u du for any split when the inputs change only from t on."""
    m = build_lifted(random_ltv(rng, 2, 6))
    x_prev = rng.normal(size=12)
    du = rng.normal(size=6)
    for t in range(6):
        first = du.copy()
        first[t:] = 0
        rest = du - first
        mid = incremental_predict(m, x_prev, first)
        np.testing.assert_allclose(incremental_predict(m, mid, rest), incremental_predict(m, x_prev, du),
                                   atol=1e-12)


def test_dimension_mismatch(rng):
    m = build_lifted(random_ltv(rng, 3, 4))
    with pytest.raises(DomainError):
        predict_batch(m, np.zeros(2), np.zeros(4), np.zeros(4))
    with pytest.raises(DomainError):
        incremental_predict(m, np.zeros(12), np.zeros(5))


def test_non_finite_ltv_rejected(rng):
    ltv = random_ltv(rng, 2, 3)
    ltv.A[1, 0, 0] = np.nan
    with pytest.raises(LinearizationError):
        build_lifted(ltv)


def test_frozen_dynamics_linearise_to_identity():
    p = ReactorParams(alpha1=1e-300, alpha2=1e-300, h_ow=1e-300)
    x = np.tile([1.0, 0.0, 323.0, 323.0], (3, 1))
    ltv = linearize(x, np.zeros(2), BatchTimeGrid(T_f=180.0, n_steps=2), p)
    np.testing.assert_allclose(ltv.A, np.broadcast_to(np.eye(4), (2, 4, 4)), atol=1e-7)


def test_selectors(nominal, lifted, rng):
    v = rng.normal(size=4)
    ltv = linearize(nominal.x_nom, nominal.u_nom)
    np.testing.assert_array_equal(ltv.F_obs[5] @ v, v[[2, 3]])
    np.testing.assert_array_equal(ltv.C_T @ v, v[[0, 1]])


def test_one_step_linearisation_accuracy(nominal, rng):
    ltv = linearize(nominal.x_nom, nominal.u_nom)
    for t in (0, 10, 25, 39):
        base = integrate_step(nominal.x_nom[t], nominal.u_nom[t], 323.0).as_array()
        for _ in range(3):
            dx = rng.normal(size=4)
            dx *= 1e-4 / np.linalg.norm(dx)
            x = nominal.x_nom[t] + dx
            x[:2] = np.maximum(x[:2], 0)
            dx = x - nominal.x_nom[t]
            nl = integrate_step(x, nominal.u_nom[t], 323.0).as_array() - base
            lin = ltv.A[t] @ dx
            assert np.linalg.norm(nl - lin) < 1e-3 * np.linalg.norm(nl)


def test_lifted_model_tracks_nonlinear_response(nominal, lifted):
    from batchloop.reactor_sim import simulate_batch_many
    du = np.full(40, 0.1)
    nl = simulate_batch_many((nominal.u_nom + du)[None])[0]
    lin = lifted.unlift_states(lifted.Psi_u @ du)
    dev_nl = nl[-1] - nominal.x_nom[-1]
    dev_lin = lin[-1] - nominal.x_nom[-1]
    np.testing.assert_allclose(dev_lin, dev_nl, rtol=0.1)


def test_json_round_trip(lifted, tmp_path):
    path = tmp_path / "lifted.json"
    lifted.save(path)
    back = LiftedBatchModel.load(path)
    for name in ("Phi", "Psi_u", "Psi_d", "Omega", "Gamma", "nominal_x", "nominal_u"):
        np.testing.assert_array_equal(getattr(back, name), getattr(lifted, name))
    assert back.T == 40 and back.n_x == 4
