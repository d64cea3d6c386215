from dataclasses import replace

import numpy as np
import pytest

from deadzone_idyn.dynamics import LinkParams, base_parameters, ideal_inverse_dynamics, regressor_row
from deadzone_idyn.errors import InsufficientDataError, InvalidInputError
from deadzone_idyn.experiment import cell_seed
from deadzone_idyn.ne import load_ne, ne_fit, ne_predict, rls_init, rls_update, save_ne
from deadzone_idyn.signals import Dataset, subsample_rows

P = base_parameters().size


def _noiseless(log, n, rng, params=LinkParams()):
    """Simulator states with torques from the rigid-body model itself."""
    rows = rng.choice(np.arange(10, len(log) - 10), n, replace=False)
    ddq = (log.dq[rows + 1] - log.dq[rows - 1]) / (2 * log.timestep)
    q, dq = log.q[rows], log.dq[rows]
    return Dataset(q, dq, ddq, ideal_inverse_dynamics(q, dq, ddq, params))


def _normal_equations(ds):
    Y = regressor_row(ds.q, ds.dq, ds.ddq).reshape(-1, P)
    return np.linalg.solve(Y.T @ Y, Y.T @ ds.tau.ravel())


def test_init():
    s = rls_init(P, 1e6)
    assert np.all(s.phi == 0) and s.count == 0
    np.testing.assert_allclose(np.linalg.eigvalsh(s.cov), 1e6)
    with pytest.raises(InvalidInputError):
        rls_init(P, 0.0)


def test_zero_regressor_leaves_state_unchanged(rng):
    s = rls_init(P)
    s = rls_update(s, rng.normal(size=(3, P)), rng.normal(size=3))
    t = rls_update(s, np.zeros((3, P)), rng.normal(size=3))
    assert np.array_equal(t.phi, s.phi) and np.array_equal(t.cov, s.cov)


def test_update_checks_inputs():
    s = rls_init(P)
    with pytest.raises(InvalidInputError):
        rls_update(s, np.zeros((3, P + 1)), np.zeros(3))
    with pytest.raises(InvalidInputError):
        rls_update(s, np.full((3, P), np.nan), np.zeros(3))


def test_update_returns_new_state(rng):
    s = rls_init(P)
    t = rls_update(s, rng.normal(size=(3, P)), rng.normal(size=3))
    assert np.all(s.phi == 0) and t.count == 1


def test_matches_normal_equations_noiseless(default_log, rng):
    ds = _noiseless(default_log, 200, rng)
    fit = ne_fit(ds)
    ref = _normal_equations(ds)
    Y = regressor_row(ds.q, ds.dq, ds.ddq)
    np.testing.assert_allclose(Y @ fit.phi, Y @ ref, rtol=0, atol=1e-8)


def test_matches_normal_equations_on_pipeline_data(prepared):
    # inconsistent data: friction and filtering make the fit a true compromise
    ds = prepared.train.take(np.flatnonzero(prepared.train_mask.all_moving)[:200])
    fit = ne_fit(ds, prior_scale=1e8)
    Y = regressor_row(ds.q, ds.dq, ds.ddq)
    np.testing.assert_allclose(Y @ fit.phi, Y @ _normal_equations(ds), rtol=0, atol=1e-8)


def test_recovers_rigid_body_torque(default_log, rng):
    params = LinkParams()
    ds = _noiseless(default_log, 400, rng, params)
    held = _noiseless(default_log, 200, np.random.default_rng(1), params)
    fit = ne_fit(ds)
    assert np.abs(ne_predict(fit, held) - held.tau).max() < 1e-6
    np.testing.assert_allclose(fit.phi, base_parameters().vector(params), rtol=1e-6)


def test_order_invariance(default_log, rng):
    ds = _noiseless(default_log, 300, rng)
    a = ne_fit(ds)
    b = ne_fit(ds.take(rng.permutation(len(ds))))
    assert np.abs(ne_predict(a, ds) - ne_predict(b, ds)).max() < 1e-6


def test_covariance_stays_positive_definite(rng):
    s = rls_init(P)
    phi, cov = s.phi, s.cov
    from deadzone_idyn.ne import _update_inplace
    for k in range(10_000):
        Y = rng.normal(scale=rng.choice([1e-3, 1.0, 30.0]), size=(3, P))
        _update_inplace(phi, cov, Y, rng.normal(size=3))
        if k % 1000 == 999:
            assert np.array_equal(cov, cov.T)
            assert np.linalg.eigvalsh(cov).min() > 0
    assert np.linalg.eigvalsh(cov).min() > 0


def test_fit_uses_only_fully_moving_rows(default_log, rng):
    ds = _noiseless(default_log, 100, rng)
    r = np.ones((100, 3))
    r[::2, 0] = 0
    fit = ne_fit(ds, r)
    assert fit.count == 50
    with pytest.raises(InsufficientDataError):
        ne_fit(ds, np.zeros((100, 3)))
    with pytest.raises(InvalidInputError):
        ne_fit(ds, np.ones((99, 3)))


def test_prediction_is_regressor_times_phi(rng, prepared):
    fit = ne_fit(prepared.train, prepared.train_mask)
    Y = regressor_row(prepared.test.q, prepared.test.dq, prepared.test.ddq)
    np.testing.assert_allclose(ne_predict(fit, prepared.test), Y @ fit.phi, rtol=0, atol=1e-12)
    sample = prepared.test[3]
    np.testing.assert_allclose(ne_predict(fit, sample), Y[3] @ fit.phi, rtol=0, atol=1e-12)


def test_zero_state_without_gravity_predicts_zero(rng):
    geom = replace(base_parameters().geometry, gravity=0.0)
    dim = base_parameters(geom).size
    s = rls_init(dim, geometry=geom)
    s.phi[:] = rng.normal(size=dim)
    zero = Dataset(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)))
    assert np.all(ne_predict(s, zero) == 0)


def test_dead_zone_rows_get_rigid_body_torque(default_log, rng, prepared):
    # stuck rows are predicted with the friction-free model, not the measured torque
    params = LinkParams()
    fit = ne_fit(_noiseless(default_log, 400, rng, params))
    dead = prepared.train.take(np.flatnonzero(~prepared.train_mask.all_moving)[:50])
    ref = ideal_inverse_dynamics(dead.q, dead.dq, dead.ddq, params)
    np.testing.assert_allclose(ne_predict(fit, dead), ref, rtol=0, atol=1e-6)


def test_file_round_trip(tmp_path, prepared):
    fit = ne_fit(prepared.train, prepared.train_mask)
    path = save_ne(fit, tmp_path / "ne.model")
    assert path.read_text().splitlines()[0] == f"ne 1 {P}"
    back = load_ne(path)
    assert np.array_equal(back.phi, fit.phi) and np.array_equal(back.cov, fit.cov)
    assert (back.count, back.viscous, back.geometry) == (fit.count, fit.viscous, fit.geometry)


def test_without_viscous_terms(prepared):
    fit = ne_fit(prepared.train, prepared.train_mask, viscous=False)
    assert fit.dim == base_parameters(viscous=False).size == 5
    assert ne_predict(fit, prepared.test).shape == (500, 3)


def test_error_nearly_independent_of_sample_count(prepared):
    # expected test MSE at 300 vs 3000 training rows, averaged over many draws
    r = prepared.train_mask.r
    means = {}
    for k in (300, 3000):
        errs = []
        for trial in range(200):
            rows = subsample_rows(len(prepared.train), k, cell_seed(0, k, trial))
            fit = ne_fit(prepared.train.take(rows), r[rows])
            errs.append(((ne_predict(fit, prepared.test) - prepared.test.tau) ** 2).mean(axis=0))
        means[k] = np.mean(errs, axis=0)
    change = np.abs(means[300] - means[3000]) / means[3000]
    assert np.all(change < 0.05), change
