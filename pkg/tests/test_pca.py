import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from ctdloco.exceptions import ConfigurationError
from ctdloco.pca import (DEFAULT_SPEEDS, PCBasis, RankDeficiencyWarning, RecurrentPCA,
                         RolloutDataset, collect_rollouts, explained_variance_report, fit_pca,
                         project, reconstruct)
from ctdloco.policy import PolicyDims, PolicyNet


def assert_basis_invariants(basis):
    c = basis.components
    assert np.max(np.abs(c.T @ c - np.eye(basis.dim))) < 1e-10
    assert np.all(np.diff(basis.variances) <= 0)
    assert np.all(basis.variances >= 0)
    lead = c[np.argmax(np.abs(c), axis=0), np.arange(basis.dim)]
    assert np.all(lead > 0)


def truncation_gap(basis, X, k):
    z = project(basis, X, k)
    err = np.mean(np.sum((X - reconstruct(basis, z)) ** 2, axis=1))
    return err, basis.variances[k:].sum()


def test_line_data_is_rank_one(rng):
    direction = rng.normal(size=6)
    X = rng.normal(size=(200, 1)) * direction + 3.0
    with pytest.warns(RankDeficiencyWarning):
        basis = fit_pca(X)
    assert basis.variances[0] > 0
    assert np.all(basis.variances[1:] < 1e-18)
    assert basis.rank_deficient
    assert explained_variance_report(basis)[0][1] == 1.0


def test_isotropic_variances(rng):
    basis = fit_pca(rng.normal(size=(100_000, 8)))
    assert np.all(np.abs(basis.variances - 1) < 0.05)


def test_full_reconstruction_and_truncation(rng):
    X = rng.normal(size=(500, 10)) @ rng.normal(size=(10, 10)) + rng.normal(size=10)
    basis = fit_pca(X)
    assert_basis_invariants(basis)
    assert np.max(np.abs(reconstruct(basis, project(basis, X)) - X)) < 1e-8
    for k in range(1, 10):
        err, tail = truncation_gap(basis, X, k)
        assert err == pytest.approx(tail, rel=1e-8)


def test_reconstruct_with_residual_is_exact(rng):
    X = rng.normal(size=(50, 6))
    basis = fit_pca(X)
    z = project(basis, X)
    np.testing.assert_allclose(reconstruct(basis, z[:, :2], z[:, 2:]), X, atol=1e-12)


def test_project_identities(rng):
    basis = fit_pca(rng.normal(size=(300, 5)))
    assert np.allclose(project(basis, basis.mean, 3), 0)
    z = rng.normal(size=(4, 3))
    np.testing.assert_allclose(project(basis, reconstruct(basis, z), 3), z, atol=1e-12)
    with pytest.raises(ConfigurationError):
        project(basis, basis.mean, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_shift_equivariance(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(80, 4)) * [3.0, 2.0, 1.0, 0.5]
    shift = r.normal(size=4) * 10
    a, b = fit_pca(X), fit_pca(X + shift)
    np.testing.assert_allclose(b.mean, a.mean + shift, atol=1e-9)
    np.testing.assert_allclose(np.abs(b.components.T @ a.components), np.eye(4), atol=1e-6)


def test_uniform_spectrum_report():
    basis = PCBasis(np.zeros(4), np.eye(4), np.full(4, 2.0))
    fracs = [f for _, f, _ in explained_variance_report(basis)]
    assert fracs == [0.25] * 4
    assert explained_variance_report(basis)[-1][2] == pytest.approx(1.0, abs=1e-10)


def test_basis_json_round_trip(tmp_path, rng):
    basis = fit_pca(rng.normal(size=(40, 4)))
    basis.save(tmp_path / "b.json")
    back = PCBasis.load(tmp_path / "b.json")
    assert np.array_equal(back.components, basis.components)
    assert back.source_hash == basis.source_hash


def test_dataset_csv_round_trip(tmp_path, rng):
    ds = RolloutDataset(rng.normal(size=(6, 4)), np.repeat([0, 1], 3), np.repeat([0.8, 1.0], 3),
                        np.tile([0, 1, 2], 2))
    ds.to_csv(tmp_path / "d.csv", "# meta")
    back = RolloutDataset.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.states, ds.states)
    assert np.array_equal(back.speed, ds.speed)


def test_dataset_metadata_must_match():
    with pytest.raises(ConfigurationError):
        RolloutDataset(np.zeros((3, 2)), np.zeros(2), np.zeros(3), np.zeros(3))


def test_zero_policy_states_are_constant(env_cfg):
    net = PolicyNet.zeros(PolicyDims(n_cells=4))
    ds = collect_rollouts(net, env_cfg, [1.0], steps=50, warmup=0)
    assert np.all(ds.states[1:] == ds.states[1])


def test_collection_shape_and_determinism(env_cfg):
    net = PolicyNet.random(PolicyDims(n_cells=4), seed=0)
    a = collect_rollouts(net, env_cfg, DEFAULT_SPEEDS, steps=300, seed=5, warmup=100)
    b = collect_rollouts(net, env_cfg, DEFAULT_SPEEDS, steps=300, seed=5, warmup=100)
    assert a.states.shape == (7 * 200, 8)
    assert np.array_equal(a.states, b.states)
    assert sorted(set(np.round(a.speed, 6))) == [0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0]


def test_estimator_front_end(rng):
    X = rng.normal(size=(100, 6))
    est = RecurrentPCA(n_components=2)
    assert clone(est).get_params() == {"n_components": 2}
    Z = est.fit_transform(X)
    assert Z.shape == (100, 2)
    np.testing.assert_allclose(est.inverse_transform(est.transform(X)),
                               reconstruct(est.basis_, Z), atol=1e-12)


@pytest.mark.slow
def test_trained_model_basis(walking16):
    ds, basis = walking16
    assert_basis_invariants(basis)
    X = ds.states
    assert np.max(np.abs(reconstruct(basis, project(basis, X)) - X)) < 1e-8
    for k in (1, 2, 4, 8):
        err, tail = truncation_gap(basis, X, k)
        assert err == pytest.approx(tail, rel=1e-8)
    cum4 = explained_variance_report(basis)[3][2]
    # regression pin for the default training run
    assert cum4 > 0.85
