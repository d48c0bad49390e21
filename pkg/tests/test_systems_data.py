"""Tests for ODE systems, the RK4 integrator, and dataset handling."""

import numpy as np
import pytest

from khdm.data import (
    Dataset,
    Trajectory,
    export_dataset_csv,
    load_dataset,
    sample_dataset,
    save_dataset,
    white_noise_dataset,
)
from khdm.errors import ContractViolation, DivergenceError
from khdm.systems import integrate_batch, jacobian, make_spec, rhs, rk4_integrate


def test_defaults_match_reference_parameters():
    assert make_spec("vanderpol").params == {"mu": 1.5}
    lorenz = make_spec("lorenz63").params
    assert (lorenz["sigma"], lorenz["rho"]) == (10.0, 28.0)
    assert abs(lorenz["b"] - 8.0 / 3.0) < 1e-15
    rossler = make_spec("rossler").params
    assert (rossler["a"], rossler["b"], rossler["c"]) == (0.1, 0.1, 14.0)
    assert make_spec("ks").params == {"length": 11.0}
    with pytest.raises(ContractViolation):
        make_spec("duffing")
    with pytest.raises(ContractViolation):
        make_spec("lorenz63", state_dim=5)


def test_lorenz_rhs_at_unit_point():
    f = rhs(make_spec("lorenz63"))
    out = f(np.array([1.0, 1.0, 1.0]))
    assert np.allclose(out, [0.0, 26.0, -5.0 / 3.0], atol=1e-14)


@pytest.mark.parametrize("name", ["vanderpol", "lorenz63", "rossler", "lorenz96"])
def test_jacobian_matches_finite_differences(name):
    spec = make_spec(name)
    f, jac = rhs(spec), jacobian(spec)
    rng = np.random.default_rng(5)
    y = rng.standard_normal(spec.state_dim)
    j_fd = np.zeros((spec.state_dim, spec.state_dim))
    step = 1e-6
    for i in range(spec.state_dim):
        e = np.zeros(spec.state_dim)
        e[i] = step
        j_fd[:, i] = (f(y + e) - f(y - e)) / (2 * step)
    assert np.max(np.abs(jac(y) - j_fd)) < 1e-6


def test_zero_field_gives_constant_trajectory():
    out = integrate_batch(lambda y: np.zeros_like(y), np.ones((3, 1)) * 2.5, 0.1, 20)
    assert np.all(out == 2.5)


def test_rk4_matches_exponential():
    out = integrate_batch(lambda y: y, np.ones((1, 1)), 0.05, 1)
    assert abs(out[0, 1, 0] - np.exp(0.05)) < 1e-8


def test_rk4_fourth_order_convergence():
    # Endpoint error on dy/dt = y over t = 1 should shrink ~16x per halving.
    errors = []
    for dt in (0.1, 0.05):
        steps = int(round(1.0 / dt))
        out = integrate_batch(lambda y: y, np.ones((1, 1)), dt, steps)
        errors.append(abs(out[0, -1, 0] - np.e))
    order = np.log2(errors[0] / errors[1])
    assert 3.7 <= order <= 4.3


def test_harmonic_oscillator_energy_drift():
    def f(y):
        return np.stack([y[1], -y[0]])

    out = integrate_batch(f, np.array([[1.0], [0.0]]), 0.05, 400)[:, :, 0]
    energy = out[0] ** 2 + out[1] ** 2
    assert np.max(np.abs(energy - energy[0])) / energy[0] < 1e-6


def test_rk4_integrate_shapes_and_divergence():
    spec = make_spec("lorenz63")
    traj = rk4_integrate(spec, [1.0, 1.0, 1.0], 0.05, 400)
    assert traj.values.shape == (3, 401)
    assert traj.dt == 0.05

    unstable = make_spec("lorenz96", state_dim=4, forcing=1e7)
    with pytest.raises(DivergenceError) as err:
        rk4_integrate(unstable, [1.0, 0.0, 0.0, 0.0], 0.5, 50)
    assert err.value.step_index is not None


def test_sample_dataset_shapes():
    spec = make_spec("vanderpol")
    ds = sample_dataset(spec, n_traj=4, t_f=20.0, dt=0.05, seed=7)
    assert ds.n_traj == 4
    assert ds.state_dim == 2
    assert ds.n_columns == 401


def test_sample_dataset_deterministic():
    spec = make_spec("lorenz63")
    a = sample_dataset(spec, n_traj=3, t_f=2.0, dt=0.05, seed=11)
    b = sample_dataset(spec, n_traj=3, t_f=2.0, dt=0.05, seed=11)
    for ta, tb in zip(a.trajectories, b.trajectories):
        assert np.array_equal(ta.values, tb.values)


def test_sample_dataset_threads_reproduce_serial(monkeypatch):
    spec = make_spec("lorenz63")
    serial = sample_dataset(spec, n_traj=6, t_f=1.0, dt=0.05, seed=3)
    monkeypatch.setenv("KHDM_THREADS", "4")
    threaded = sample_dataset(spec, n_traj=6, t_f=1.0, dt=0.05, seed=3)
    for ta, tb in zip(serial.trajectories, threaded.trajectories):
        assert np.array_equal(ta.values, tb.values)


def test_lorenz_samples_stay_on_attractor():
    # Long-run reference integration puts the attractor's z values roughly
    # in [0, 48]; after burn-in nearly all samples must satisfy the bound.
    spec = make_spec("lorenz63")
    ds = sample_dataset(spec, n_traj=16, t_f=20.0, dt=0.05, seed=5)
    z = np.concatenate([t.values[2] for t in ds.trajectories])
    fraction = np.mean(np.abs(z - 23.5) < 30.0)
    assert fraction >= 0.99


def test_sample_dataset_divergence_after_retries():
    unstable = make_spec("lorenz96", state_dim=4, forcing=1e7)
    with pytest.raises(DivergenceError):
        sample_dataset(unstable, n_traj=1, t_f=2.0, dt=0.5, seed=0, burn_in=1.0)


def test_dataset_roundtrip_bitwise(tmp_path):
    spec = make_spec("rossler")
    ds = sample_dataset(spec, n_traj=3, t_f=1.0, dt=0.05, seed=2)
    path = tmp_path / "r.khdm"
    save_dataset(path, ds)
    loaded = load_dataset(path)
    assert loaded.n_traj == ds.n_traj
    assert loaded.dt == ds.dt
    assert loaded.seed == 2
    for ta, tb in zip(ds.trajectories, loaded.trajectories):
        assert np.array_equal(ta.values, tb.values)

    save_dataset(tmp_path / "r2.khdm", ds)
    assert (tmp_path / "r.khdm").read_bytes() == (tmp_path / "r2.khdm").read_bytes()


def test_csv_export(tmp_path):
    ds = white_noise_dataset(state_dim=2, n_traj=2, n_columns=3, dt=0.1, seed=0)
    path = tmp_path / "d.csv"
    export_dataset_csv(path, ds)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",")[:3] == ["trajectory", "column", "t"]
    assert len(lines) == 1 + 2 * 3


def test_dataset_shape_consistency_enforced():
    t1 = Trajectory(values=np.zeros((2, 5)), dt=0.1)
    t2 = Trajectory(values=np.zeros((2, 6)), dt=0.1)
    with pytest.raises(ContractViolation):
        Dataset(trajectories=[t1, t2])


def test_stacked_layout_is_trajectory_major():
    t1 = Trajectory(values=np.ones((1, 3)), dt=0.1)
    t2 = Trajectory(values=2 * np.ones((1, 3)), dt=0.1)
    ds = Dataset(trajectories=[t1, t2])
    assert np.array_equal(ds.stacked(), [[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]])
