import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motcorr.atomic import CESIUM_D2, TWO_LEVEL
from motcorr.field import FieldConfig, QuadrupoleField, bistability_survey
from motcorr.trajectory import (AtomState, EmissionRecord, MotionModel, StepSizeError, TrapEnvironment,
                                evolve_step, orientation_series, run_trajectory, simulate_atoms,
                                steady_state_excited, two_level_g2_oracle)

G = TWO_LEVEL.gamma
STATIC = MotionModel("static")
SIGMA_PLUS = (1 / np.sqrt(2), 1j / np.sqrt(2), 0.0)


def two_level_env(intensity, detuning=0.0):
    return TrapEnvironment(FieldConfig(k=TWO_LEVEL.k, intensity=intensity, detuning=detuning,
                                       uniform_field=(0, 0, 1)), None)


def test_no_drive_no_jump(rng):
    env = two_level_env(0.0)
    state = AtomState.ground(TWO_LEVEL)
    for _ in range(200):
        state, ev = evolve_step(state, TWO_LEVEL, env, 0.01 / G, rng)
        assert ev is None


def test_ground_state_single_step_norm_loss_tiny(rng):
    env = two_level_env(2.0)
    state = AtomState.ground(TWO_LEVEL)
    # one step from rho_ee = 0: norm loss is third order in dt
    new, _ = evolve_step(state, TWO_LEVEL, env, 0.001 / G, rng)
    assert abs(np.linalg.norm(new.psi) - 1) < 1e-10
    assert np.abs(new.psi[1]) ** 2 < 1e-6


def test_step_limit():
    env = two_level_env(2.0)
    with pytest.raises(StepSizeError):
        evolve_step(AtomState.ground(TWO_LEVEL), TWO_LEVEL, env, 1.0 / G, np.random.default_rng(0))


@settings(max_examples=25)
@given(seed=st.integers(0, 2 ** 31), m=st.integers(-4, 4))
def test_norm_after_step(seed, m):
    rng = np.random.default_rng(seed)
    env = TrapEnvironment(FieldConfig(), QuadrupoleField(), larmor_dephasing=0.2)
    state = AtomState.ground(CESIUM_D2, m, r=(49.969e-6,) * 3)
    for _ in range(5):
        state, _ = evolve_step(state, CESIUM_D2, env, 0.01 / CESIUM_D2.gamma, rng)
        assert np.linalg.norm(state.psi) == pytest.approx(1.0, abs=1e-10)


def test_two_level_emission_rate():
    # s = 1, delta = 0: rho_ss = 0.25
    env = two_level_env(1.0)
    T = 1e4 / G
    rec = run_trajectory(TWO_LEVEL, env, STATIC, T, seed=3)
    expected = 0.25 * G * T
    assert abs(len(rec.t) - expected) < 5 * np.sqrt(expected)


def test_steady_state_formula():
    assert steady_state_excited(G * np.sqrt(0.5), 0.0, G) == pytest.approx(0.25)


def test_stretched_state_cycles():
    env = TrapEnvironment(FieldConfig(intensity=1.0, detuning=0.0, uniform_field=SIGMA_PLUS), None)
    res = simulate_atoms(CESIUM_D2, env, STATIC, 20e-6, seed=1, initial_m=4)
    rec = res.records[0]
    assert len(rec.t) > 50
    assert set(rec.q.tolist()) == {1}
    assert np.allclose(rec.mean_m, 4.0)


def test_zero_duration():
    rec = run_trajectory(TWO_LEVEL, two_level_env(1.0), STATIC, 0.0)
    assert len(rec.t) == 0


def test_two_level_orientation_zero():
    res = simulate_atoms(TWO_LEVEL, two_level_env(2.0), STATIC, 1e-6, seed=1, sample_every=1e-8)
    t, m = orientation_series(res)
    assert np.all(m == 0)


def test_oracle_limits():
    tau = np.linspace(0, 40 / G, 4001)
    g2 = two_level_g2_oracle(2 * G, 0.0, G, tau)
    assert g2[0] == pytest.approx(0.0, abs=1e-12)
    assert g2[-1] == pytest.approx(1.0, abs=1e-6)


def test_oracle_first_maximum():
    W = 3 * G
    tau = np.linspace(0, 3 / G, 30001)
    g2 = two_level_g2_oracle(W, 0.0, G, tau)
    i = np.argmax(g2[: len(tau) // 2])
    t_pred = np.pi / np.sqrt(W ** 2 - (G / 4) ** 2)
    assert g2[i] > 1
    assert tau[i] == pytest.approx(t_pred, rel=0.05)


def test_reproducible_records():
    env = TrapEnvironment(FieldConfig(), QuadrupoleField(), larmor_dephasing=0.2)
    site = bistability_survey(FieldConfig(), QuadrupoleField())[3].position
    motion = MotionModel("static", r0=tuple(site))
    a = simulate_atoms(CESIUM_D2, env, motion, 5e-6, n_atoms=3, seed=9).records
    b = simulate_atoms(CESIUM_D2, env, motion, 5e-6, n_atoms=3, seed=9).records
    for x, y in zip(a, b):
        assert np.array_equal(x.t, y.t) and np.array_equal(x.q, y.q)


def test_record_merge_sorted():
    r1 = EmissionRecord(np.array([1e-6, 3e-6]), np.array([0, 1]), np.zeros((2, 3)), np.zeros((2, 3)),
                        np.zeros(2), np.array([0, 0]), 5e-6)
    r2 = EmissionRecord(np.array([2e-6]), np.array([-1]), np.zeros((1, 3)), np.zeros((1, 3)),
                        np.zeros(1), np.array([1]), 5e-6)
    m = EmissionRecord.merge([r1, r2])
    assert np.all(np.diff(m.t) >= 0)
    assert m.atom.tolist() == [0, 1, 0]
