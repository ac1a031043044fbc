import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfs.flowpolicy import IntegrationSchedule, VelocityField, denoise
from rfs.modulation import Mode, ModulationPolicy, compose, logp_of, modulate, residual_from_correction


@pytest.fixture
def field():
    return VelocityField(2, 5, hidden=(16, 16), action_scale=0.15, rng=np.random.default_rng(0))


def policy_for(mode, obs_dim=5, flat_dim=2, **kw):
    pol = ModulationPolicy(mode, obs_dim, flat_dim, hidden=(16, 16), residual_bound=0.05,
                           rng=np.random.default_rng(1), **kw)
    # larger output weights so the heads are not all centred on zero
    pol.net.weights[-1] *= 100
    return pol


def test_mode_parsing():
    assert Mode.parse("dsrl") is Mode.DSRL_ONLY
    assert Mode.parse("RESIDUAL_ONLY") is Mode.RESIDUAL_ONLY
    assert Mode.RFS.steers and Mode.RFS.corrects
    with pytest.raises(ValueError):
        Mode.parse("sac")


def test_modulate_logp_matches_the_closed_form(field):
    pol = policy_for("rfs")
    obs = np.random.default_rng(2).standard_normal((6, 5))
    m = modulate(pol, field, obs, IntegrationSchedule.uniform(4), np.random.default_rng(3), np.random.default_rng(4))
    np.testing.assert_allclose(m.logp, logp_of(pol, obs, m.a0, m.a_r), rtol=1e-9)
    np.testing.assert_array_equal(m.a, m.a_b + m.a_r)


def test_squashed_density_integrates_to_one():
    pol = ModulationPolicy("residual", 3, 1, hidden=(4,), residual_bound=0.05, init_log_std_ar=0.3,
                           rng=np.random.default_rng(0))
    pol.net.biases[-1][1] = 0.7  # off-centre residual mean
    eps = pol.residual_bound
    grid = np.linspace(-eps, eps, 200001)[1:-1]
    obs = np.zeros((grid.size, 3))
    dens = np.exp(logp_of(pol, obs, np.zeros((grid.size, 1)), grid[:, None]))
    mass = np.sum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_log_density_outside_the_bound_is_an_error():
    pol = policy_for("rfs")
    with pytest.raises(ValueError):
        logp_of(pol, np.zeros(5), np.zeros(2), np.array([0.05, 0.0]))
    with pytest.raises(ValueError):
        logp_of(pol, np.zeros(5), np.array([3.0, 0.0]), np.zeros(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_samples_stay_inside_their_bounds(seed):
    pol = policy_for("rfs")
    obs = np.random.default_rng(seed).standard_normal((8, 5)) * 10
    _, _, a0, ar = pol.sample(obs, np.random.default_rng(seed))
    assert np.all(np.abs(a0) <= pol.a0_scale) and np.all(np.abs(ar) <= pol.residual_bound)


def test_residual_only_keeps_the_base_latent(field):
    # the latent draw for a residual-only policy is exactly what the base would use
    pol = policy_for("residual")
    obs = np.ones(5)
    sched = IntegrationSchedule.uniform(8)
    m = modulate(pol, field, obs, sched, np.random.default_rng(9), np.random.default_rng(10))
    z = np.random.default_rng(9).standard_normal(2)
    np.testing.assert_array_equal(m.a0, z)
    np.testing.assert_array_equal(m.a_b, denoise(field, obs, z, sched))
    assert np.all(m.u0 == 0.0)


def test_steering_only_adds_no_residual(field):
    pol = policy_for("dsrl")
    m = modulate(pol, field, np.ones((3, 5)), IntegrationSchedule.uniform(8), np.random.default_rng(0))
    np.testing.assert_array_equal(m.a_r, 0.0)
    np.testing.assert_array_equal(m.a, m.a_b)
    a0, ar = pol.deterministic(np.ones(5))
    assert np.all(ar == 0.0) and np.all(np.abs(a0) < 3.0)


def test_dimension_mismatch_is_rejected(field):
    with pytest.raises(ValueError):
        modulate(policy_for("rfs", obs_dim=4), field, np.ones(4), IntegrationSchedule.uniform(2),
                 np.random.default_rng(0))


def test_compose_and_residual_are_inverse():
    a_b = np.array([0.1, -0.02])
    a_h = np.array([0.12, -0.05])
    r = residual_from_correction(a_h, a_b)
    np.testing.assert_allclose(r, [0.02, -0.03])
    np.testing.assert_allclose(compose(a_b, r), a_h, atol=1e-17)
    with pytest.raises(ValueError):
        compose(a_b, np.zeros(3))
    with pytest.raises(ValueError):
        residual_from_correction(np.zeros(4), a_b)


def test_copy_is_independent():
    pol = policy_for("rfs")
    clone = pol.copy()
    clone.net.weights[0][0, 0] += 1.0
    clone.log_std_ar[0] = -1.0
    assert pol.net.weights[0][0, 0] != clone.net.weights[0][0, 0]
    assert pol.log_std_ar[0] != -1.0
    obs = np.ones(5)
    np.testing.assert_array_equal(pol.copy().means(obs)[0], pol.means(obs)[0])


def test_log_std_clamp():
    pol = policy_for("rfs")
    pol.log_std_a0[:] = 10.0
    pol.log_std_ar[:] = -10.0
    pol.clamp_log_std()
    assert np.all(pol.log_std_a0 == 2.0) and np.all(pol.log_std_ar == -5.0)
