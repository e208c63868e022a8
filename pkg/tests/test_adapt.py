import numpy as np
import pytest

from ttvla import envsim
from ttvla.adapt import (
    AdvantageConfig,
    TelescopingError,
    Transition,
    UpdateConfig,
    buffer_advantages,
    buffer_trace,
    clipped_surrogate,
    gae,
    run_episode,
    td_residuals,
    ttvla_update,
    verify_theory,
)
from ttvla.numkit import ConfigError, Rng, UsageError
from ttvla.policy import ObservationWindow, log_prob
from ttvla.progress import EstimatorSpec


def gae_reference(deltas, gamma, lam, trunc=None):
    """Independent oracle: explicit double loop."""
    n = len(deltas)
    L = n if trunc is None else trunc
    return np.array([sum((gamma * lam) ** l * deltas[t + l] for l in range(min(L, n - t))) for t in range(n)])


def win(seed=0):
    return ObservationWindow(tuple(Rng(seed).uniform(size=(2, envsim.D_OBS))), 0)


def buffer_for(policy, rewards, seed=0):
    rng = Rng(seed)
    buf, p = [], 0.2
    for i, r in enumerate(rewards):
        w = win(seed * 100 + i)
        a = rng.integers(0, 6)
        p += r
        buf.append(Transition(w, a, r, log_prob(policy, w, a)[0], p, i + 1))
    return buf


def test_presets():
    assert AdvantageConfig.ttvla() == AdvantageConfig(0.0, 0.0, None, "zero")
    g = AdvantageConfig.gae_baseline()
    assert (g.gamma, g.lam, g.truncation, g.value_mode) == (0.99, 0.95, 8, "learned")
    with pytest.raises(ConfigError):
        AdvantageConfig(gamma=1.5)
    with pytest.raises(ConfigError):
        UpdateConfig(epsilon=0)


def test_td_residuals_worked_examples():
    trace = np.array([0.0, 0.3, 0.7, 1.0])
    r = np.diff(trace)
    d1 = td_residuals(trace, r, AdvantageConfig(1.0, 0.95, value_mode="remaining-progress"))
    assert np.max(np.abs(d1)) <= 1e-12
    d9 = td_residuals(trace, r, AdvantageConfig(0.9, 0.0, value_mode="remaining-progress"))
    np.testing.assert_allclose(d9, [-0.07, -0.03, 0.0], atol=1e-12)
    d0 = td_residuals(trace, r, AdvantageConfig(0.0, 0.0, value_mode="zero"))
    np.testing.assert_array_equal(d0, r)
    with pytest.raises(UsageError):
        td_residuals(trace, r[:-1], AdvantageConfig())
    with pytest.raises(UsageError):
        td_residuals(trace, r, AdvantageConfig(value_mode="learned"))


def test_negative_bias_single_point():
    trace = np.array([0.5, 0.7])
    d = td_residuals(trace, np.diff(trace), AdvantageConfig(0.9, 0.0, value_mode="remaining-progress"))
    assert d[0] == pytest.approx(-0.03, abs=1e-12)


def test_gae_three_term_sum():
    cfg = AdvantageConfig(0.99, 0.95, truncation=3)
    a = gae([1.0, 1.0, 1.0], cfg)
    assert a[0] == pytest.approx(1 + 0.9405 + 0.9405**2, abs=1e-12)
    assert a[0] == pytest.approx(2.82504025, abs=1e-12)


@pytest.mark.parametrize("gamma,lam,trunc", [(0.99, 0.95, None), (0.9, 0.5, 4), (1.0, 1.0, None), (0.5, 0.0, 2)])
def test_gae_matches_reference(gamma, lam, trunc):
    d = Rng(4).normal(size=17)
    np.testing.assert_allclose(gae(d, AdvantageConfig(gamma, lam, trunc)), gae_reference(d, gamma, lam, trunc), atol=1e-12)


def test_gae_degenerate_cases():
    d = Rng(1).normal(size=9)
    np.testing.assert_array_equal(gae(d, AdvantageConfig(0.7, 0.0)), d)
    np.testing.assert_array_equal(gae(np.zeros(5), AdvantageConfig(0.99, 0.95)), np.zeros(5))


def test_clipped_surrogate_cases():
    v, clipped = clipped_surrogate(np.log(1.5), 0.0, 1.0, 0.2)
    assert v == pytest.approx(1.2) and clipped
    v, clipped = clipped_surrogate(np.log(0.5), 0.0, -1.0, 0.2)
    assert v == pytest.approx(-0.8) and clipped
    for adv in (-2.0, 0.0, 0.7):
        assert clipped_surrogate(-0.3, -0.3, adv, 0.2) == (adv, False)
    with pytest.raises(ConfigError):
        clipped_surrogate(0.0, 0.0, 1.0, 0.0)


def test_buffer_trace_reconstructs_previous_progress(policy):
    buf = buffer_for(policy, [0.1, -0.05, 0.2])
    np.testing.assert_allclose(buffer_trace(buf), [0.2, 0.3, 0.25, 0.45], atol=1e-12)
    np.testing.assert_array_equal(buffer_advantages(buf, AdvantageConfig.ttvla()), [0.1, -0.05, 0.2])


def test_zero_rewards_leave_params_unchanged(policy):
    buf = buffer_for(policy, [0.0] * 8)
    d = policy.digest()
    stats = ttvla_update(buf, policy, UpdateConfig().optimizer(), UpdateConfig())
    assert stats.grad_norm == 0.0
    assert policy.digest() == d


@pytest.mark.parametrize("reward", [0.3, -0.3])
def test_single_transition_moves_log_prob_with_advantage_sign(policy, reward):
    buf = buffer_for(policy, [reward])
    tr = buf[0]
    ucfg = UpdateConfig(lr=1e-3)
    ttvla_update(buf, policy, ucfg.optimizer(), ucfg)
    new = log_prob(policy, tr.window, tr.action)[0]
    assert (new > tr.old_logp) if reward > 0 else (new < tr.old_logp)


def test_value_free_update_rejects_value_configs(policy):
    buf = buffer_for(policy, [0.1])
    with pytest.raises(ConfigError):
        ttvla_update(buf, policy, UpdateConfig().optimizer(), UpdateConfig(c1=0.5))
    with pytest.raises(ConfigError):
        ttvla_update(buf, policy, UpdateConfig().optimizer(), UpdateConfig(), AdvantageConfig.gae_baseline())
    with pytest.raises(UsageError):
        ttvla_update([], policy, UpdateConfig().optimizer(), UpdateConfig())


def test_update_reports_stats(policy):
    buf = buffer_for(policy, [0.1, 0.2, -0.1, 0.0])
    stats = ttvla_update(buf, policy, UpdateConfig().optimizer(), UpdateConfig(epochs=3))
    assert stats.epochs == 3 and stats.n == 4
    assert 0.0 <= stats.clip_fraction <= 1.0
    assert stats.grad_norm > 0


def episode(policy, adapt, seed=0, suite="execution", horizon=160, estimator=EstimatorSpec(), **kw):
    cfg = envsim.EpisodeConfig(horizon=horizon, shift=envsim.ShiftSpec.make(suite))
    return run_episode(cfg, policy, UpdateConfig(lr=1e-3), None, estimator, adapt, Rng(seed), **kw)


def test_frozen_episode_is_deterministic_and_leaves_params(policy):
    d = policy.digest()
    a = episode(policy, False, record=True)
    b = episode(policy, False, record=True)
    assert a.trajectory == b.trajectory
    assert policy.digest() == d and a.n_updates == 0


def test_full_episode_runs_twenty_updates(policy):
    # the near-uniform initial policy essentially never solves the task in 160 steps
    rep = episode(policy, True, seed=3)
    assert rep.steps == 160 and not rep.success
    assert rep.n_updates == 20


def test_adapting_episode_changes_params(policy):
    d = policy.digest()
    episode(policy, True, seed=1)
    assert policy.digest() != d


def test_rewards_telescope_with_noisy_estimator(policy):
    rep = episode(policy, True, seed=2, estimator=EstimatorSpec("noisy", 0.05))
    assert rep.reward_sum == pytest.approx(rep.p_final - rep.p_initial, abs=1e-10)
    rep = episode(policy, False, seed=2, init_progress="zero")
    assert rep.p_initial == 0.0


def test_telescoping_violation_is_detected(policy, monkeypatch):
    from ttvla import adapt

    monkeypatch.setattr(adapt, "dense_reward", lambda p, q: p - q + 1e-6)
    with pytest.raises(TelescopingError):
        episode(policy, False, horizon=5)


def test_update_failures_carry_context(policy, monkeypatch):
    from ttvla import adapt

    def boom(*a, **k):
        raise FloatingPointError("bad ratio")

    monkeypatch.setattr(adapt, "ttvla_update", boom)
    with pytest.raises(RuntimeError, match="execution/obj-pos"):
        episode(policy, True, horizon=16)


def test_verify_theory_on_worked_trace():
    rep = verify_theory([0.0, 0.3, 0.7, 1.0])
    assert rep.ok
    assert rep.max_abs(1.0) == 0.0
    assert rep.max_abs(1.0, what="advantages") == 0.0


def test_verify_theory_catches_a_broken_value_function(monkeypatch):
    from ttvla import adapt

    real = adapt.td_residuals
    monkeypatch.setattr(adapt, "td_residuals", lambda *a, **k: real(*a, **k) + 1e-9)
    rep = verify_theory([0.1, 0.4, 0.2])
    assert not rep.ok
    assert {v["claim"] for v in rep.violations} >= {"vanishing-signal", "negative-bias"}
