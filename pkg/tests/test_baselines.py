import numpy as np
import pytest

from ttvla import baselines, envsim
from ttvla.adapt import AdvantageConfig, Transition, UpdateConfig, ttvla_update
from ttvla.baselines import (
    GAEPPOAdapter,
    TlmConfig,
    ValueHead,
    VoteGroup,
    discounted_returns,
    gae_ppo_update,
    majority_vote,
    pretrain_bc,
    sample_group,
    scripted_expert,
    tlm_adapt_step,
    train_success,
    ttrl_adapt_step,
)
from ttvla.envsim import EAST, GRASP, RELEASE, EnvState
from ttvla.numkit import ConfigError, OptimState, Rng
from ttvla.policy import ObservationWindow, encode_for, log_prob, log_prob_batch


def state(**kw):
    base = dict(width=12, height=12, gripper=(2, 2), obj=(5, 2), recep=(8, 7), distractor=None,
                holding=False, t=0, appearance=0.0, instruction_id=0)
    base.update(kw)
    return EnvState(**base)


def win(seed=0):
    return ObservationWindow(tuple(Rng(seed).uniform(size=(2, envsim.D_OBS))), 0)


def buffer_for(policy, rewards, progress=None):
    rng = Rng(5)
    buf = []
    p = 0.1
    for i, r in enumerate(rewards):
        w = win(i)
        a = rng.integers(0, 6)
        p = progress[i] if progress is not None else p + r
        buf.append(Transition(w, a, r, log_prob(policy, w, a)[0], p, i + 1, win(i + 1)))
    return buf


def test_expert_rules():
    assert scripted_expert(state()) == EAST
    assert scripted_expert(state(gripper=(5, 2))) == GRASP
    assert scripted_expert(state(gripper=(8, 7), obj=(8, 7), holding=True)) == RELEASE


def test_expert_solves_every_train_layout():
    for i in range(30):
        c = envsim.EpisodeConfig(shift=envsim.ShiftSpec.make("execution"))
        s, _ = envsim.reset(c, Rng(i))
        done = False
        while not done:
            s, _, done, _ = envsim.step(s, scripted_expert(s), c, Rng(0))
        assert s.success and s.t <= 40


def test_zero_step_pretraining_is_near_uniform():
    params = pretrain_bc(10, Rng(0), steps=0)
    logits = log_prob_batch(params, np.stack([encode_for(params, win(i)) for i in range(5)]), [0] * 5)[1].log_probs
    np.testing.assert_allclose(np.exp(logits), 1 / 6, atol=0.02)
    assert train_success(params, 40, Rng(1), 2) < 0.1


def test_pretraining_gives_up_with_a_curve():
    cfg = baselines.BCConfig(n_episodes=10, epochs_per_round=1, max_rounds=1, eval_episodes=5)
    with pytest.raises(baselines.PretrainError) as err:
        pretrain_bc(10, Rng(0), cfg)
    assert len(err.value.curve) == 1


def test_converged_checkpoint_has_shift_headroom(bc_params):
    train = train_success(bc_params, 200, Rng(77), 2)
    shifted = train_success(bc_params, 200, Rng(77), 2, suite="execution")
    assert train >= 0.9
    assert shifted < train


def test_bridge_to_ttvla_is_bit_identical(policy):
    buf = buffer_for(policy, [0.1, -0.2, 0.05, 0.3])
    ucfg = UpdateConfig(lr=1e-3)
    a, b = policy.copy(), policy.copy()
    ttvla_update(buf, a, ucfg.optimizer(), ucfg)
    gae_ppo_update(buf, b, None, ucfg, AdvantageConfig(0.0, 0.0, None, "zero"), ucfg.optimizer())
    for name in a.names():
        assert a[name].tobytes() == b[name].tobytes()


def test_lambda_zero_is_one_step_td(policy):
    progress = [0.2, 0.35, 0.3, 0.5]
    buf = buffer_for(policy, [0.1, 0.15, -0.05, 0.2], progress)
    head = ValueHead(policy.shape("layer0.weight")[0], Rng(0))
    head.params.assign("layer2.weight", Rng(1).normal(size=(64, 1)))
    acfg = AdvantageConfig(0.9, 0.0, None, "learned")
    inputs = np.stack([encode_for(policy, tr.window) for tr in buf] + [encode_for(policy, buf[-1].next_window)])
    v = head.predict(inputs)
    r = np.array([tr.reward for tr in buf])
    from ttvla.adapt import buffer_advantages

    np.testing.assert_allclose(buffer_advantages(buf, acfg, v), r + 0.9 * v[1:] - v[:-1], atol=1e-15)


def test_perfect_value_and_gamma_one_give_no_motion(policy):
    buf = buffer_for(policy, [0.1, 0.2, -0.05])
    before = policy.flat(False)
    acfg = AdvantageConfig(1.0, 0.95, None, "remaining-progress")
    stats = gae_ppo_update(buf, policy, None, UpdateConfig(), acfg, OptimState())
    # advantages are zero up to float rounding of 1 - p terms
    assert stats.grad_norm < 1e-12
    assert np.max(np.abs(policy.flat(False) - before)) < 1e-10


def test_value_head_regresses_constant():
    head = ValueHead(6, Rng(0), hidden=(16,), lr=1e-3)
    x = Rng(1).uniform(size=(32, 6))
    for _ in range(20000):
        head.fit_step(x, np.full(32, 0.37), weight=1 / 32)
    assert np.max(np.abs(head.predict(x) - 0.37)) < 1e-3


def test_discounted_returns():
    np.testing.assert_allclose(discounted_returns([1.0, 0.0, 2.0], 0.5, 4.0), [2.0, 2.0, 4.0])


def test_gae_ppo_adapter_trains_value_head(policy):
    ucfg = UpdateConfig(c1=0.5)
    ad = GAEPPOAdapter(ucfg, AdvantageConfig.gae_baseline(), Rng(0))
    stats = ad.update(buffer_for(policy, [0.1] * 8), policy)
    assert stats.value_loss is not None and ad.value_head is not None
    ad.reset()
    assert ad.value_head is None


def test_tlm_zero_coefficient_is_inert(policy):
    d = policy.digest()
    stats = tlm_adapt_step(buffer_for(policy, [0.0] * 8), policy, TlmConfig(coefficient=0.0), OptimState())
    assert stats.epochs == 0 and policy.digest() == d


def test_tlm_raises_buffer_likelihood(policy):
    buf = buffer_for(policy, [0.0] * 8)
    inputs = np.stack([encode_for(policy, tr.window) for tr in buf])
    actions = [tr.action for tr in buf]
    opt = OptimState(lr=1e-3)
    prev = -np.inf
    for _ in range(50):
        total = float(np.sum(log_prob_batch(policy, inputs, actions)[0]))
        assert total >= prev - 1e-12
        prev = total
        tlm_adapt_step(buf, policy, TlmConfig(), opt)
    with pytest.raises(ConfigError):
        TlmConfig(coefficient=-1)


def test_majority_vote_and_rewards():
    a, b, c = 2, 4, 0
    g = VoteGroup(8, [a, a, b, a, c, a, b, a])
    assert g.pseudo_label == a
    np.testing.assert_array_equal(g.rewards(), [1, 1, 0, 1, 0, 1, 0, 1])
    assert majority_vote([3, 1, 3, 1]) == 1
    with pytest.raises(ConfigError):
        majority_vote([])


def test_unanimous_group_reinforces_its_action(policy):
    w = win()
    before = log_prob(policy, w, 3)[0]
    ttrl_adapt_step(w, policy, VoteGroup(8, [3] * 8), UpdateConfig(lr=1e-3), OptimState(lr=1e-3))
    assert log_prob(policy, w, 3)[0] > before


def test_vote_on_uniform_policy_reinforces_mode_regardless_of_task(policy):
    w = win(2)
    group, _ = sample_group(policy, w, 8, Rng(3))
    label = group.pseudo_label
    before = log_prob(policy, w, label)[0]
    ttrl_adapt_step(w, policy, group, UpdateConfig(lr=1e-3), OptimState(lr=1e-3))
    assert log_prob(policy, w, label)[0] > before
