import numpy as np
import pytest

from conftest import central_diff
from ttvla import envsim
from ttvla.numkit import ConfigError, Rng, UsageError, mlp_forward
from ttvla.policy import (
    AdapterMask,
    ObservationWindow,
    act,
    action_probs,
    apply_adapter,
    encode,
    grad_log_prob,
    log_prob,
    log_prob_under,
    log_softmax,
)


def window(seed=0, instr=1):
    frames = Rng(seed).uniform(size=(2, envsim.D_OBS))
    return ObservationWindow(tuple(frames), instr)


def test_window_left_pads_with_first_frame():
    hist = [np.full(3, 1.0)]
    w = ObservationWindow.from_history(hist, 3, 0)
    assert len(w.frames) == 3
    assert all(np.array_equal(f, hist[0]) for f in w.frames)
    hist = [np.full(3, float(i)) for i in range(5)]
    w = ObservationWindow.from_history(hist, 2, 0)
    assert [f[0] for f in w.frames] == [3.0, 4.0]


def test_encode_appends_one_hot():
    x = encode(window(instr=2), 4)
    assert x.shape == (2 * envsim.D_OBS + 4,)
    np.testing.assert_array_equal(x[-4:], [0, 0, 1, 0])
    with pytest.raises(ConfigError):
        encode(window(instr=4), 4)


def test_log_softmax_is_stable():
    lp = log_softmax(np.array([1000.0, 0.0, -1000.0]))
    assert np.all(np.isfinite(lp))
    assert lp[0] == pytest.approx(0.0)


def test_untrained_policy_is_near_uniform(policy):
    probs = action_probs(policy, window())
    np.testing.assert_allclose(probs, 1 / 6, atol=0.02)


def test_act_returns_matching_log_prob(policy):
    a, lp = act(policy, window(), Rng(1))
    assert lp == pytest.approx(log_prob(policy, window(), a)[0], abs=1e-15)


@pytest.mark.parametrize("action", [0, 4])
def test_grad_log_prob_matches_finite_differences(policy, action):
    w = window(3)

    def f():
        return log_prob(policy, w, action)[0]

    _, cache = log_prob(policy, w, action)
    g = grad_log_prob(cache, action)
    for name in ("layer2.weight", "layer1.bias", "layer0.bias"):
        np.testing.assert_allclose(g[name], central_diff(f, policy, name), rtol=1e-5, atol=1e-9)


def test_stale_policy_cache_raises(policy):
    _, cache = log_prob(policy, window(), 0)
    policy.assign("layer0.bias", policy["layer0.bias"] + 0.1)
    with pytest.raises(UsageError):
        grad_log_prob(cache, 0)


def test_log_prob_under_snapshot_ignores_later_changes(policy):
    snap = policy.snapshot()
    before = log_prob(policy, window(), 2)[0]
    policy.assign("layer2.bias", policy["layer2.bias"] + np.arange(6.0))
    assert log_prob_under(snap, window(), 2) == before
    assert log_prob(policy, window(), 2)[0] != before


def test_adapter_parse_and_str():
    assert str(AdapterMask.parse("full")) == "full"
    assert AdapterMask.parse("lowrank:8").rank == 8
    assert str(AdapterMask.parse("lowrank:8")) == "lowrank:8"
    with pytest.raises(ConfigError):
        AdapterMask.parse("sparse")


def test_low_rank_adapter_preserves_output_and_freezes_base(policy):
    lr_params = apply_adapter(policy, AdapterMask("low-rank", 4), Rng(2))
    x = encode(window(), envsim.N_INSTRUCTIONS)
    np.testing.assert_array_equal(mlp_forward(lr_params, x)[0], mlp_forward(policy, x)[0])
    assert lr_params.trainable_names() == ["layer2.lora_u", "layer2.lora_v"]
    assert lr_params.shape("layer2.lora_u") == (64, 4)
    assert lr_params.shape("layer2.lora_v") == (4, 6)
    # the original store is untouched
    assert "layer2.lora_u" not in policy
    with pytest.raises(ConfigError):
        apply_adapter(policy, AdapterMask("low-rank", 100), Rng(2))


def test_encode_definitional_cases():
    w = ObservationWindow((np.array([0.5]),), 0)
    np.testing.assert_array_equal(encode(w, 2), [0.5, 1.0, 0.0])
    f = np.array([0.1, 0.2])
    w = ObservationWindow.from_history([f], 2, 1)
    np.testing.assert_array_equal(encode(w, 2), [0.1, 0.2, 0.1, 0.2, 0.0, 1.0])


def _head_only(logits):
    from ttvla.numkit import ParamStore

    p = ParamStore()
    width = 2 * envsim.D_OBS + envsim.N_INSTRUCTIONS
    p.add("layer0.weight", np.zeros((width, 6)))
    p.add("layer0.bias", np.asarray(logits, dtype=float))
    return p


def test_uniform_and_saturated_logits():
    p = _head_only(np.zeros(6))
    assert log_prob(p, window(), 3)[0] == pytest.approx(np.log(1 / 6), abs=1e-15)
    p = _head_only([-50, -50, 50, -50, -50, -50])
    a, lp = act(p, window(), Rng(0))
    assert a == 2 and lp == pytest.approx(0.0, abs=1e-12)


def test_log_probs_normalize_and_are_deterministic(policy):
    total = sum(np.exp(log_prob(policy, window(), a)[0]) for a in range(6))
    assert total == pytest.approx(1.0, abs=1e-12)
    assert log_prob(policy, window(), 1)[0] == log_prob(policy, window(), 1)[0]


def test_sampling_frequencies_match_softmax():
    p = _head_only([0.3, -1.0, 1.2, 0.0, -0.4, 0.8])
    probs = action_probs(p, window())
    rng = Rng(9)
    n = 100_000
    counts = np.bincount([act(p, window(), rng)[0] for _ in range(n)], minlength=6)
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) < 3 * sigma + 1)


def test_score_function_identity(policy):
    w = window(5)
    total = None
    for a in range(6):
        lp, cache = log_prob(policy, w, a)
        g = grad_log_prob(cache, a).scaled(np.exp(lp))
        total = g if total is None else total.add_(g)
    assert max(np.max(np.abs(v)) for v in total.values()) < 1e-10
