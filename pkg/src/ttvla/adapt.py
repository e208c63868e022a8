"""Value-free PPO test-time adaptation.

Advantage estimation that ranges from truncated GAE down to the one-step
``A_t = r_t`` collapse, the clipped surrogate with its analytic gradient,
the buffered in-episode update loop, and numerical checks of the
degeneracy results for progress-difference rewards.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import envsim
from .numkit import (
    ConfigError,
    GradStore,
    OptimState,
    ParamStore,
    Rng,
    UsageError,
    mlp_backward,
    mlp_forward,
    optimizer_step,
)
from .policy import (
    DEFAULT_HISTORY,
    ObservationWindow,
    act,
    encode_for,
    log_prob_batch,
    score_upstream,
)
from .progress import EstimatorSpec, dense_reward, estimate

VALUE_MODES = ("zero", "remaining-progress", "learned")
TELESCOPE_TOL = 1e-10


class TelescopingError(AssertionError):
    pass


@dataclass(frozen=True)
class AdvantageConfig:
    gamma: float = 0.0
    lam: float = 0.0
    truncation: Optional[int] = None  # None -> sum to the end of the sequence
    value_mode: str = "zero"

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ConfigError("gamma and lambda must lie in [0, 1]")
        if self.truncation is not None and self.truncation < 1:
            raise ConfigError("truncation must be a positive integer")
        if self.value_mode not in VALUE_MODES:
            raise ConfigError(f"value_mode must be one of {VALUE_MODES}")

    @classmethod
    def ttvla(cls) -> "AdvantageConfig":
        return cls(gamma=0.0, lam=0.0, truncation=None, value_mode="zero")

    @classmethod
    def gae_baseline(cls) -> "AdvantageConfig":
        return cls(gamma=0.99, lam=0.95, truncation=8, value_mode="learned")


@dataclass(frozen=True)
class UpdateConfig:
    epsilon: float = 0.2
    k: int = 8
    lr: float = 1e-4
    epochs: int = 1
    c1: float = 0.0
    c2: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("clip epsilon must be > 0")
        if self.k < 1 or self.epochs < 1:
            raise ConfigError("update interval and epochs must be positive")

    def optimizer(self) -> OptimState:
        return OptimState(lr=self.lr, weight_decay=self.weight_decay)


@dataclass
class Transition:
    window: ObservationWindow
    action: int
    reward: float
    old_logp: float
    progress: float
    t: int
    next_window: Optional[ObservationWindow] = None
    done: bool = False


@dataclass
class UpdateStats:
    kind: str = "ttvla"
    n: int = 0
    epochs: int = 0
    mean_ratio: float = 1.0
    clip_fraction: float = 0.0
    loss: float = 0.0
    grad_norm: float = 0.0
    value_loss: Optional[float] = None

    def to_record(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# advantages


def td_residuals(
    trace,
    rewards,
    cfg: AdvantageConfig,
    values=None,
    terminal: bool = False,
) -> np.ndarray:
    """delta_t = r_t + gamma*V(s_{t+1}) - V(s_t) for t = 1..n.

    ``trace`` holds p_0..p_n and ``rewards`` r_1..r_n. In remaining-progress
    mode V(s_t) = 1 - p_{t-1}, so the value after the last step, 1 - p_n, is
    read off the trace. ``learned`` mode takes ``values`` = V(s_1)..V(s_{n+1}).
    ``terminal`` zeroes the value after the final step.
    """
    trace = np.asarray(trace, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    n = len(rewards)
    if len(trace) != n + 1:
        raise UsageError(f"need len(trace) == len(rewards) + 1, got {len(trace)} and {n}")
    if cfg.value_mode == "zero":
        v = np.zeros(n + 1)
    elif cfg.value_mode == "remaining-progress":
        v = 1.0 - trace
    else:
        if values is None:
            raise UsageError("learned value mode needs caller-supplied values")
        v = np.asarray(values, dtype=np.float64)
        if len(v) != n + 1:
            raise UsageError(f"need {n + 1} values, got {len(v)}")
    v_next = v[1:].copy()
    if terminal and n:
        v_next[-1] = 0.0
    return rewards + cfg.gamma * v_next - v[:-1]


def gae(deltas, cfg: AdvantageConfig) -> np.ndarray:
    """A_t = sum_{l < L} (gamma*lambda)^l delta_{t+l}, cut at the sequence end.

    Zero-weight terms are skipped so lambda=0 returns the deltas bit-for-bit.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    n = len(deltas)
    window = n if cfg.truncation is None else cfg.truncation
    decay = cfg.gamma * cfg.lam
    out = deltas.copy()
    coef = 1.0
    for lag in range(1, window):
        coef *= decay
        if coef == 0.0:
            break
        out[: n - lag] += coef * deltas[lag:]
    return out


def buffer_trace(buffer: Sequence[Transition]) -> np.ndarray:
    """p_{t0-1}, p_t0, ..., p_t for the buffered steps."""
    first = buffer[0]
    return np.array([first.progress - first.reward] + [tr.progress for tr in buffer])


def buffer_advantages(
    buffer: Sequence[Transition], cfg: AdvantageConfig, values=None
) -> np.ndarray:
    rewards = np.array([tr.reward for tr in buffer])
    deltas = td_residuals(
        buffer_trace(buffer), rewards, cfg, values=values, terminal=buffer[-1].done
    )
    return gae(deltas, cfg)


# --------------------------------------------------------------------------
# clipped surrogate


def clipped_surrogate(new_logp: float, old_logp: float, advantage: float, eps: float):
    """min(rho*A, clip(rho, 1-eps, 1+eps)*A) and whether the clip branch won."""
    if eps <= 0:
        raise ConfigError("clip epsilon must be > 0")
    rho = math.exp(new_logp - old_logp)
    if not math.isfinite(rho):
        raise FloatingPointError(f"non-finite probability ratio ({new_logp} - {old_logp})")
    unclipped = rho * advantage
    clipped_val = min(max(rho, 1.0 - eps), 1.0 + eps) * advantage
    outside = rho < 1.0 - eps or rho > 1.0 + eps
    if clipped_val < unclipped:
        return clipped_val, outside
    return unclipped, False


def encode_buffer(params: ParamStore, buffer: Sequence[Transition]) -> np.ndarray:
    return np.stack([encode_for(params, tr.window) for tr in buffer])


def surrogate_grad(
    params: ParamStore,
    inputs: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    eps: float,
):
    """Sum of clipped-surrogate terms and its gradient.

    Per term the gradient is rho*A*grad(log pi) on the unclipped branch and
    zero when the clip branch is strictly smaller.
    """
    new_logp, cache = log_prob_batch(params, inputs, actions)
    ratio = np.exp(new_logp - old_logp)
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError("non-finite probability ratio in buffer")
    unclipped = ratio * advantages
    clipped_val = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    use_clip = clipped_val < unclipped
    terms = np.where(use_clip, clipped_val, unclipped)
    outside = (ratio < 1.0 - eps) | (ratio > 1.0 + eps)
    coef = np.where(use_clip, 0.0, ratio * advantages)
    grads = mlp_backward(cache.record, coef[:, None] * score_upstream(cache.log_probs, actions))
    info = {
        "loss": float(np.sum(terms)),
        "mean_ratio": float(np.mean(ratio)),
        "clip_fraction": float(np.mean(use_clip & outside)),
        "log_probs": cache.log_probs,
    }
    return grads, info


def policy_surrogate_step(
    params: ParamStore,
    opt: OptimState,
    buffer: Sequence[Transition],
    advantages: np.ndarray,
    ucfg: UpdateConfig,
    kind: str = "ttvla",
) -> UpdateStats:
    """``epochs`` ascent steps on the clipped surrogate, old log-probs held fixed."""
    inputs = encode_buffer(params, buffer)
    actions = np.array([tr.action for tr in buffer], dtype=int)
    old = np.array([tr.old_logp for tr in buffer])
    stats = UpdateStats(kind=kind, n=len(buffer))
    for _ in range(ucfg.epochs):
        grads, info = surrogate_grad(params, inputs, actions, old, advantages, ucfg.epsilon)
        if ucfg.c2:
            grads.add_(entropy_grad(info["log_probs"], params, inputs).scaled(ucfg.c2))
        optimizer_step(params, grads, opt, "ascent")
        stats.epochs += 1
        stats.loss = info["loss"]
        stats.mean_ratio = info["mean_ratio"]
        stats.clip_fraction = info["clip_fraction"]
        stats.grad_norm = grads.global_norm()
    return stats


def entropy_grad(log_probs: np.ndarray, params: ParamStore, inputs: np.ndarray) -> GradStore:
    """Gradient of the summed policy entropy over the batch."""
    probs = np.exp(log_probs)
    h = -np.sum(probs * log_probs, axis=1, keepdims=True)
    # dH/dz_j = -p_j (log p_j + H)
    upstream = -probs * (log_probs + h)
    _, rec = mlp_forward(params, inputs)
    return mlp_backward(rec, upstream)


def ttvla_update(
    buffer: Sequence[Transition],
    params: ParamStore,
    opt: OptimState,
    ucfg: UpdateConfig,
    acfg: Optional[AdvantageConfig] = None,
) -> UpdateStats:
    """One value-free PPO update over the buffer (the caller clears it)."""
    if not buffer:
        raise UsageError("empty buffer")
    acfg = acfg or AdvantageConfig.ttvla()
    if acfg.value_mode == "learned":
        raise ConfigError("ttvla_update has no value head; use baselines.gae_ppo_update")
    if ucfg.c1 != 0.0:
        raise ConfigError("value-free update requires c1 == 0")
    adv = buffer_advantages(buffer, acfg)
    return policy_surrogate_step(params, opt, buffer, adv, ucfg)


# --------------------------------------------------------------------------
# episode loop


class TTVLAAdapter:
    """Buffered value-free PPO: update every ``k`` steps."""

    name = "ttvla"

    def __init__(self, ucfg: UpdateConfig, acfg: Optional[AdvantageConfig] = None, opt=None):
        self.ucfg = ucfg
        self.acfg = acfg or AdvantageConfig.ttvla()
        self.opt = opt if opt is not None else ucfg.optimizer()
        self.interval = ucfg.k

    def before_act(self, window, params, rng) -> Optional[UpdateStats]:
        return None

    def update(self, buffer, params) -> UpdateStats:
        return ttvla_update(buffer, params, self.opt, self.ucfg, self.acfg)

    def reset(self) -> None:
        self.opt.reset()


@dataclass
class EpisodeReport:
    success: bool
    steps: int
    reward_sum: float
    p_initial: float
    p_final: float
    n_updates: int
    wall_time: float
    update_stats: list = field(default_factory=list)
    trajectory: Optional[list] = None

    def to_record(self) -> dict:
        d = asdict(self)
        d.pop("update_stats")
        d.pop("trajectory")
        return d


def run_episode(
    env_cfg: envsim.EpisodeConfig,
    params: ParamStore,
    ucfg: UpdateConfig,
    acfg: Optional[AdvantageConfig],
    estimator: EstimatorSpec,
    adapt: bool,
    rng: Rng,
    *,
    adapter=None,
    history: int = DEFAULT_HISTORY,
    init_progress: str = "baseline",
    record: bool = False,
) -> EpisodeReport:
    """Roll out one episode, adapting ``params`` in place when ``adapt``.

    Sample, step, estimate progress, reward = progress difference, buffer;
    the adapter updates once the buffer holds ``adapter.interval`` steps.
    """
    if init_progress not in ("baseline", "zero"):
        raise ConfigError("init_progress must be 'baseline' or 'zero'")
    if adapt and adapter is None:
        adapter = TTVLAAdapter(ucfg, acfg)
    env_rng, act_rng = rng.spawn("env"), rng.spawn("act")
    prog_rng, adapt_rng = rng.spawn("progress"), rng.spawn("adapt")
    start = time.perf_counter()

    state, obs = envsim.reset(env_cfg, env_rng)
    frames = [obs]
    window = ObservationWindow.from_history(frames, history, state.instruction_id)
    p_prev = estimate(estimator, state, prog_rng) if init_progress == "baseline" else 0.0
    p_initial = p_prev
    buffer: list[Transition] = []
    stats: list[UpdateStats] = []
    rewards: list[float] = []
    trajectory = [] if record else None
    done = False

    while not done:
        if adapt:
            pre = adapter.before_act(window, params, adapt_rng)
            if pre is not None:
                stats.append(pre)
        action, logp = act(params, window, act_rng)
        state, obs, done, _ = envsim.step(state, action, env_cfg, env_rng)
        frames.append(obs)
        next_window = ObservationWindow.from_history(frames, history, state.instruction_id)
        p_curr = estimate(estimator, state, prog_rng)
        r = dense_reward(p_curr, p_prev)
        rewards.append(r)
        if record:
            trajectory.append(
                {
                    "t": state.t,
                    **envsim.state_record(state),
                    "action": int(action),
                    "reward": r,
                    "progress": p_curr,
                }
            )
        if adapt and adapter.interval:
            buffer.append(
                Transition(window, action, r, logp, p_curr, state.t, next_window, state.success)
            )
            if len(buffer) >= adapter.interval:
                try:
                    stats.append(adapter.update(buffer, params))
                except (FloatingPointError, ConfigError) as exc:
                    raise RuntimeError(
                        f"update failed at t={state.t} ({env_cfg.shift.tag}, seed {env_cfg.seed}): {exc}"
                    ) from exc
                buffer = []
        p_prev = p_curr
        window = next_window

    reward_sum = math.fsum(rewards)
    if abs(reward_sum - (p_prev - p_initial)) > TELESCOPE_TOL:
        raise TelescopingError(
            f"sum of rewards {reward_sum!r} != p_T - p_0 = {p_prev - p_initial!r}"
        )
    n_updates = sum(1 for s in stats if s.epochs > 0)
    return EpisodeReport(
        success=bool(state.success),
        steps=state.t,
        reward_sum=reward_sum,
        p_initial=p_initial,
        p_final=p_prev,
        n_updates=n_updates,
        wall_time=time.perf_counter() - start,
        update_stats=stats,
        trajectory=trajectory,
    )


# --------------------------------------------------------------------------
# degeneracy checks


THEORY_TOL = 1e-12


@dataclass
class GridResult:
    gamma: float
    lam: float
    value_mode: str
    deltas: np.ndarray
    advantages: np.ndarray
    predicted: Optional[np.ndarray] = None

    @property
    def residual(self) -> float:
        if self.predicted is None:
            return 0.0
        return float(np.max(np.abs(self.deltas - self.predicted), initial=0.0))

    def to_record(self) -> dict:
        return {
            "gamma": self.gamma,
            "lambda": self.lam,
            "value_mode": self.value_mode,
            "deltas": self.deltas.tolist(),
            "advantages": self.advantages.tolist(),
            "max_abs_delta": float(np.max(np.abs(self.deltas), initial=0.0)),
            "max_abs_advantage": float(np.max(np.abs(self.advantages), initial=0.0)),
            "residual": self.residual,
        }


@dataclass
class TheoryReport:
    trace: np.ndarray
    results: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def max_abs(self, gamma: float, value_mode: str = "remaining-progress", what="deltas") -> float:
        vals = [
            float(np.max(np.abs(getattr(r, what)), initial=0.0))
            for r in self.results
            if r.gamma == gamma and r.value_mode == value_mode
        ]
        return max(vals, default=0.0)

    def to_records(self) -> list[dict]:
        head = {"trace": self.trace.tolist(), "violations": self.violations}
        return [head] + [r.to_record() for r in self.results]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec) + "\n")


def verify_theory(trace, gammas=(0.0, 0.9, 0.99, 1.0), lams=(0.0, 0.5, 0.95, 1.0)) -> TheoryReport:
    """Check the progress-reward degeneracy claims on one trace.

    * gamma=1, V=1-p_{t-1}: every delta and advantage is zero, for any lambda
    * gamma<1, same V: delta_t = (gamma-1)(1-p_t), negative while p_t < 1
    * lambda=0: advantages equal the deltas exactly
    * gamma=0, V=0: advantages equal the rewards exactly
    """
    trace = np.asarray(trace, dtype=np.float64)
    if len(trace) < 2:
        raise ConfigError("trace needs at least two progress values")
    rewards = trace[1:] - trace[:-1]
    report = TheoryReport(trace)

    def fail(claim, gamma, lam, mode, detail):
        report.violations.append(
            {"claim": claim, "gamma": gamma, "lambda": lam, "value_mode": mode, "detail": detail}
        )

    for gamma in gammas:
        for lam in lams:
            for mode in ("remaining-progress", "zero"):
                cfg = AdvantageConfig(gamma=gamma, lam=lam, value_mode=mode)
                d = td_residuals(trace, rewards, cfg)
                a = gae(d, cfg)
                res = GridResult(gamma, lam, mode, d, a)
                if mode == "remaining-progress":
                    if gamma == 1.0:
                        worst = max(np.max(np.abs(d)), np.max(np.abs(a)))
                        if worst >= THEORY_TOL:
                            fail("vanishing-signal", gamma, lam, mode, f"max |delta|,|A| = {worst:.3e}")
                    else:
                        res.predicted = (gamma - 1.0) * (1.0 - trace[1:])
                        if res.residual > THEORY_TOL:
                            fail("negative-bias", gamma, lam, mode, f"residual {res.residual:.3e}")
                        # strict sign is only decidable where the predicted
                        # delta exceeds float resolution
                        bad = (res.predicted < -THEORY_TOL) & ~(d < 0.0)
                        if np.any(bad):
                            fail("negative-bias", gamma, lam, mode, f"non-negative delta at {np.flatnonzero(bad).tolist()}")
                if lam == 0.0 and not np.array_equal(a, d):
                    fail("one-step-collapse(lambda=0)", gamma, lam, mode, "advantages differ from deltas")
                if gamma == 0.0 and mode == "zero" and not np.array_equal(a, rewards):
                    fail("one-step-collapse(gamma=0,V=0)", gamma, lam, mode, "advantages differ from rewards")
                report.results.append(res)
    return report
