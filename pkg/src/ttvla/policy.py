"""Discrete-action softmax policy over a window of recent observation frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import (
    ActivationRecord,
    ConfigError,
    GradStore,
    ParamStore,
    Rng,
    Snapshot,
    UsageError,
    init_mlp,
    layer_count,
    mlp_backward,
    mlp_forward,
)

N_ACTIONS = 6
DEFAULT_HISTORY = 2
DEFAULT_HIDDEN = (64, 64)


@dataclass(frozen=True)
class ObservationWindow:
    """The last H frames (most recent last) plus the instruction token."""

    frames: tuple
    instruction_id: int

    @classmethod
    def from_history(cls, history, horizon: int, instruction_id: int) -> "ObservationWindow":
        """Take the last ``horizon`` frames, left-padding with the first one."""
        if not history:
            raise ConfigError("cannot build a window from an empty history")
        frames = list(history[-horizon:])
        if len(frames) < horizon:
            frames = [history[0]] * (horizon - len(frames)) + frames
        return cls(tuple(np.asarray(f, dtype=np.float64) for f in frames), int(instruction_id))


@dataclass(frozen=True)
class AdapterMask:
    mode: str = "full"
    rank: int = 4
    layer: str | None = None  # None -> output layer

    @classmethod
    def parse(cls, text: str) -> "AdapterMask":
        """``full`` or ``lowrank:R``."""
        if text == "full":
            return cls()
        if text.startswith("lowrank"):
            _, _, r = text.partition(":")
            return cls(mode="low-rank", rank=int(r) if r else 4)
        raise ConfigError(f"unknown adapter spec {text!r}")

    def __str__(self) -> str:
        return "full" if self.mode == "full" else f"lowrank:{self.rank}"


def encode(window: ObservationWindow, n_instructions: int) -> np.ndarray:
    frames = [np.asarray(f, dtype=np.float64).ravel() for f in window.frames]
    d = frames[0].size
    if any(f.size != d for f in frames):
        raise ConfigError("frames in a window must share one dimension")
    if not 0 <= window.instruction_id < n_instructions:
        raise ConfigError(
            f"instruction id {window.instruction_id} outside [0, {n_instructions})"
        )
    onehot = np.zeros(n_instructions)
    onehot[window.instruction_id] = 1.0
    return np.concatenate(frames + [onehot])


def input_width(params: ParamStore) -> int:
    return params.shape("layer0.weight")[0]


def n_instructions_for(params: ParamStore, window: ObservationWindow) -> int:
    frame_total = sum(np.asarray(f).size for f in window.frames)
    n = input_width(params) - frame_total
    if n < 1:
        raise ConfigError(
            f"network input width {input_width(params)} too small for {frame_total} frame features"
        )
    return n


def encode_for(params: ParamStore, window: ObservationWindow) -> np.ndarray:
    return encode(window, n_instructions_for(params, window))


def init_policy(
    d_obs: int,
    n_instructions: int,
    rng: Rng,
    history: int = DEFAULT_HISTORY,
    hidden=DEFAULT_HIDDEN,
    n_actions: int = N_ACTIONS,
) -> ParamStore:
    sizes = [history * d_obs + n_instructions, *hidden, n_actions]
    params = init_mlp(sizes, rng)
    # small head so an untrained policy is close to uniform
    head = f"layer{len(sizes) - 2}.weight"
    params.assign(head, 0.01 * params[head])
    return params


def apply_adapter(params: ParamStore, mask: AdapterMask, rng: Rng) -> ParamStore:
    """Return a copy of ``params`` configured for ``mask``.

    Low-rank mode freezes every base entry and adds factors U (d x r) and
    V (r x k) to the target layer; V starts at zero so the network output is
    unchanged until the first update.
    """
    out = params.copy()
    if mask.mode == "full":
        return out
    if mask.mode != "low-rank":
        raise ConfigError(f"unknown adapter mode {mask.mode!r}")
    layer = mask.layer or f"layer{layer_count(out) - 1}"
    w_key = f"{layer}.weight"
    if w_key not in out:
        raise ConfigError(f"adapter target {layer!r} not in network")
    d, k = out.shape(w_key)
    if not 1 <= mask.rank <= min(d, k):
        raise ConfigError(f"rank {mask.rank} invalid for a {d}x{k} layer")
    for name in out.names():
        out.set_trainable(name, False)
    out.add(f"{layer}.lora_u", rng.normal(size=(d, mask.rank)) / np.sqrt(d))
    out.add(f"{layer}.lora_v", np.zeros((mask.rank, k)))
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


@dataclass
class PolicyCache:
    record: ActivationRecord
    log_probs: np.ndarray


def log_prob(params: ParamStore, window: ObservationWindow, action: int) -> tuple[float, PolicyCache]:
    logits, rec = mlp_forward(params, encode_for(params, window))
    lp = log_softmax(logits)
    return float(lp[int(action)]), PolicyCache(rec, lp)


def log_prob_batch(params: ParamStore, inputs: np.ndarray, actions) -> tuple[np.ndarray, PolicyCache]:
    """Batched variant on pre-encoded inputs of shape (B, width)."""
    logits, rec = mlp_forward(params, inputs)
    lp = log_softmax(logits)
    actions = np.asarray(actions, dtype=int)
    return lp[np.arange(len(actions)), actions], PolicyCache(rec, lp)


def act(params: ParamStore, window: ObservationWindow, rng: Rng) -> tuple[int, float]:
    logits, _ = mlp_forward(params, encode_for(params, window))
    lp = log_softmax(logits)
    a = rng.categorical(np.exp(lp))
    return a, float(lp[a])


def action_probs(params: ParamStore, window: ObservationWindow) -> np.ndarray:
    logits, _ = mlp_forward(params, encode_for(params, window))
    return np.exp(log_softmax(logits))


def score_upstream(log_probs: np.ndarray, actions) -> np.ndarray:
    """d log pi(a) / d logits = onehot(a) - softmax(logits)."""
    probs = np.exp(log_probs)
    up = -probs
    if up.ndim == 1:
        up = up.copy()
        up[int(actions)] += 1.0
    else:
        up[np.arange(len(up)), np.asarray(actions, dtype=int)] += 1.0
    return up


def grad_log_prob(cache: PolicyCache, action, weights=None) -> GradStore:
    """Gradient of log pi(action) (or of sum_i w_i log pi(a_i) for a batch).

    Frozen entries never appear in the result, so the optimizer cannot touch them.
    """
    if cache.record.params.version != cache.record.version:
        raise UsageError("policy cache is stale: parameters changed since log_prob")
    up = score_upstream(cache.log_probs, action)
    if weights is not None:
        up = up * np.asarray(weights, dtype=np.float64)[:, None]
    return mlp_backward(cache.record, up)


def log_prob_under(snapshot: Snapshot, window: ObservationWindow, action: int) -> float:
    """log pi_old(a | window) evaluated under a frozen snapshot."""
    return log_prob(snapshot.to_store(), window, action)[0]
