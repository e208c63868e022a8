"""Small deterministic numeric kernel.

Named parameter storage, a tanh MLP with hand-written backprop, an AdamW
style optimizer that can step in either direction, and a seeded generator.
Everything is float64.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Shapes or settings that cannot work together."""


class UsageError(RuntimeError):
    """An operation called out of order (stale cache, step after done, ...)."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, key: str):
        super().__init__(f"non-finite gradient for entry {key!r}; step rejected")
        self.key = key


# --------------------------------------------------------------------------
# parameters


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Snapshot:
    """Immutable copy of a ParamStore's values."""

    values: Mapping[str, np.ndarray]
    trainable: Mapping[str, bool]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def to_store(self) -> "ParamStore":
        store = ParamStore()
        for name, value in self.values.items():
            store.add(name, value, trainable=self.trainable[name])
        return store


class ParamStore:
    """Ordered map of named float64 tensors with trainable flags.

    Arrays handed out are read-only; every mutation goes through
    :meth:`assign`, which bumps :attr:`version` so that forward caches can
    detect that they went stale.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}
        self.version = 0

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise ConfigError(f"duplicate parameter {name!r}")
        arr = _frozen(value)
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"non-finite initial value for {name!r}")
        self._values[name] = arr
        self._trainable[name] = bool(trainable)
        self.version += 1

    def assign(self, name: str, value) -> None:
        arr = _frozen(value)
        if arr.shape != self._values[name].shape:
            raise ConfigError(
                f"shape mismatch for {name!r}: {arr.shape} vs {self._values[name].shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"refusing to store non-finite values in {name!r}")
        self._values[name] = arr
        self.version += 1

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._values[name].shape

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = bool(flag)
        self.version += 1

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def n_params(self, trainable_only: bool = False) -> int:
        return sum(
            v.size for n, v in self._values.items() if self._trainable[n] or not trainable_only
        )

    def snapshot(self) -> Snapshot:
        return Snapshot(
            values={n: _frozen(v) for n, v in self._values.items()},
            trainable=dict(self._trainable),
        )

    def restore(self, snap: Snapshot) -> None:
        if set(snap.values) != set(self._values):
            raise ConfigError("snapshot keyset does not match this store")
        for name, value in snap.values.items():
            self._values[name] = _frozen(value)
            self._trainable[name] = snap.trainable[name]
        self.version += 1

    def copy(self) -> "ParamStore":
        return self.snapshot().to_store()

    def flat(self, trainable_only: bool = True) -> np.ndarray:
        parts = [
            v.ravel() for n, v in self._values.items() if self._trainable[n] or not trainable_only
        ]
        return np.concatenate(parts) if parts else np.zeros(0)

    def digest(self) -> int:
        """CRC32 over names and raw bytes; cheap bit-identity fingerprint."""
        crc = 0
        for name, value in self._values.items():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(value).tobytes(), crc)
        return crc


class GradStore(dict):
    """name -> gradient array, keyed by the trainable entries of a ParamStore."""

    @classmethod
    def zeros_like(cls, params: ParamStore) -> "GradStore":
        return cls({n: np.zeros(params.shape(n)) for n in params.trainable_names()})

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.values())))

    def scaled(self, c: float) -> "GradStore":
        return GradStore({k: c * g for k, g in self.items()})

    def add_(self, other: Mapping[str, np.ndarray]) -> "GradStore":
        for k, g in other.items():
            self[k] = self[k] + g
        return self

    def flat(self, order: Iterable[str]) -> np.ndarray:
        return np.concatenate([self[k].ravel() for k in order])


# --------------------------------------------------------------------------
# network


def layer_count(params: ParamStore) -> int:
    n = 0
    while f"layer{n}.weight" in params:
        n += 1
    if n == 0:
        raise ConfigError("parameter store holds no layer0.weight")
    return n


def init_mlp(sizes: Iterable[int], rng: "Rng", prefix: str = "") -> ParamStore:
    """Gaussian init scaled by 1/sqrt(fan_in); zero biases.

    ``sizes`` lists every width including input and output, so ``[4, 3]`` is
    a single linear layer and ``[22, 64, 64, 6]`` the default policy net.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ConfigError(f"bad layer sizes {sizes}")
    params = ParamStore()
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.add(f"{prefix}layer{i}.weight", rng.normal(size=(n_in, n_out)) / np.sqrt(n_in))
        params.add(f"{prefix}layer{i}.bias", np.zeros(n_out))
    return params


def mlp_sizes(params: ParamStore) -> list[int]:
    n = layer_count(params)
    sizes = [params.shape("layer0.weight")[0]]
    for i in range(n):
        sizes.append(params.shape(f"layer{i}.weight")[1])
    return sizes


def effective_weight(params: ParamStore, i: int) -> np.ndarray:
    w = params[f"layer{i}.weight"]
    u_key = f"layer{i}.lora_u"
    if u_key in params:
        w = w + params[u_key] @ params[f"layer{i}.lora_v"]
    return w


@dataclass
class ActivationRecord:
    """What the backward pass needs: layer inputs and hidden tanh outputs."""

    params: ParamStore
    version: int
    layer_inputs: list[np.ndarray]
    weights: list[np.ndarray]
    batched: bool
    logits: np.ndarray = field(repr=False)


def mlp_forward(params: ParamStore, x) -> tuple[np.ndarray, ActivationRecord]:
    """Tanh hidden layers, linear head. Accepts one vector or a (B, in) batch."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    a = x if batched else x[None, :]
    n = layer_count(params)
    width = params.shape("layer0.weight")[0]
    if a.ndim != 2 or a.shape[1] != width:
        raise ConfigError(f"input width {x.shape[-1] if x.ndim else 0} != first layer width {width}")
    inputs, weights = [], []
    for i in range(n):
        w = effective_weight(params, i)
        inputs.append(a)
        weights.append(w)
        z = a @ w + params[f"layer{i}.bias"]
        a = np.tanh(z) if i < n - 1 else z
    logits = a if batched else a[0]
    return logits, ActivationRecord(params, params.version, inputs, weights, batched, logits)


def mlp_backward(cache: ActivationRecord, upstream) -> GradStore:
    """Gradient of sum(logits * upstream) with respect to every trainable entry."""
    params = cache.params
    if params.version != cache.version:
        raise UsageError("activation cache is stale: parameters changed since the forward pass")
    g = np.asarray(upstream, dtype=np.float64)
    if not cache.batched:
        g = g[None, :]
    if g.shape != (cache.layer_inputs[0].shape[0], cache.weights[-1].shape[1]):
        raise ConfigError(f"upstream shape {np.shape(upstream)} does not match logits")
    grads = GradStore()
    n = len(cache.weights)
    for i in reversed(range(n)):
        a_in = cache.layer_inputs[i]
        d_w = a_in.T @ g
        for key, val in (
            (f"layer{i}.weight", d_w),
            (f"layer{i}.bias", g.sum(axis=0)),
        ):
            if params.is_trainable(key):
                grads[key] = val
        u_key, v_key = f"layer{i}.lora_u", f"layer{i}.lora_v"
        if u_key in params:
            if params.is_trainable(u_key):
                grads[u_key] = d_w @ params[v_key].T
            if params.is_trainable(v_key):
                grads[v_key] = params[u_key].T @ d_w
        if i > 0:
            h = a_in  # tanh output of layer i-1
            g = (g @ cache.weights[i].T) * (1.0 - h * h)
    return GradStore({k: grads[k] for k in params.trainable_names()})


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def reset(self) -> None:
        self.step = 0
        self.m.clear()
        self.v.clear()


def optimizer_step(
    params: ParamStore,
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    direction: str = "ascent",
) -> None:
    """One bias-corrected AdamW step; ``ascent`` climbs the objective.

    Weight decay always shrinks toward zero regardless of direction.
    Nothing is written unless every gradient and every new value is finite.
    """
    if direction not in ("ascent", "descent"):
        raise ConfigError(f"direction must be ascent or descent, got {direction!r}")
    keys = params.trainable_names()
    if set(grads) != set(keys):
        raise ConfigError(
            f"gradient keys {sorted(grads)} do not match trainable entries {sorted(keys)}"
        )
    for k in keys:
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteGradientError(k)

    sign = 1.0 if direction == "ascent" else -1.0
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_m, new_v, new_vals = {}, {}, {}
    for k in keys:
        g = np.asarray(grads[k], dtype=np.float64)
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        theta = params[k]
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new = theta - state.lr * state.weight_decay * theta + sign * step
        if not np.all(np.isfinite(new)):
            raise NonFiniteGradientError(k)
        new_m[k], new_v[k], new_vals[k] = m, v, new
    for k in keys:
        params.assign(k, new_vals[k])
    state.m.update(new_m)
    state.v.update(new_v)
    state.step = t


# --------------------------------------------------------------------------
# randomness


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode())


class Rng:
    """Seeded generator backed by numpy's Philox-4x64 counter-based bit generator.

    Child streams from :meth:`spawn` are keyed by a label path, so the same
    (seed, labels) always yields the same sequence no matter how many draws
    the parent has made.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & MASK64
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + tuple(_label_to_int(x) for x in labels))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int | None = None, size=None):
        """Integers in [low, high)."""
        out = self._gen.integers(low, high, size=size)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def categorical(self, probs: np.ndarray, size=None):
        """Inverse-CDF draw(s) from a discrete distribution."""
        cdf = np.cumsum(probs)
        u = self._gen.uniform(0.0, cdf[-1], size)
        idx = np.searchsorted(cdf, u, side="right")
        idx = np.minimum(idx, len(probs) - 1)
        return int(idx) if size is None else idx
