"""Grid pick-and-place POMDP with train / execution / vision / semantics shift suites."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .numkit import ConfigError, Rng, UsageError

GRID_W = 12
GRID_H = 12
DEFAULT_HORIZON = 160

NORTH, SOUTH, EAST, WEST, GRASP, RELEASE = range(6)
ACTION_NAMES = ("N", "S", "E", "W", "GRASP", "RELEASE")
MOVES = {NORTH: (0, 1), SOUTH: (0, -1), EAST: (1, 0), WEST: (-1, 0)}

# object/receptacle placement on the train suite: x in [3, 8], y in [5, 8]
TRAIN_RECT = (3, 8, 5, 8)
# strictly larger surrounding square used by execution/obj-pos
OUTER_SQUARE = (1, 10, 1, 10)
HOME = (5, 1)
TELEPORT_STEP = 5

N_INSTRUCTIONS = 4
TRAIN_INSTRUCTIONS = (0, 1)
UNSEEN_INSTRUCTIONS = (2, 3)
TRAIN_APPEARANCES = tuple(k / 30.0 for k in range(16))
UNSEEN_APPEARANCES = (0.6, 0.7, 0.8, 0.9, 1.0)

# gx gy ox oy rx ry holding dx dy appearance noise
D_OBS = 11
COORD_CHANNELS = slice(0, 6)

# vision shifts overlay one of these per-episode textures; each step sees it
# re-cropped, modeled as a uniform jitter mixed in with TEXTURE_JITTER weight
N_TEXTURES = 16
TEXTURE_JITTER = 0.25
TEXTURES = np.random.Generator(np.random.Philox(20240601)).uniform(size=(N_TEXTURES, D_OBS))

SUITES = {
    "train": ("default",),
    "execution": ("obj-pos", "robot-pose", "obj-rep"),
    "vision": ("noise-w", "noise-s", "texture-w", "texture-s", "table"),
    "semantics": ("instruct", "dist-recep"),
}
DEFAULT_VARIANT = {
    "train": "default",
    "execution": "obj-pos",
    "vision": "noise-w",
    "semantics": "instruct",
}
_INTENSITY = {"noise-w": 0.3, "texture-w": 0.3, "noise-s": 0.5, "texture-s": 0.5}


@dataclass(frozen=True)
class ShiftSpec:
    suite: str = "train"
    variant: str = "default"
    intensity: float = 0.0

    @classmethod
    def make(cls, suite: str, variant: Optional[str] = None, intensity: Optional[float] = None):
        if suite not in SUITES:
            raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
        variant = variant or DEFAULT_VARIANT[suite]
        if variant not in SUITES[suite]:
            raise ConfigError(f"suite {suite!r} has no variant {variant!r}; choose from {SUITES[suite]}")
        if intensity is None:
            intensity = _INTENSITY.get(variant, 0.0)
        if not 0.0 <= intensity <= 1.0:
            raise ConfigError(f"intensity {intensity} outside [0, 1]")
        return cls(suite, variant, float(intensity))

    @property
    def tag(self) -> str:
        return f"{self.suite}/{self.variant}"


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = DEFAULT_HORIZON
    seed: int = 0
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    instruction_id: Optional[int] = None  # None -> drawn from the suite's instruction pool

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")


Cell = tuple[int, int]


@dataclass(frozen=True)
class EnvState:
    width: int
    height: int
    gripper: Cell
    obj: Cell
    recep: Cell
    distractor: Optional[Cell]
    holding: bool
    t: int
    appearance: float
    instruction_id: int
    texture: Optional[int] = None
    teleported: bool = False
    done: bool = False
    success: bool = False

    def __post_init__(self):
        for c in (self.gripper, self.obj, self.recep) + ((self.distractor,) if self.distractor else ()):
            if not (0 <= c[0] < self.width and 0 <= c[1] < self.height):
                raise ConfigError(f"cell {c} out of bounds")
        if self.holding and self.obj != self.gripper:
            raise ConfigError("holding requires object cell == gripper cell")


def manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def _cell_in(rng: Rng, box) -> Cell:
    x0, x1, y0, y1 = box
    return (rng.integers(x0, x1 + 1), rng.integers(y0, y1 + 1))


def in_train_rect(c: Cell) -> bool:
    x0, x1, y0, y1 = TRAIN_RECT
    return x0 <= c[0] <= x1 and y0 <= c[1] <= y1


def reset(cfg: EpisodeConfig, rng: Rng) -> tuple[EnvState, np.ndarray]:
    shift = cfg.shift
    box = OUTER_SQUARE if shift.variant == "obj-pos" else TRAIN_RECT
    for _ in range(100):
        obj = _cell_in(rng, box)
        recep = _cell_in(rng, box)
        distractor = _cell_in(rng, OUTER_SQUARE) if shift.variant == "dist-recep" else None
        cells = [obj, recep] + ([distractor] if distractor else [])
        if len(set(cells)) == len(cells):
            break
    else:
        raise ConfigError("could not sample a non-degenerate layout in 100 attempts")

    if shift.variant == "robot-pose":
        gripper = (rng.integers(0, GRID_W), rng.integers(0, GRID_H))
    else:
        gripper = HOME
    pool = UNSEEN_APPEARANCES if shift.variant == "table" else TRAIN_APPEARANCES
    appearance = pool[rng.integers(0, len(pool))]
    if cfg.instruction_id is not None:
        instruction = cfg.instruction_id
    else:
        ids = UNSEEN_INSTRUCTIONS if shift.variant == "instruct" else TRAIN_INSTRUCTIONS
        instruction = ids[rng.integers(0, len(ids))]
    texture = None
    if shift.suite == "vision" and shift.variant != "table":
        texture = rng.integers(0, N_TEXTURES)
    state = EnvState(
        GRID_W, GRID_H, gripper, obj, recep, distractor, False, 0, appearance, instruction, texture
    )
    return state, render_obs(state, shift, rng)


def clean_features(state: EnvState) -> np.ndarray:
    sx, sy = state.width - 1, state.height - 1
    f = np.zeros(D_OBS)
    f[0:2] = state.gripper[0] / sx, state.gripper[1] / sy
    f[2:4] = state.obj[0] / sx, state.obj[1] / sy
    f[4:6] = state.recep[0] / sx, state.recep[1] / sy
    f[6] = float(state.holding)
    if state.distractor is not None:
        f[7:9] = state.distractor[0] / sx, state.distractor[1] / sy
    f[9] = state.appearance
    return f


def frame_noise(state: EnvState, rng: Rng) -> np.ndarray:
    """Per-step noise vector: the episode texture with a fresh random crop."""
    jitter = rng.uniform(size=D_OBS)
    if state.texture is None:
        return jitter
    return (1.0 - TEXTURE_JITTER) * TEXTURES[state.texture] + TEXTURE_JITTER * jitter


def render_obs(state: EnvState, shift: ShiftSpec, rng: Rng) -> np.ndarray:
    """Clean features, blended with a per-step noise vector for vision shifts.

    noise-*: every channel becomes (1-w)*clean + w*noise.
    texture-*: only the gripper/object/receptacle coordinates are blended.
    """
    clean = clean_features(state)
    w = shift.intensity
    if shift.suite != "vision" or w == 0.0 or shift.variant == "table":
        return clean
    noise = frame_noise(state, rng)
    out = clean.copy()
    if shift.variant.startswith("noise"):
        out = (1.0 - w) * clean + w * noise
    else:
        out[COORD_CHANNELS] = (1.0 - w) * clean[COORD_CHANNELS] + w * noise[COORD_CHANNELS]
    return out


def step(state: EnvState, action: int, cfg: EpisodeConfig, rng: Rng):
    """Advance one step; returns (state, obs, done, success)."""
    if state.done:
        raise UsageError("step() called on a finished episode")
    if state.t >= cfg.horizon:
        raise UsageError("step() called past the horizon")
    action = int(action)
    if not 0 <= action < len(ACTION_NAMES):
        raise ConfigError(f"action {action} out of range")

    gripper, obj, holding, success = state.gripper, state.obj, state.holding, False
    if action in MOVES:
        dx, dy = MOVES[action]
        gripper = (
            min(max(gripper[0] + dx, 0), state.width - 1),
            min(max(gripper[1] + dy, 0), state.height - 1),
        )
        if holding:
            obj = gripper
    elif action == GRASP:
        if gripper == obj:
            holding = True
    elif action == RELEASE:
        if holding:
            holding = False
            obj = gripper
            success = obj == state.recep

    t = state.t + 1
    teleported = state.teleported
    if (
        cfg.shift.variant == "obj-rep"
        and t == TELEPORT_STEP
        and not holding
        and not teleported
        and not success
    ):
        obj = _teleport_target(state, rng)
        teleported = True

    done = success or t >= cfg.horizon
    new = replace(
        state,
        gripper=gripper,
        obj=obj,
        holding=holding,
        t=t,
        teleported=teleported,
        done=done,
        success=success,
    )
    return new, render_obs(new, cfg.shift, rng), done, success


def _teleport_target(state: EnvState, rng: Rng) -> Cell:
    while True:
        c = (rng.integers(0, state.width), rng.integers(0, state.height))
        if c not in (state.recep, state.obj, state.distractor):
            return c


def state_record(state: EnvState) -> dict:
    d = asdict(state)
    for k in ("gripper", "obj", "recep", "distractor"):
        if d[k] is not None:
            d[k] = list(d[k])
    return d


def write_trajectory(path, records) -> None:
    """One JSON object per line: t, state fields, action, reward, progress."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trajectory(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
