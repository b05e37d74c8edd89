"""Deterministic pixel-control gridworld with visually shifted render suites.

The task never changes: move the agent square onto the target square on an
8x8 grid within 50 steps, with distance shaping plus a terminal bonus. What
changes between suites is only the rendering:

* train       - fixed palette, static background, grid lines on
* color_hard  - per-episode palette drawn from a held-out hue band at least
                60 degrees away from every training hue
* video_easy  - training palette, background replaced by a drifting plaid
                with per-episode frequency/phase/velocity
* video_hard  - per-step noise background and no grid lines (no ground
                reference)

Rewards and dynamics are identical across suites; (seed, suite, action
sequence) determines every observation byte.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ProtocolError
from .numcore import Prng

GRID = 8
CELL = 6
SIZE = GRID * CELL  # 48
HORIZON = 50
FRAME_STACK = 3
MIN_START_DIST = 9  # L1 cells between agent and target at reset

ACTIONS = ("up", "down", "left", "right", "stay")
_DELTAS = {0: (0, -1), 1: (0, 1), 2: (-1, 0), 3: (1, 0), 4: (0, 0)}

# shaping 0.1 per cell (max L1 = 14) plus terminal 1.0
RETURN_MIN = -1.4
RETURN_MAX = 2.4

# training hues sit inside [0, 0.16]; the held-out bands below stay at least
# 1/6 of the hue circle (60 degrees) away from all of them
TRAIN_AGENT_HSV = (0.00, 0.95, 0.95)
TRAIN_TARGET_HSV = (0.12, 0.90, 0.95)
TRAIN_BG_HSV = (0.16, 0.55, 0.25)
GRID_RGB = (0.55, 0.55, 0.55)
HELD_OUT_AGENT_BAND = (0.34, 0.49)
HELD_OUT_TARGET_BAND = (0.51, 0.66)
HELD_OUT_BG_BAND = (0.68, 0.83)
TRAIN_HUES = (TRAIN_AGENT_HSV[0], TRAIN_TARGET_HSV[0], TRAIN_BG_HSV[0])


def hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    h = h % 1.0
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float32)


def rgb_to_hue(rgb) -> float:
    r, g, b = float(rgb[0]), float(rgb[1]), float(rgb[2])
    mx, mn = max(r, g, b), min(r, g, b)
    if mx == mn:
        return 0.0
    d = mx - mn
    if mx == r:
        h = ((g - b) / d) % 6
    elif mx == g:
        h = (b - r) / d + 2
    else:
        h = (r - g) / d + 4
    return h / 6.0


def hue_distance(a: float, b: float) -> float:
    d = abs(a % 1.0 - b % 1.0)
    return min(d, 1.0 - d)


@dataclass(frozen=True)
class ShiftSpec:
    suite: str
    palette: str  # "fixed" | "held_out"
    background: str  # "static" | "plaid" | "noise"
    grid_lines: bool


_SUITES = {
    "train": ShiftSpec("train", "fixed", "static", True),
    "color_hard": ShiftSpec("color_hard", "held_out", "static", True),
    "video_easy": ShiftSpec("video_easy", "fixed", "plaid", True),
    "video_hard": ShiftSpec("video_hard", "fixed", "noise", False),
}

SUITE_NAMES = tuple(_SUITES)


def shift_suite(name: str) -> ShiftSpec:
    try:
        return _SUITES[name]
    except KeyError:
        raise ConfigError(f"unknown suite {name!r}, expected one of {SUITE_NAMES}") from None


@dataclass(frozen=True)
class PlaidParams:
    fx: float
    fy: float
    vx: float
    vy: float
    px: float
    py: float
    tint: np.ndarray


@dataclass(frozen=True)
class EpisodeParams:
    agent_rgb: np.ndarray
    target_rgb: np.ndarray
    bg_rgb: np.ndarray
    grid_rgb: np.ndarray
    plaid: PlaidParams | None
    noise_seed: int | None


@dataclass(frozen=True)
class WorldState:
    agent: tuple[int, int]
    target: tuple[int, int]
    t: int
    done: bool
    spec: ShiftSpec
    ep: EpisodeParams
    frames: np.ndarray  # (FRAME_STACK, 3, SIZE, SIZE) float32


def l1_distance(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def _draw_palette(rng: Prng, spec: ShiftSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if spec.palette == "fixed":
        return (
            hsv_to_rgb(*TRAIN_AGENT_HSV),
            hsv_to_rgb(*TRAIN_TARGET_HSV),
            hsv_to_rgb(*TRAIN_BG_HSV),
        )
    ah = rng.uniform(*HELD_OUT_AGENT_BAND)
    th = rng.uniform(*HELD_OUT_TARGET_BAND)
    bh = rng.uniform(*HELD_OUT_BG_BAND)
    return (
        hsv_to_rgb(ah, TRAIN_AGENT_HSV[1], TRAIN_AGENT_HSV[2]),
        hsv_to_rgb(th, TRAIN_TARGET_HSV[1], TRAIN_TARGET_HSV[2]),
        hsv_to_rgb(bh, TRAIN_BG_HSV[1], TRAIN_BG_HSV[2]),
    )


def reset(rng: Prng, spec: ShiftSpec) -> tuple[WorldState, np.ndarray]:
    """Place agent and target, draw per-episode appearance, render the first stack."""
    while True:
        agent = (int(rng.integers(0, GRID)), int(rng.integers(0, GRID)))
        target = (int(rng.integers(0, GRID)), int(rng.integers(0, GRID)))
        if l1_distance(agent, target) >= MIN_START_DIST:
            break
    agent_rgb, target_rgb, bg_rgb = _draw_palette(rng, spec)
    plaid = None
    if spec.background == "plaid":
        plaid = PlaidParams(
            fx=float(rng.uniform(1.0, 3.0)),
            fy=float(rng.uniform(1.0, 3.0)),
            vx=float(rng.uniform(0.02, 0.08)),
            vy=float(rng.uniform(0.02, 0.08)),
            px=float(rng.uniform(0.0, 2 * np.pi)),
            py=float(rng.uniform(0.0, 2 * np.pi)),
            tint=hsv_to_rgb(float(rng.uniform(0.0, 1.0)), 0.6, 0.6),
        )
    noise_seed = int(rng.integers(0, 1 << 62)) if spec.background == "noise" else None
    ep = EpisodeParams(agent_rgb, target_rgb, bg_rgb, np.array(GRID_RGB, dtype=np.float32), plaid, noise_seed)
    frame0 = _render_cells(agent, target, spec, ep, 0)
    frames = np.repeat(frame0[None], FRAME_STACK, axis=0)
    state = WorldState(agent, target, 0, False, spec, ep, frames)
    return state, frames.reshape(FRAME_STACK * 3, SIZE, SIZE).copy()


def step(state: WorldState, action: int) -> tuple[WorldState, np.ndarray, float, bool]:
    """Apply one action; moves clamp at walls.

    Reward is 0.1 * (distance before - distance after) plus 1.0 on reaching
    the target; the episode ends on reach or at the horizon.
    """
    if state.done:
        raise ProtocolError("step called on a finished episode")
    if action not in _DELTAS:
        raise ConfigError(f"unknown action {action!r}")
    d_before = l1_distance(state.agent, state.target)
    dx, dy = _DELTAS[action]
    agent = (
        min(max(state.agent[0] + dx, 0), GRID - 1),
        min(max(state.agent[1] + dy, 0), GRID - 1),
    )
    d_after = l1_distance(agent, state.target)
    t = state.t + 1
    reached = agent == state.target
    done = reached or t >= HORIZON
    reward = 0.1 * (d_before - d_after) + (1.0 if reached else 0.0)
    frame = _render_cells(agent, state.target, state.spec, state.ep, t)
    frames = np.concatenate([state.frames[1:], frame[None]], axis=0)
    new_state = replace(state, agent=agent, t=t, done=done, frames=frames)
    return new_state, frames.reshape(FRAME_STACK * 3, SIZE, SIZE).copy(), reward, done


def render(state: WorldState, spec: ShiftSpec | None = None, ep: EpisodeParams | None = None,
           t: int | None = None) -> np.ndarray:
    """Render one (3, 48, 48) frame; t drives the background process only."""
    return _render_cells(
        state.agent,
        state.target,
        spec if spec is not None else state.spec,
        ep if ep is not None else state.ep,
        state.t if t is None else t,
    )


def _render_cells(agent, target, spec: ShiftSpec, ep: EpisodeParams, t: int) -> np.ndarray:
    if spec.background == "static":
        frame = np.empty((3, SIZE, SIZE), dtype=np.float32)
        frame[:] = ep.bg_rgb[:, None, None]
    elif spec.background == "plaid":
        pl = ep.plaid
        xs = np.arange(SIZE, dtype=np.float32) / SIZE
        wave_x = np.sin(2 * np.pi * (pl.fx * xs + pl.vx * t) + pl.px)
        wave_y = np.sin(2 * np.pi * (pl.fy * xs + pl.vy * t) + pl.py)
        p = 0.5 * (1.0 + wave_y[:, None] * wave_x[None, :])
        base = np.float32(0.08)
        frame = (base * (1.0 - p))[None] + ep.plaid.tint[:, None, None] * p[None]
        frame = frame.astype(np.float32)
    elif spec.background == "noise":
        frame = Prng(ep.noise_seed).split(t).uniform(size=(3, SIZE, SIZE)).astype(np.float32)
    else:
        raise ConfigError(f"unknown background {spec.background!r}")
    if spec.grid_lines:
        frame[:, ::CELL, :] = ep.grid_rgb[:, None, None]
        frame[:, :, ::CELL] = ep.grid_rgb[:, None, None]
    for (cx, cy), rgb in ((target, ep.target_rgb), (agent, ep.agent_rgb)):
        frame[:, cy * CELL : (cy + 1) * CELL, cx * CELL : (cx + 1) * CELL] = rgb[:, None, None]
    return frame


def optimal_return(state: WorldState) -> float:
    """Analytic shortest-path return for a fresh episode layout."""
    return 1.0 + 0.1 * l1_distance(state.agent, state.target)


def greedy_action(state: WorldState) -> int:
    """Hand-scripted optimal policy: reduce L1 distance, x axis first."""
    ax, ay = state.agent
    tx, ty = state.target
    if ax < tx:
        return 3
    if ax > tx:
        return 2
    if ay < ty:
        return 1
    if ay > ty:
        return 0
    return 4


def write_png(path, frame: np.ndarray) -> None:
    """Dump one (3, H, W) float frame in [0, 1] as an 8-bit RGB PNG."""
    img = (np.clip(frame, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    rows = img.transpose(1, 2, 0)  # HWC
    raw = b"".join(b"\x00" + rows[r].tobytes() for r in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (
            struct.pack(">I", len(payload))
            + tag
            + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
        )

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", header))
        fh.write(chunk(b"IDAT", zlib.compress(raw, 6)))
        fh.write(chunk(b"IEND", b""))
