"""Value-based pixel agent: Q-network on the normalized encoder, episodic
replay with frame stacking, target network, epsilon-greedy exploration and
random-shift image augmentation."""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, EncoderState, Mode, build_encoder, encode, encode_backward, sample_active_mask
from .errors import ConfigError, NumericError
from .numcore import Prng, Tensor, default_dtype, linear, linear_backward
from .pixelworld import ACTIONS, FRAME_STACK

N_ACTIONS = len(ACTIONS)


@dataclass
class AgentConfig:
    gamma: float = 0.99
    lr: float = 2.5e-4
    batch: int = 32
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_steps: int = 20_000
    tau: float = 0.01
    update_every: int = 2
    shift_pad: int = 4
    buffer_capacity: int = 50_000

    def __post_init__(self):
        if not (0 <= self.gamma < 1):
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.batch < 1 or self.shift_pad < 0:
            raise ConfigError("batch must be >= 1 and shift_pad >= 0")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma, "lr": self.lr, "batch": self.batch,
            "eps_start": self.eps_start, "eps_end": self.eps_end,
            "eps_decay_steps": self.eps_decay_steps, "tau": self.tau,
            "update_every": self.update_every, "shift_pad": self.shift_pad,
            "buffer_capacity": self.buffer_capacity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        return cls(**d)


def epsilon_at(step: int, cfg: AgentConfig) -> float:
    if step >= cfg.eps_decay_steps:
        return cfg.eps_end
    frac = step / cfg.eps_decay_steps
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


@dataclass
class QNet:
    enc: EncoderState
    w: Tensor  # feature_dim -> N_ACTIONS
    b: Tensor

    def named_params(self) -> dict[str, Tensor]:
        out = self.enc.named_params()
        out["q.w"] = self.w
        out["q.b"] = self.b
        return out

    def named_buffers(self) -> dict[str, Tensor]:
        return self.enc.named_buffers()


def build_qnet(enc_cfg: EncoderConfig, rng: Prng) -> QNet:
    enc = build_encoder(enc_cfg, rng)
    dtype = default_dtype()
    bound = 1.0 / np.sqrt(enc_cfg.feature_dim)
    w = rng.uniform(-bound, bound, size=(enc_cfg.feature_dim, N_ACTIONS)).astype(dtype)
    return QNet(enc=enc, w=w, b=np.zeros(N_ACTIONS, dtype=dtype))


def clone_qnet(qnet: QNet) -> QNet:
    return copy.deepcopy(qnet)


def qnet_forward(qnet: QNet, obs: Tensor, mask, mode: Mode, rng: Prng | None = None):
    feats, enc_cache = encode(obs, qnet.enc, mask, mode, rng)
    q = linear(feats, qnet.w, qnet.b)
    return q, {"enc": enc_cache, "feats": feats}


def qnet_backward(qnet: QNet, cache, dq: Tensor):
    gfeat, gw, gb = linear_backward(cache["feats"], qnet.w, dq)
    _, grads = encode_backward(cache["enc"], gfeat)
    grads["q.w"] = gw
    grads["q.b"] = gb
    return grads


def act(obs: Tensor, qnet: QNet, epsilon: float, rng: Prng) -> int:
    """Epsilon-greedy action for one observation; greedy pass runs in eval mode.

    One uniform draw is consumed every call so the stream advances
    identically whichever branch is taken; ties break to the lowest index.
    """
    explore = rng.uniform() < epsilon
    if explore:
        return int(rng.integers(0, N_ACTIONS))
    q, _ = qnet_forward(qnet, obs[None].astype(qnet.w.dtype, copy=False), None, Mode.EVAL)
    return int(np.argmax(q[0]))


def random_shift(obs: Tensor, rng: Prng, pad: int = 4, offsets=None) -> Tensor:
    """Replicate-pad each observation by `pad` px and crop a random window.

    All frames of one observation share the window; each instance in a batch
    draws its own. `offsets` is a test hook pinning the (row, col) draws.
    """
    single = obs.ndim == 3
    x = obs[None] if single else obs
    n, c, h, w = x.shape
    if pad == 0:
        return obs.copy()
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    if offsets is None:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = np.empty_like(x)
    for i in range(n):
        oy, ox = int(offsets[i][0]), int(offsets[i][1])
        out[i] = xp[i, :, oy : oy + h, ox : ox + w]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Replay


def _quantize(frame: np.ndarray) -> np.ndarray:
    return (np.clip(frame, 0.0, 1.0) * 255.0).round().astype(np.uint8)


class ReplayBuffer:
    """FIFO transition store, organized as episodes of per-step frames.

    Frames are kept once as uint8 and observations are re-stacked on
    sampling, so a 50k-transition buffer of 3-frame stacks stays within a
    few hundred MB. Sampling is uniform over stored transitions and fully
    determined by the rng argument.
    """

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ConfigError("capacity must be positive")
        self.capacity = capacity
        self._episodes: deque = deque()
        self._total = 0
        self._cur_frames: list | None = None
        self._cur_steps: list | None = None

    def __len__(self) -> int:
        return self._total

    def start_episode(self, frame0: np.ndarray) -> None:
        self._cur_frames = [_quantize(frame0)]
        self._cur_steps = []

    def add_step(self, frame: np.ndarray, action: int, reward: float, done: bool,
                 terminal: bool | None = None) -> None:
        """Record one step. `done` closes the episode; `terminal` marks true
        task termination for bootstrapping (a horizon timeout is done but not
        terminal, since observations carry no clock). Defaults to done."""
        if self._cur_frames is None:
            raise ConfigError("add_step before start_episode")
        self._cur_frames.append(_quantize(frame))
        self._cur_steps.append((action, reward, done if terminal is None else terminal))
        if done:
            self._finish_episode()

    def _finish_episode(self) -> None:
        ep = {
            "frames": np.stack(self._cur_frames),
            "actions": np.array([s[0] for s in self._cur_steps], dtype=np.int64),
            "rewards": np.array([s[1] for s in self._cur_steps], dtype=np.float32),
            "dones": np.array([s[2] for s in self._cur_steps], dtype=bool),
        }
        self._episodes.append(ep)
        self._total += len(self._cur_steps)
        self._cur_frames = None
        self._cur_steps = None
        while self._total > self.capacity and len(self._episodes) > 1:
            gone = self._episodes.popleft()
            self._total -= len(gone["actions"])

    @staticmethod
    def _stack(frames: np.ndarray, t: int) -> np.ndarray:
        idx = [max(0, t - k) for k in range(FRAME_STACK - 1, -1, -1)]
        return frames[idx].reshape(FRAME_STACK * 3, frames.shape[2], frames.shape[3])

    def sample(self, rng: Prng, batch: int, dtype=np.float32):
        if self._total < batch:
            raise ConfigError(f"buffer holds {self._total} transitions, need {batch}")
        lengths = np.array([len(ep["actions"]) for ep in self._episodes])
        cum = np.cumsum(lengths)
        flat = rng.integers(0, self._total, size=batch)
        obs = np.empty((batch, FRAME_STACK * 3, 48, 48), dtype=np.uint8)
        next_obs = np.empty_like(obs)
        actions = np.empty(batch, dtype=np.int64)
        rewards = np.empty(batch, dtype=dtype)
        dones = np.empty(batch, dtype=dtype)
        eps = list(self._episodes)
        for i, f in enumerate(flat):
            e = int(np.searchsorted(cum, f, side="right"))
            t = int(f - (cum[e - 1] if e else 0))
            ep = eps[e]
            obs[i] = self._stack(ep["frames"], t)
            next_obs[i] = self._stack(ep["frames"], t + 1)
            actions[i] = ep["actions"][t]
            rewards[i] = ep["rewards"][t]
            dones[i] = float(ep["dones"][t])
        scale = np.dtype(dtype).type(1.0 / 255.0)
        return obs.astype(dtype) * scale, actions, rewards, next_obs.astype(dtype) * scale, dones


# ---------------------------------------------------------------------------
# Learning


def td_update(batch, qnet: QNet, target_qnet: QNet, cfg: AgentConfig, rng: Prng):
    """One Q-learning step on an augmented batch; returns (loss, grads).

    Targets come from the target network in eval mode (no CrossNorm in the
    bootstrap); the online pass runs in train mode with a freshly sampled
    activation mask. Loss is the mean Huber error.
    """
    obs, actions, rewards, next_obs, dones = batch
    n = obs.shape[0]
    if n < 2:
        raise ConfigError("td_update needs a batch of at least 2")
    obs_aug = random_shift(obs, rng, cfg.shift_pad)
    next_aug = random_shift(next_obs, rng, cfg.shift_pad)
    mask = sample_active_mask(rng, qnet.enc.cfg)

    q_next, _ = qnet_forward(target_qnet, next_aug, None, Mode.EVAL)
    y = rewards + cfg.gamma * (1.0 - dones) * q_next.max(axis=1)

    q, cache = qnet_forward(qnet, obs_aug, mask, Mode.TRAIN, rng)
    qa = q[np.arange(n), actions]
    err = qa - y
    abs_err = np.abs(err)
    loss = float(np.mean(np.where(abs_err <= 1.0, 0.5 * err * err, abs_err - 0.5)))
    if not np.isfinite(loss):
        raise NumericError("non-finite TD loss")

    dqa = np.clip(err, -1.0, 1.0) / n
    dq = np.zeros_like(q)
    dq[np.arange(n), actions] = dqa
    grads = qnet_backward(qnet, cache, dq)
    return loss, grads


def soft_update(target: QNet, online: QNet, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, elementwise."""
    tp, op = target.named_params(), online.named_params()
    for name, arr in tp.items():
        arr[...] = (1.0 - tau) * arr + tau * op[name]
    tb, ob = target.named_buffers(), online.named_buffers()
    for name, arr in tb.items():
        arr[...] = (1.0 - tau) * arr + tau * ob[name]


class Adam:
    """Standard Adam with bias correction, operating in place on a param dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * (g * g)
            p[...] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, Tensor]:
        out = {}
        for k, arr in self.m.items():
            out[f"adam.m.{k}"] = arr
        for k, arr in self.v.items():
            out[f"adam.v.{k}"] = arr
        return out

    def load_state(self, arrays: dict[str, Tensor], t: int) -> None:
        self.t = t
        for k in self.m:
            self.m[k][...] = arrays[f"adam.m.{k}"]
            self.v[k][...] = arrays[f"adam.v.{k}"]
