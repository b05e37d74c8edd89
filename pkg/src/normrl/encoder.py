"""Convolutional image encoder with per-layer normalization blocks.

Each block runs conv -> CrossNorm (when that layer is activated for this
forward pass) -> SelfNorm -> ReLU, then a flatten and a relu-activated
linear head produce the feature vector. CrossNorm layers exist only at training time: a random
k-of-L subset is active per forward pass and all are inert in eval mode,
while SelfNorm stays active in both modes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .normlayers import (
    BatchNormState,
    CrossNormConfig,
    SelfNormParams,
    batchnorm_backward,
    batchnorm_forward,
    channel_stats,
    crossnorm_backward,
    crossnorm_forward,
    sample_crop,
    sample_pairing,
    selfnorm_backward,
    selfnorm_forward,
)
from .numcore import (
    Tensor,
    conv2d,
    conv2d_backward,
    default_dtype,
    linear,
    linear_backward,
    relu,
    relu_backward,
    require_finite,
)

NORM_VARIANTS = ("none", "cnsn", "cn_only", "sn_only", "bn")


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0


@dataclass
class EncoderConfig:
    conv: list[ConvSpec]
    norm: list[str]
    k_active: int
    feature_dim: int = 128
    in_shape: tuple[int, int, int] = (9, 48, 48)
    crossnorm: CrossNormConfig = field(default_factory=CrossNormConfig)
    sn_hidden: int = 2

    def __post_init__(self):
        if isinstance(self.norm, str):
            self.norm = [self.norm] * len(self.conv)
        if len(self.norm) != len(self.conv):
            raise ConfigError(f"{len(self.norm)} norm entries for {len(self.conv)} conv layers")
        for nm in self.norm:
            if nm not in NORM_VARIANTS:
                raise ConfigError(f"unknown norm variant {nm!r}")
        n_cn = len(self.cn_layers())
        if not (0 <= self.k_active <= n_cn):
            raise ConfigError(f"k_active={self.k_active} outside [0, {n_cn}]")
        self.spatial_dims()  # raises on inconsistent geometry

    def cn_layers(self) -> list[int]:
        return [i for i, nm in enumerate(self.norm) if nm in ("cnsn", "cn_only")]

    def spatial_dims(self) -> list[tuple[int, int, int]]:
        """(channels, h, w) after each conv layer."""
        c, h, w = self.in_shape
        dims = []
        for spec in self.conv:
            h2 = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
            w2 = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
            if h2 < 1 or w2 < 1:
                raise ConfigError(f"conv spec {spec} collapses a {h}x{w} map")
            c, h, w = spec.out_channels, h2, w2
            dims.append((c, h, w))
        return dims

    def flat_dim(self) -> int:
        c, h, w = self.spatial_dims()[-1]
        return c * h * w

    @classmethod
    def desk(cls, channels: int = 16, norm: str = "cnsn", k_active: int | None = None,
             feature_dim: int = 128, crossnorm: CrossNormConfig | None = None) -> "EncoderConfig":
        """The default 4-layer encoder for 9x48x48 stacked-frame observations."""
        conv = [
            ConvSpec(channels, 3, 2, 0),
            ConvSpec(channels, 3, 2, 0),
            ConvSpec(channels, 3, 2, 0),
            ConvSpec(channels, 3, 1, 0),
        ]
        cfg = cls(
            conv=conv,
            norm=norm,
            k_active=0,
            feature_dim=feature_dim,
            crossnorm=crossnorm or CrossNormConfig(),
        )
        n_cn = len(cfg.cn_layers())
        cfg.k_active = n_cn if k_active is None else k_active
        if not (0 <= cfg.k_active <= n_cn):
            raise ConfigError(f"k_active={cfg.k_active} outside [0, {n_cn}]")
        return cfg

    def to_dict(self) -> dict:
        return {
            "conv": [[s.out_channels, s.kernel, s.stride, s.pad] for s in self.conv],
            "norm": list(self.norm),
            "k_active": self.k_active,
            "feature_dim": self.feature_dim,
            "in_shape": list(self.in_shape),
            "crossnorm": {
                "crop_enabled": self.crossnorm.crop_enabled,
                "crop_frac_range": list(self.crossnorm.crop_frac_range),
                "eps": self.crossnorm.eps,
                "pairing_mode": self.crossnorm.pairing_mode,
            },
            "sn_hidden": self.sn_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        cn = d.get("crossnorm", {})
        return cls(
            conv=[ConvSpec(*s) for s in d["conv"]],
            norm=d["norm"],
            k_active=d["k_active"],
            feature_dim=d.get("feature_dim", 128),
            in_shape=tuple(d.get("in_shape", (9, 48, 48))),
            crossnorm=CrossNormConfig(
                crop_enabled=cn.get("crop_enabled", True),
                crop_frac_range=tuple(cn.get("crop_frac_range", (0.5, 1.0))),
                eps=cn.get("eps", 1e-5),
                pairing_mode=cn.get("pairing_mode", "matching"),
            ),
            sn_hidden=d.get("sn_hidden", 2),
        )


@dataclass
class LayerState:
    w: Tensor
    b: Tensor
    sn: SelfNormParams | None = None
    bn: BatchNormState | None = None


@dataclass
class EncoderState:
    cfg: EncoderConfig
    layers: list[LayerState]
    head_w: Tensor
    head_b: Tensor

    def named_params(self) -> dict[str, Tensor]:
        """Trainable arrays keyed by stable names (BN running stats excluded)."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"conv{i}.w"] = layer.w
            out[f"conv{i}.b"] = layer.b
            if layer.sn is not None:
                for k, v in layer.sn.arrays().items():
                    out[f"sn{i}.{k}"] = v
            if layer.bn is not None:
                out[f"bn{i}.gamma"] = layer.bn.gamma
                out[f"bn{i}.beta"] = layer.bn.beta
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def named_buffers(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            if layer.bn is not None:
                out[f"bn{i}.running_mean"] = layer.bn.running_mean
                out[f"bn{i}.running_var"] = layer.bn.running_var
        return out


def build_encoder(cfg: EncoderConfig, rng) -> EncoderState:
    """Initialize conv weights with uniform fan-in scaling and SelfNorm near identity."""
    dtype = default_dtype()
    layers = []
    c_in = cfg.in_shape[0]
    for i, spec in enumerate(cfg.conv):
        fan_in = c_in * spec.kernel * spec.kernel
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(spec.out_channels, c_in, spec.kernel, spec.kernel)).astype(dtype)
        b = np.zeros(spec.out_channels, dtype=dtype)
        sn = None
        bn = None
        if cfg.norm[i] in ("cnsn", "sn_only"):
            sn = SelfNormParams.init(rng, spec.out_channels, cfg.sn_hidden, dtype)
        elif cfg.norm[i] == "bn":
            bn = BatchNormState.init(spec.out_channels, dtype)
        layers.append(LayerState(w=w, b=b, sn=sn, bn=bn))
        c_in = spec.out_channels
    flat = cfg.flat_dim()
    bound = 1.0 / np.sqrt(flat)
    head_w = rng.uniform(-bound, bound, size=(flat, cfg.feature_dim)).astype(dtype)
    head_b = np.zeros(cfg.feature_dim, dtype=dtype)
    return EncoderState(cfg=cfg, layers=layers, head_w=head_w, head_b=head_b)


def sample_active_mask(rng, cfg: EncoderConfig) -> np.ndarray:
    """Uniform k_active-subset of the CrossNorm-bearing layers, as a bool mask."""
    n_cn = len(cfg.cn_layers())
    mask = np.zeros(n_cn, dtype=bool)
    if cfg.k_active:
        mask[rng.permutation(n_cn)[: cfg.k_active]] = True
    return mask


def _check_mask(cfg: EncoderConfig, mask, mode: Mode) -> np.ndarray:
    n_cn = len(cfg.cn_layers())
    if mode is Mode.EVAL:
        if mask is not None and np.any(mask):
            raise ConfigError("eval mode requires an all-inactive CrossNorm mask")
        return np.zeros(n_cn, dtype=bool)
    if mask is None:
        raise ConfigError("train mode requires an activation mask")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n_cn,):
        raise ConfigError(f"mask shape {mask.shape} for {n_cn} CrossNorm layers")
    if int(mask.sum()) != cfg.k_active:
        raise ConfigError(f"mask popcount {int(mask.sum())} != k_active {cfg.k_active}")
    return mask


def encode(obs: Tensor, state: EncoderState, mask, mode: Mode, rng=None):
    """Run the encoder; returns (features [N, feature_dim], cache).

    In train mode, active CrossNorm layers draw their pairing and crop
    regions from rng (independently per layer), so (seed, input, mode)
    replays bit-exactly. Eval mode consumes no randomness.
    """
    cfg = state.cfg
    mask = _check_mask(cfg, mask, mode)
    n = obs.shape[0]
    x = obs
    layer_caches = []
    cn_slot = 0
    for i, (spec, layer) in enumerate(zip(cfg.conv, state.layers)):
        x_in = x
        x = conv2d(x_in, layer.w, layer.b, spec.stride, spec.pad)
        cn_cache = sn_cache = bn_cache = None
        if cfg.norm[i] in ("cnsn", "cn_only"):
            if mask[cn_slot]:
                if rng is None:
                    raise ConfigError("active CrossNorm needs an rng")
                pairing = sample_pairing(rng, n, cfg.crossnorm.pairing_mode)
                regions = None
                if cfg.crossnorm.crop_enabled:
                    h, w = x.shape[2], x.shape[3]
                    regions = [sample_crop(rng, h, w, cfg.crossnorm) for _ in range(n)]
                x, cn_cache = crossnorm_forward(x, pairing, regions, cfg.crossnorm)
            cn_slot += 1
        if cfg.norm[i] in ("cnsn", "sn_only"):
            x, sn_cache = selfnorm_forward(x, channel_stats(x), layer.sn)
        elif cfg.norm[i] == "bn":
            x, bn_cache = batchnorm_forward(x, layer.bn, train=(mode is Mode.TRAIN))
        pre_act = x
        x = relu(x)
        layer_caches.append({"x_in": x_in, "pre_act": pre_act, "cn": cn_cache, "sn": sn_cache, "bn": bn_cache})
    flat = x.reshape(n, -1)
    pre_features = linear(flat, state.head_w, state.head_b)
    features = relu(pre_features)
    require_finite(features, "encoder features")
    cache = {"layers": layer_caches, "flat": flat, "pre_features": pre_features,
             "last_shape": x.shape, "state": state}
    return features, cache


def encode_backward(cache, upstream: Tensor):
    """Exact gradients through the recorded stochastic realization.

    Returns (grad_obs, grads) with grads keyed like named_params().
    """
    state: EncoderState = cache["state"]
    cfg = state.cfg
    grads: dict[str, Tensor] = {}
    upstream = relu_backward(cache["pre_features"], upstream)
    g, gw, gb = linear_backward(cache["flat"], state.head_w, upstream)
    grads["head.w"] = gw
    grads["head.b"] = gb
    g = g.reshape(cache["last_shape"])
    for i in reversed(range(len(cfg.conv))):
        entry = cache["layers"][i]
        layer = state.layers[i]
        g = relu_backward(entry["pre_act"], g)
        if entry["bn"] is not None:
            g, dgamma, dbeta = batchnorm_backward(entry["bn"], g)
            grads[f"bn{i}.gamma"] = dgamma
            grads[f"bn{i}.beta"] = dbeta
        if entry["sn"] is not None:
            g, sn_grads = selfnorm_backward(entry["sn"], g)
            for k, v in sn_grads.items():
                grads[f"sn{i}.{k}"] = v
        if entry["cn"] is not None:
            g = crossnorm_backward(entry["cn"], g)
        g, gw, gb = conv2d_backward(entry["x_in"], layer.w, g, cfg.conv[i].stride, cfg.conv[i].pad)
        grads[f"conv{i}.w"] = gw
        grads[f"conv{i}.b"] = gb
    return g, grads
