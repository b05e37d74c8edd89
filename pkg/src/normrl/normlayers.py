"""Feature-statistics normalization layers with exact backward passes.

Three layers over NCHW feature maps, all operating on per-(instance,
channel) spatial mean/std:

* CrossNorm: re-styles each instance with a partner instance's channel
  statistics (optionally statistics of a random crop of the partner's
  map). Training-time feature augmentation; inactive at test time.
* SelfNorm: recalibrates each channel with learned gates applied to its
  own mean and std. Active at train and test time.
* BatchNorm: the conventional per-channel batch baseline with running
  statistics.

Std is always the population convention (divide by pixel count). All
stochastic choices (pairings, crop regions) are sampled by the caller and
passed in, so forward/backward are pure and replayable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .numcore import Prng, Tensor, require_finite

# below this, std is treated as exactly zero and its gradient path is dropped
_SIGMA_FLOOR = 1e-12


@dataclass
class ChannelStats:
    """Per-(instance, channel) spatial mean and population std, each [N,C]."""

    mu: Tensor
    sigma: Tensor


@dataclass
class CrossNormConfig:
    crop_enabled: bool = True
    crop_frac_range: tuple[float, float] = (0.5, 1.0)
    eps: float = 1e-5
    pairing_mode: str = "matching"  # or "permutation"

    def __post_init__(self):
        lo, hi = self.crop_frac_range
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"crop_frac_range must satisfy 0 < lo <= hi <= 1, got {self.crop_frac_range}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.pairing_mode not in ("matching", "permutation"):
            raise ConfigError(f"unknown pairing_mode {self.pairing_mode!r}")


@dataclass
class CropRegion:
    top: int
    left: int
    height: int
    width: int

    def validate(self, h: int, w: int) -> None:
        ok = (
            0 <= self.top <= h - self.height
            and 0 <= self.left <= w - self.width
            and self.height >= 1
            and self.width >= 1
            and self.height * self.width >= 2
        )
        if not ok:
            raise ConfigError(f"degenerate crop region {self} for {h}x{w} map")


def _region_masks(regions, n: int, h: int, w: int, dtype) -> tuple[Tensor, Tensor]:
    """Boolean crop masks as floats: mask [N,1,H,W] and pixel counts [N,1,1,1]."""
    mask = np.zeros((n, 1, h, w), dtype=dtype)
    for i, r in enumerate(regions):
        r.validate(h, w)
        mask[i, 0, r.top : r.top + r.height, r.left : r.left + r.width] = 1
    counts = mask.sum(axis=(2, 3), keepdims=True)
    return mask, counts


def channel_stats(x: Tensor, regions=None) -> ChannelStats:
    """Mean and population std per (n, c), over the full map or per-instance crops."""
    if regions is None:
        mu = x.mean(axis=(2, 3))
        sigma = x.std(axis=(2, 3))
        return ChannelStats(mu, sigma)
    n, _, h, w = x.shape
    if len(regions) != n:
        raise ConfigError(f"{len(regions)} regions for batch of {n}")
    mask, counts = _region_masks(regions, n, h, w, x.dtype)
    mu = (x * mask).sum(axis=(2, 3)) / counts[:, :, 0, 0]
    var = (((x - mu[:, :, None, None]) * mask) ** 2).sum(axis=(2, 3)) / counts[:, :, 0, 0]
    return ChannelStats(mu, np.sqrt(np.maximum(var, 0)))


def sample_pairing(rng: Prng, n: int, mode: str = "matching") -> np.ndarray:
    """Partner indices for a batch of n instances.

    'matching' draws a uniform random perfect matching (partner[partner[i]]
    == i; the odd leftover maps to itself). 'permutation' draws a uniform
    permutation instead, which is not an involution in general.
    """
    if n < 1:
        raise ConfigError(f"batch size must be >= 1, got {n}")
    if mode == "permutation":
        return rng.permutation(n)
    if mode != "matching":
        raise ConfigError(f"unknown pairing mode {mode!r}")
    order = rng.permutation(n)
    partner = np.empty(n, dtype=np.int64)
    for i in range(0, n - 1, 2):
        a, b = order[i], order[i + 1]
        partner[a] = b
        partner[b] = a
    if n % 2:
        partner[order[-1]] = order[-1]
    return partner


def sample_crop(rng: Prng, h: int, w: int, cfg: CrossNormConfig) -> CropRegion:
    """Random crop region with side fractions drawn from cfg.crop_frac_range."""
    if h < 2 or w < 2:
        raise ConfigError(f"map {h}x{w} too small to crop")
    lo, hi = cfg.crop_frac_range

    def side(extent: int) -> int:
        low = max(2, math.ceil(lo * extent))
        high = max(low, math.floor(hi * extent))
        return int(rng.integers(low, high + 1))

    height = side(h)
    width = side(w)
    top = int(rng.integers(0, h - height + 1))
    left = int(rng.integers(0, w - width + 1))
    return CropRegion(top, left, height, width)


def crossnorm_forward(x: Tensor, pairing: np.ndarray, regions, cfg: CrossNormConfig):
    """Exchange channel statistics with the paired instance.

    Each instance n is standardized by its own full-map stats and restored
    with the stats of instance pairing[n], computed over regions[pairing[n]]
    when cropping is enabled and over the full map otherwise. Fixed points
    of the pairing pass through unchanged.
    """
    n, c, h, w = x.shape
    if len(pairing) != n:
        raise ConfigError(f"pairing of length {len(pairing)} for batch of {n}")
    own = channel_stats(x)
    if regions is not None:
        donor = channel_stats(x, regions)
        mask, counts = _region_masks(regions, n, h, w, x.dtype)
    else:
        donor = own
        mask, counts = None, None
    active = pairing != np.arange(n)
    d = own.sigma + cfg.eps
    u = (x - own.mu[:, :, None, None]) / d[:, :, None, None]
    ps = donor.sigma[pairing]
    pm = donor.mu[pairing]
    y = ps[:, :, None, None] * u + pm[:, :, None, None]
    if not active.all():
        y[~active] = x[~active]
    require_finite(y, "crossnorm output")
    cache = {
        "x": x, "u": u, "d": d, "own": own, "donor": donor, "pairing": pairing,
        "active": active, "mask": mask, "counts": counts, "partner_sigma": ps,
    }
    return y, cache


def crossnorm_backward(cache, upstream: Tensor) -> Tensor:
    """Exact gradient of crossnorm_forward; flows through own and donor stats."""
    x = cache["x"]
    u = cache["u"]
    d = cache["d"]
    own: ChannelStats = cache["own"]
    donor: ChannelStats = cache["donor"]
    pairing = cache["pairing"]
    active = cache["active"]
    ps = cache["partner_sigma"]
    n, c, h, w = x.shape
    pixels = h * w

    g1 = (upstream * u).sum(axis=(2, 3))          # dL/d(partner sigma), per (n,c)
    g0 = upstream.sum(axis=(2, 3))                # dL/d(partner mu)
    gmean = g0 / pixels

    # own path: through the direct term and the own mean/std
    s_over_d = (ps / d)[:, :, None, None]
    grad = s_over_d * (upstream - gmean[:, :, None, None])
    sig_ok = own.sigma > _SIGMA_FLOOR
    coef = np.where(sig_ok, ps / np.maximum(own.sigma, _SIGMA_FLOOR), 0.0) / pixels
    grad -= coef[:, :, None, None] * u * g1[:, :, None, None]
    grad = np.where(active[:, None, None, None], grad, upstream)

    # donor path: instance j's pixels shaped the output of instance inv[j]
    inv = np.argsort(pairing)
    recv_active = active[inv]
    if recv_active.any():
        cs = g1[inv]
        cm = g0[inv]
        mask, counts = cache["mask"], cache["counts"]
        if mask is None:
            mask = np.ones((n, 1, h, w), dtype=x.dtype)
            counts = np.full((n, 1, 1, 1), pixels, dtype=x.dtype)
        dsig_ok = donor.sigma > _SIGMA_FLOOR
        inv_s = np.where(dsig_ok, 1.0 / np.maximum(donor.sigma, _SIGMA_FLOOR), 0.0)
        centered = x - donor.mu[:, :, None, None]
        contrib = (mask / counts) * (
            cm[:, :, None, None] + cs[:, :, None, None] * centered * inv_s[:, :, None, None]
        )
        grad += np.where(recv_active[:, None, None, None], contrib, 0.0)
    return grad


# ---------------------------------------------------------------------------
# SelfNorm


@dataclass
class SelfNormParams:
    """Per-channel gate networks for mean and std recalibration.

    Each gate maps (mu, sigma) through affine(2->h), tanh, affine(h->1) and
    a final sigmoid, so outputs live strictly in (0, 1). Parameters are
    independent per channel and per gate. The output bias starts at +4 so
    both gates open near 1 and the layer begins close to the identity.
    """

    mean_w1: Tensor
    mean_b1: Tensor
    mean_w2: Tensor
    mean_b2: Tensor
    std_w1: Tensor
    std_b1: Tensor
    std_w2: Tensor
    std_b2: Tensor

    @classmethod
    def init(cls, rng: Prng, channels: int, hidden: int = 2, dtype=np.float32) -> "SelfNormParams":
        def w(shape):
            return (rng.normal(0.0, 0.1, size=shape)).astype(dtype)

        return cls(
            mean_w1=w((channels, hidden, 2)),
            mean_b1=np.zeros((channels, hidden), dtype=dtype),
            mean_w2=w((channels, hidden)),
            mean_b2=np.full((channels,), 4.0, dtype=dtype),
            std_w1=w((channels, hidden, 2)),
            std_b1=np.zeros((channels, hidden), dtype=dtype),
            std_w2=w((channels, hidden)),
            std_b2=np.full((channels,), 4.0, dtype=dtype),
        )

    @property
    def hidden(self) -> int:
        return self.mean_w1.shape[1]

    def arrays(self) -> dict[str, Tensor]:
        return {
            "mean_w1": self.mean_w1, "mean_b1": self.mean_b1,
            "mean_w2": self.mean_w2, "mean_b2": self.mean_b2,
            "std_w1": self.std_w1, "std_b1": self.std_b1,
            "std_w2": self.std_w2, "std_b2": self.std_b2,
        }


def _sigmoid(o):
    out = np.empty_like(o)
    pos = o >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-o[pos]))
    e = np.exp(o[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _gate_forward(w1, b1, w2, b2, inp):
    """inp [N,C,2] -> gate output in (0,1) [N,C], plus cache."""
    z = np.einsum("chk,nck->nch", w1, inp) + b1
    t = np.tanh(z)
    o = np.einsum("ch,nch->nc", w2, t) + b2
    out = _sigmoid(o)
    return out, (t, out)

def _gate_backward(w1, w2, inp, cache, coef):
    """Gradients of sum(coef * gate) wrt params and inp; coef is [N,C]."""
    t, out = cache
    so = coef * out * (1.0 - out)
    gb2 = so.sum(axis=0)
    gw2 = np.einsum("nc,nch->ch", so, t)
    dz = so[:, :, None] * w2[None] * (1.0 - t * t)
    gb1 = dz.sum(axis=0)
    gw1 = np.einsum("nch,nck->chk", dz, inp)
    dinp = np.einsum("nch,chk->nck", dz, w1)
    return {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}, dinp


def selfnorm_forward(x: Tensor, stats: ChannelStats, params: SelfNormParams, gate_override=None):
    """Recalibrate each channel: y = std_gate*(x - mu) + mean_gate*mu.

    This is the standardize-and-restore map with recalibrated statistics
    mu' = f(mu, sigma)*mu and sigma' = g(mu, sigma)*sigma, written in its
    cancelled form so the identity (f = g = 1) is exact. gate_override is a
    test hook pinning (f, g) to constants.
    """
    mu, sigma = stats.mu, stats.sigma
    inp = np.stack([mu, sigma], axis=-1)
    if gate_override is None:
        f, f_cache = _gate_forward(params.mean_w1, params.mean_b1, params.mean_w2, params.mean_b2, inp)
        g, g_cache = _gate_forward(params.std_w1, params.std_b1, params.std_w2, params.std_b2, inp)
    else:
        f = np.full_like(mu, gate_override[0])
        g = np.full_like(mu, gate_override[1])
        f_cache = g_cache = None
    y = g[:, :, None, None] * (x - mu[:, :, None, None]) + (f * mu)[:, :, None, None]
    require_finite(y, "selfnorm output")
    cache = {
        "x": x, "mu": mu, "sigma": sigma, "inp": inp, "f": f, "g": g,
        "f_cache": f_cache, "g_cache": g_cache, "params": params, "override": gate_override,
    }
    return y, cache


def selfnorm_backward(cache, upstream: Tensor):
    """Exact gradients of selfnorm_forward: (grad_x, grad_params dict).

    The chain runs through both gates and through mu(x), sigma(x).
    """
    x = cache["x"]
    mu, sigma = cache["mu"], cache["sigma"]
    f, g = cache["f"], cache["g"]
    params: SelfNormParams = cache["params"]
    n, c, h, w = x.shape
    pixels = h * w

    g0 = upstream.sum(axis=(2, 3))
    s1 = (upstream * (x - mu[:, :, None, None])).sum(axis=(2, 3))

    if cache["override"] is None:
        inp = cache["inp"]
        f_grads, dinp_f = _gate_backward(params.mean_w1, params.mean_w2, inp, cache["f_cache"], mu * g0)
        g_grads, dinp_g = _gate_backward(params.std_w1, params.std_w2, inp, cache["g_cache"], s1)
        grad_params = {f"mean_{k}": v for k, v in f_grads.items()}
        grad_params.update({f"std_{k}": v for k, v in g_grads.items()})
        dinp = dinp_f + dinp_g
        dmu_net, dsigma_net = dinp[..., 0], dinp[..., 1]
    else:
        grad_params = {}
        dmu_net = dsigma_net = np.zeros_like(mu)

    dldm = g0 * (f - g) + dmu_net
    dlds = dsigma_net
    grad = g[:, :, None, None] * upstream
    grad += (dldm / pixels)[:, :, None, None]
    sig_ok = sigma > _SIGMA_FLOOR
    coef = np.where(sig_ok, dlds / np.maximum(sigma, _SIGMA_FLOOR), 0.0) / pixels
    grad += coef[:, :, None, None] * (x - mu[:, :, None, None])
    return grad, grad_params


# ---------------------------------------------------------------------------
# BatchNorm baseline


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1  # fraction of the new batch statistic mixed in
    eps: float = 1e-5

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batchnorm_forward(x: Tensor, state: BatchNormState, train: bool):
    """Standard batch normalization over (N, H, W) per channel.

    Train mode normalizes by batch statistics and folds them into the
    running estimates; eval mode normalizes by the running estimates.
    """
    if train:
        m = x.mean(axis=(0, 2, 3))
        v = x.var(axis=(0, 2, 3))
        sigma = np.sqrt(v)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * m
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * v
    else:
        m = state.running_mean
        sigma = np.sqrt(state.running_var)
    d = sigma + state.eps
    u = (x - m[None, :, None, None]) / d[None, :, None, None]
    y = state.gamma[None, :, None, None] * u + state.beta[None, :, None, None]
    cache = {"u": u, "d": d, "sigma": sigma, "gamma": state.gamma, "train": train, "n": x.shape[0]}
    return y, cache


def batchnorm_backward(cache, upstream: Tensor):
    """Gradients (grad_x, grad_gamma, grad_beta) of batchnorm_forward."""
    u, d, sigma, gamma = cache["u"], cache["d"], cache["sigma"], cache["gamma"]
    grad_beta = upstream.sum(axis=(0, 2, 3))
    grad_gamma = (upstream * u).sum(axis=(0, 2, 3))
    if not cache["train"]:
        return upstream * (gamma / d)[None, :, None, None], grad_gamma, grad_beta
    n, _, h, w = upstream.shape
    pixels = n * h * w
    up_mean = upstream.mean(axis=(0, 2, 3))
    g1 = (upstream * u).sum(axis=(0, 2, 3))
    grad = (gamma / d)[None, :, None, None] * (upstream - up_mean[None, :, None, None])
    sig_ok = sigma > _SIGMA_FLOOR
    coef = np.where(sig_ok, gamma / np.maximum(sigma, _SIGMA_FLOOR), 0.0) / pixels
    grad -= coef[None, :, None, None] * u * g1[None, :, None, None]
    return grad, grad_gamma, grad_beta
