"""Dense NCHW numeric core.

Forward and backward kernels for the op set the encoder needs (conv2d,
linear, relu), a counter-based splittable PRNG, a global precision mode,
and a central finite-difference gradient checker. Arrays are plain numpy
ndarrays in row-major layout; there is no autodiff graph, every layer
carries its own hand-derived backward pass.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ConfigError, NumericError

# The universal value carrier: a contiguous row-major ndarray.
Tensor = np.ndarray

_PRECISIONS = {"single": np.float32, "double": np.float64}
_precision = "single"


def set_precision(name: str) -> None:
    """Set the global run precision ('single' for training, 'double' for verification)."""
    if name not in _PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}, expected 'single' or 'double'")
    global _precision
    _precision = name


def get_precision() -> str:
    return _precision


def default_dtype() -> np.dtype:
    return np.dtype(_PRECISIONS[_precision])


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the global precision mode."""
    prev = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


def require_finite(x: Tensor, what: str) -> None:
    """Raise NumericError if any element of x is NaN or Inf."""
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# PRNG

_MASK64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    """SplitMix64 finalizer; full-period bijection on 64-bit ints."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Prng:
    """Seeded, splittable random stream.

    Wraps numpy's counter-based Philox generator. `split(*ids)` derives an
    independent child stream from the parent seed and the integer path ids;
    identical (seed, call sequence) gives bit-identical output everywhere.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, *ids: int) -> "Prng":
        s = self.seed
        for cid in ids:
            s = _mix64(s ^ _mix64(int(cid) & _MASK64))
        return Prng(s)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def raw(self, size: int) -> np.ndarray:
        """size raw 63-bit draws; used by stream-overlap tests."""
        return self._gen.integers(0, 1 << 63, size=size, dtype=np.int64)


# ---------------------------------------------------------------------------
# Kernels


def _out_dim(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ConfigError(f"kernel {k} larger than padded input {size + 2 * pad}")
    return span // stride + 1


def _im2col(xp: Tensor, k: int, stride: int, ho: int, wo: int) -> Tensor:
    """Unfold padded input into (N*ho*wo, C*k*k) patch rows."""
    n, c = xp.shape[:2]
    col = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for di in range(k):
        for dj in range(k):
            col[:, :, di, dj] = xp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with w[O,C,k,k]; output [N,O,H',W'].

    H' = floor((H + 2*pad - k) / stride) + 1, likewise W'.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c or kh != kw:
        raise ConfigError(f"kernel {w.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    require_finite(x, "conv2d input")
    ho = _out_dim(h, kh, stride, pad)
    wo = _out_dim(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, stride, ho, wo)
    y = cols @ w.reshape(o, -1).T
    if b is not None:
        y += b
    return np.ascontiguousarray(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def conv2d_backward(x: Tensor, w: Tensor, upstream: Tensor, stride: int = 1, pad: int = 0):
    """Exact gradients (grad_x, grad_w, grad_b) of conv2d at (x, w)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    _, _, ho, wo = upstream.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, stride, ho, wo)
    up_flat = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
    grad_b = upstream.sum(axis=(0, 2, 3))
    grad_w = (up_flat.T @ cols).reshape(o, c, kh, kw)
    gcols = (up_flat @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gxp = np.zeros_like(xp)
    for di in range(kh):
        for dj in range(kw):
            gxp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += gcols[:, :, di, dj]
    grad_x = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(x: Tensor, upstream: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    return upstream * (x > 0)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[N,D] @ w[D,M] + b[M]."""
    if x.shape[1] != w.shape[0]:
        raise ConfigError(f"linear inner dims mismatch: {x.shape} vs {w.shape}")
    return x @ w + b


def linear_backward(x: Tensor, w: Tensor, upstream: Tensor):
    grad_x = upstream @ w.T
    grad_w = x.T @ upstream
    grad_b = upstream.sum(axis=0)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(f, x: Tensor, eps: float = 1e-5, max_coords: int | None = None, rng: Prng | None = None,
               min_grad: float = 0.0) -> float:
    """Compare f's analytic gradient against central finite differences.

    f maps an array to (scalar_value, grad_array). Returns the max over
    checked coordinates of |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    With max_coords set, a random coordinate subset is checked (rng required
    when sampling). Coordinates where both |analytic| and |fd| fall below
    min_grad are skipped: at such magnitudes the central difference is
    dominated by float64 cancellation noise and carries no signal about the
    backward pass.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ConfigError(f"eps {eps} outside [1e-7, 1e-3]")
    if x.dtype != np.float64:
        raise ConfigError("grad_check requires double precision inputs")
    value, grad = f(x)
    if not np.isfinite(value):
        raise NumericError("non-finite objective in grad_check")
    require_finite(grad, "analytic gradient")
    flat = x.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        if rng is None:
            raise ConfigError("rng required when sampling coordinates")
        idx = rng.permutation(n)[:max_coords]
    else:
        idx = np.arange(n)
    gflat = grad.reshape(-1)
    worst = 0.0
    for i in idx:
        xp = flat.copy()
        xp[i] += eps
        fp = f(xp.reshape(x.shape))[0]
        xm = flat.copy()
        xm[i] -= eps
        fm = f(xm.reshape(x.shape))[0]
        num = (fp - fm) / (2 * eps)
        a = gflat[i]
        if max(abs(a), abs(num)) < min_grad:
            continue
        rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, rel)
    return worst
