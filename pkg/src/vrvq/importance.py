"""Importance scores and their mask machinery.

A per-frame importance score p in (0, 1) is scaled by a bit-allocation factor
l and turned into a binary prefix mask over quantizer stages: stage k is kept
iff l * p >= k. Training needs a differentiable stand-in for that step
function; the log-cosh surrogate below rises smoothly from 0 to 1 across
[k, k + 1] and its derivative is strictly positive everywhere.

The straight-through estimator forwards the hard mask unchanged and reports
the surrogate's sensitivity as the backward value, so loss values are always
computed with the true masks while gradients follow the smooth surrogate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._binio import FormatError, fnv1a64, take, unpack_at
from .features import FeatureSequence
from .rvq import _as_matrix

NET_MAGIC = b"VIMP"
NET_VERSION = 1

_LN2 = float(np.log(2.0))
_ONE_BELOW = float(np.nextafter(1.0, 0.0))
_TINY = float(np.nextafter(0.0, 1.0))
_CONTEXT_RADIUS = 2


def _open_unit(x):
    """Clamp into the open interval (0, 1) at the representable boundaries."""
    return np.clip(x, _TINY, _ONE_BELOW)


def _log_cosh(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - _LN2


def _log_sinh(x: float) -> float:
    # valid for x > 0
    return x + np.log1p(-np.exp(-2.0 * x)) - _LN2


def surrogate_eval(s, k: int, alpha: float):
    """Smooth step surrogate and its derivative at scaled score ``s``.

    The value is ``log(cosh(alpha*(s-k)) / cosh(alpha*(k+1-s))) / (2*alpha)
    + 1/2``, evaluated in tail-accurate branches so deep plateaus keep their
    tiny distance from 0 and 1 instead of underflowing, then clamped into the
    open unit interval. The derivative uses the identity ``tanh(a) + tanh(b)
    = sinh(a+b) / (cosh(a) cosh(b))`` with ``a + b = alpha``, which keeps it
    strictly positive in float64 even where both tanh terms saturate.

    Accepts scalar or array ``s``; returns ``(value, derivative)``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    s_arr = np.asarray(s, dtype=np.float64)
    scalar = s_arr.ndim == 0
    s_arr = np.atleast_1d(s_arr)

    a = alpha * (s_arr - k)
    b = alpha * ((k + 1.0) - s_arr)
    inv = 1.0 / (2.0 * alpha)
    value = np.empty_like(s_arr)

    left = s_arr < k
    right = s_arr > k + 1.0
    mid = ~(left | right)
    if np.any(left):
        ta = 2.0 * a[left]
        value[left] = (np.log1p(np.exp(ta)) - np.log1p(np.exp(ta - 2.0 * alpha))) * inv
    if np.any(right):
        tb = 2.0 * b[right]
        value[right] = 1.0 - (np.log1p(np.exp(tb)) - np.log1p(np.exp(tb - 2.0 * alpha))) * inv
    if np.any(mid):
        value[mid] = (_log_cosh(a[mid]) - _log_cosh(b[mid])) * inv + 0.5
    value = _open_unit(value)

    deriv = np.exp(_log_sinh(alpha) - _log_cosh(a) - _log_cosh(b) - _LN2)
    if scalar:
        return float(value[0]), float(deriv[0])
    return value, deriv


def i2m_hard(p, scale: float, n_stages: int) -> np.ndarray:
    """Binary prefix masks: entry ``[k, t]`` is 1 iff ``scale * p[t] >= k``.

    ``p`` may be a scalar (one frame) or a vector; the result has shape
    ``(n_stages,)`` or ``(n_stages, frames)``. Entry 0 is always 1.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    scalar = p_arr.ndim == 0
    s = scale * np.atleast_1d(p_arr)
    mask = (s[None, :] >= np.arange(n_stages)[:, None]).astype(np.float64)
    return mask[:, 0] if scalar else mask


def mask_depths(p, scale: float, n_stages: int) -> np.ndarray:
    """Number of active stages per frame: ``min(floor(scale * p) + 1, n_stages)``."""
    s = scale * np.atleast_1d(np.asarray(p, dtype=np.float64))
    return np.minimum(np.floor(s).astype(np.int64) + 1, n_stages)


def i2m_ste(p, scale: float, alpha: float, n_stages: int):
    """Hard masks plus the straight-through backward sensitivities.

    Forward values equal :func:`i2m_hard` exactly. The backward array holds
    ``d mask[k] / d p = scale * surrogate'(scale * p, k)`` per stage.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    scalar = p_arr.ndim == 0
    pv = np.atleast_1d(p_arr)
    s = scale * pv
    mask = (s[None, :] >= np.arange(n_stages)[:, None]).astype(np.float64)
    backward = np.empty_like(mask)
    for k in range(n_stages):
        _, d = surrogate_eval(s, k, alpha)
        backward[k] = scale * d
    if scalar:
        return mask[:, 0], backward[:, 0]
    return mask, backward


def soft_masks(p, scale: float, alpha: float, n_stages: int) -> np.ndarray:
    """Surrogate mask values ``f_alpha^k(scale * p[t])`` as an (n_stages, T) array."""
    s = scale * np.atleast_1d(np.asarray(p, dtype=np.float64))
    out = np.empty((n_stages, s.size))
    for k in range(n_stages):
        out[k], _ = surrogate_eval(s, k, alpha)
    return out


def rate_loss(p) -> float:
    """Mean importance over frames; its gradient is 1/frames per entry."""
    p_arr = np.asarray(p, dtype=np.float64)
    if p_arr.size == 0:
        raise ValueError("rate loss needs at least one frame")
    return float(np.mean(p_arr))


@dataclass(frozen=True)
class ScaleRange:
    """Log-uniform support for the bit-allocation scale drawn during training."""

    l_min: float = 0.8
    l_max: float = 48.0

    def __post_init__(self):
        if not (0 < self.l_min <= self.l_max):
            raise ValueError("need 0 < l_min <= l_max")


def sample_scale(rng: np.random.Generator, dist: ScaleRange = ScaleRange()) -> float:
    """One log-uniform draw from [l_min, l_max]."""
    return float(np.exp(rng.uniform(np.log(dist.l_min), np.log(dist.l_max))))


@dataclass
class ImportanceNet:
    """Per-frame scorer: a 1-hidden-layer tanh MLP over +-2 frames of context.

    Parameters are stored as one flat float64 vector laid out as
    ``[W1 (hidden x 5*dim), b1 (hidden), w2 (hidden), b2 (1)]``.
    """

    dim: int
    hidden: int
    params: np.ndarray

    def __post_init__(self):
        if self.dim <= 0 or self.hidden <= 0:
            raise ValueError("dim and hidden must be positive")
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(
                f"params must have shape ({self.n_params},), got {self.params.shape}"
            )

    @property
    def n_inputs(self) -> int:
        return (2 * _CONTEXT_RADIUS + 1) * self.dim

    @property
    def n_params(self) -> int:
        return (self.n_inputs + 1) * self.hidden + self.hidden + 1

    @classmethod
    def zeros(cls, dim: int, hidden: int = 32) -> "ImportanceNet":
        n = (((2 * _CONTEXT_RADIUS + 1) * dim) + 1) * hidden + hidden + 1
        return cls(dim, hidden, np.zeros(n))

    @classmethod
    def random_init(cls, dim: int, hidden: int = 32, seed: int = 0) -> "ImportanceNet":
        net = cls.zeros(dim, hidden)
        rng = np.random.default_rng(seed)
        w1, b1, w2, b2 = _split_params(net)
        w1[:] = rng.normal(0.0, 1.0 / np.sqrt(net.n_inputs), w1.shape)
        w2[:] = rng.normal(0.0, 1.0 / np.sqrt(hidden), w2.shape)
        del b1, b2  # biases stay zero at init
        return net

    def copy(self) -> "ImportanceNet":
        return ImportanceNet(self.dim, self.hidden, self.params.copy())


def _split_params(net: ImportanceNet):
    """Views into the flat parameter vector: (W1, b1, w2, b2-slice)."""
    n_in, h = net.n_inputs, net.hidden
    edges = np.cumsum([n_in * h, h, h, 1])
    w1 = net.params[: edges[0]].reshape(h, n_in)
    b1 = net.params[edges[0] : edges[1]]
    w2 = net.params[edges[1] : edges[2]]
    b2 = net.params[edges[2] : edges[3]]
    return w1, b1, w2, b2


def _context_stack(data: np.ndarray, radius: int) -> np.ndarray:
    """Stack edge-replicated neighbor columns: (dim, T) -> ((2r+1)*dim, T)."""
    frames = data.shape[1]
    blocks = []
    for offset in range(-radius, radius + 1):
        cols = np.clip(np.arange(frames) + offset, 0, frames - 1)
        blocks.append(data[:, cols])
    return np.concatenate(blocks, axis=0)


def importance_forward(net: ImportanceNet, z) -> np.ndarray:
    """Per-frame importance scores in (0, 1).

    The input features act as constants here: no gradient with respect to
    them is ever produced, which keeps the scorer from back-driving the
    representation it reads.
    """
    data = _as_matrix(z)
    if data.shape[0] != net.dim:
        raise ValueError(f"feature dim {data.shape[0]} != net dim {net.dim}")
    w1, b1, w2, b2 = _split_params(net)
    x = _context_stack(data, _CONTEXT_RADIUS)
    hidden = np.tanh(w1 @ x + b1[:, None])
    logits = w2 @ hidden + b2[0]
    return _open_unit(1.0 / (1.0 + np.exp(-logits)))


def importance_backward(net: ImportanceNet, z, upstream: np.ndarray) -> np.ndarray:
    """Flat parameter gradient of ``sum_t upstream[t] * p[t]``."""
    data = _as_matrix(z)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (data.shape[1],):
        raise ValueError("upstream must have one entry per frame")
    w1, b1, w2, b2 = _split_params(net)
    x = _context_stack(data, _CONTEXT_RADIUS)
    hidden = np.tanh(w1 @ x + b1[:, None])
    logits = w2 @ hidden + b2[0]
    p = _open_unit(1.0 / (1.0 + np.exp(-logits)))

    d_logits = upstream * p * (1.0 - p)
    grad = np.zeros_like(net.params)
    gw1, gb1, gw2, gb2 = _split_params(ImportanceNet(net.dim, net.hidden, grad))
    gw2[:] = hidden @ d_logits
    gb2[0] = d_logits.sum()
    d_hidden = w2[:, None] * d_logits[None, :]
    d_pre = d_hidden * (1.0 - hidden**2)
    gw1[:] = d_pre @ x.T
    gb1[:] = d_pre.sum(axis=1)
    return grad


def save_importance_net(net: ImportanceNet, path) -> None:
    header = struct.pack("<4sBHH", NET_MAGIC, NET_VERSION, net.dim, net.hidden)
    with open(path, "wb") as f:
        f.write(header + net.params.astype("<f4").tobytes())


def load_importance_net(path) -> ImportanceNet:
    with open(path, "rb") as f:
        blob = f.read()
    (magic, version, dim, hidden), offset = unpack_at("<4sBHH", blob, 0, "scorer header")
    if magic != NET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {NET_MAGIC!r}")
    if version != NET_VERSION:
        raise FormatError(f"{path}: unsupported scorer version {version}")
    probe = ImportanceNet.zeros(dim, hidden)
    raw, offset = take(blob, offset, 4 * probe.n_params, "scorer parameters")
    if offset != len(blob):
        raise FormatError(f"{path}: trailing bytes after scorer parameters")
    params = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return ImportanceNet(dim, hidden, params)
