"""Feature-domain denoising in front of the quantizer.

A small context MLP predicts per-entry logits; a learnable-slope sigmoid
turns them into a multiplicative mask in (0, 1), so the denoised feature can
attenuate but never amplify its input. Training happens in two stages:
pretrain the importance scorer on clean features alone (masker bypassed),
then fine-tune on paired clean/noisy data where the masked feature is the
one being quantized.

During fine-tuning the masker learns from the L1 guidance loss against the
clean feature. The quantized-distortion term cannot reach it: code
selection is piecewise constant in the masker output, and the importance
scorer treats its input as constant, so the exact local gradient of the
distortion with respect to masker parameters is zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ._binio import FormatError, take, unpack_at
from .importance import ImportanceNet, ScaleRange, _context_stack, _open_unit
from .rvq import RvqModel, _as_matrix
from .vbr import TrainConfig, _sample_terms, draw_batch_plan, train_importance

MASKER_MAGIC = b"VDNZ"
MASKER_VERSION = 1

_MASKER_RADIUS = 1


def learnable_sigmoid(x, beta: float):
    """``1 / (1 + exp(-beta * x))`` clamped into the open unit interval."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    x_arr = np.asarray(x, dtype=np.float64)
    out = _open_unit(1.0 / (1.0 + np.exp(-beta * x_arr)))
    return float(out) if np.isscalar(x) or x_arr.ndim == 0 else out


def learnable_sigmoid_grads(x, beta: float):
    """Value plus partial derivatives: ``(sigma, d/dx, d/dbeta)``."""
    x_arr = np.asarray(x, dtype=np.float64)
    sig = _open_unit(1.0 / (1.0 + np.exp(-beta * x_arr)))
    bump = sig * (1.0 - sig)
    return sig, beta * bump, x_arr * bump


@dataclass
class FeatureMasker:
    """Per-frame masking net over +-1 frames of context with a learnable slope.

    Flat parameter layout: ``[W1 (hidden x 3*dim), b1 (hidden),
    W2 (dim x hidden), b2 (dim)]``. The sigmoid slope is stored as
    ``log_beta`` so any gradient step keeps the slope positive.
    """

    dim: int
    hidden: int
    params: np.ndarray
    log_beta: float = 0.0

    def __post_init__(self):
        if self.dim <= 0 or self.hidden <= 0:
            raise ValueError("dim and hidden must be positive")
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(
                f"params must have shape ({self.n_params},), got {self.params.shape}"
            )
        self.log_beta = float(self.log_beta)

    @property
    def n_inputs(self) -> int:
        return (2 * _MASKER_RADIUS + 1) * self.dim

    @property
    def n_params(self) -> int:
        return (self.n_inputs + 1) * self.hidden + (self.hidden + 1) * self.dim

    @property
    def beta(self) -> float:
        return float(np.exp(self.log_beta))

    @classmethod
    def zeros(cls, dim: int, hidden: int = 32) -> "FeatureMasker":
        n_in = (2 * _MASKER_RADIUS + 1) * dim
        return cls(dim, hidden, np.zeros((n_in + 1) * hidden + (hidden + 1) * dim))

    @classmethod
    def random_init(cls, dim: int, hidden: int = 32, seed: int = 0) -> "FeatureMasker":
        masker = cls.zeros(dim, hidden)
        rng = np.random.default_rng(seed)
        w1, b1, w2, b2 = _split_masker(masker)
        w1[:] = rng.normal(0.0, 1.0 / np.sqrt(masker.n_inputs), w1.shape)
        w2[:] = rng.normal(0.0, 1.0 / np.sqrt(hidden), w2.shape)
        del b1, b2
        return masker

    def copy(self) -> "FeatureMasker":
        return FeatureMasker(self.dim, self.hidden, self.params.copy(), self.log_beta)


def _split_masker(masker: FeatureMasker):
    n_in, h, d = masker.n_inputs, masker.hidden, masker.dim
    edges = np.cumsum([n_in * h, h, h * d, d])
    w1 = masker.params[: edges[0]].reshape(h, n_in)
    b1 = masker.params[edges[0] : edges[1]]
    w2 = masker.params[edges[1] : edges[2]].reshape(d, h)
    b2 = masker.params[edges[2] : edges[3]]
    return w1, b1, w2, b2


def _masker_logits(masker: FeatureMasker, data: np.ndarray):
    w1, b1, w2, b2 = _split_masker(masker)
    x = _context_stack(data, _MASKER_RADIUS)
    hidden = np.tanh(w1 @ x + b1[:, None])
    return w2 @ hidden + b2[:, None], x, hidden


def denoise_forward(masker: FeatureMasker, z_noisy):
    """Masked feature and the mask itself: ``z_hat = sigmoid(beta * logits) * z``.

    Every mask entry lies strictly inside (0, 1), so ``|z_hat| <= |z_noisy|``
    holds entrywise.
    """
    data = _as_matrix(z_noisy)
    if data.shape[0] != masker.dim:
        raise ValueError(f"feature dim {data.shape[0]} != masker dim {masker.dim}")
    logits, _, _ = _masker_logits(masker, data)
    mask = _open_unit(1.0 / (1.0 + np.exp(-masker.beta * logits)))
    return mask * data, mask


def masker_backward(masker: FeatureMasker, z_noisy, d_zhat: np.ndarray):
    """Gradients of ``sum(d_zhat * z_hat)``: (flat params, log_beta scalar)."""
    data = _as_matrix(z_noisy)
    logits, x, hidden = _masker_logits(masker, data)
    beta = masker.beta
    sig = _open_unit(1.0 / (1.0 + np.exp(-beta * logits)))
    bump = sig * (1.0 - sig)
    d_mask = np.asarray(d_zhat, dtype=np.float64) * data
    d_logits = d_mask * beta * bump
    # d/d log_beta = beta * d/d beta
    g_log_beta = float(np.sum(d_mask * logits * bump) * beta)

    grad = np.zeros_like(masker.params)
    gw1, gb1, gw2, gb2 = _split_masker(
        FeatureMasker(masker.dim, masker.hidden, grad, masker.log_beta)
    )
    gw2[:] = d_logits @ hidden.T
    gb2[:] = d_logits.sum(axis=1)
    d_hidden = _split_masker(masker)[2].T @ d_logits
    d_pre = d_hidden * (1.0 - hidden**2)
    gw1[:] = d_pre @ x.T
    gb1[:] = d_pre.sum(axis=1)
    return grad, g_log_beta


def feature_guidance_loss(z_clean, z_hat) -> float:
    """Mean absolute difference between clean and denoised features."""
    a = _as_matrix(z_clean)
    b = _as_matrix(z_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def total_loss(
    distortion: float,
    rate: float,
    guidance: float,
    lambda_rate: float = 3.0,
    lambda_feature: float = 0.1,
) -> float:
    """Weighted training objective ``distortion + lr * rate + lf * guidance``."""
    return distortion + lambda_rate * rate + lambda_feature * guidance


@dataclass(frozen=True)
class DenoiseTrainConfig:
    """Fine-tuning settings for the paired stage."""

    lambda_feature: float = 0.1
    lambda_rate: float = 3.0
    full_depth_fraction: float = 0.25
    scales: ScaleRange = field(default_factory=ScaleRange)
    alpha: float = 2.0
    step_size: float = 0.05
    momentum: float = 0.9
    iterations: int = 300
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lambda_feature < 0 or self.lambda_rate < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.full_depth_fraction <= 1.0:
            raise ValueError("full_depth_fraction must lie in [0, 1]")
        if self.alpha <= 0 or self.step_size <= 0:
            raise ValueError("alpha and step_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")

    def rd_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_rate=self.lambda_rate,
            full_depth_fraction=self.full_depth_fraction,
            scales=self.scales,
            alpha=self.alpha,
            step_size=self.step_size,
            momentum=self.momentum,
            iterations=self.iterations,
            batch_size=self.batch_size,
            seed=self.seed,
        )


@dataclass
class DenoiseStep:
    loss: float
    distortion: float
    rate: float
    guidance: float
    mean_depth: float
    net_grad: np.ndarray
    masker_grad: np.ndarray
    log_beta_grad: float


def denoise_step(model, net, masker, batch, scales, full_depth, cfg: DenoiseTrainConfig) -> DenoiseStep:
    """Joint objective over (clean, noisy) pairs with both parameter gradients.

    The quantizer consumes the masked noisy feature; distortion is measured
    against the clean feature. The scorer gradient follows the same
    soft-forward path as plain rate-distortion training; the masker gradient
    comes from the guidance term (codebooks stay frozen throughout).
    """
    n = len(batch)
    if n == 0:
        raise ValueError("batch is empty")
    rd_cfg = cfg.rd_config()
    dist_sum = rate_sum = guide_sum = depth_sum = 0.0
    net_grad = np.zeros_like(net.params)
    masker_grad = np.zeros_like(masker.params)
    log_beta_grad = 0.0
    for (z_clean, z_noisy), scale, full in zip(batch, scales, full_depth):
        clean = _as_matrix(z_clean)
        noisy = _as_matrix(z_noisy)
        z_hat, _ = denoise_forward(masker, noisy)
        d, r, md, g = _sample_terms(model, net, z_hat, clean, float(scale), bool(full), rd_cfg)
        dist_sum += d
        rate_sum += 0.0 if r is None else r
        depth_sum += md
        net_grad += g

        guide_sum += feature_guidance_loss(clean, z_hat)
        d_zhat = np.sign(z_hat - clean) / z_hat.size
        mg, bg = masker_backward(masker, noisy, cfg.lambda_feature * d_zhat)
        masker_grad += mg
        log_beta_grad += cfg.lambda_feature * bg

    distortion = dist_sum / n
    rate = rate_sum / n
    guidance = guide_sum / n
    return DenoiseStep(
        loss=total_loss(distortion, rate, guidance, cfg.lambda_rate, cfg.lambda_feature),
        distortion=distortion,
        rate=rate,
        guidance=guidance,
        mean_depth=depth_sum / n,
        net_grad=net_grad / n,
        masker_grad=masker_grad / n,
        log_beta_grad=log_beta_grad / n,
    )


def finetune_denoiser(model, net, masker, paired_dataset, cfg: DenoiseTrainConfig):
    """Stage-two loop: joint updates of scorer and masker on paired data.

    Returns trained copies plus a trace of ``(iteration, loss, distortion,
    rate, guidance, mean_depth)`` rows.
    """
    if not paired_dataset:
        raise ValueError("paired dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    net = net.copy()
    masker = masker.copy()
    v_net = np.zeros_like(net.params)
    v_masker = np.zeros_like(masker.params)
    v_beta = 0.0
    trace = []
    for iteration in range(cfg.iterations):
        picks = rng.integers(0, len(paired_dataset), size=cfg.batch_size)
        batch = [paired_dataset[i] for i in picks]
        scales, full = draw_batch_plan(len(batch), cfg.rd_config(), rng)
        step = denoise_step(model, net, masker, batch, scales, full, cfg)
        if not np.isfinite(step.loss):
            raise RuntimeError(f"fine-tuning diverged at iteration {iteration}")
        v_net = cfg.momentum * v_net - cfg.step_size * step.net_grad
        net.params = net.params + v_net
        v_masker = cfg.momentum * v_masker - cfg.step_size * step.masker_grad
        masker.params = masker.params + v_masker
        v_beta = cfg.momentum * v_beta - cfg.step_size * step.log_beta_grad
        masker.log_beta = masker.log_beta + v_beta
        trace.append(
            (iteration, step.loss, step.distortion, step.rate, step.guidance, step.mean_depth)
        )
    return net, masker, trace


def two_stage_train(
    model: RvqModel,
    net: ImportanceNet,
    masker: FeatureMasker,
    clean_dataset,
    paired_dataset,
    pretrain_cfg: TrainConfig,
    finetune_cfg: DenoiseTrainConfig,
):
    """Clean pretraining of the scorer, then joint paired fine-tuning.

    Stage two starts from the stage-one weights unchanged. Returns
    ``(net, masker, pretrain_trace, finetune_trace)``.
    """
    pairs = [(z, z) for z in clean_dataset]
    net, trace1 = train_importance(model, net, pairs, pretrain_cfg)
    net, masker, trace2 = finetune_denoiser(model, net, masker, paired_dataset, finetune_cfg)
    return net, masker, trace1, trace2


FINETUNE_TRACE_FIELDS = ("iteration", "loss", "distortion", "rate", "guidance", "mean_depth")


def save_masker(masker: FeatureMasker, path) -> None:
    header = struct.pack("<4sBHHf", MASKER_MAGIC, MASKER_VERSION, masker.dim, masker.hidden, masker.log_beta)
    with open(path, "wb") as f:
        f.write(header + masker.params.astype("<f4").tobytes())


def load_masker(path) -> FeatureMasker:
    with open(path, "rb") as f:
        blob = f.read()
    (magic, version, dim, hidden, log_beta), offset = unpack_at(
        "<4sBHHf", blob, 0, "masker header"
    )
    if magic != MASKER_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MASKER_MAGIC!r}")
    if version != MASKER_VERSION:
        raise FormatError(f"{path}: unsupported masker version {version}")
    probe = FeatureMasker.zeros(dim, hidden)
    raw, offset = take(blob, offset, 4 * probe.n_params, "masker parameters")
    if offset != len(blob):
        raise FormatError(f"{path}: trailing bytes after masker parameters")
    params = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return FeatureMasker(dim, hidden, params, float(log_beta))
