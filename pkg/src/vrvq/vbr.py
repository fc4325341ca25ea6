"""Variable-bitrate encoding driven by importance scores, and its training.

Encoding always runs the full residual cascade; the per-frame depth chosen
from the importance map only controls which prefix of stages is kept at
decode time and serialized. Training fits the importance scorer against a
rate-distortion objective: loss values use the hard masks, gradients follow
the smooth surrogate end to end.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureSequence
from .importance import (
    ImportanceNet,
    ScaleRange,
    i2m_hard,
    importance_backward,
    importance_forward,
    mask_depths,
    rate_loss,
    sample_scale,
    surrogate_eval,
)
from .rvq import RvqModel, _as_matrix, rvq_decode, rvq_encode


@dataclass
class VrvqEncoding:
    """Codes, per-frame depths, and the metadata needed to serialize them."""

    codes: np.ndarray
    depths: np.ndarray
    mode: str
    n_stages: int
    code_bits: int
    dim: int
    frame_rate_num: int
    frame_rate_den: int
    model_fingerprint: int
    scale: float | None = None
    importance: np.ndarray | None = None
    fixed_depth: int | None = None

    @property
    def frames(self) -> int:
        return self.codes.shape[1]


def _encoding_from(model: RvqModel, z: FeatureSequence, codes, depths, **kw) -> VrvqEncoding:
    return VrvqEncoding(
        codes=codes,
        depths=depths,
        n_stages=model.n_stages,
        code_bits=model.code_bits,
        dim=model.dim,
        frame_rate_num=z.frame_rate_num,
        frame_rate_den=z.frame_rate_den,
        model_fingerprint=model.fingerprint,
        **kw,
    )


def vrvq_encode(model: RvqModel, net: ImportanceNet, z: FeatureSequence, scale: float) -> VrvqEncoding:
    """Encode with per-frame depths ``min(floor(scale * p) + 1, n_stages)``."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    p = importance_forward(net, z)
    depths = mask_depths(p, scale, model.n_stages)
    codes = rvq_encode(model, z)
    return _encoding_from(
        model, z, codes, depths, mode="vbr", scale=float(scale), importance=p
    )


def cbr_encode(model: RvqModel, z: FeatureSequence, depth: int) -> VrvqEncoding:
    """Encode every frame at the same fixed depth."""
    depth = int(depth)
    if not 1 <= depth <= model.n_stages:
        raise ValueError(f"depth must lie in [1, {model.n_stages}]")
    codes = rvq_encode(model, z)
    depths = np.full(codes.shape[1], depth, dtype=np.int64)
    return _encoding_from(model, z, codes, depths, mode="cbr", fixed_depth=depth)


def masked_reconstruction(model: RvqModel, codes: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Mask-weighted sum of quantized residuals; masks is (n_stages, frames)."""
    out = np.zeros((model.dim, codes.shape[1]))
    for stage, cb in enumerate(model.codebooks):
        out += masks[stage] * cb[codes[stage]].T
    return out


@dataclass(frozen=True)
class TrainConfig:
    """Rate-distortion training settings for the importance scorer."""

    lambda_rate: float = 3.0
    full_depth_fraction: float = 0.25
    scales: ScaleRange = field(default_factory=ScaleRange)
    alpha: float = 2.0
    step_size: float = 0.05
    momentum: float = 0.9
    iterations: int = 500
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.full_depth_fraction <= 1.0:
            raise ValueError("full_depth_fraction must lie in [0, 1]")
        if self.lambda_rate < 0 or self.alpha <= 0 or self.step_size <= 0:
            raise ValueError("lambda_rate, alpha, step_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")


@dataclass
class RdStep:
    """One rate-distortion evaluation: scalars plus the parameter gradient."""

    loss: float
    distortion: float
    rate: float
    mean_depth: float
    grad: np.ndarray


def draw_batch_plan(n_samples: int, cfg: TrainConfig, rng: np.random.Generator):
    """Per-sample allocation scales and the full-depth flags for one batch.

    The first ``round(full_depth_fraction * n)`` members of the (already
    randomly assembled) batch run at full depth; a scale is drawn for every
    member so rng consumption does not depend on the flags.
    """
    scales = np.array([sample_scale(rng, cfg.scales) for _ in range(n_samples)])
    full = np.zeros(n_samples, dtype=bool)
    full[: int(round(cfg.full_depth_fraction * n_samples))] = True
    return scales, full


def _stage_entries(model: RvqModel, codes: np.ndarray) -> np.ndarray:
    """Selected codebook entries as an (n_stages, dim, frames) array."""
    return np.stack([cb[codes[k]].T for k, cb in enumerate(model.codebooks)])


def _sample_terms(model, net, z_in, z_tgt, scale, full_depth, cfg):
    """Loss pieces and scorer gradient for one (input, target) sample.

    The distortion value uses hard masks. The gradient is the exact gradient
    of the soft-forward objective, in which the surrogate replaces the hard
    mask, so it matches finite differences of that objective. Full-depth
    samples use constant all-ones masks and skip the rate term entirely, so
    they contribute distortion value but no gradient.
    """
    x_in = _as_matrix(z_in)
    x_tgt = _as_matrix(z_tgt)
    n_q = model.n_stages
    dim, frames = x_tgt.shape

    codes = rvq_encode(model, x_in)
    entries = _stage_entries(model, codes)
    p = importance_forward(net, x_in)

    if full_depth:
        hard = np.ones((n_q, frames))
        depths = np.full(frames, n_q, dtype=np.int64)
    else:
        hard = i2m_hard(p, scale, n_q)
        depths = mask_depths(p, scale, n_q)
    recon = np.einsum("kt,kdt->dt", hard, entries)
    distortion = float(np.mean((x_tgt - recon) ** 2))

    if full_depth:
        return distortion, None, float(np.mean(depths)), np.zeros_like(net.params)

    rate = rate_loss(p)
    s = scale * p
    soft = np.empty((n_q, frames))
    d_soft = np.empty((n_q, frames))
    for k in range(n_q):
        soft[k], d_soft[k] = surrogate_eval(s, k, cfg.alpha)
    recon_soft = np.einsum("kt,kdt->dt", soft, entries)
    d_mask = -(2.0 / (dim * frames)) * np.einsum("dt,kdt->kt", x_tgt - recon_soft, entries)
    upstream = np.sum(d_mask * scale * d_soft, axis=0) + cfg.lambda_rate / frames
    grad = importance_backward(net, x_in, upstream)
    return distortion, rate, float(np.mean(depths)), grad


def rd_loss_and_grad(model, net, batch, scales, full_depth, cfg: TrainConfig) -> RdStep:
    """Batch-mean rate-distortion loss and scorer gradient.

    ``batch`` is a list of (input, target) pairs; ``scales`` and
    ``full_depth`` come from :func:`draw_batch_plan`. The reported loss
    decomposes exactly as ``distortion + lambda_rate * rate``.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("batch is empty")
    dist_sum = rate_sum = depth_sum = 0.0
    grad = np.zeros_like(net.params)
    for (z_in, z_tgt), scale, full in zip(batch, scales, full_depth):
        d, r, md, g = _sample_terms(model, net, z_in, z_tgt, float(scale), bool(full), cfg)
        dist_sum += d
        rate_sum += 0.0 if r is None else r
        depth_sum += md
        grad += g
    distortion = dist_sum / n
    rate = rate_sum / n
    grad /= n
    return RdStep(
        loss=distortion + cfg.lambda_rate * rate,
        distortion=distortion,
        rate=rate,
        mean_depth=depth_sum / n,
        grad=grad,
    )


def rd_step(model, net, batch, cfg: TrainConfig, rng: np.random.Generator) -> RdStep:
    """Draw the per-sample plan from ``rng`` and evaluate the batch."""
    scales, full = draw_batch_plan(len(batch), cfg, rng)
    return rd_loss_and_grad(model, net, batch, scales, full, cfg)


def train_importance(model: RvqModel, net: ImportanceNet, dataset, cfg: TrainConfig):
    """Momentum gradient descent on the rate-distortion objective.

    ``dataset`` is a list of (input, target) feature pairs; batches are drawn
    with replacement. Returns a trained copy of the scorer and a trace of
    ``(iteration, loss, distortion, rate, mean_depth)`` rows. Raises
    RuntimeError if the loss stops being finite.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    net = net.copy()
    velocity = np.zeros_like(net.params)
    trace = []
    for iteration in range(cfg.iterations):
        picks = rng.integers(0, len(dataset), size=cfg.batch_size)
        batch = [dataset[i] for i in picks]
        step = rd_step(model, net, batch, cfg, rng)
        if not np.isfinite(step.loss):
            raise RuntimeError(f"training diverged at iteration {iteration}")
        velocity = cfg.momentum * velocity - cfg.step_size * step.grad
        net.params = net.params + velocity
        trace.append((iteration, step.loss, step.distortion, step.rate, step.mean_depth))
    return net, trace


TRACE_FIELDS = ("iteration", "loss", "distortion", "rate", "mean_depth")


def write_trace_csv(trace, path, fields=TRACE_FIELDS) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        writer.writerows(trace)


@dataclass
class SweepPoint:
    """One operating point of a rate sweep."""

    mode: str
    setting: float
    bitrate_kbps: float
    metrics: dict


def sweep_curves(
    model: RvqModel,
    net: ImportanceNet | None,
    inputs,
    scale_values=(),
    depth_values=(),
    targets=None,
    masker=None,
):
    """Rate-distortion operating points over allocation scales and fixed depths.

    Bitrates come from actually packed streams (VBR points therefore include
    the per-frame depth side information). Quality metrics compare the
    decoded features of the whole evaluation set against ``targets``
    (defaulting to the inputs themselves).
    """
    from . import bitstream
    from .evaluation import distortion_metrics

    if targets is None:
        targets = inputs
    if len(targets) != len(inputs):
        raise ValueError("targets must pair up with inputs")
    if scale_values and net is None:
        raise ValueError("variable-rate sweep points need an importance scorer")

    encode_inputs = inputs
    if masker is not None:
        from .denoiser import denoise_forward

        encode_inputs = []
        for z in inputs:
            z_hat, _ = denoise_forward(masker, z)
            encode_inputs.append(FeatureSequence(z_hat, z.frame_rate_num, z.frame_rate_den))

    ref = np.concatenate([_as_matrix(t) for t in targets], axis=1)
    points = []

    def add_point(mode, setting, encodings):
        bits = 0
        seconds = 0.0
        recons = []
        for z, enc in zip(encode_inputs, encodings):
            stream = bitstream.pack(enc)
            bits += stream.payload_bits
            seconds += enc.frames * enc.frame_rate_den / enc.frame_rate_num
            recons.append(rvq_decode(model, enc.codes, enc.depths))
        recon = np.concatenate(recons, axis=1)
        points.append(
            SweepPoint(
                mode=mode,
                setting=float(setting),
                bitrate_kbps=bits / seconds / 1000.0,
                metrics=distortion_metrics(ref, recon),
            )
        )

    for scale in scale_values:
        add_point("vbr", scale, [vrvq_encode(model, net, z, scale) for z in encode_inputs])
    for depth in depth_values:
        add_point("cbr", depth, [cbr_encode(model, z, int(depth)) for z in encode_inputs])
    return points
