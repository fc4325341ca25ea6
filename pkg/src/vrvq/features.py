"""Audio ingestion, the DSP feature front-end, and synthetic paired datasets.

The front-end turns a mono clip into a (dim, frames) matrix: windowed DFT
magnitudes, a mel filterbank, a floored log, truncation to the target
dimension, and optional per-dimension standardization. Synthetic datasets
provide aligned clean/noisy feature pairs without any audio on disk.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from ._binio import FormatError, fnv1a64, take, unpack_at

FEATURE_MAGIC = b"VFEA"
FEATURE_VERSION = 1

_WAVE_PCM = 1
_WAVE_FLOAT = 3


@dataclass
class AudioClip:
    """Mono audio in [-1, 1] at an integer sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("audio clip must be a non-empty 1-D sample array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio clip contains non-finite samples")
        if np.max(np.abs(self.samples)) > 1.0 + 1e-12:
            raise ValueError("audio clip samples must lie in [-1, 1]")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample rate must be positive")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def load_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file holding 16-bit PCM or 32-bit float samples.

    Multi-channel input is reduced to channel 0 with a warning. Unsupported
    encodings, malformed headers, and empty data chunks raise ValueError.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    raw = None
    pos = 12
    while pos + 8 <= len(blob):
        chunk_id = blob[pos : pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4 : pos + 8])
        body, _ = take(blob, pos + 8, size, f"{chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: malformed fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            raw = body
        pos += 8 + size + (size & 1)

    if fmt is None or raw is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels < 1:
        raise FormatError(f"{path}: malformed fmt chunk (zero channels)")
    if raw == b"":
        raise FormatError(f"{path}: empty audio (data chunk has no samples)")

    if audio_format == _WAVE_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif audio_format == _WAVE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise FormatError(
            f"{path}: unsupported encoding (format={audio_format}, bits={bits}); "
            "expected 16-bit PCM or 32-bit float"
        )

    frame_bytes = dtype.itemsize * channels
    if len(raw) % frame_bytes != 0:
        raise FormatError(f"{path}: data chunk length is not a whole number of frames")
    samples = np.frombuffer(raw, dtype=dtype).astype(np.float64) * scale
    if channels > 1:
        warnings.warn(f"{path}: taking channel 0 of {channels}-channel file")
        samples = samples.reshape(-1, channels)[:, 0]
    samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples, sample_rate)


def save_wav(clip: AudioClip, path, encoding: str = "float32") -> None:
    """Write a mono WAVE file; encoding is 'float32' or 'pcm16'."""
    if encoding == "float32":
        fmt_tag, bits = _WAVE_FLOAT, 32
        payload = clip.samples.astype("<f4").tobytes()
    elif encoding == "pcm16":
        fmt_tag, bits = _WAVE_PCM, 16
        # same 1/32768 scale the reader uses, so round trips stay within
        # half a quantization step
        quantized = np.clip(np.round(clip.samples * 32768.0), -32768, 32767)
        payload = quantized.astype("<i2").tobytes()
    else:
        raise ValueError(f"unknown wav encoding: {encoding}")
    block = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        fmt_tag,
        1,
        clip.sample_rate,
        clip.sample_rate * block,
        block,
        bits,
        b"data",
        len(payload),
    )
    with open(path, "wb") as f:
        f.write(header + payload)


def mix_at_snr(clean: AudioClip, noise: AudioClip, snr_db: float, seed: int = 0) -> AudioClip:
    """Mix noise into clean speech at an exact target SNR.

    The noise is tiled or truncated to the clean length starting from a
    seed-chosen offset, then scaled so the realized SNR equals ``snr_db``.
    If the sum leaves [-1, 1] the mix is rescaled by its peak, which keeps
    the SNR intact.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(
            f"sample rate mismatch: clean {clean.sample_rate} vs noise {noise.sample_rate}"
        )
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, noise.samples.size))
    idx = (offset + np.arange(clean.samples.size)) % noise.samples.size
    noise_seg = noise.samples[idx]

    p_clean = float(np.mean(clean.samples**2))
    p_noise = float(np.mean(noise_seg**2))
    if p_clean == 0.0:
        raise ValueError("clean signal is silent, SNR undefined")
    if p_noise == 0.0:
        raise ValueError("noise segment is silent, SNR undefined")
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = clean.samples + gain * noise_seg
    peak = float(np.max(np.abs(mixed)))
    if peak > 1.0:
        mixed = mixed / peak
    return AudioClip(mixed, clean.sample_rate)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular filter matrix on the mel scale."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    anchors = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = anchors[m], anchors[m + 1], anchors[m + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


@dataclass(frozen=True)
class FeatureConfig:
    """Front-end parameters; ``mean``/``scale`` hold frozen normalization stats."""

    window_size: int = 1024
    hop: int = 512
    mel_bins: int = 64
    out_dim: int = 32
    log_floor: float = 1e-5
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        if self.window_size <= 0 or self.hop <= 0:
            raise ValueError("window_size and hop must be positive")
        if self.out_dim <= 0 or self.out_dim > self.mel_bins:
            raise ValueError("out_dim must satisfy 1 <= out_dim <= mel_bins")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        for name in ("mean", "scale"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=np.float64)
                if value.shape != (self.out_dim,):
                    raise ValueError(f"{name} must have shape (out_dim,)")
                object.__setattr__(self, name, value)
        if self.scale is not None and np.any(self.scale <= 0):
            raise ValueError("scale entries must be positive")

    @property
    def fingerprint(self) -> int:
        parts = [
            struct.pack("<IIIId", self.window_size, self.hop, self.mel_bins, self.out_dim, self.log_floor)
        ]
        for value in (self.mean, self.scale):
            parts.append(b"none" if value is None else value.astype("<f8").tobytes())
        return fnv1a64(b"".join(parts))


@dataclass
class FeatureSequence:
    """A (dim, frames) float matrix plus its exact rational frame rate."""

    data: np.ndarray
    frame_rate_num: int
    frame_rate_den: int
    fingerprint: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise ValueError("feature data must be a (dim, frames) matrix with frames >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature data contains non-finite values")
        if self.frame_rate_num <= 0 or self.frame_rate_den <= 0:
            raise ValueError("frame rate numerator and denominator must be positive")

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def frame_rate(self) -> Fraction:
        return Fraction(self.frame_rate_num, self.frame_rate_den)

    @property
    def duration(self) -> float:
        return self.frames / float(self.frame_rate)

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self.data.astype(dtype)
        return self.data

    def to_bytes(self) -> bytes:
        header = struct.pack(
            "<4sBHIII",
            FEATURE_MAGIC,
            FEATURE_VERSION,
            self.dim,
            self.frames,
            self.frame_rate_num,
            self.frame_rate_den,
        )
        return header + self.data.astype("<f4").tobytes(order="F")

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())


def load_features(path) -> FeatureSequence:
    """Read a feature file written by :meth:`FeatureSequence.save`."""
    with open(path, "rb") as f:
        blob = f.read()
    (magic, version, dim, frames, num, den), offset = unpack_at("<4sBHIII", blob, 0, "feature header")
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}")
    raw, offset = take(blob, offset, 4 * dim * frames, "feature payload")
    if offset != len(blob):
        raise FormatError(f"{path}: trailing bytes after feature payload")
    data = np.frombuffer(raw, dtype="<f4").reshape((dim, frames), order="F").astype(np.float64)
    return FeatureSequence(data, num, den, fingerprint=fnv1a64(blob))


def extract_features(clip: AudioClip, cfg: FeatureConfig) -> FeatureSequence:
    """Run the DSP front-end over a clip, producing an (out_dim, frames) matrix."""
    n = clip.samples.size
    if n < cfg.window_size:
        raise ValueError(
            f"clip too short: {n} samples < window_size {cfg.window_size}"
        )
    # periodic Hann window
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(cfg.window_size) / cfg.window_size)
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, cfg.window_size)[:: cfg.hop]
    spectra = np.abs(np.fft.rfft(frames * window, axis=1))
    bank = mel_filterbank(clip.sample_rate, cfg.window_size, cfg.mel_bins)
    mel = bank @ spectra.T
    data = np.log(cfg.log_floor + mel[: cfg.out_dim])
    if cfg.mean is not None and cfg.scale is not None:
        data = (data - cfg.mean[:, None]) / cfg.scale[:, None]
    return FeatureSequence(
        data,
        clip.sample_rate,
        cfg.hop,
        fingerprint=cfg.fingerprint,
    )


def compute_feature_stats(sequences) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and scale over a training split, for standardization."""
    if not sequences:
        raise ValueError("need at least one feature sequence")
    stacked = np.concatenate([seq.data for seq in sequences], axis=1)
    mean = stacked.mean(axis=1)
    scale = np.maximum(stacked.std(axis=1), 1e-8)
    return mean, scale


FRAME_CLASSES = ("silence", "tonal", "burst")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic paired feature dataset.

    ``proportions`` maps frame class names to fractions summing to 1. Silence
    frames are exactly zero, tonal frames live on a few shared prototype
    directions, and burst frames are dense high-variance columns. The noisy
    member of each pair adds i.i.d. Gaussian perturbation at ``noise_level``.
    """

    num_pairs: int = 8
    frames: int = 32
    dim: int = 16
    proportions: tuple = (("silence", 0.5), ("burst", 0.5))
    noise_level: float = 0.1
    burst_scale: float = 1.5
    frame_rate: tuple = (16000, 512)

    def __post_init__(self):
        if self.num_pairs <= 0 or self.frames <= 0 or self.dim <= 0:
            raise ValueError("num_pairs, frames, and dim must be positive")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")
        props = dict(self.proportions)
        if any(name not in FRAME_CLASSES for name in props):
            raise ValueError(f"frame classes must be among {FRAME_CLASSES}")
        if any(p < 0 for p in props.values()):
            raise ValueError("proportions must be non-negative")
        if abs(sum(props.values()) - 1.0) > 1e-9:
            raise ValueError("proportions must sum to 1")

    @property
    def fingerprint(self) -> int:
        return fnv1a64(repr(self).encode())


def _frame_counts(props: dict, total: int) -> dict:
    """Largest-remainder apportionment so class counts are exact."""
    base = {name: int(math.floor(p * total)) for name, p in props.items()}
    leftover = total - sum(base.values())
    order = sorted(props, key=lambda name: (-(props[name] * total - base[name]), name))
    for name in order[:leftover]:
        base[name] += 1
    return base


def synth_feature_dataset(spec: SynthSpec, seed: int = 0, return_labels: bool = False):
    """Generate aligned (clean, noisy) FeatureSequence pairs.

    Identical spec and seed give bitwise-identical output. With
    ``return_labels`` the per-frame class labels are returned as well.
    """
    rng = np.random.default_rng(seed)
    props = dict(spec.proportions)
    counts = _frame_counts(props, spec.frames)
    prototypes = rng.standard_normal((3, spec.dim))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)

    num, den = spec.frame_rate
    pairs = []
    labels = []
    for pair_index in range(spec.num_pairs):
        frame_labels = [name for name in FRAME_CLASSES for _ in range(counts.get(name, 0))]
        rng.shuffle(frame_labels)
        clean = np.zeros((spec.dim, spec.frames))
        for t, name in enumerate(frame_labels):
            if name == "silence":
                continue
            if name == "tonal":
                proto = prototypes[int(rng.integers(0, 3))]
                clean[:, t] = float(rng.uniform(0.5, 1.5)) * proto
            else:
                clean[:, t] = spec.burst_scale * rng.standard_normal(spec.dim)
        noisy = clean + spec.noise_level * rng.standard_normal(clean.shape)
        fp = fnv1a64(repr((spec, seed, pair_index)).encode())
        pairs.append(
            (
                FeatureSequence(clean, num, den, fingerprint=fp),
                FeatureSequence(noisy, num, den, fingerprint=fp),
            )
        )
        labels.append(frame_labels)
    if return_labels:
        return pairs, labels
    return pairs
