"""Residual vector quantization: cascade encode/decode and codebook training.

Stage ``i`` quantizes the residual left by stages ``1..i-1`` against its own
codebook; reconstruction at depth ``n`` is the sum of the first ``n`` selected
entries. Codebooks are fitted stage-by-stage with Lloyd's algorithm. The
first centroid of every stage is pinned to the residual mean before the
k-means++ draw, which makes training-set reconstruction error non-increasing
in depth.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._binio import FormatError, fnv1a64, take, unpack_at
from .features import FeatureSequence

MODEL_MAGIC = b"VRQM"
MODEL_VERSION = 1


def _as_matrix(z) -> np.ndarray:
    """Accept a FeatureSequence or a (dim, frames) array."""
    if isinstance(z, FeatureSequence):
        return z.data
    out = np.asarray(z, dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None]
    return out


@dataclass
class RvqModel:
    """A list of per-stage codebooks, all (codebook_size, dim) float arrays.

    Codebook entries are rounded to float32 so that serialization round-trips
    bit-exactly and fingerprints are stable across save/load.
    """

    codebooks: list

    def __post_init__(self):
        if not self.codebooks:
            raise ValueError("model needs at least one codebook")
        cleaned = []
        shape = None
        for cb in self.codebooks:
            cb = np.asarray(cb, dtype=np.float64)
            if cb.ndim != 2:
                raise ValueError("each codebook must be a (size, dim) matrix")
            if shape is None:
                shape = cb.shape
            elif cb.shape != shape:
                raise ValueError("all codebooks must share one (size, dim) shape")
            if not np.all(np.isfinite(cb)):
                raise ValueError("codebook entries must be finite")
            cleaned.append(cb.astype(np.float32).astype(np.float64))
        size = shape[0]
        if size < 1 or (size & (size - 1)) != 0:
            raise ValueError("codebook size must be a power of two")
        self.codebooks = cleaned

    @property
    def n_stages(self) -> int:
        return len(self.codebooks)

    @property
    def dim(self) -> int:
        return self.codebooks[0].shape[1]

    @property
    def codebook_size(self) -> int:
        return self.codebooks[0].shape[0]

    @property
    def code_bits(self) -> int:
        return max(1, int(self.codebook_size - 1).bit_length())

    def to_bytes(self) -> bytes:
        head = struct.pack(
            "<4sBHBB", MODEL_MAGIC, MODEL_VERSION, self.dim, self.n_stages, self.code_bits
        )
        body = b"".join(cb.astype("<f4").tobytes() for cb in self.codebooks)
        payload = head + body
        return payload + struct.pack("<Q", fnv1a64(payload))

    @property
    def fingerprint(self) -> int:
        # hashing the serialized form is linear in model size; cache it
        cached = getattr(self, "_fingerprint", None)
        if cached is None:
            cached = struct.unpack("<Q", self.to_bytes()[-8:])[0]
            self._fingerprint = cached
        return cached

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())


def load_model(path) -> RvqModel:
    with open(path, "rb") as f:
        blob = f.read()
    (magic, version, dim, n_stages, code_bits), offset = unpack_at(
        "<4sBHBB", blob, 0, "model header"
    )
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    size = 1 << code_bits
    codebooks = []
    for _ in range(n_stages):
        raw, offset = take(blob, offset, 4 * size * dim, "codebook")
        codebooks.append(np.frombuffer(raw, dtype="<f4").reshape(size, dim).astype(np.float64))
    (stored,), offset = unpack_at("<Q", blob, offset, "model fingerprint")
    if offset != len(blob):
        raise FormatError(f"{path}: trailing bytes after model fingerprint")
    if fnv1a64(blob[:-8]) != stored:
        raise FormatError(f"{path}: fingerprint mismatch, file corrupt")
    return RvqModel(codebooks)


def nearest_code(codebook: np.ndarray, vector: np.ndarray) -> tuple[int, np.ndarray]:
    """Index and entry of the codebook row closest to ``vector``.

    Exact distance ties resolve to the lowest index. Distances drop the
    constant ||vector||^2 term, which does not change the argmin.
    """
    codebook = np.asarray(codebook, dtype=np.float64)
    vector = np.asarray(vector, dtype=np.float64)
    scores = np.sum(codebook**2, axis=1) - 2.0 * (codebook @ vector)
    idx = int(np.argmin(scores))
    return idx, codebook[idx]


def rvq_encode(model: RvqModel, z) -> np.ndarray:
    """Run the full cascade; returns an (n_stages, frames) int64 code matrix."""
    data = _as_matrix(z)
    if data.shape[0] != model.dim:
        raise ValueError(f"feature dim {data.shape[0]} != model dim {model.dim}")
    residual = data.copy()
    codes = np.empty((model.n_stages, data.shape[1]), dtype=np.int64)
    for stage, cb in enumerate(model.codebooks):
        scores = np.sum(cb**2, axis=1)[:, None] - 2.0 * (cb @ residual)
        idx = np.argmin(scores, axis=0)
        codes[stage] = idx
        residual -= cb[idx].T
    return codes


def rvq_decode(model: RvqModel, codes: np.ndarray, depths) -> np.ndarray:
    """Sum the first ``depths[t]`` quantized residuals per frame.

    ``depths`` may be a scalar or a length-frames vector; every value must lie
    in [1, n_stages]. Entries of ``codes`` above a frame's depth are ignored,
    so sentinel values there are allowed.
    """
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[0] != model.n_stages:
        raise ValueError("codes must be an (n_stages, frames) matrix")
    frames = codes.shape[1]
    depths = np.broadcast_to(np.asarray(depths, dtype=np.int64), (frames,))
    if np.any(depths < 1) or np.any(depths > model.n_stages):
        raise ValueError(f"depths must lie in [1, {model.n_stages}]")
    out = np.zeros((model.dim, frames))
    for stage, cb in enumerate(model.codebooks):
        active = depths > stage
        if not np.any(active):
            continue
        stage_codes = codes[stage, active]
        if np.any(stage_codes < 0) or np.any(stage_codes >= model.codebook_size):
            raise ValueError(f"stage {stage} code index out of range")
        out[:, active] += cb[stage_codes].T
    return out


def quantization_error(model: RvqModel, z, depth: int) -> float:
    """Mean squared per-entry reconstruction error at a fixed depth."""
    data = _as_matrix(z)
    codes = rvq_encode(model, data)
    recon = rvq_decode(model, codes, depth)
    return float(np.mean((data - recon) ** 2))


def lloyd_kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> tuple[np.ndarray, list]:
    """Lloyd's k-means with a mean-pinned k-means++ initialization.

    Returns the centroids and the objective (sum of squared distances to the
    assigned centroid) recorded after every assignment step. The trace is
    non-increasing. Empty clusters are re-seeded on the point currently
    farthest from its centroid. Convergence is declared when the relative
    objective change drops below ``tol``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} points to fit {k} centroids, got {n}")

    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points.mean(axis=0)
    dist = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = dist.sum()
        if total > 0:
            pick = int(rng.choice(n, p=dist / total))
        else:
            pick = int(rng.integers(0, n))
        centroids[j] = points[pick]
        dist = np.minimum(dist, np.sum((points - centroids[j]) ** 2, axis=1))

    sq_points = np.sum(points**2, axis=1)
    trace = []
    prev = None
    for _ in range(max_iters):
        scores = np.sum(centroids**2, axis=1)[None, :] - 2.0 * (points @ centroids.T)
        assign = np.argmin(scores, axis=1)
        best = sq_points + scores[np.arange(n), assign]
        objective = float(np.maximum(best, 0.0).sum())
        trace.append(objective)
        if prev is not None and abs(prev - objective) <= tol * max(prev, 1e-300):
            break
        prev = objective

        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(np.argmax(best))
            centroids[j] = points[far]
            best[far] = 0.0
    return centroids, trace


def train_codebooks(
    dataset,
    n_stages: int = 8,
    codebook_size: int = 1024,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> RvqModel:
    """Fit per-stage codebooks on a list of feature sequences or matrices.

    Stage ``i`` is fitted on the residuals the first ``i - 1`` stages leave
    behind, and the residuals are then advanced with the fitted (float32
    rounded) codebook so the stored model matches the cascade exactly.
    """
    if n_stages < 1:
        raise ValueError("n_stages must be >= 1")
    if codebook_size < 1 or (codebook_size & (codebook_size - 1)) != 0:
        raise ValueError("codebook_size must be a power of two")
    mats = [_as_matrix(z) for z in dataset]
    if not mats:
        raise ValueError("training dataset is empty")
    points = np.concatenate(mats, axis=1).T
    if points.shape[0] < codebook_size:
        raise ValueError(
            f"training set has {points.shape[0]} frames, fewer than codebook_size {codebook_size}"
        )
    rng = np.random.default_rng(seed)
    residual = points.copy()
    codebooks = []
    for _ in range(n_stages):
        centroids, _ = lloyd_kmeans(residual, codebook_size, rng, max_iters, tol)
        centroids = centroids.astype(np.float32).astype(np.float64)
        codebooks.append(centroids)
        scores = np.sum(centroids**2, axis=1)[None, :] - 2.0 * (residual @ centroids.T)
        residual = residual - centroids[np.argmin(scores, axis=1)]
    return RvqModel(codebooks)
