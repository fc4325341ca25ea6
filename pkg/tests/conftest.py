"""Shared fixtures and numerical helpers."""

import numpy as np
import pytest

from vrvq import SynthSpec, synth_feature_dataset, train_codebooks


def central_diff(fn, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += h
        lo[i] -= h
        grad[i] = (fn(hi) - fn(lo)) / (2 * h)
    return grad


def rel_err(approx, exact):
    """Vector relative error against a reference, guarded for zero norms."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(float(np.linalg.norm(exact)), 1e-300)
    return float(np.linalg.norm(approx - exact)) / denom


@pytest.fixture(scope="session")
def synth_pairs():
    spec = SynthSpec(num_pairs=6, frames=24, dim=8)
    return synth_feature_dataset(spec, seed=11)


@pytest.fixture(scope="session")
def tiny_model(synth_pairs):
    return train_codebooks(
        [clean for clean, _ in synth_pairs], n_stages=4, codebook_size=16, seed=0
    )
