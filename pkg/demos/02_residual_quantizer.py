#!/usr/bin/env python3
"""Training the residual cascade and watching error fall with depth."""

import tempfile
from pathlib import Path

import numpy as np

from vrvq import (
    SynthSpec,
    load_model,
    quantization_error,
    rvq_decode,
    rvq_encode,
    synth_feature_dataset,
    train_codebooks,
)

# half the frames are silence (trivial), half are loud bursts (hard)
pairs = synth_feature_dataset(SynthSpec(num_pairs=10, frames=48, dim=12), seed=0)
cleans = [clean for clean, _ in pairs]

model = train_codebooks(cleans, n_stages=6, codebook_size=32, seed=0)
print(f"model: {model.n_stages} stages x {model.codebook_size} entries, "
      f"{model.code_bits} bits per code")

# each extra stage quantizes what the previous stages left behind
stacked = np.concatenate([c.data for c in cleans], axis=1)
print("depth  mean squared error")
for depth in range(1, model.n_stages + 1):
    print(f"  {depth}    {quantization_error(model, stacked, depth):.6f}")

# encode once, decode at any depth you like afterwards
codes = rvq_encode(model, cleans[0].data)
shallow = rvq_decode(model, codes, 2)
deep = rvq_decode(model, codes, 6)
err = lambda recon: float(np.mean((cleans[0].data - recon) ** 2))
print(f"one sequence: depth 2 error {err(shallow):.5f}, depth 6 error {err(deep):.5f}")

# models serialize with a fingerprint so streams can name their codebooks
out = Path(tempfile.mkdtemp(prefix="vrvq_demo_")) / "model.vrqm"
model.save(out)
again = load_model(out)
print(f"saved to {out}")
print(f"fingerprint {model.fingerprint:016x} preserved:",
      again.fingerprint == model.fingerprint)
