#!/usr/bin/env python3
"""Teaching the scorer which frames deserve bits.

The scorer maps each frame (with two frames of context either side) to an
importance in (0, 1). A global scale then turns importance into a per-frame
quantizer depth. Training balances reconstruction error against the mean
importance, so the net learns to spend depth only where it pays.
"""

import numpy as np

from vrvq import (
    ImportanceNet,
    SynthSpec,
    TrainConfig,
    importance_forward,
    mask_depths,
    synth_feature_dataset,
    train_codebooks,
    train_importance,
)

pairs = synth_feature_dataset(
    SynthSpec(num_pairs=12, frames=32, dim=16, burst_scale=5.0), seed=200
)
cleans = [clean for clean, _ in pairs]
model = train_codebooks(cleans, n_stages=4, codebook_size=16, seed=0)

net = ImportanceNet.random_init(16, hidden=16, seed=0)
cfg = TrainConfig(iterations=400, batch_size=8, seed=0)
net, trace = train_importance(model, net, [(z, z) for z in cleans], cfg)

print("iteration   loss   distortion   rate   mean depth")
for row in trace[:: len(trace) // 8]:
    print(f"  {row[0]:4d}    {row[1]:7.3f}  {row[2]:8.3f}  {row[3]:7.4f}   {row[4]:.2f}")

# silence should score near zero, bursts should score high
z = cleans[0]
p = importance_forward(net, z)
energy = np.mean(z.data**2, axis=0)
print("\nframe  energy  importance  depth@l=4.2  depth@l=18.1")
for frame in range(0, z.frames, 4):
    d_lo = mask_depths(p[frame], 4.2, model.n_stages)[0]
    d_hi = mask_depths(p[frame], 18.1, model.n_stages)[0]
    print(f"  {frame:3d}  {energy[frame]:7.3f}    {p[frame]:.4f}        {d_lo}            {d_hi}")

quiet = p[energy < 1e-9]
loud = p[energy > 1.0]
print(f"\nmean importance on silent frames {quiet.mean():.4f}, "
      f"on burst frames {loud.mean():.4f}")
