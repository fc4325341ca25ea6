#!/usr/bin/env python3
"""From raw audio to the log-mel feature matrices everything else consumes."""

import tempfile
from pathlib import Path

import numpy as np

from vrvq import (
    AudioClip,
    FeatureConfig,
    extract_features,
    load_features,
    load_wav,
    mix_at_snr,
    save_wav,
)

out = Path(tempfile.mkdtemp(prefix="vrvq_demo_"))
rate = 16000

# a tone with a slow tremolo stands in for speech, white noise for the street
t = np.arange(rate) / rate
speech = 0.4 * np.sin(2 * np.pi * 220 * t) * (0.6 + 0.4 * np.sin(2 * np.pi * 3 * t))
rng = np.random.default_rng(0)
noise = np.clip(0.3 * rng.standard_normal(rate), -1, 1)

save_wav(AudioClip(speech, rate), out / "speech.wav")
save_wav(AudioClip(noise, rate), out / "noise.wav")
print("wrote", out / "speech.wav", "and", out / "noise.wav")

# mix them so the realized signal-to-noise ratio is exactly 5 dB
clean = load_wav(out / "speech.wav")
mixed = mix_at_snr(clean, load_wav(out / "noise.wav"), snr_db=5.0, seed=1)
added = mixed.samples - clean.samples
snr = 10 * np.log10(np.mean(clean.samples**2) / np.mean(added**2))
print(f"mixed at {snr:.3f} dB SNR, peak {np.max(np.abs(mixed.samples)):.3f}")

# 64 mel bands log-compressed, then projected down to 24 coefficients
cfg = FeatureConfig(window_size=512, hop=256, mel_bins=64, out_dim=24)
feats = extract_features(mixed, cfg)
print(f"feature matrix: dim={feats.dim} frames={feats.frames} "
      f"frame rate={feats.frame_rate_num}/{feats.frame_rate_den} Hz")
print(f"value range: [{feats.data.min():.2f}, {feats.data.max():.2f}]")

# matrices round-trip through a small binary file format
feats.save(out / "mixed.vfea")
back = load_features(out / "mixed.vfea")
print("round trip exact:", np.array_equal(back.data, feats.data.astype(np.float32)))
print("artifacts left in", out)
