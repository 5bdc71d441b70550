# coding: utf-8

# # Building the palindromic classifier
#
# Expansion rates [4, 8] mirror into [4, 8, 4]: the stages widen the
# feature depth 100 -> 400 -> 800 and narrow back to 400. Stages at mirrored
# positions share a depth, which is what lets a learned scalar carry the
# first stage's output forward to its partner.

import numpy as np

from pipmn import PipConfig, PipmnModel, forward, param_count

cfg = PipConfig(n=2, kappas=[4, 8], time_length=5, in_dim=100, alpha=3, num_classes=10)
print("expansion", cfg.expansion, "stage dims", cfg.stage_dims)

model = PipmnModel(cfg, seed=0)
total, breakdown = param_count(model)
for name, count in breakdown.items():
    print(f"  {name:<8} {count:>10,}")
print(f"  {'total':<8} {total:>10,}")

# Input is (batch, frames, coefficients). Frames are pooled to the temporal
# length of 5, so any clip of at least 5 frames works.

x = np.random.default_rng(1).standard_normal((4, 399, 100)).astype(np.float32)
print("logits", forward(model, x).shape)
print("short clip", forward(model, x[:, :12]).shape)

# Switching the long-range skip off is the same network with the skip
# weights pinned at zero.

off = PipmnModel(PipConfig(**{**cfg.to_dict(), "long_range_skip": False}), seed=0)
for rho in model.rhos:
    rho.data = np.zeros_like(rho.data)
print("identical logits:", np.array_equal(forward(model, x).data, forward(off, x).data))

# Ablation sizes.

for label, kw in [("MFCC-50 input", {"in_dim": 50}), ("no linear skip", {"linear_skip": False}),
                  ("no positional modeling", {"positional_modeling": False}),
                  ("monotone [4, 8, 16]", {"structure": "OMS", "kappas": [4, 8, 16],
                                           "long_range_skip": False})]:
    total, _ = param_count(PipmnModel(PipConfig(**{**cfg.to_dict(), **kw})))
    print(f"{label:<24} {total:>10,}")
