"""
Transfer-augmented loss curves
==============================

A domain's loss falls as a power law in its own tokens, and tokens from the
other domains count as a discounted, sub-linear amount of extra data.
"""

import numpy as np

from mixopt import TABLE1_PARAMS
from mixopt.scaling_model import domain_loss, effective_transfer

IF, MATH, CODE = TABLE1_PARAMS
n = 660_000

# how much 1.32M out-of-domain tokens are worth to each domain
for p in TABLE1_PARAMS:
    print(f"{p.name:5s} transfer worth {effective_transfer(p.k, p.alpha, 2 * n):10.1f} own tokens")

# losses at the five perturbation sizes, others held at 2n
sizes = np.array([1 / 3, 1 / 2, 1, 2, 3]) * n
for p in TABLE1_PARAMS:
    row = "  ".join(f"{domain_loss(p, s, 2 * n):.4f}" for s in sizes)
    print(f"{p.name:5s} {row}")

# with no own data the transfer term alone keeps the loss finite
print("IF loss with zero own tokens:", domain_loss(IF, 0, 2 * n))

# the curve flattens towards E as own data grows
for s in (1e6, 1e8, 1e10):
    print(f"Math at {s:.0e} own tokens: {domain_loss(MATH, s, 2 * n):.4f} (floor {MATH.E})")
