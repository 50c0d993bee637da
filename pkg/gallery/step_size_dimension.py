"""
Step size against dimension
===========================

Dual averaging settles on a larger leapfrog step for a lower-dimensional
target at the same acceptance rate. Freezing coordinates therefore buys
longer steps as well as cheaper gradients.
"""

import numpy as np

from vihmc.hmc import DualAveraging, GaussianTarget, adapt_step_size

for dim in (2, 8, 32, 128):
    t = GaussianTarget(np.zeros(dim), np.eye(dim))
    res = adapt_step_size(t, np.zeros(dim), np.random.default_rng(dim), DualAveraging(0.8), n_steps=3)
    print(f"dim {dim:4d}: eps* {res.step_size:.3f}, probe acceptance {res.probe_acceptance:.2f}")
