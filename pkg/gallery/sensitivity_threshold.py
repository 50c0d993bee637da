"""
How many parameters does tau keep?
==================================

The sensitive set is the smallest group of parameters whose scores add up
to at least a fraction ``tau`` of the total. This sweeps ``tau`` for a
briefly trained two-hidden-layer tanh network.
"""

import numpy as np

from vihmc.config import load_config, shipped_config_path
from vihmc.pipeline import make_data
from vihmc.sensitivity import compute_sensitivities, select_partition
from vihmc.vi import AdamConfig, LikelihoodSpec, PlateauConfig, PriorSpec, init_posterior, train_vi

cfg = load_config(shipped_config_path("case2"))
train, val = make_data(cfg)
q0 = init_posterior(cfg.network, PriorSpec(cfg.prior_variance), np.random.default_rng(0), cfg.vi.sigma0)
res = train_vi(q0, cfg.network, train, val, AdamConfig(lr=1e-2), PlateauConfig(enabled=False), epochs=5000,
               rng=np.random.default_rng(1), likelihood=LikelihoodSpec(cfg.likelihood_variance))
rep = compute_sensitivities(res.posterior, cfg.network, train)

###############################################################################
# After a short fit the scores are fairly even, so tau = 0.9 still keeps
# most of the network. Longer training concentrates them.

s = np.sort(rep.scores)[::-1]
print("top 5 share", s[:5].sum() / s.sum())
for tau in (0.5, 0.75, 0.9, 0.99, 1.0):
    part = select_partition(rep, res.posterior, tau)
    print(f"tau={tau:<5} keeps {part.n_sensitive:3d} of {part.n_params}")
