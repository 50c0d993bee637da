"""
Two-neuron sine network, end to end
===================================

Train the mean-field posterior, rank parameters by how much of the
predictive variance they explain, then sample only the sensitive ones.
The chains here are short so the script finishes in about a minute; the
shipped ``case1`` config runs the full-length version.
"""

import tempfile
from dataclasses import replace

import numpy as np

from vihmc.config import load_config, shipped_config_path
from vihmc.pipeline import cmd_sample, cmd_sensitivity, cmd_train_vi
from vihmc.report import canonical_two_neuron

cfg = load_config(shipped_config_path("case1"))
cfg = replace(cfg, hmc=replace(cfg.hmc, samples=600, burn_in=100))
run = tempfile.mkdtemp(prefix="case1-")

###############################################################################
# Variational fit. The posterior stds come out tiny because the noise is 1e-3.

q, history = cmd_train_vi(cfg, run)
print("final train mse", history[-1]["train_mse"])
print("VI mean (canonical)", np.round(canonical_two_neuron(q.mu), 3))

###############################################################################
# Sensitivity split at tau = 0.9.

rep, part = cmd_sensitivity(cfg, run)
print(f"{part.n_sensitive} of {part.n_params} sampled, frozen indices {part.frozen.tolist()}")

###############################################################################
# Reduced HMC. Frozen coordinates stay at their VI means in every draw.

arch = cmd_sample(cfg, run, mode="reduced")
draws = arch.full_draws()
print("acceptance", arch.chains[0].acceptance_rate(arch.burn_in))
print("VI-HMC mean (canonical)", np.round(canonical_two_neuron(draws.mean(axis=0)), 3))
print("frozen columns constant:", bool(np.all(draws[:, part.frozen] == q.mu[part.frozen])))
