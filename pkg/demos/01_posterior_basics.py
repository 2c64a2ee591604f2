"""
Learning the twin from a short log
==================================

Four devices share one channel. Devices 1-2 and 3-4 form two clusters whose
packet arrivals are correlated, and the channel can decode at most two
simultaneous packets. We log a few steps under random access, fit the
Dirichlet posterior and compare it with the true tables.
"""

import numpy as np

from bayestwin import dynmodel, harness
from bayestwin.env import default_config

config = default_config()
print("true arrival table for cluster 1:", config.gen_tables[0][0])
print("true reception table (rows n_tx):")
print(config.mpr_table)

# ten steps of random access; every device uses the same q_t in a step
data = harness.collect_random(config, 10, seed=0)
print("first transition:", data[0])

structure = dynmodel.ModelStructure.from_env(config)
post = dynmodel.learn(structure, data, dynmodel.BAYES_PRIOR)
print("posterior counts, cluster 1:", post.alpha["gen0"][0])

###############################################################################
# Posterior draws scatter around the data; the MAP point estimate does not.

rng = np.random.default_rng(1)
draws = np.array([dynmodel.sample_parameters(post, rng).table("gen0")[0] for _ in range(2000)])
print("posterior mean      :", draws.mean(axis=0).round(3))
print("posterior std       :", draws.std(axis=0).round(3))

map_model = dynmodel.map_estimate(dynmodel.learn(structure, data, dynmodel.FREQ_PRIOR))
print("MAP estimate        :", map_model.table("gen0")[0].round(3))

###############################################################################
# Ten steps visit only a few channel rows; a row that was never visited keeps
# the flat prior.

for n_tx in range(5):
    a = post.alpha["channel"][n_tx]
    print(f"n_tx={n_tx}: counts {np.round(a - dynmodel.BAYES_PRIOR * (a > 0), 0)}")
