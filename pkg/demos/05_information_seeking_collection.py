"""
Collecting informative data
===========================

Before any data are seen, how much would one step teach us about each
parameter table? The information gain of a Dirichlet row has a closed form;
here it is tabulated for the channel as a function of how many devices
transmit, then a short collection round is compared with random access.
"""

import numpy as np

from bayestwin import coma, dynmodel, harness, monitor
from bayestwin.env import MultiAccessEnv, default_config, stack_transitions

config = default_config()
structure = dynmodel.ModelStructure.from_env(config)
prior = dynmodel.make_prior(structure)

tables = monitor.mi_tables(prior)
for n_tx, v in enumerate(tables["channel"]):
    print(f"channel, {n_tx} transmitters: {v:.3f} nats")
print(f"arrival tables: {tables['gen0'][0]:.3f} nats each cluster")

###############################################################################
# A policy trained on this reward prefers many simultaneous transmissions.

cfg = coma.TrainConfig(**harness.EXPLORE_TRAIN)
mi_policy = coma.train(prior, monitor.mi_reward_fn(prior), cfg, np.random.default_rng(0))

for name, pol in (("random", harness.random_collection_policy(np.random.default_rng(1))), ("information", mi_policy)):
    env = MultiAccessEnv(config, 7)
    batch = harness.collect(env, pol, 5, np.random.default_rng(2))
    D = stack_transitions(batch, config.K)
    gain = monitor.mi_reward_batch(prior, D.q, D.g, D.d, D.a).sum()
    print(f"{name:12s} transmitters per step {D.a.sum(axis=1)}  information {gain:.2f} nats")
