"""
Training access policies inside the twin
=========================================

With ten logged transitions we train decentralised actors three ways:
on posterior samples, on the MAP model and on the true system. The trained
actors are then run on the true system. Expect a couple of seconds per
training.
"""

import numpy as np

from bayestwin import coma, harness
from bayestwin.env import default_config

config = default_config()
train_cfg = coma.TrainConfig(**harness.DESK_TRAIN)
reward = coma.control_reward(config)
seed = 3

data = harness.collect_random(config, 10, seed)
for backend in ("bayesian", "frequentist-map", "oracle"):
    source = harness.build_source(backend, data, config)
    policy = coma.train(source, reward, train_cfg, harness.stream(seed, "train"))
    ev = coma.evaluate(policy, config, harness.stream(seed, "eval"), 20, 200)
    print(f"{backend:16s} throughput {ev.throughput:.3f} packets/step   overflow {ev.overflow:.3f}")

###############################################################################
# A single seed says little. Ten transitions can happen to be representative,
# and then the MAP model does as well as the posterior. Averaged over twenty
# seeds (harness.run_control_experiment) the posterior-trained actors gain
# roughly 15% throughput at this data size and are far less variable.

###############################################################################
# The learning curve is stored on the policy.

last = policy.history[-1]
print("final iteration:", {k: round(v, 3) for k, v in last.items()})
