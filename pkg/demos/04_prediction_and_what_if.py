"""
Forecasting overflows and asking what-if questions
==================================================

From a given state we roll the twin forward and read off the distribution of
the number of buffer overflows over the next few steps. The same machinery
compares two policies on common random numbers.
"""

import numpy as np

from bayestwin import coma, dynmodel, harness, monitor
from bayestwin.env import EnvState, default_config

config = default_config()
data = harness.collect_random(config, 100, seed=0)
structure = dynmodel.ModelStructure.from_env(config)
post = dynmodel.learn(structure, data, dynmodel.BAYES_PRIOR)
policy = coma.train(post, coma.control_reward(config), coma.TrainConfig(**{**harness.DESK_TRAIN, "iterations": 100}),
                    np.random.default_rng(0))

start = EnvState((1, 1, 0, 1), (0, 0, 0, 0), (0, 0, 0, 0), 0)
task = monitor.PredictionTask(start, policy, horizon=4, n_models=20, n_traj=100)
pred = monitor.predict_metric(task, post, np.random.default_rng(1))
truth = monitor.predict_metric(monitor.PredictionTask(start, policy, 4, 1, 2000), config, np.random.default_rng(2))
print("overflows in 4 steps   0     1     2     3     4")
print("twin (20 models)   ", np.round(pred.probs[:5], 3))
print("true system        ", np.round(truth.probs[:5], 3))

###############################################################################
# What if nobody transmitted? Pair the two runs on the same random numbers.


def silent(q, g, d, t, rng):
    return np.zeros(q.shape)


effect = monitor.counterfactual_effect((post, silent), (post, policy), task, np.random.default_rng(3))
print(f"mean overflows: silent {effect.mean_a:.2f}, trained {effect.mean_b:.2f}, "
      f"difference {effect.diff:.2f} +/- {effect.se:.2f}")
