"""
Spotting a disconnected device
==============================

Device 2 stops generating traffic. Each monitoring window is scored by how
much the posterior draws disagree about its likelihood (variance across the
ensemble) and, for comparison, by the negative likelihood under the MAP fit.
"""

import numpy as np

from bayestwin import coma, dynmodel, harness, monitor
from bayestwin.env import AnomalySpec, inject_anomaly, default_config

config = default_config()
broken = inject_anomaly(config, AnomalySpec(device=1))
print("cluster 1 arrivals, normal :", config.gen_tables[0][0])
print("cluster 1 arrivals, broken :", broken.gen_tables[0][0])

# a quick operating policy; the monitor only needs something that transmits
policy = coma.train(config, coma.control_reward(config), coma.TrainConfig(**{**harness.DESK_TRAIN, "iterations": 80}),
                    np.random.default_rng(0))

rng = np.random.default_rng(1)
normal = harness.monitoring_windows(policy, config, 500, 1, 20, rng)
anomalous = harness.monitoring_windows(policy, broken, 500, 1, 20, rng)

structure = dynmodel.ModelStructure.from_env(config)
data = harness.collect_random(config, 20, seed=0)
post = dynmodel.learn(structure, data, dynmodel.BAYES_PRIOR)
draws = [dynmodel.sample_parameters(post, rng) for _ in range(20)]
mapd = dynmodel.map_estimate(dynmodel.learn(structure, data, dynmodel.FREQ_PRIOR))

factors = ("gen0",)
bayes = [monitor.window_scores(draws, w, 1, factors) for w in (normal, anomalous)]
freq = [-monitor.ll_matrix([mapd], w, factors)[0] for w in (normal, anomalous)]
for name, (sn, sa) in (("ensemble variance", bayes), ("MAP likelihood", freq)):
    _, auc = monitor.roc_auc(sn, sa)
    print(f"{name:18s} AUC {auc:.3f}")

###############################################################################
# With one-step windows and memoryless arrivals, both scores are functions of
# the single observed arrival pattern, so they can only differ in how they
# order the three possible patterns.

for code in range(3):
    sel = normal.g2[:, 0] + 2 * normal.g2[:, 1] == code
    if sel.any():
        print(f"pattern {code}: variance {bayes[0][sel][0]:.3f}   -LL {freq[0][sel][0]:.3f}")
