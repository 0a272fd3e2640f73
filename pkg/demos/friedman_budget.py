# # Learning Friedman data on a fixed budget
#
# A cloud of dynamic trees normally keeps every observation it has seen.
# Here we cap the active pool at `w` points and compare four ways of living
# within that cap: stop learning after `w` points (ORIG), retire a random
# point (ORAND), retire the point whose removal costs least predictive
# variance (OALC), and the unbudgeted cloud (FULL).

import numpy as np

from dyntree import experiments as ex

# A small version of the benchmark: 2000 training points, 200 of them
# active, linear leaves. Increase `n_particles` and `repeats` for tighter
# numbers.

cfg = ex.ExperimentConfig.from_dict({
    "protocol": "holdout", "repeats": 3, "seed": 1, "n_test": 1000,
    "engine": {"model": "linear", "n_particles": 100, "w": 200},
    "stream": {"kind": "friedman", "n": 2000},
})

results = ex.run_repeats(cfg)

# Each repeat trains every estimator on the same stream and scores it
# against the noise-free surface on a fresh test set.

print(f"{'estimator':>10s} {'RMSE':>8s} {'seconds':>8s}")
for name in cfg.estimators:
    rmse = np.mean([r.rows[0][f"{name}.rmse"] for r in results])
    secs = np.mean([r.rows[0][f"{name}.seconds"] for r in results])
    print(f"{name:>10s} {rmse:8.3f} {secs:8.1f}")

# Random retirement already beats stopping early, since later points still
# update the leaf priors. Active retirement keeps the points that matter
# for prediction and does better again. The unbudgeted cloud, which may
# split on all 2000 points, stays well ahead at this size.
