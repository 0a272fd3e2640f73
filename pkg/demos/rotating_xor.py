# # Classifying a rotating XOR
#
# Four Gaussian blobs at (+-1, +-1) carry XOR labels, and the whole pattern
# turns slowly. A quarter turn swaps the labels, so a classifier that never
# forgets ends up averaging opposite answers.

import math

import numpy as np

from dyntree import experiments as ex
from dyntree import streams as st

X = np.array([[1.0, 1.0], [1.0, -1.0]])
for theta in (0.0, math.pi / 4, math.pi / 2):
    p = st.xor_bayes_probs(X, theta)
    print(f"theta={theta:.2f}: P(class 1) at (1,1) {p[0]:.2f}, at (1,-1) {p[1]:.2f}")

# Multinomial leaves, 100 active points, historical retirement (oldest out
# first). Only the forgetting factor changes.

for lam in (1.0, 0.9, 0.8):
    cfg = ex.ExperimentConfig.from_dict({
        "seed": 3,
        "engine": {"model": "multinomial", "n_particles": 50, "w": 100, "lam": lam},
        "stream": {"kind": "moving_xor", "n": 6000},
    })
    r = ex.run_repeat(cfg, 0)
    s = r.trace.summary()
    print(f"lam={lam}: prequential AUC {s['auc']:.3f}, accuracy {s['ccr']:.3f}")
