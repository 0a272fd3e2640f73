# # Forgetting under drift
#
# When the target moves, retired points should not count forever. The
# forgetting factor `lam` shrinks a leaf's accumulated prior each time a
# point is retired into it, so old information fades at rate `lam`.

import numpy as np

from dyntree import experiments as ex
from dyntree import streams as st

# The sine term of the Friedman surface is scaled by a_t = 2 sin(2 pi k t / 1000) + 1.

t = np.array([0, 250, 500, 750, 1000])
print("a_t at", t.tolist(), "->", st.drift_coefficient(t, "sine", k=1).round(3).tolist())

# Sweep `lam` with a tiny budget (30 active points). Every step is scored
# on five fresh draws from the current surface.

base = ex.ExperimentConfig.from_dict({
    "batch": 5, "repeats": 10, "seed": 7,
    "engine": {"model": "linear", "n_particles": 50, "w": 30},
    "stream": {"kind": "friedman", "n": 1500, "drift": "sine", "k": 1.0},
})
rows, _ = ex.sweep(base, "lambda", [0.0, 0.5, 0.8, 0.9, 1.0])
for r in rows:
    if r["metric"] == "rmse":
        print(f"lam={r['value']:<4} RMSE {r['mean']:.3f}  [{r['q05']:.3f}, {r['q95']:.3f}]")

# With no forgetting the cloud averages over every past concept; with
# total forgetting it only knows 30 points. The best setting sits between.

# ## Tree height after a step change
#
# A step drift switches the sine term to 10 for a while and then off.
# Without forgetting, trees stay as deep as the busy period demanded.

for lam in (1.0, 0.9):
    cfg = ex.ExperimentConfig.from_dict({
        "record_heights": True, "seed": 5,
        "engine": {"model": "constant", "n_particles": 50, "w": 100, "lam": lam},
        "stream": {"kind": "friedman", "n": 12_000, "drift": "step", "start": 4000, "stop": 8000},
    })
    H = ex.run_repeat(cfg, 0).heights
    print(f"lam={lam}: mean height before {H[3000:3990].mean():.2f}, during {H[7000:7990].mean():.2f}, "
          f"after {H[-2000:].mean():.2f}")
