# How close does 10-step PGD get to the true maximum when the constraint set is
# small enough to enumerate?  Uses the tiny instances the verify suite draws.
import numpy as np

from crtlab import certify

for kind in ("linf", "l2", "spatial_flow", "intensity_shift"):
    ratios, n_cands = certify.attack_ratios(kind, seed=0, n=100)
    ratios = np.asarray(ratios)
    print(f"{kind:16s} candidates {n_cands:6d}  median ratio {np.median(ratios):.3f}"
          f"  >=0.95 on {np.mean(ratios >= 0.95):.0%}")

# intensity_shift lags: with a random start and step eps/8 ten steps cover
# 1.25 eps, not enough to cross the box from the middle to a far corner.
for steps in (10, 20):
    r = np.asarray(certify.attack_ratios("intensity_shift", seed=0, n=100, steps=steps)[0])
    print("intensity_shift", steps, "steps:", f"{np.mean(r >= 0.95):.0%}")
