# ALR vs VR on random models, and the logit-distance bound on the loss gap.
import numpy as np

from crtlab import certify, generate_shapes, train_initial, TrainConfig, ThreatModel
from crtlab.metrics import loss_gap_bound_check, union_clean_gap_check

triples = certify.sandwich_triples(seed=0, n=200)[0]
alr, vr = np.array([t[0] for t in triples]), np.array([t[1] for t in triples])
print("VR/ALR ratio range", (vr / np.maximum(alr, 1e-300))[alr > 0].min(), (vr / np.maximum(alr, 1e-300))[alr > 0].max())
print("violations", np.sum(alr > vr + 1e-9) + np.sum(vr > 2 * alr + 1e-9))

# same bound with PGD standing in for the maximizers, on a trained model
train, test = generate_shapes(0, 1000, split="train"), generate_shapes(0, 200, split="test")
linf = ThreatModel("linf", 0.08, name="linf")
flow = ThreatModel("spatial_flow", 0.5, name="flow")
model, _ = train_initial(train, linf, TrainConfig(epochs_initial=10, seed=0))
rng = np.random.default_rng(0)
gap = loss_gap_bound_check(model, test.images, test.labels, linf, flow, rng=rng)
uc = union_clean_gap_check(model, test.images, test.labels, linf, flow, rng=rng)
print(f"|L_linf - L_flow| = {gap.lhs:.4f}  <=  {gap.rhs_distance_term:.4f}")
print(f"L_union - L_clean = {uc.lhs:.4f}  <=  {uc.rhs_distance_term:.4f}")
