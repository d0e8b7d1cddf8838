# One seed of the forgetting experiment: train against linf, then fine-tune on
# spatial flow with and without ALR and see how much linf robustness survives.
# Takes around half a minute.
import sys
from dataclasses import replace

from crtlab import generate_shapes, KnowledgeSet, TrainConfig, ThreatModel, train_initial, finetune
from crtlab.regularizers import RegularizerConfig
from crtlab.trainer import evaluate

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
train, test = generate_shapes(seed, 2000, split="train"), generate_shapes(seed, 500, split="test")
linf = ThreatModel("linf", 0.08, name="linf", introduced_at=0)
flow = ThreatModel("spatial_flow", 0.5, name="flow", introduced_at=1)
ks = KnowledgeSet([linf, flow])

cfg = TrainConfig(seed=seed, lr_finetune=0.01)
m0, _ = train_initial(train, linf, cfg)
print("before ", evaluate(m0, ks, 0, test, seed, "initial").attack_acc)

for reg in (RegularizerConfig(), RegularizerConfig("ALR", lam=0.5)):
    c = replace(cfg, regularizer=reg)
    m1, hist = finetune(m0, ks, 1, train, c)
    m = evaluate(m1, ks, 1, test, seed, c.label)
    print(f"{c.label:14s}", m.attack_acc, "union", m.union_known, "best epoch", m1.metadata["epoch"])
