# A look at the synthetic glyph data and what each threat model does to it.
# Run: python demos/shapes_and_attacks.py
import numpy as np

from crtlab import generate_shapes, train_initial, TrainConfig, ThreatModel, attack
from crtlab.metrics import predict, robust_accuracy
from crtlab.threats import membership

train = generate_shapes(0, 1000, split="train")
test = generate_shapes(0, 200, split="test")
print(train.images.shape, np.bincount(train.labels))


def show(v, H=12, W=12):
    ramp = " .:-=+*#%@"
    for row in v.reshape(H, W):
        print("".join(ramp[min(int(p * 10), 9)] for p in row))


show(train.images[0])
print("label", train.labels[0])

# plain training, a few epochs is plenty on this task
model, hist = train_initial(train, None, TrainConfig(epochs_initial=10, seed=0))
print("clean test acc", np.mean(predict(model, test.images) == test.labels))

attacks = [
    ThreatModel("linf", 0.08, name="linf"),
    ThreatModel("l2", 1.0, name="l2"),
    ThreatModel("spatial_flow", 0.5, name="flow"),
    ThreatModel("intensity_shift", 0.1, name="shift"),
]
x, y = test.images[:1], test.labels[:1]
for tm in attacks:
    x_adv = attack(model, x, y, tm, rng=np.random.default_rng(0))
    print(f"\n{tm.label}: |d|inf={np.abs(x_adv - x).max():.3f} |d|2={np.linalg.norm(x_adv - x):.3f}"
          f" in C(x): {membership(tm, x, x_adv)}  pred {predict(model, x_adv)[0]} (true {y[0]})")
    show(x_adv[0])

# an undefended model falls over under most of these
for tm in attacks:
    print(tm.label, robust_accuracy(model, tm, test, rng=np.random.default_rng(1)))
