"""Meta-learners with interpolation-augmented training.

Trains a prototype learner with and without task interpolation on a small
bank with few meta-training classes, then meta-tests both on held-out
classes. Also shows the gradient-based learner and its variants.
"""

import numpy as np

from mlti import interpolation as ip
from mlti import learners as ln
from mlti import tasks as tk

bank = tk.build_bank("gaussian-classes",
                     {"n_classes": 24, "dim": 4, "radius": 4.0, "sigma": 1.0,
                      "train_count": 8, "test_count": 16}, seed=2)


def train_protonet(mode, iters=600):
    model = ln.LayeredModel([4, 32, 16], seed=(0, 0), shared_prefix=2)
    cfg = ln.TrainConfig(mix=ip.MixConfig(mode=mode, layer_max=1, alpha_intra=0.5),
                         outer_lr=0.01, outer_optimizer="adam",
                         max_iterations=iters)
    learner = ln.ProtoNet(model, cfg)
    rng = np.random.default_rng(1)
    for _ in range(iters):
        batch = [tk.sample_episode(bank, "train", 5, 1, 15, rng) for _ in range(4)]
        learner.train_step(batch, rng)
    erng = np.random.default_rng(2)
    accs = [learner.meta_test(tk.sample_episode(bank, "test", 5, 1, 15, erng))[1]
            for _ in range(400)]
    return float(np.mean(accs))


for mode in ("vanilla", "both"):
    acc = train_protonet(mode)
    print(f"protonet 5-way 1-shot, mode={mode:8}: test accuracy {acc:.3f}")

# gradient-based learner: inner loop adapts the layers after the mixing layer
model = ln.LayeredModel([4, 32, 5], seed=0)
cfg = ln.TrainConfig(mix=ip.MixConfig(mode="both", layer_max=0, alpha_intra=0.5),
                     inner_lr=0.05, outer_lr=0.003, inner_updates=3,
                     outer_optimizer="adam", grad_order="first",
                     max_iterations=200)
maml = ln.MAML(model, cfg)
rng = np.random.default_rng(3)
for _ in range(200):
    maml.train_step([tk.sample_episode(bank, "train", 5, 1, 15, rng)
                     for _ in range(4)], rng)
ep = tk.sample_episode(bank, "test", 5, 1, 15, np.random.default_rng(4))
_, acc = maml.meta_test(ep)
print(f"gradient-based learner after 200 steps, one test episode: {acc:.3f}")

# variants share the same machinery
anil = ln.make_learner("anil", ln.LayeredModel([4, 32, 5], seed=0), cfg)
print("head-only variant adapts:", anil._adapt_names(0))
metasgd = ln.make_learner("metasgd", ln.LayeredModel([4, 32, 5], seed=0), cfg)
print("learned-rate parameters:",
      [n for n in metasgd.params if n.startswith("rate.")][:2], "...")
