"""End-to-end experiment harness.

Runs a miniature ablation (vanilla / intra / cross / full interpolation)
through the deterministic harness and prints the summary table; the same
entry points back the command line (python -m mlti ...).
"""

import tempfile

from mlti import harness as hn

cfg = hn.parse_config_text("""
schema_version: 1
learner: 'protonet'
seeds: [0, 1]
test_episodes: 300
bank.n_classes: 24
bank.dim: 4
bank.radius: 4.0
bank.train_count: 8
bank.test_count: 16
episode.n_way: 5
episode.k_shot: 1
model.hidden: [32]
model.embed_dim: 16
train.outer_lr: 0.01
train.outer_optimizer: 'adam'
train.max_iterations: 400
mix.alpha_intra: 0.5
mix.layer_max: 1
""")

with tempfile.TemporaryDirectory() as out:
    summaries = hn.ablation(cfg, out, master_seed=7)
    print(f"{'condition':>10}  {'mean':>8}  {'ci95':>8}")
    for s in summaries:
        if s.seed == "pooled":
            print(f"{s.condition:>10}  {s.mean:8.4f}  {s.ci95:8.4f}")
print("\n(metrics.csv / summary.csv / checkpoints land in the output directory)")
