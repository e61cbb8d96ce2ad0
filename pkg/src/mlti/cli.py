"""Command-line entry points.

    python -m mlti train        --config cfg.txt --seed 0 --out runs/a
    python -m mlti eval         --config cfg.txt --seed 0 --out runs/a --checkpoint ck.txt
    python -m mlti ablation     --config cfg.txt --seed 0 --out runs/abl
    python -m mlti sweep        --config cfg.txt --pools 4,8,16,32 --out runs/sweep
    python -m mlti cross-domain --config cfg.txt --target-kind gaussian-classes ...
    python -m mlti theory       --out runs/theory
    python -m mlti bank export  --config cfg.txt --out bank.txt
    python -m mlti bank import  --path bank.txt

``--override key=value`` (repeatable) rewrites any dotted config path.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import harness as hn
from . import learners as ln
from . import tasks as tk


def _add_common(p):
    p.add_argument("--config", help="config file (nested key: value text)")
    p.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--override", action="append", default=[],
                   help="dotted-path config override, key=value (repeatable)")


def _load(args) -> hn.RunConfig:
    cfg = hn.load_config(args.config) if args.config else hn.default_config()
    if args.override:
        cfg = hn.apply_overrides(cfg, args.override)
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mlti",
                                     description="episodic meta-learning with task interpolation")
    sub = parser.add_subparsers(dest="verb", required=True)

    for verb in ("train", "eval", "ablation", "sweep", "cross-domain", "theory"):
        p = sub.add_parser(verb)
        _add_common(p)
        if verb == "eval":
            p.add_argument("--checkpoint", required=True)
        if verb == "sweep":
            p.add_argument("--pools", default="4,8,16,32",
                           help="comma-separated ascending pool sizes")
            p.add_argument("--svg", action="store_true", help="emit plot.svg")
        if verb == "cross-domain":
            p.add_argument("--target-kind", default="gaussian-classes")
            p.add_argument("--target-seed", type=int, default=99)
        if verb == "theory":
            p.add_argument("--n-mc", type=int, default=1_000_000)

    pb = sub.add_parser("bank")
    pb.add_argument("action", choices=["export", "import"])
    _add_common(pb)
    pb.add_argument("--path", help="bank file (import) or output file (export)")

    args = parser.parse_args(argv)

    if args.verb == "train":
        cfg = _load(args)
        _, summaries = hn.run_experiment(cfg, args.out, master_seed=args.seed)
        _print_summaries(summaries)
    elif args.verb == "eval":
        cfg = _load(args)
        bank = cfg.build_bank()
        learner = ln.make_learner(cfg["learner"], cfg.build_model(bank),
                                  cfg.train_config())
        learner.params = ln.load_checkpoint(args.checkpoint)
        rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(1, 0)))
        ep = cfg["episode"]
        n_way = bank.n_way_fixed or ep["n_way"]
        vals = []
        for _ in range(cfg["test_episodes"]):
            episode = tk.sample_episode(bank, "test", n_way, ep["k_shot"],
                                        ep["q_test"], rng)
            vals.append(learner.meta_test(episode)[1])
        arr = np.asarray(vals)
        ci = 1.96 * arr.std(ddof=1) / np.sqrt(arr.size)
        print(f"test metric: {arr.mean():.4f} +- {ci:.4f} over {arr.size} episodes")
    elif args.verb == "ablation":
        cfg = _load(args)
        summaries = hn.ablation(cfg, args.out, master_seed=args.seed)
        _print_summaries(summaries)
    elif args.verb == "sweep":
        cfg = _load(args)
        pools = [int(x) for x in args.pools.split(",")]
        summaries, _ = hn.sweep_tasks(cfg, pools, args.out, master_seed=args.seed,
                                      emit_svg=args.svg)
        _print_summaries(summaries)
    elif args.verb == "cross-domain":
        cfg = _load(args)
        target = dict(cfg.raw["bank"])
        target["kind"] = args.target_kind
        target["seed"] = args.target_seed
        summaries = hn.cross_domain(cfg, target, args.out, master_seed=args.seed)
        _print_summaries(summaries)
    elif args.verb == "theory":
        suite = hn.theory_suite(args.out, n_mc=args.n_mc)
        from . import theory as th
        for name, reports in suite.items():
            slope = th.remainder_slope(reports)
            worst = max(r.abs_error / (3 * r.stderr) for r in reports[-1:])
            print(f"{name}: slope={slope:.2f} err@{reports[-1].epsilon}="
                  f"{reports[-1].abs_error:.3e} ({worst:.2f} of 3*stderr)")
        print(f"wrote {args.out}/theory.csv")
    elif args.verb == "bank":
        cfg = _load(args)
        if args.action == "export":
            bank = cfg.build_bank()
            path = args.path or f"{args.out}/bank.txt"
            tk.save_bank(bank, path)
            print(f"wrote {path}")
        else:
            bank = tk.load_bank(args.path)
            print(f"{bank.kind}: {bank.total_units} units, "
                  f"train pool {bank.meta_train_pool.size}, "
                  f"test pool {bank.meta_test_pool.size}")
    return 0


def _print_summaries(summaries):
    for s in summaries:
        if s.seed == "pooled":
            print(f"{s.condition:>16}  {s.metric}: {s.mean:.4f} +- {s.ci95:.4f}  (n={s.n})")


if __name__ == "__main__":
    sys.exit(main())
