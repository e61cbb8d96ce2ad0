"""Experiment orchestration: config files, deterministic runs, metrics, CIs.

A run is fully determined by (resolved config, master seed). The master seed
splits into named substreams via ``numpy.random.SeedSequence(master,
spawn_key=...)`` so scheduling cannot change results:

    (0, seed_index)  training stream of one repetition
    (1, seed_index)  evaluation stream of one repetition
    (2,)             bank construction (bank_seed config key, if unset)

Outputs per run: ``metrics.csv`` (run_id, seed, phase, index, metric, value),
``summary.csv`` (condition, seed, metric, n, mean, ci95), a text checkpoint
per seed, and ``resolved-config.txt`` with every default expanded. Floats are
written with repr (shortest exact round-trip, <= 17 significant digits).
"""

from __future__ import annotations

import ast
import io
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import interpolation as ip
from . import learners as ln
from . import tasks as tk
from . import theory as th

__all__ = [
    "RunConfig",
    "ConfigError",
    "parse_config_text",
    "load_config",
    "resolved_config_text",
    "apply_overrides",
    "run_experiment",
    "summarize",
    "sweep_tasks",
    "cross_domain",
    "ablation",
    "theory_suite",
    "write_metrics_csv",
    "write_summary_csv",
    "read_metrics_csv",
    "render_line_chart_svg",
    "MODE_CONDITIONS",
]

SCHEMA_VERSION = 1

MODE_CONDITIONS = {"vanilla": "vanilla", "intra": "intra", "cross": "cross", "mlti": "both"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS = {
    "schema_version": 1,
    "run_id": "run",
    "learner": "maml",                 # maml | anil | metasgd | protonet
    "seeds": [0, 1, 2, 3, 4],
    "test_episodes": 2000,
    "eval_inner_lr": None,             # defaults to train.inner_lr
    "eval_updates": None,              # defaults to train.inner_updates
    "bank": {
        "kind": "gaussian-classes",
        "seed": 7,
        "n_classes": 32,
        "dim": 16,
        "radius": 3.0,
        "sigma": 1.0,
        "grid": 12,
        "n_glyphs": 20,
        "noise_sigma": 0.1,
        "train_count": 8,
        "test_count": 16,
    },
    "episode": {
        "n_way": 5,
        "k_shot": 1,
        "q_train": 15,
        "q_test": 15,
    },
    "model": {
        "hidden": [32],
        "embed_dim": 16,               # protonet embedding width
        "seed": 0,
    },
    "train": {
        "inner_lr": 0.01,
        "outer_lr": 0.001,
        "inner_updates": 5,
        "batch_size": 4,
        "max_iterations": 2000,
        "grad_order": "first",
        "outer_optimizer": "sgd",
    },
    "mix": {
        "method": "manifold-mixup",
        "alpha": 2.0,
        "beta": 2.0,
        "mode": "both",
        "layer_max": 1,
        "alpha_intra": None,
        "alpha_cross": None,
        "derangement_only": False,
    },
}


def _deep_copy(d):
    return {k: _deep_copy(v) if isinstance(v, dict) else
            (list(v) if isinstance(v, list) else v) for k, v in d.items()}


@dataclass
class RunConfig:
    """Validated, fully-resolved experiment configuration."""

    raw: dict

    def __post_init__(self):
        r = self.raw
        if r["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {r['schema_version']}")
        if not r["seeds"] or len(set(r["seeds"])) != len(r["seeds"]):
            raise ConfigError("seeds must be non-empty and distinct")
        if r["test_episodes"] < 100:
            raise ConfigError("test_episodes must be >= 100")
        if r["learner"] not in ("maml", "anil", "metasgd", "protonet"):
            raise ConfigError(f"unknown learner {r['learner']!r}")

    def __getitem__(self, key):
        return self.raw[key]

    # -- builders -----------------------------------------------------------

    def build_bank(self) -> tk.TaskBank:
        b = self.raw["bank"]
        params = {k: v for k, v in b.items() if k not in ("kind", "seed")}
        return tk.build_bank(b["kind"], params, seed=b["seed"])

    def mix_config(self, mode: Optional[str] = None) -> ip.MixConfig:
        m = dict(self.raw["mix"])
        if mode is not None:
            m["mode"] = mode
        return ip.MixConfig(**m)

    def train_config(self, mode: Optional[str] = None) -> ln.TrainConfig:
        t = self.raw["train"]
        return ln.TrainConfig(inner_lr=t["inner_lr"], outer_lr=t["outer_lr"],
                              inner_updates=t["inner_updates"],
                              batch_size=t["batch_size"],
                              max_iterations=t["max_iterations"],
                              grad_order=t["grad_order"],
                              outer_optimizer=t["outer_optimizer"],
                              mix=self.mix_config(mode))

    def build_model(self, bank: tk.TaskBank, seed_index: int = 0) -> ln.LayeredModel:
        in_dim = int(np.prod(bank.input_shape))
        mc = self.raw["model"]
        ep = self.raw["episode"]
        if self.raw["learner"] == "protonet":
            sizes = [in_dim] + list(mc["hidden"]) + [mc["embed_dim"]]
            prefix = len(sizes) - 1
        else:
            n_out = 1 if bank.kind == "rotation-regression" else \
                (bank.n_way_fixed or ep["n_way"])
            sizes = [in_dim] + list(mc["hidden"]) + [n_out]
            prefix = len(sizes) - 2
        return ln.LayeredModel(sizes, seed=(mc["seed"], seed_index), shared_prefix=prefix)


def default_config() -> RunConfig:
    return RunConfig(_deep_copy(DEFAULTS))


def _parse_value(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("null", "none"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _set_path(cfg: dict, path: str, value, base: dict):
    parts = path.split(".")
    node, ref = cfg, base
    for p in parts[:-1]:
        if not isinstance(ref, dict) or p not in ref:
            raise ConfigError(f"unknown config key {path!r}")
        node = node.setdefault(p, {})
        ref = ref[p]
    leaf = parts[-1]
    if not isinstance(ref, dict) or leaf not in ref:
        raise ConfigError(f"unknown config key {path!r}")
    node[leaf] = value


def parse_config_text(text: str) -> RunConfig:
    """Parse the nested key-value config format.

    One ``dotted.path: value`` pair per line; ``#`` comments and blank lines
    ignored; values are Python literals (numbers, strings, lists, booleans,
    null). Unknown keys are a hard error. ``schema_version: 1`` is required.
    """
    cfg = _deep_copy(DEFAULTS)
    seen_version = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"line {lineno}: expected 'key: value'")
        key, value = line.split(":", 1)
        key = key.strip()
        if key == "schema_version":
            seen_version = True
        _set_path(cfg, key, _parse_value(value), DEFAULTS)
    if not seen_version:
        raise ConfigError("config must declare schema_version: 1")
    return RunConfig(cfg)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """Apply ``dotted.path=value`` strings on top of a config."""
    cfg = _deep_copy(config.raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        key, value = item.split("=", 1)
        _set_path(cfg, key.strip(), _parse_value(value), DEFAULTS)
    return RunConfig(cfg)


def _flatten(d: dict, prefix=""):
    for k in sorted(d):
        v = d[k]
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, path + ".")
        else:
            yield path, v


def resolved_config_text(config: RunConfig) -> str:
    lines = [f"{k}: {v!r}" if isinstance(v, str) else f"{k}: {v}"
             for k, v in _flatten(config.raw)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metrics records / summaries
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    phase: str       # "train" | "test"
    index: int
    metric: str
    value: float


@dataclass
class Summary:
    condition: str
    seed: str        # seed index as text, or "pooled"
    metric: str
    n: int
    mean: float
    ci95: float


def summarize(records, by_seed: bool = True):
    """Mean and 1.96 * stddev / sqrt(n) over test records, grouped by
    (run_id, metric) pooled and optionally per seed. Sample stddev (n-1)."""
    groups: dict = {}
    for r in records:
        if r.phase != "test":
            continue
        groups.setdefault((r.run_id, "pooled", r.metric), []).append(r.value)
        if by_seed:
            groups.setdefault((r.run_id, str(r.seed), r.metric), []).append(r.value)
    out = []
    for (cond, seed, metric), vals in sorted(groups.items()):
        if len(vals) < 2:
            raise ValueError(f"summary group {cond}/{seed}/{metric} needs >= 2 records")
        arr = np.asarray(vals)
        ci = 1.96 * arr.std(ddof=1) / np.sqrt(arr.size)
        out.append(Summary(cond, seed, metric, arr.size, float(arr.mean()), float(ci)))
    return out


def _fmt(v) -> str:
    return repr(float(v))


def write_metrics_csv(path, records):
    with open(path, "w") as fh:
        fh.write("run_id,seed,phase,index,metric,value\n")
        for r in records:
            fh.write(f"{r.run_id},{r.seed},{r.phase},{r.index},{r.metric},{_fmt(r.value)}\n")


def read_metrics_csv(path):
    records = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "run_id,seed,phase,index,metric,value":
            raise ValueError(f"unexpected metrics header: {header!r}")
        for line in fh:
            run_id, seed, phase, index, metric, value = line.strip().split(",")
            records.append(MetricsRecord(run_id, int(seed), phase, int(index),
                                         metric, float(value)))
    return records


def write_summary_csv(path, summaries):
    with open(path, "w") as fh:
        fh.write("condition,seed,metric,n,mean,ci95\n")
        for s in summaries:
            fh.write(f"{s.condition},{s.seed},{s.metric},{s.n},{_fmt(s.mean)},{_fmt(s.ci95)}\n")


# ---------------------------------------------------------------------------
# core run
# ---------------------------------------------------------------------------

def _train_stream(master_seed: int, seed_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(0, seed_index)))


def _eval_stream(master_seed: int, seed_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(1, seed_index)))


def _run_one_seed(config: RunConfig, bank, mode, master_seed, seed_index,
                  eval_bank=None, run_id=None):
    """Train one repetition and evaluate on the (cross-domain) test pool."""
    ep = config["episode"]
    learner = ln.make_learner(config["learner"],
                              config.build_model(bank, seed_index),
                              config.train_config(mode))
    rng = _train_stream(master_seed, seed_index)
    records = []
    run_id = run_id or config["run_id"]
    n_way = bank.n_way_fixed or ep["n_way"]
    try:
        for it in range(config["train"]["max_iterations"]):
            batch = [tk.sample_episode(bank, "train", n_way, ep["k_shot"],
                                       ep["q_train"], rng)
                     for _ in range(config["train"]["batch_size"])]
            loss = learner.train_step(batch, rng)
            records.append(MetricsRecord(run_id, seed_index, "train", it, "loss", loss))
    except ln.TrainingDiverged as exc:
        exc.iteration = learner.iteration
        raise

    test_bank = eval_bank if eval_bank is not None else bank
    test_way = test_bank.n_way_fixed or ep["n_way"]
    metric_name = "mse" if test_bank.kind == "rotation-regression" else "accuracy"
    erng = _eval_stream(master_seed, seed_index)
    for idx in range(config["test_episodes"]):
        episode = tk.sample_episode(test_bank, "test", test_way, ep["k_shot"],
                                    ep["q_test"], erng)
        if config["learner"] == "protonet":
            _, value = learner.meta_test(episode)
        else:
            _, value = learner.meta_test(episode,
                                         inner_lr=config["eval_inner_lr"],
                                         updates=config["eval_updates"])
        records.append(MetricsRecord(run_id, seed_index, "test", idx, metric_name, value))
    return learner, records


def run_experiment(config: RunConfig, out_dir, master_seed: Optional[int] = None,
                   mode: Optional[str] = None):
    """Train/evaluate every seed of one condition; writes all artifacts.

    Returns (records, summaries). Fully reproducible from (config, master
    seed): metrics.csv and summary.csv are byte-identical across repeats.
    """
    os.makedirs(out_dir, exist_ok=True)
    master = config["seeds"][0] if master_seed is None else master_seed
    bank = config.build_bank()
    records = []
    for seed_index in range(len(config["seeds"])):
        learner, recs = _run_one_seed(config, bank, mode, master, seed_index)
        records.extend(recs)
        ln.save_checkpoint(os.path.join(out_dir, f"checkpoint-seed{seed_index}.txt"),
                           learner.params)
    summaries = summarize(records)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), records)
    write_summary_csv(os.path.join(out_dir, "summary.csv"), summaries)
    with open(os.path.join(out_dir, "resolved-config.txt"), "w") as fh:
        fh.write(f"# master_seed: {master}\n")
        fh.write(resolved_config_text(config))
    return records, summaries


# ---------------------------------------------------------------------------
# experiment presets
# ---------------------------------------------------------------------------

def ablation(config: RunConfig, out_dir, master_seed: int = 0,
             conditions=("vanilla", "intra", "cross", "mlti")):
    """One run per interpolation condition with shared streams and pools."""
    os.makedirs(out_dir, exist_ok=True)
    bank = config.build_bank()
    all_records = []
    for cond in conditions:
        mode = MODE_CONDITIONS[cond]
        for seed_index in range(len(config["seeds"])):
            _, recs = _run_one_seed(config, bank, mode, master_seed, seed_index,
                                    run_id=cond)
            all_records.extend(recs)
    summaries = summarize(all_records)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), all_records)
    write_summary_csv(os.path.join(out_dir, "summary.csv"), summaries)
    with open(os.path.join(out_dir, "resolved-config.txt"), "w") as fh:
        fh.write(f"# master_seed: {master_seed}\n")
        fh.write(resolved_config_text(config))
    return summaries


def sweep_tasks(config: RunConfig, pool_sizes, out_dir, master_seed: int = 0,
                conditions=("vanilla", "intra", "cross", "mlti"),
                emit_svg: bool = False):
    """Accuracy against meta-training pool size, one line per condition.

    Pool growth is prefix-monotone and the test pool is identical at every
    sweep point and for every condition (asserted).
    """
    if list(pool_sizes) != sorted(pool_sizes):
        raise ConfigError("pool sizes must be ascending")
    os.makedirs(out_dir, exist_ok=True)
    base_bank = config.build_bank()
    test_count = int(config["bank"]["test_count"])
    split_seed = int(config["bank"]["seed"])
    banks = [tk.split_pools(base_bank, n, test_count, seed=split_seed)
             for n in pool_sizes]
    for prev_bank, bank in zip(banks, banks[1:]):
        assert np.array_equal(prev_bank.meta_test_pool, bank.meta_test_pool)
        assert np.array_equal(prev_bank.meta_train_pool,
                              bank.meta_train_pool[:prev_bank.meta_train_pool.size])

    all_records = []
    rows = []
    for bank, n_pool in zip(banks, pool_sizes):
        for cond in conditions:
            mode = MODE_CONDITIONS[cond]
            run_id = f"{cond}@{n_pool}"
            for seed_index in range(len(config["seeds"])):
                _, recs = _run_one_seed(config, bank, mode, master_seed, seed_index,
                                        run_id=run_id)
                all_records.extend(recs)
    summaries = summarize(all_records)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), all_records)
    write_summary_csv(os.path.join(out_dir, "summary.csv"), summaries)

    # plot-ready combined table: one row per (condition, pool size)
    pooled = {s.condition: s for s in summaries if s.seed == "pooled"}
    with open(os.path.join(out_dir, "sweep.csv"), "w") as fh:
        fh.write("condition,pool_size,metric,n,mean,ci95\n")
        for n_pool in pool_sizes:
            for cond in conditions:
                s = pooled[f"{cond}@{n_pool}"]
                rows.append((cond, n_pool, s.mean, s.ci95))
                fh.write(f"{cond},{n_pool},{s.metric},{s.n},{_fmt(s.mean)},{_fmt(s.ci95)}\n")
    if emit_svg:
        series = {cond: [(n, m) for c, n, m, _ in rows if c == cond]
                  for cond in conditions}
        with open(os.path.join(out_dir, "plot.svg"), "w") as fh:
            fh.write(render_line_chart_svg(series, x_label="meta-training pool size",
                                           y_label="mean test metric"))
    with open(os.path.join(out_dir, "resolved-config.txt"), "w") as fh:
        fh.write(f"# master_seed: {master_seed}\n# pool_sizes: {list(pool_sizes)}\n")
        fh.write(resolved_config_text(config))
    return summaries, rows


def cross_domain(config: RunConfig, target_bank_config: dict, out_dir,
                 master_seed: int = 0, mode: Optional[str] = None):
    """Meta-train on the source bank, meta-test on the target bank's pool."""
    os.makedirs(out_dir, exist_ok=True)
    source = config.build_bank()
    params = {k: v for k, v in target_bank_config.items() if k not in ("kind", "seed")}
    target = tk.build_bank(target_bank_config["kind"], params,
                           seed=target_bank_config["seed"])
    if source.input_shape != target.input_shape:
        raise ConfigError(
            f"cross-domain input shapes differ: {source.input_shape} vs {target.input_shape}")
    sway = source.n_way_fixed or config["episode"]["n_way"]
    tway = target.n_way_fixed or config["episode"]["n_way"]
    if sway != tway:
        raise ConfigError(f"cross-domain n_way differs: {sway} vs {tway}")
    records = []
    for seed_index in range(len(config["seeds"])):
        _, recs = _run_one_seed(config, source, mode, master_seed, seed_index,
                                eval_bank=target)
        records.extend(recs)
    summaries = summarize(records)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), records)
    write_summary_csv(os.path.join(out_dir, "summary.csv"), summaries)
    with open(os.path.join(out_dir, "resolved-config.txt"), "w") as fh:
        fh.write(f"# master_seed: {master_seed}\n# target: {target_bank_config}\n")
        fh.write(resolved_config_text(config))
    return summaries


def theory_suite(out_dir, alpha: float = 2.0, beta: float = 2.0,
                 n_mc: int = 1_000_000):
    """Run all expansion checks and the variance ordering; write theory.csv."""
    os.makedirs(out_dir, exist_ok=True)
    suite = th.run_taylor_suite(alpha, beta, n_mc)
    lines = [th.CSV_HEADER]
    for name, reports in suite.items():
        for r in reports:
            lines.append(r.csv_row())
        lines.append(f"# {name} slope,{th.remainder_slope(reports)!r}")
    rng = np.random.default_rng(424242)
    inst = th.make_gbml_instance(seed=17)
    rep = th.variance_ordering_check(inst.tasks, alpha, beta, n_mc=0, rng=rng)
    lines.append(f"# variance-ordering min_eig,{rep.min_eigenvalue!r},psd,{rep.psd}")
    with open(os.path.join(out_dir, "theory.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return suite


# ---------------------------------------------------------------------------
# svg line chart (no plotting dependency)
# ---------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_line_chart_svg(series: dict, width=640, height=420,
                          x_label="", y_label="") -> str:
    """Minimal multi-series line chart; ``series`` maps label -> [(x, y)]."""
    pad = 60
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    span = (y_hi - y_lo) or 1.0
    y_lo -= 0.05 * span
    y_hi += 0.05 * span

    def sx(x):
        return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n')
    out.write(f'<rect width="{width}" height="{height}" fill="white"/>\n')
    out.write(f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>\n')
    out.write(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>\n')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        yv = y_lo + frac * (y_hi - y_lo)
        out.write(f'<text x="4" y="{sy(yv)+4:.1f}" font-size="11">{yv:.3f}</text>\n')
        xv = x_lo + frac * (x_hi - x_lo)
        out.write(f'<text x="{sx(xv)-8:.1f}" y="{height-pad+16}" font-size="11">{xv:.0f}</text>\n')
    for i, (label, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(pts))
        out.write(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>\n')
        for x, y in pts:
            out.write(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>\n')
        out.write(f'<text x="{width-pad+6}" y="{pad + 16*i}" font-size="12" fill="{color}">{label}</text>\n')
    out.write(f'<text x="{width/2-40:.0f}" y="{height-8}" font-size="12">{x_label}</text>\n')
    out.write(f'<text x="10" y="{pad-10}" font-size="12">{y_label}</text>\n')
    out.write("</svg>\n")
    return out.getvalue()
