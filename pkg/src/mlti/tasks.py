"""Synthetic task banks and episodic samplers.

Three bank families cover the label-sharing and non-label-sharing regimes:

  * ``gaussian-classes``: C class clouds with means on a radius-s sphere,
    isotropic noise; episodes are N-way K-shot with per-episode label
    shuffling (non-label-sharing).
  * ``glyph-grid``: 10 fixed procedural binary glyphs crossed with transform
    combos (full/half scale, 0/90/180/270 rotation, 7 intensity tints); each
    combo is one task over the shared 10-glyph label space (label-sharing).
  * ``rotation-regression``: a glyph rotated by a continuous angle; the target
    is angle / 2pi in [0, 1) (label-sharing regression).

Banks are value objects fully determined by (kind, parameters, seed); all
episode randomness comes from a caller-owned numpy Generator.
"""

from __future__ import annotations

import ast
import dataclasses
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "Episode",
    "TaskBank",
    "build_bank",
    "split_pools",
    "sample_episode",
    "export_bank",
    "import_bank",
    "save_bank",
    "load_bank",
]

GLYPH_COUNT = 10
TINT_LEVELS = 7
TINT_RANGE = (0.4, 1.0)
ROTATIONS = (0, 90, 180, 270)
SCALES = ("full", "half")


class BankError(ValueError):
    pass


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    """One few-shot task: support/query arrays plus scenario metadata.

    Classification labels are one-hot rows [n, n_way]; regression targets are
    a single column [n, 1]. ``class_ids[label]`` is the bank-level class
    behind episode label ``label`` (non-label-sharing pairing metadata).
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    scenario: str           # "LS" | "NLS"
    n_way: int
    k_shot: int
    q_queries: int
    class_ids: list
    task_id: int

    @property
    def is_regression(self) -> bool:
        return self.n_way == 0

    def validate(self):
        if self.scenario not in ("LS", "NLS"):
            raise BankError(f"unknown scenario {self.scenario!r}")
        if self.n_way:
            for arr, count in ((self.support_y, self.k_shot), (self.query_y, self.q_queries)):
                counts = arr.sum(axis=0)
                if arr.shape[1] != self.n_way or not np.array_equal(counts, np.full(self.n_way, count)):
                    raise BankError("episode label balance violated")
            if self.scenario == "NLS" and sorted(self.class_ids) != sorted(set(self.class_ids)):
                raise BankError("class_ids must be distinct")
        return self


def _one_hot(labels, n):
    out = np.zeros((len(labels), n), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# banks
# ---------------------------------------------------------------------------

@dataclass
class TaskBank:
    """Immutable synthetic bank; pools index classes (NLS) or tasks (LS)."""

    kind: str
    seed: int
    params: dict
    meta_train_pool: np.ndarray
    meta_test_pool: np.ndarray
    # family-specific payloads
    class_means: Optional[np.ndarray] = None        # gaussian [C, d]
    glyphs: Optional[np.ndarray] = None             # [GLYPH_COUNT, G, G]
    combos: Optional[list] = None                   # glyph-grid task table
    split_perm: np.ndarray = field(default=None, repr=False)

    @property
    def total_units(self) -> int:
        if self.kind == "gaussian-classes":
            return self.class_means.shape[0]
        if self.kind == "glyph-grid":
            return len(self.combos)
        return int(self.params["n_glyphs"])

    @property
    def input_shape(self) -> tuple:
        if self.kind == "gaussian-classes":
            return (int(self.params["dim"]),)
        g = int(self.params["grid"])
        return (g, g)

    @property
    def n_way_fixed(self) -> Optional[int]:
        # label-sharing classification has one shared label space
        return GLYPH_COUNT if self.kind == "glyph-grid" else None


def _make_glyphs(n: int, grid: int, rng) -> np.ndarray:
    """Seeded binary blobs smoothed by one 3x3 majority pass."""
    raw = rng.random((n, grid, grid)) < 0.45
    padded = np.pad(raw, ((0, 0), (1, 1), (1, 1)))
    counts = np.zeros_like(raw, dtype=np.int64)
    for dr in range(3):
        for dc in range(3):
            counts += padded[:, dr:dr + grid, dc:dc + grid]
    return (counts >= 5).astype(np.float64)


def build_bank(kind: str, params: dict, seed: int) -> TaskBank:
    """Deterministically construct a bank; same arguments, bit-identical bank."""
    params = dict(params)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if kind == "gaussian-classes":
        n_classes = int(params.get("n_classes", 16))
        dim = int(params.setdefault("dim", 16))
        radius = float(params.setdefault("radius", 3.0))
        params.setdefault("sigma", 1.0)
        params["n_classes"] = n_classes
        if n_classes < 2:
            raise BankError("gaussian-classes needs at least 2 classes")
        v = rng.standard_normal((n_classes, dim))
        means = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
        bank = TaskBank(kind, seed, params, None, None, class_means=means)
    elif kind == "glyph-grid":
        grid = int(params.setdefault("grid", 12))
        params.setdefault("noise_sigma", 0.1)
        if grid < 8 or grid % 2:
            raise BankError("glyph grid must be even and >= 8")
        glyphs = _make_glyphs(GLYPH_COUNT, grid, rng)
        tints = np.linspace(TINT_RANGE[0], TINT_RANGE[1], TINT_LEVELS)
        combos = [(s, r, float(t)) for s in SCALES for r in ROTATIONS for t in tints]
        bank = TaskBank(kind, seed, params, None, None, glyphs=glyphs, combos=combos)
    elif kind == "rotation-regression":
        grid = int(params.setdefault("grid", 12))
        n_glyphs = int(params.setdefault("n_glyphs", 20))
        params.setdefault("noise_sigma", 0.02)
        if grid < 8 or grid % 2:
            raise BankError("glyph grid must be even and >= 8")
        glyphs = _make_glyphs(n_glyphs, grid, rng)
        bank = TaskBank(kind, seed, params, None, None, glyphs=glyphs)
    else:
        raise BankError(f"unknown bank kind {kind!r}")

    train_count = int(params.get("train_count", max(1, bank.total_units // 2)))
    test_count = int(params.get("test_count", bank.total_units - train_count))
    params.setdefault("train_count", train_count)
    params.setdefault("test_count", test_count)
    return split_pools(bank, train_count, test_count, seed=seed)


def split_pools(bank: TaskBank, train_count: int, test_count: int,
                seed: Optional[int] = None) -> TaskBank:
    """Disjoint train/test pools over one seeded permutation of all units.

    The train pool is a prefix of the permutation and the test pool its
    suffix, so growing ``train_count`` keeps earlier train entries in place
    and never touches the test pool.
    """
    total = bank.total_units
    if train_count + test_count > total:
        raise BankError(
            f"pool sizes {train_count}+{test_count} exceed {total} available units")
    if min(train_count, test_count) < 1:
        raise BankError("pool sizes must be >= 1")
    if seed is None and bank.split_perm is None:
        seed = bank.seed
    perm = (bank.split_perm if seed is None
            else np.random.default_rng(np.random.SeedSequence((seed, 0x5B11))).permutation(total))
    return dataclasses.replace(
        bank,
        meta_train_pool=perm[:train_count].copy(),
        meta_test_pool=perm[total - test_count:].copy(),
        split_perm=perm,
    )


# ---------------------------------------------------------------------------
# glyph transforms
# ---------------------------------------------------------------------------

def rotate90(grid: np.ndarray, quarter_turns: int) -> np.ndarray:
    return np.rot90(grid, k=quarter_turns % 4).copy()


def half_scale(grid: np.ndarray) -> np.ndarray:
    """2x2 block average pasted centered on a zero canvas of the same size."""
    g = grid.shape[0]
    small = grid.reshape(g // 2, 2, g // 2, 2).mean(axis=(1, 3))
    out = np.zeros_like(grid)
    off = g // 4
    out[off:off + g // 2, off:off + g // 2] = small
    return out


def rotate_bilinear(grid: np.ndarray, angle: float) -> np.ndarray:
    """Continuous rotation about the grid center, zeros outside, bilinear."""
    g = grid.shape[0]
    c = (g - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    ca, sa = np.cos(angle), np.sin(angle)
    # inverse map of the target coordinates back into the source grid
    src_i = c + (ii - c) * ca + (jj - c) * sa
    src_j = c - (ii - c) * sa + (jj - c) * ca
    i0 = np.floor(src_i).astype(np.int64)
    j0 = np.floor(src_j).astype(np.int64)
    di = src_i - i0
    dj = src_j - j0
    out = np.zeros_like(grid)
    for oi, wz in ((0, (1 - di) ), (1, di)):
        for oj, wy in ((0, (1 - dj)), (1, dj)):
            si = i0 + oi
            sj = j0 + oj
            ok = (si >= 0) & (si < g) & (sj >= 0) & (sj < g)
            vals = np.zeros_like(grid)
            vals[ok] = grid[si[ok], sj[ok]]
            out += wz * wy * vals
    return out


def render_glyph(bank: TaskBank, glyph_id: int, scale: str, rotation: int, tint: float) -> np.ndarray:
    base = bank.glyphs[glyph_id]
    if scale == "half":
        base = half_scale(base)
    base = rotate90(base, rotation // 90)
    return tint * base


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _pool(bank: TaskBank, split: str) -> np.ndarray:
    if split not in ("train", "test"):
        raise BankError(f"unknown split {split!r}")
    return bank.meta_train_pool if split == "train" else bank.meta_test_pool


def sample_episode(bank: TaskBank, split: str, n_way: int, k_shot: int,
                   q_queries: int, rng: np.random.Generator) -> Episode:
    """Draw one episode from the given pool.

    Non-label-sharing banks assign episode labels by a fresh uniform
    permutation of the chosen classes. Label-sharing classification requires
    ``n_way`` equal to the shared label-space size.
    """
    pool = _pool(bank, split)
    if bank.kind == "gaussian-classes":
        if n_way > pool.size:
            raise BankError(
                f"fewer base classes than needed: n_way={n_way}, pool={pool.size}")
        chosen = np.sort(rng.choice(pool, size=n_way, replace=False))
        class_ids = chosen[rng.permutation(n_way)]  # label shuffling
        sigma = float(bank.params["sigma"])
        dim = int(bank.params["dim"])

        def draw(count):
            xs, ys = [], []
            for label, cid in enumerate(class_ids):
                xs.append(bank.class_means[cid] + sigma * rng.standard_normal((count, dim)))
                ys.extend([label] * count)
            return np.concatenate(xs, axis=0), _one_hot(ys, n_way)

        sx, sy = draw(k_shot)
        qx, qy = draw(q_queries)
        return Episode(sx, sy, qx, qy, "NLS", n_way, k_shot, q_queries,
                       [int(c) for c in class_ids], task_id=-1).validate()

    if bank.kind == "glyph-grid":
        if n_way != GLYPH_COUNT:
            raise BankError(
                f"label-sharing glyph episodes are {GLYPH_COUNT}-way, got n_way={n_way}")
        task_id = int(rng.choice(pool))
        scale_name, rotation, tint = bank.combos[task_id]
        noise = float(bank.params["noise_sigma"])
        g = int(bank.params["grid"])

        def draw(count):
            xs, ys = [], []
            for glyph in range(GLYPH_COUNT):
                clean = render_glyph(bank, glyph, scale_name, rotation, tint)
                xs.append(clean[None] + noise * rng.standard_normal((count, g, g)))
                ys.extend([glyph] * count)
            return np.concatenate(xs, axis=0), _one_hot(ys, GLYPH_COUNT)

        sx, sy = draw(k_shot)
        qx, qy = draw(q_queries)
        return Episode(sx, sy, qx, qy, "LS", GLYPH_COUNT, k_shot, q_queries,
                       list(range(GLYPH_COUNT)), task_id=task_id).validate()

    if bank.kind == "rotation-regression":
        task_id = int(rng.choice(pool))
        glyph = bank.glyphs[task_id]
        noise = float(bank.params["noise_sigma"])
        g = int(bank.params["grid"])

        def draw(count):
            angles = rng.uniform(0.0, 2.0 * np.pi, size=count)
            xs = np.stack([rotate_bilinear(glyph, a) for a in angles])
            xs += noise * rng.standard_normal((count, g, g))
            return xs, (angles / (2.0 * np.pi)).reshape(-1, 1)

        sx, sy = draw(k_shot)
        qx, qy = draw(q_queries)
        return Episode(sx, sy, qx, qy, "LS", 0, k_shot, q_queries, [], task_id=task_id)

    raise BankError(f"unknown bank kind {bank.kind!r}")


# ---------------------------------------------------------------------------
# bank text format: header "mlti-bank v1 <kind>", then one record per line
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def export_bank(bank: TaskBank) -> str:
    out = io.StringIO()
    out.write(f"mlti-bank v1 {bank.kind}\n")
    out.write(f"param seed {bank.seed}\n")
    for key in sorted(bank.params):
        out.write(f"param {key} {bank.params[key]!r}\n")
    for name, pool in (("train", bank.meta_train_pool), ("test", bank.meta_test_pool)):
        out.write(f"pool {name} {' '.join(str(int(i)) for i in pool)}\n")
    out.write(f"perm {' '.join(str(int(i)) for i in bank.split_perm)}\n")
    if bank.kind == "gaussian-classes":
        for cid, mean in enumerate(bank.class_means):
            out.write(f"class {cid} {' '.join(_fmt(v) for v in mean)}\n")
    else:
        for gid, glyph in enumerate(bank.glyphs):
            flat = " ".join(_fmt(v) for v in glyph.reshape(-1))
            out.write(f"glyph {gid} {flat}\n")
        if bank.kind == "glyph-grid":
            for tid, (s, r, t) in enumerate(bank.combos):
                out.write(f"combo {tid} {s} {r} {_fmt(t)}\n")
    return out.getvalue()


def import_bank(text: str) -> TaskBank:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if head[:2] != ["mlti-bank", "v1"]:
        raise BankError(f"bad bank header: {lines[0]!r}")
    kind = head[2]
    params, pools, perm = {}, {}, None
    classes, glyphs, combos = {}, {}, {}
    seed = 0
    for ln in lines[1:]:
        tag, rest = ln.split(" ", 1)
        if tag == "param":
            key, val = rest.split(" ", 1)
            if key == "seed":
                seed = int(val)
            else:
                params[key] = ast.literal_eval(val)  # repr round-trip
        elif tag == "pool":
            name, *ids = rest.split()
            pools[name] = np.array([int(i) for i in ids], dtype=np.int64)
        elif tag == "perm":
            perm = np.array([int(i) for i in rest.split()], dtype=np.int64)
        elif tag == "class":
            cid, *vals = rest.split()
            classes[int(cid)] = np.array([float(v) for v in vals])
        elif tag == "glyph":
            gid, *vals = rest.split()
            glyphs[int(gid)] = np.array([float(v) for v in vals])
        elif tag == "combo":
            tid, s, r, t = rest.split()
            combos[int(tid)] = (s, int(r), float(t))
        else:
            raise BankError(f"unknown record tag {tag!r}")
    bank = TaskBank(kind, seed, params, pools["train"], pools["test"], split_perm=perm)
    if kind == "gaussian-classes":
        means = np.stack([classes[i] for i in range(len(classes))])
        bank = dataclasses.replace(bank, class_means=means)
    else:
        g = int(params["grid"])
        stack = np.stack([glyphs[i].reshape(g, g) for i in range(len(glyphs))])
        bank = dataclasses.replace(bank, glyphs=stack)
        if kind == "glyph-grid":
            bank = dataclasses.replace(bank, combos=[combos[i] for i in range(len(combos))])
    return bank


def save_bank(bank: TaskBank, path):
    with open(path, "w") as fh:
        fh.write(export_bank(bank))


def load_bank(path) -> TaskBank:
    with open(path) as fh:
        return import_bank(fh.read())
