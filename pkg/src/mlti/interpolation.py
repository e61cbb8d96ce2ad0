"""Task-interpolation engine: build new training tasks from pairs of tasks.

Two mixing rules:

  * label mixing (label-sharing): features and labels of a task pair are
    combined convexly with one lambda, support and query alike;
  * class relabeling (non-label-sharing, and always for prototype learners):
    class r of the first task pairs with class pi(r) of the second; the
    convex feature combination of each pair becomes a brand-new class with a
    fresh one-hot label.

Lambda comes from Beta(alpha, beta), layer l uniformly from the shared
prefix {0..layer_max}; cutmix replaces the convex combination at the input
grid and re-derives the effective lambda from the realized patch area.

All functions are pure given an explicit numpy Generator; features may be
plain arrays or autodiff Tensors (mixing goes through Tensor ops when needed
so gradients flow into both source tasks).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .tasks import Episode

__all__ = [
    "MixConfig",
    "PairDraw",
    "CutmixResult",
    "InterpolatedEpisode",
    "sample_lambda",
    "select_partner_and_layer",
    "mix_rows",
    "mix_ls",
    "mix_nls",
    "cutmix",
    "build_interpolated_task",
    "metamix_query_only",
]


class InterpolationError(ValueError):
    pass


MODES = ("vanilla", "intra", "cross", "both")
METHODS = ("mixup", "manifold-mixup", "cutmix")


@dataclass
class MixConfig:
    """Full interpolation policy.

    ``alpha_intra`` / ``alpha_cross`` are optional symmetric Beta overrides
    applied when the drawn partner is / is not the source task itself. The
    ``force_*`` fields pin individual draws for controlled comparisons; every
    forced value also skips its rng draw, so a fully forced configuration
    consumes exactly as much randomness as ``mode='vanilla'``.
    """

    method: str = "manifold-mixup"
    alpha: float = 2.0
    beta: float = 2.0
    mode: str = "both"
    layer_max: int = 1
    alpha_intra: Optional[float] = None
    alpha_cross: Optional[float] = None
    pairing: str = "uniform"
    derangement_only: bool = False
    independent_query_lambda: bool = False  # experimental; default single lambda
    force_lambda: Optional[float] = None
    force_layer: Optional[int] = None
    force_partner: Optional[str] = None     # None | "self"
    identity_pairing: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise InterpolationError(f"unknown method {self.method!r}")
        if self.mode not in MODES:
            raise InterpolationError(f"unknown mode {self.mode!r}")
        if not (self.alpha > 0 and self.beta > 0):
            raise InterpolationError("Beta parameters must be positive")
        if self.layer_max < 0:
            raise InterpolationError("layer_max must be >= 0")
        if self.method in ("cutmix", "mixup") and self.layer_max != 0:
            raise InterpolationError(f"{self.method} mixes inputs only; set layer_max=0")
        if self.pairing not in ("uniform", "identity"):
            raise InterpolationError(f"unknown pairing policy {self.pairing!r}")
        if self.pairing == "identity":
            self.identity_pairing = True

    def beta_params(self, intra: bool) -> tuple:
        override = self.alpha_intra if intra else self.alpha_cross
        if override is not None:
            return float(override), float(override)
        return self.alpha, self.beta


@dataclass
class PairDraw:
    j: int
    layer: int
    vanilla: bool = False


@dataclass
class CutmixResult:
    mixed: np.ndarray
    lam_adj: float
    box: tuple  # (r0, r1, c0, c1)


@dataclass
class InterpolatedEpisode:
    """An interpolation-generated task at layer ``layer``.

    ``lam`` is the single mixing weight shared by support and query (for
    cutmix it is the area-derived effective value used for any label mixing).
    """

    layer: int
    support_h: object
    support_y: np.ndarray
    query_h: object
    query_y: np.ndarray
    lam: float
    source_pair: tuple
    scenario: str
    n_way: int
    vanilla: bool = False
    lam_drawn: Optional[float] = None   # pre-cutmix lambda, if different
    query_lam: Optional[float] = None   # only set by independent_query_lambda


# ---------------------------------------------------------------------------
# draws
# ---------------------------------------------------------------------------

def sample_lambda(alpha: float, beta: float, rng: np.random.Generator) -> float:
    if not (alpha > 0 and beta > 0):
        raise InterpolationError("Beta parameters must be positive")
    return float(rng.beta(alpha, beta))


def select_partner_and_layer(i: int, batch_size: int, config: MixConfig,
                             rng: np.random.Generator) -> PairDraw:
    """Partner index and interpolation layer for source task ``i``.

    vanilla mode returns (i, layer 0) without consuming any randomness; the
    other modes draw the partner first, then the layer.
    """
    if config.mode == "vanilla":
        return PairDraw(i, 0, vanilla=True)
    if config.force_partner == "self":
        j = i
    elif config.mode == "intra":
        j = i
    elif config.mode == "cross":
        if batch_size < 2:
            raise InterpolationError("cross-task interpolation needs a batch of >= 2 tasks")
        j = int(rng.integers(0, batch_size - 1))
        if j >= i:
            j += 1
    else:  # both: uniform over the batch including i
        j = int(rng.integers(0, batch_size))
    if config.force_layer is not None:
        layer = config.force_layer
    else:
        layer = int(rng.integers(0, config.layer_max + 1))
    return PairDraw(j, layer)


# ---------------------------------------------------------------------------
# mixing primitives
# ---------------------------------------------------------------------------

def _take_rows(x, idx):
    if isinstance(x, ad.Tensor):
        return ad.rows(x, idx)
    return x[np.asarray(idx, dtype=np.intp)]


def _combine(a, b, lam: float):
    if isinstance(a, ad.Tensor) or isinstance(b, ad.Tensor):
        ta = a if isinstance(a, ad.Tensor) else ad.Tensor(a)
        tb = b if isinstance(b, ad.Tensor) else ad.Tensor(b)
        return ad.add(ad.scale(ta, lam), ad.scale(tb, 1.0 - lam))
    return lam * a + (1.0 - lam) * b


def mix_rows(a, b, lam: float, perm=None):
    """lam * a + (1 - lam) * b[perm]; works on arrays and Tensors alike."""
    if perm is not None:
        b = _take_rows(b, perm)
    return _combine(a, b, lam)


def mix_ls(h_i, y_i: np.ndarray, h_j, y_j: np.ndarray, lam: float, perm=None):
    """Label-sharing mixing: one convex combination of features and labels."""
    if y_i.ndim != 2 or y_j.ndim != 2 or y_i.shape[1] != y_j.shape[1]:
        raise InterpolationError(
            f"incompatible label conventions: {y_i.shape} vs {y_j.shape}")
    yj = y_j[np.asarray(perm, dtype=np.intp)] if perm is not None else y_j
    return mix_rows(h_i, h_j, lam, perm), lam * y_i + (1.0 - lam) * yj


def _pair_rows(n_i: int, n_j: int, rng: np.random.Generator, identity: bool = False):
    """Row pairing of the partner task: permutation when counts match,
    resampling with replacement otherwise."""
    if identity:
        if n_i != n_j:
            raise InterpolationError("identity pairing needs equal row counts")
        return np.arange(n_i, dtype=np.intp)
    if n_i == n_j:
        return rng.permutation(n_j).astype(np.intp)
    return rng.integers(0, n_j, size=n_i).astype(np.intp)


def mix_nls(feats_i: Sequence, feats_j: Sequence, pi: np.ndarray, lam: float,
            rng: np.random.Generator, identity_pairing: bool = False):
    """Class-relabeling mixing: class r of task i with class pi(r) of task j.

    ``feats_*`` are per-class row blocks. Returns the stacked mixed features
    and fresh one-hot labels over 0..N-1. ``pi`` must be a bijection.
    """
    n_way = len(feats_i)
    pi = np.asarray(pi, dtype=np.intp)
    if sorted(pi.tolist()) != list(range(n_way)):
        raise InterpolationError(f"class pairing {pi} is not a bijection")
    blocks = []
    labels = []
    for r in range(n_way):
        f_i = feats_i[r]
        f_j = feats_j[pi[r]]
        n_i = f_i.shape[0]
        perm = _pair_rows(n_i, f_j.shape[0], rng, identity=identity_pairing)
        blocks.append(mix_rows(f_i, f_j, lam, perm))
        labels.extend([r] * n_i)
    if isinstance(blocks[0], ad.Tensor):
        mixed = ad.concat_rows(blocks)
    else:
        mixed = np.concatenate(blocks, axis=0)
    onehot = np.zeros((len(labels), n_way))
    onehot[np.arange(len(labels)), labels] = 1.0
    return mixed, onehot


def cutmix(grid_a: np.ndarray, grid_b: np.ndarray, lam: float,
           rng: np.random.Generator, center=None) -> CutmixResult:
    """Copy one rectangular patch of ``grid_b`` into ``grid_a``.

    Patch sides are round(H * sqrt(1 - lam)) x round(W * sqrt(1 - lam)) at a
    uniform center, clipped to the grid; the effective mixing weight is
    re-derived from the realized area: lam_adj = 1 - area / (H * W).
    Inputs may be single grids [H, W] or batches [n, H, W]; one patch is
    applied to every row.
    """
    if grid_a.shape != grid_b.shape:
        raise InterpolationError(
            f"cutmix shape mismatch: {grid_a.shape} vs {grid_b.shape}")
    if not (0.0 <= lam <= 1.0):
        raise InterpolationError(f"lambda must be in [0, 1], got {lam}")
    h, w = grid_a.shape[-2], grid_a.shape[-1]
    side_h = int(np.floor(h * np.sqrt(1.0 - lam) + 0.5))
    side_w = int(np.floor(w * np.sqrt(1.0 - lam) + 0.5))
    if center is None:
        rc = int(rng.integers(0, h))
        cc = int(rng.integers(0, w))
    else:
        rc, cc = center
    r0 = max(0, rc - side_h // 2)
    r1 = min(h, rc - side_h // 2 + side_h)
    c0 = max(0, cc - side_w // 2)
    c1 = min(w, cc - side_w // 2 + side_w)
    r1 = max(r1, r0)
    c1 = max(c1, c0)
    mixed = grid_a.copy()
    mixed[..., r0:r1, c0:c1] = grid_b[..., r0:r1, c0:c1]
    area = (r1 - r0) * (c1 - c0)
    lam_adj = 1.0 - area / float(h * w)
    return CutmixResult(mixed, lam_adj, (r0, r1, c0, c1))


# ---------------------------------------------------------------------------
# episode-level construction
# ---------------------------------------------------------------------------

def _class_blocks(h, y: np.ndarray):
    """Split rows into per-class blocks using one-hot labels (row-grouped)."""
    labels = y.argmax(axis=1)
    return [_take_rows(h, np.flatnonzero(labels == r)) for r in range(y.shape[1])]


def _as_array(h):
    return h.data if isinstance(h, ad.Tensor) else np.asarray(h)


def build_interpolated_task(model, params, ep_i: Episode, ep_j: Episode,
                            config: MixConfig, rng: np.random.Generator,
                            layer: Optional[int] = None,
                            lam: Optional[float] = None,
                            intra: Optional[bool] = None,
                            label_mode: Optional[str] = None,
                            source_pair=(0, 0)) -> InterpolatedEpisode:
    """Construct one interpolated task from a pair of episodes.

    One lambda is drawn per task and shared by support and query. ``model``
    only needs a ``hidden(x, layer, params)`` method returning the layer-l
    representation (layer 0 is the raw input). ``label_mode`` picks the rule:
    "mix" (convex labels) or "relabel" (fresh one-hot classes); the default is
    "mix" for label-sharing episodes and "relabel" otherwise.
    """
    if config.mode == "vanilla":
        return InterpolatedEpisode(
            layer=0, support_h=ep_i.support_x, support_y=ep_i.support_y,
            query_h=ep_i.query_x, query_y=ep_i.query_y, lam=1.0,
            source_pair=source_pair, scenario=ep_i.scenario, n_way=ep_i.n_way,
            vanilla=True)

    if ep_i.scenario != ep_j.scenario:
        raise InterpolationError("cannot interpolate across scenarios")
    if label_mode is None:
        label_mode = "mix" if ep_i.scenario == "LS" else "relabel"
    if label_mode == "relabel" and ep_i.n_way == 0:
        raise InterpolationError("relabel mixing is undefined for regression episodes")
    if intra is None:
        intra = ep_i is ep_j

    if layer is None:
        layer = (config.force_layer if config.force_layer is not None
                 else int(rng.integers(0, config.layer_max + 1)))
    if config.method in ("cutmix", "mixup") and layer != 0:
        raise InterpolationError(f"{config.method} requires layer 0")
    if lam is None:
        if config.force_lambda is not None:
            lam = float(config.force_lambda)
        else:
            a, b = config.beta_params(intra)
            lam = sample_lambda(a, b, rng)

    h_sup_i = model.hidden(ep_i.support_x, layer, params)
    h_qry_i = model.hidden(ep_i.query_x, layer, params)
    h_sup_j = model.hidden(ep_j.support_x, layer, params)
    h_qry_j = model.hidden(ep_j.query_x, layer, params)

    query_lam = lam
    if config.independent_query_lambda and config.force_lambda is None:
        a, b = config.beta_params(intra)
        query_lam = sample_lambda(a, b, rng)

    if config.method == "cutmix":
        # one patch geometry per task: a single center draw shared by the
        # support and query sets (and by every class pair under relabeling)
        h, w = ep_i.support_x.shape[-2], ep_i.support_x.shape[-1]
        center = (int(rng.integers(0, h)), int(rng.integers(0, w)))
        if label_mode == "relabel":
            pi = _draw_class_pairing(ep_i.n_way, config, rng)
            sup_h, sup_y, eff = _cutmix_relabel(ep_i, ep_j, pi, lam, rng, config,
                                                "support", center)
            qry_h, qry_y, _ = _cutmix_relabel(ep_i, ep_j, pi, lam, rng, config,
                                              "query", center)
        else:
            sup_perm = _pair_rows(ep_i.support_x.shape[0], ep_j.support_x.shape[0],
                                  rng, config.identity_pairing)
            qry_perm = _pair_rows(ep_i.query_x.shape[0], ep_j.query_x.shape[0],
                                  rng, config.identity_pairing)
            sup_res = cutmix(ep_i.support_x, ep_j.support_x[sup_perm], lam, rng,
                             center=center)
            qry_res = cutmix(ep_i.query_x, ep_j.query_x[qry_perm], lam, rng,
                             center=center)
            eff = sup_res.lam_adj
            sup_h = sup_res.mixed
            qry_h = qry_res.mixed
            sup_y = eff * ep_i.support_y + (1.0 - eff) * ep_j.support_y[sup_perm]
            qry_y = eff * ep_i.query_y + (1.0 - eff) * ep_j.query_y[qry_perm]
        return InterpolatedEpisode(0, sup_h, sup_y, qry_h, qry_y, eff,
                                   source_pair, ep_i.scenario, ep_i.n_way,
                                   lam_drawn=lam)

    if label_mode == "mix":
        sup_perm = _pair_rows(_as_array(h_sup_i).shape[0], _as_array(h_sup_j).shape[0],
                              rng, config.identity_pairing)
        qry_perm = _pair_rows(_as_array(h_qry_i).shape[0], _as_array(h_qry_j).shape[0],
                              rng, config.identity_pairing)
        sup_h, sup_y = mix_ls(h_sup_i, ep_i.support_y, h_sup_j, ep_j.support_y, lam, sup_perm)
        qry_h, qry_y = mix_ls(h_qry_i, ep_i.query_y, h_qry_j, ep_j.query_y, query_lam, qry_perm)
    else:
        pi = _draw_class_pairing(ep_i.n_way, config, rng)
        sup_h, sup_y = mix_nls(_class_blocks(h_sup_i, ep_i.support_y),
                               _class_blocks(h_sup_j, ep_j.support_y),
                               pi, lam, rng, config.identity_pairing)
        qry_h, qry_y = mix_nls(_class_blocks(h_qry_i, ep_i.query_y),
                               _class_blocks(h_qry_j, ep_j.query_y),
                               pi, query_lam, rng, config.identity_pairing)

    return InterpolatedEpisode(layer, sup_h, sup_y, qry_h, qry_y, lam,
                               source_pair, ep_i.scenario, ep_i.n_way,
                               query_lam=(query_lam if config.independent_query_lambda else None))


def _draw_class_pairing(n_way: int, config: MixConfig, rng) -> np.ndarray:
    if config.identity_pairing:
        return np.arange(n_way, dtype=np.intp)
    pi = rng.permutation(n_way).astype(np.intp)
    if config.derangement_only and n_way > 1:
        while (pi == np.arange(n_way)).any():
            pi = rng.permutation(n_way).astype(np.intp)
    return pi


def _cutmix_relabel(ep_i: Episode, ep_j: Episode, pi, lam, rng, config, which, center):
    """Class-paired cutmix at the input grid; one box shared across classes."""
    x_i = ep_i.support_x if which == "support" else ep_i.query_x
    y_i = ep_i.support_y if which == "support" else ep_i.query_y
    x_j = ep_j.support_x if which == "support" else ep_j.query_x
    y_j = ep_j.support_y if which == "support" else ep_j.query_y
    li = y_i.argmax(axis=1)
    lj = y_j.argmax(axis=1)
    blocks, labels = [], []
    lam_adj = lam
    for r in range(ep_i.n_way):
        rows_i = np.flatnonzero(li == r)
        rows_j = np.flatnonzero(lj == pi[r])
        perm = _pair_rows(rows_i.size, rows_j.size, rng, config.identity_pairing)
        res = cutmix(x_i[rows_i], x_j[rows_j][perm], lam, rng, center=center)
        lam_adj = res.lam_adj
        blocks.append(res.mixed)
        labels.extend([r] * rows_i.size)
    onehot = np.zeros((len(labels), ep_i.n_way))
    onehot[np.arange(len(labels)), labels] = 1.0
    return np.concatenate(blocks, axis=0), onehot, lam_adj


def metamix_query_only(episode: Episode, lam: float, rng: np.random.Generator) -> Episode:
    """Within-task ablation baseline: mix only the query set, keep support.

    Query rows pair with a random permutation of themselves; labels mix with
    the same lambda. The support arrays are returned untouched (same objects).
    """
    perm = rng.permutation(episode.query_x.shape[0])
    qx = lam * episode.query_x + (1.0 - lam) * episode.query_x[perm]
    qy = lam * episode.query_y + (1.0 - lam) * episode.query_y[perm]
    return Episode(episode.support_x, episode.support_y, qx, qy,
                   episode.scenario, episode.n_way, episode.k_shot,
                   episode.q_queries, episode.class_ids, episode.task_id)
