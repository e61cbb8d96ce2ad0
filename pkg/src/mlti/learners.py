"""Episodic learners with interpolation-augmented meta-training.

Two families over a shared dense ``LayeredModel``:

  * ``MAML``: inner-loop adaptation of the layers after the interpolation
    layer (optionally restricted to the head, or with learned per-parameter
    inner rates), outer update of the initialization. First- or second-order
    meta-gradients.
  * ``ProtoNet``: class-mean prototypes in the embedding space, query loss is
    the softmax over negative squared distances; interpolation always uses
    the class-relabeling rule (prototypes are undefined for mixed labels).

Meta-testing never interpolates: adaptation/prototypes come from the true
support set of an unmodified episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import interpolation as ip
from .tasks import Episode

__all__ = [
    "LayeredModel",
    "TrainConfig",
    "TrainingDiverged",
    "MAML",
    "ProtoNet",
    "make_learner",
    "episode_metric",
    "save_checkpoint",
    "load_checkpoint",
]


class LearnerError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss or parameters became non-finite; carries the failing context."""

    def __init__(self, msg, iteration=None, task_ids=None, lam=None):
        super().__init__(
            f"{msg} (iteration={iteration}, task_ids={task_ids}, lambda={lam})")
        self.iteration = iteration
        self.task_ids = task_ids
        self.lam = lam


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class LayeredModel:
    """Dense layers with ReLU between them and a linear final layer.

    Layer l maps representation H^{l-1} to H^l; layer 0 is the raw input
    (grids stay grids at layer 0 and are flattened on entry to layer 1).
    ``shared_prefix`` bounds the interpolation layer; for MAML-family models
    it defaults to L-1 so the inner loop always has at least one layer left
    to adapt, for prototype learners to L (everything shared).
    """

    def __init__(self, layer_sizes, seed: int, shared_prefix: Optional[int] = None):
        if len(layer_sizes) < 2:
            raise LearnerError("need at least one layer")
        self.layer_sizes = list(layer_sizes)
        self.n_layers = len(layer_sizes) - 1
        self.seed = seed
        self.shared_prefix = self.n_layers - 1 if shared_prefix is None else shared_prefix
        if not 0 <= self.shared_prefix <= self.n_layers:
            raise LearnerError("shared_prefix out of range")

    def init_params(self) -> dict:
        """Uniform fan-in-scaled init, deterministic in the model seed."""
        entropy = self.seed if isinstance(self.seed, tuple) else (self.seed,)
        rng = np.random.default_rng(np.random.SeedSequence((*entropy, 0x11A7)))
        params = {}
        for k in range(1, self.n_layers + 1):
            fan_in = self.layer_sizes[k - 1]
            bound = 1.0 / np.sqrt(fan_in)
            params[f"layer{k}.W"] = ad.Tensor(
                rng.uniform(-bound, bound, size=(fan_in, self.layer_sizes[k])), tracked=True)
            params[f"layer{k}.b"] = ad.Tensor(np.zeros(self.layer_sizes[k]), tracked=True)
        return params

    def layer_names(self, k: int) -> list:
        return [f"layer{k}.W", f"layer{k}.b"]

    @staticmethod
    def _flatten(x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[0], -1)

    def _enter(self, h) -> ad.Tensor:
        if isinstance(h, ad.Tensor):
            if h.ndim > 2:
                return ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
            return h
        return ad.Tensor(self._flatten(np.asarray(h, dtype=np.float64)))

    def hidden(self, x, layer: int, params: dict):
        """Representation H^layer; layer 0 returns the raw input unchanged."""
        if not 0 <= layer <= self.n_layers:
            raise LearnerError(f"layer {layer} outside 0..{self.n_layers}")
        if layer == 0:
            return x
        h = self._enter(x)
        for k in range(1, layer + 1):
            h = ad.add(ad.matmul(h, params[f"layer{k}.W"]), params[f"layer{k}.b"])
            if k < self.n_layers:
                h = ad.relu(h)
        return h

    def forward_from(self, h, layer: int, params: dict) -> ad.Tensor:
        """Apply layers layer+1..L to a representation at ``layer``."""
        out = self._enter(h)
        for k in range(layer + 1, self.n_layers + 1):
            out = ad.add(ad.matmul(out, params[f"layer{k}.W"]), params[f"layer{k}.b"])
            if k < self.n_layers:
                out = ad.relu(out)
        return out

    def forward(self, x, params: dict) -> ad.Tensor:
        return self.forward_from(x, 0, params)


# ---------------------------------------------------------------------------
# training configuration / outer optimizer
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    inner_updates: int = 5
    batch_size: int = 4
    max_iterations: int = 2000
    grad_order: str = "first"        # "first" | "second"
    outer_optimizer: str = "sgd"     # "sgd" | "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mix: ip.MixConfig = field(default_factory=ip.MixConfig)

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise LearnerError("learning rates must be positive")
        if self.grad_order not in ("first", "second"):
            raise LearnerError(f"unknown grad_order {self.grad_order!r}")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise LearnerError(f"unknown outer optimizer {self.outer_optimizer!r}")


class _OuterOpt:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        c = self.cfg
        if c.outer_optimizer == "sgd":
            return {n: ad.Tensor(params[n].data - c.outer_lr * grads[n].data, tracked=True)
                    for n in params}
        self.t += 1
        out = {}
        for n in params:
            g = grads[n].data
            self.m[n] = c.adam_beta1 * self.m.get(n, 0.0) + (1 - c.adam_beta1) * g
            self.v[n] = c.adam_beta2 * self.v.get(n, 0.0) + (1 - c.adam_beta2) * g * g
            mh = self.m[n] / (1 - c.adam_beta1 ** self.t)
            vh = self.v[n] / (1 - c.adam_beta2 ** self.t)
            out[n] = ad.Tensor(params[n].data - c.outer_lr * mh / (np.sqrt(vh) + c.adam_eps),
                               tracked=True)
        return out


# ---------------------------------------------------------------------------
# metrics / losses
# ---------------------------------------------------------------------------

def episode_metric(predictions: np.ndarray, targets: np.ndarray, kind: str) -> float:
    """accuracy = fraction of argmax matches; mse = mean squared error."""
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape[0] == 0:
        raise LearnerError("empty query set")
    if predictions.shape[0] != targets.shape[0]:
        raise LearnerError("prediction/target row counts differ")
    if kind == "accuracy":
        pred_labels = predictions.argmax(axis=1) if predictions.ndim > 1 else predictions
        true_labels = targets.argmax(axis=1) if targets.ndim > 1 else targets
        return float(np.mean(pred_labels == true_labels))
    if kind == "mse":
        return float(np.mean((predictions - targets) ** 2))
    raise LearnerError(f"unknown metric kind {kind!r}")


def _task_loss(outputs: ad.Tensor, y: np.ndarray, regression: bool) -> ad.Tensor:
    return ad.mse(outputs, y) if regression else ad.softmax_cross_entropy(outputs, y)


# ---------------------------------------------------------------------------
# MAML family
# ---------------------------------------------------------------------------

class MAML:
    """Gradient-based learner; ``adapt_policy`` is "all-after-l" or
    "head-only", ``learn_inner_rates=True`` makes the inner step sizes
    elementwise outer-learned parameters initialized at ``inner_lr``."""

    family = "gradient"

    def __init__(self, model: LayeredModel, config: TrainConfig,
                 adapt_policy: str = "all-after-l",
                 learn_inner_rates: bool = False):
        if adapt_policy not in ("all-after-l", "head-only"):
            raise LearnerError(f"unknown adapt policy {adapt_policy!r}")
        if config.inner_updates < 1:
            raise LearnerError("gradient-based learners need inner_updates >= 1")
        if config.mix.layer_max > model.shared_prefix:
            raise LearnerError(
                f"layer_max {config.mix.layer_max} exceeds shared prefix {model.shared_prefix}")
        self.model = model
        self.config = config
        self.adapt_policy = adapt_policy
        self.learn_inner_rates = learn_inner_rates
        self.params = model.init_params()
        if learn_inner_rates:
            for name in list(self.params):
                self.params["rate." + name] = ad.Tensor(
                    np.full(self.params[name].shape, config.inner_lr), tracked=True)
        self._opt = _OuterOpt(config)
        self.iteration = 0

    # -- plumbing -----------------------------------------------------------

    def _weight_names(self) -> list:
        return [n for n in self.params if not n.startswith("rate.")]

    def _adapt_names(self, layer: int) -> list:
        names = []
        for k in range(layer + 1, self.model.n_layers + 1):
            if self.adapt_policy == "head-only" and k != self.model.n_layers:
                continue
            names.extend(self.model.layer_names(k))
        return names

    def _inner_sgd(self, cur: dict, grads: dict, adapt) -> dict:
        new = dict(cur)
        for n in adapt:
            if self.learn_inner_rates:
                step = ad.mul(self.params["rate." + n], grads[n])
            else:
                step = ad.scale(grads[n], self.config.inner_lr)
            new[n] = ad.sub(cur[n], step)
        return new

    def _adapt(self, support_loss_fn, adapt, order: str):
        """Unrolled inner loop; returns (adapted params, rate-grad hook)."""
        cfg = self.config
        cur = dict(self.params)
        if order == "second":
            for _ in range(cfg.inner_updates):
                gs = ad.backward(support_loss_fn(cur), {n: cur[n] for n in adapt},
                                 create_graph=True)
                cur = self._inner_sgd(cur, gs, adapt)
            return cur, None
        grad_sums = {n: 0.0 for n in adapt}
        cur.update({n: ad.Tensor(self.params[n].data.copy(), tracked=True) for n in adapt})
        for _ in range(cfg.inner_updates):
            gs = ad.backward(support_loss_fn(cur), {n: cur[n] for n in adapt})
            for n in adapt:
                grad_sums[n] = grad_sums[n] + gs[n].data
            if self.learn_inner_rates:
                cur = {**cur, **{n: ad.Tensor(
                    cur[n].data - self.params["rate." + n].data * gs[n].data, tracked=True)
                    for n in adapt}}
            else:
                cur = {**cur, **{n: ad.Tensor(cur[n].data - cfg.inner_lr * gs[n].data,
                                              tracked=True) for n in adapt}}
        return cur, grad_sums

    def _build_batch_tasks(self, episodes, rng):
        mix = self.config.mix
        tasks = []
        for i, ep in enumerate(episodes):
            draw = ip.select_partner_and_layer(i, len(episodes), mix, rng)
            ep_j = episodes[draw.j]
            if draw.vanilla:
                task = ip.build_interpolated_task(self.model, self.params, ep, ep_j,
                                                  mix, rng, source_pair=(i, draw.j))
            else:
                label_mode = self._label_mode(ep)
                task = ip.build_interpolated_task(
                    self.model, self.params, ep, ep_j, mix, rng,
                    layer=draw.layer, intra=(draw.j == i), label_mode=label_mode,
                    source_pair=(i, draw.j))
            tasks.append(task)
        return tasks

    def _label_mode(self, ep: Episode) -> str:
        return "mix" if ep.scenario == "LS" else "relabel"

    # -- training -----------------------------------------------------------

    def train_step(self, episodes, rng: np.random.Generator) -> float:
        """One outer update from a batch of episodes; returns the batch loss."""
        cfg = self.config
        weight_names = self._weight_names()
        grand = {n: np.zeros(self.params[n].shape) for n in self.params}
        total_loss = 0.0
        tasks = self._build_batch_tasks(episodes, rng)
        for task in tasks:
            regression = task.n_way == 0
            adapt = self._adapt_names(task.layer)

            def support_loss(p, _t=task, _r=regression):
                out = self.model.forward_from(_t.support_h, _t.layer, p)
                return _task_loss(out, _t.support_y, _r)

            def query_loss(p, _t=task, _r=regression):
                out = self.model.forward_from(_t.query_h, _t.layer, p)
                return _task_loss(out, _t.query_y, _r)

            try:
                adapted, inner_grad_sums = self._adapt(support_loss, adapt, cfg.grad_order)
                ql = query_loss(adapted)
                leaf = {n: self.params[n] for n in self.params}
                if cfg.grad_order == "first":
                    leaf = dict(leaf)
                    leaf.update({n: adapted[n] for n in adapt})
                grads = ad.backward(ql, leaf)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(str(exc), iteration=self.iteration,
                                       task_ids=task.source_pair, lam=task.lam) from exc
            for n in weight_names:
                if n in grads:
                    grand[n] += grads[n].data
            if self.learn_inner_rates:
                for n in adapt:
                    rn = "rate." + n
                    if cfg.grad_order == "second" and rn in grads:
                        grand[rn] += grads[rn].data
                    elif cfg.grad_order == "first":
                        # d phi / d rate = -(sum of inner gradients), each step's
                        # gradient treated as constant
                        grand[rn] += -grads[n].data * inner_grad_sums[n]
            total_loss += float(ql.data)

        scale = 1.0 / len(tasks)
        grads_avg = {n: ad.Tensor(g * scale) for n, g in grand.items()}
        self.params = self._opt.step(self.params, grads_avg)
        self.iteration += 1
        return total_loss * scale

    # -- meta-testing (no interpolation) -------------------------------------

    def meta_test(self, episode: Episode, inner_lr: Optional[float] = None,
                  updates: Optional[int] = None):
        """Adapt on the true support set, score the query set."""
        cfg = self.config
        lr = cfg.inner_lr if inner_lr is None else inner_lr
        steps = cfg.inner_updates if updates is None else updates
        regression = episode.is_regression
        adapt = self._adapt_names(0)
        cur = {n: ad.Tensor(self.params[n].data.copy(), tracked=True)
               for n in self._weight_names()}
        for _ in range(steps):
            if lr == 0.0:
                break
            sl = _task_loss(self.model.forward(episode.support_x, cur),
                            episode.support_y, regression)
            gs = ad.backward(sl, {n: cur[n] for n in adapt})
            for n in adapt:
                rate = (self.params["rate." + n].data if self.learn_inner_rates else lr)
                cur[n] = ad.Tensor(cur[n].data - rate * gs[n].data, tracked=True)
        with ad.no_grad():
            out = self.model.forward(episode.query_x, cur).data
        if regression:
            return out, episode_metric(out, episode.query_y, "mse")
        return out, episode_metric(out, episode.query_y, "accuracy")


# ---------------------------------------------------------------------------
# prototype learner
# ---------------------------------------------------------------------------

class ProtoNet:
    """Metric-based learner: all layers shared, no inner loop."""

    family = "metric"

    def __init__(self, model: LayeredModel, config: TrainConfig):
        if model.shared_prefix != model.n_layers:
            raise LearnerError("prototype learners share every layer")
        if config.mix.layer_max > model.shared_prefix:
            raise LearnerError("layer_max exceeds shared prefix")
        self.model = model
        self.config = config
        self.params = model.init_params()
        self._opt = _OuterOpt(config)
        self.iteration = 0

    @staticmethod
    def _prototype_matrix(y: np.ndarray) -> ad.Tensor:
        counts = y.sum(axis=0)
        if (counts == 0).any():
            raise LearnerError(f"class {int(np.argmin(counts))} has zero support rows")
        return ad.Tensor((y / counts[None, :]).T)  # [n_way, n_sup] row-mean weights

    def _episode_loss(self, task, params) -> ad.Tensor:
        emb_s = self.model.forward_from(task.support_h, task.layer, params)
        emb_q = self.model.forward_from(task.query_h, task.layer, params)
        protos = ad.matmul(self._prototype_matrix(task.support_y), emb_s)
        logits = ad.scale(ad.sqdist(emb_q, protos), -1.0)
        return ad.softmax_cross_entropy(logits, task.query_y)

    def train_step(self, episodes, rng: np.random.Generator) -> float:
        """One optimizer step on the mean interpolated-episode loss."""
        mix = self.config.mix
        grand = {n: np.zeros(self.params[n].shape) for n in self.params}
        total = 0.0
        for i, ep in enumerate(episodes):
            if ep.is_regression:
                raise LearnerError("prototype learners need classification episodes")
            draw = ip.select_partner_and_layer(i, len(episodes), mix, rng)
            task = ip.build_interpolated_task(
                self.model, self.params, ep, episodes[draw.j], mix, rng,
                layer=(None if draw.vanilla else draw.layer),
                intra=(draw.j == i), label_mode="relabel", source_pair=(i, draw.j))
            try:
                loss = self._episode_loss(task, self.params)
                grads = ad.backward(loss, self.params)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(str(exc), iteration=self.iteration,
                                       task_ids=task.source_pair, lam=task.lam) from exc
            for n in self.params:
                if n in grads:
                    grand[n] += grads[n].data
            total += float(loss.data)
        scale = 1.0 / len(episodes)
        self.params = self._opt.step(self.params, {n: ad.Tensor(g * scale)
                                                   for n, g in grand.items()})
        self.iteration += 1
        return total * scale

    def meta_test(self, episode: Episode):
        """Prototypes from the true support; predictions by max probability."""
        with ad.no_grad():
            emb_s = self.model.forward(episode.support_x, self.params)
            emb_q = self.model.forward(episode.query_x, self.params)
            protos = ad.matmul(self._prototype_matrix(episode.support_y), emb_s)
            probs = ad.softmax(ad.scale(ad.sqdist(emb_q, protos), -1.0)).data
        return probs, episode_metric(probs, episode.query_y, "accuracy")


# ---------------------------------------------------------------------------
# learner factory / checkpoints
# ---------------------------------------------------------------------------

def make_learner(learner_id: str, model: LayeredModel, config: TrainConfig):
    """Build "maml", "anil", "metasgd" or "protonet" over a model."""
    if learner_id == "maml":
        return MAML(model, config)
    if learner_id == "anil":
        return MAML(model, config, adapt_policy="head-only")
    if learner_id == "metasgd":
        return MAML(model, config, learn_inner_rates=True)
    if learner_id == "protonet":
        return ProtoNet(model, config)
    raise LearnerError(f"unknown learner {learner_id!r}")


def save_checkpoint(path, params: dict):
    """Text checkpoint, lossless float round-trip via repr."""
    with open(path, "w") as fh:
        fh.write("mlti-ckpt v1\n")
        for name in sorted(params):
            arr = params[name].data if isinstance(params[name], ad.Tensor) else params[name]
            arr = np.asarray(arr)
            parts = [name, str(arr.ndim), *(str(d) for d in arr.shape),
                     *(repr(float(v)) for v in arr.reshape(-1))]
            fh.write(" ".join(parts) + "\n")


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "mlti-ckpt v1":
            raise LearnerError(f"bad checkpoint header {header!r}")
        params = {}
        for line in fh:
            parts = line.split()
            name = parts[0]
            ndim = int(parts[1])
            dims = tuple(int(d) for d in parts[2:2 + ndim])
            vals = np.array([float(v) for v in parts[2 + ndim:]])
            params[name] = ad.Tensor(vals.reshape(dims), tracked=True)
    return params
