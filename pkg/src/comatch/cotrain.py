"""Noisy-label training: losses, small-loss selection, schedules, Adam and
the per-step update rules for Standard, Standard+, Co-teaching and
Co-matching (Co-matching with ``lam = 0`` is the ablation without the
matching loss).
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad
from .augment import augment_batch
from .errors import NumericalError, ValidationError
from .ndgrad import Graph
from .models import accuracy

ALGORITHMS = ("standard", "standard_plus", "co_teaching", "co_matching")
TWO_NETWORK = ("co_teaching", "co_matching")

# view tags for the augmentation streams
VIEW_F = 0
VIEW_G = 1


@dataclass
class TrainConfig:
    algorithm: str = "co_matching"
    lam: float = 0.65
    tau: float = 0.5
    t_k: int = 10
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.001
    lr_decay_start: int = 80
    pseudo_label_mode: str = "hard"
    seed: int = 0

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.tau < 1.0:
            raise ValidationError(f"tau must lie in [0, 1), got {self.tau}")
        if self.t_k < 1:
            raise ValidationError("t_k must be at least 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be at least 2")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if not 0 <= self.lr_decay_start <= self.epochs:
            raise ValidationError("lr_decay_start must lie in [0, epochs]")
        if self.pseudo_label_mode not in ("hard", "soft"):
            raise ValidationError("pseudo_label_mode must be hard or soft")
        return self


# ------------------------------------------------------------- schedules


def rate_schedule(t, t_k, tau):
    """Keep ratio R(t) = 1 - min(t / t_k * tau, tau)."""
    if t < 0:
        raise ValidationError("epoch index must be non-negative")
    return 1.0 - min(t / t_k * tau, tau)


def lr_schedule(epoch, config):
    """Constant ``lr`` before ``lr_decay_start``, then linear decay reaching 0 at ``epochs``.

    ``epoch`` is zero based.
    """
    if not 0 <= epoch < config.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.lr_decay_start:
        return config.lr
    return config.lr * (config.epochs - epoch) / (config.epochs - config.lr_decay_start)


# -------------------------------------------------------------- selection


def selection_size(n, rate):
    # tolerance keeps e.g. 0.7 * 10 from rounding up to 8
    return min(n, max(1, math.ceil(rate * n - 1e-9)))


def select_small_loss(losses, rate):
    """Sorted indices of the ceil(rate * n) smallest losses; ties go to the lower index."""
    losses = np.asarray(losses)
    if losses.size == 0:
        raise ValidationError("select_small_loss needs a non-empty loss vector")
    if not 0.0 < rate <= 1.0:
        raise ValidationError(f"rate must lie in (0, 1], got {rate}")
    if not np.all(np.isfinite(losses)):
        raise NumericalError("select_small_loss got non-finite losses")
    k = selection_size(losses.size, rate)
    return np.sort(np.argsort(losses, kind="stable")[:k])


# ----------------------------------------------------------------- losses


def hard_pseudo_label(probs):
    """One-hot at the argmax (lowest index on ties); works on [C] or [N, C]."""
    probs = np.asarray(probs)
    out = np.zeros_like(probs)
    idx = np.argmax(probs, axis=-1)
    np.put_along_axis(out, np.expand_dims(idx, -1), 1, axis=-1)
    return out


def _ce(probs, target):
    return -(target * np.log(np.maximum(probs, ndgrad.LOG_FLOOR))).sum(axis=-1)


def classification_loss(probs_f, probs_g, noisy_onehot):
    """Per-sample cross entropy of both networks against the given labels."""
    return _ce(probs_f, noisy_onehot) + _ce(probs_g, noisy_onehot)


def matching_loss(probs_f_weak, probs_g_strong, mode="hard"):
    """Cross entropy of the strong-view prediction against the weak-view anchor."""
    target = hard_pseudo_label(probs_f_weak) if mode == "hard" else np.asarray(probs_f_weak)
    return _ce(probs_g_strong, target)


def total_loss(l_c, l_a, lam):
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * np.asarray(l_c) + lam * np.asarray(l_a)


def one_hot(labels, class_count, dtype=np.float32):
    out = np.zeros((len(labels), class_count), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


# ------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(params, grads, state, lr):
    """One bias-corrected Adam step over every named parameter, in place.

    ``params`` maps name -> Tensor and ``grads`` name -> array. All
    parameters share ``state.step``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericalError(f"non-finite gradient for {name}: {bad} bad entries at Adam step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return params, state


# ------------------------------------------------------------------ steps


@dataclass
class Batch:
    """What a training step may see: augmented views, noisy labels, sample ids."""
    view_f: np.ndarray
    view_g: np.ndarray
    noisy_labels: np.ndarray
    indices: np.ndarray
    class_count: int


@dataclass
class TrainState:
    networks: dict
    adam: AdamState
    epoch: int = 0
    rate: float = 1.0
    lr: float = 0.001

    def parameters(self):
        out = {}
        for key, net in self.networks.items():
            for name, t in net.params.items():
                out[f"{key}.{name}"] = t
        return out


@dataclass
class StepRecord:
    losses: np.ndarray            # per-sample losses used for ranking
    selected: tuple               # one index array (batch positions) per selector
    mean_selected_loss: float
    clean_selected: int = None    # filled by the trainer from the clean-flag snapshot
    n_selected: int = 0


def _apply_update(state, graph, loss):
    graph.backward(loss)
    params = state.parameters()
    grads = {name: p.grad for name, p in params.items()}
    adam_update(params, grads, state.adam, state.lr)


def standard_step(batch, state, config):
    net = state.networks["f"]
    target = one_hot(batch.noisy_labels, batch.class_count)
    with Graph() as g:
        ce, _ = ndgrad.softmax_cross_entropy(net.forward(batch.view_f, train=True), target)
        loss = ndgrad.reduce_mean(ce)
    _apply_update(state, g, loss)
    everything = np.arange(len(ce.data))
    return StepRecord(ce.data.copy(), (everything,), float(loss.data), n_selected=len(everything))


def standard_plus_step(batch, state, config):
    net = state.networks["f"]
    target = one_hot(batch.noisy_labels, batch.class_count)
    with Graph() as g:
        ce, _ = ndgrad.softmax_cross_entropy(net.forward(batch.view_f, train=True), target)
        sel = select_small_loss(ce.data, state.rate)
        loss = ndgrad.reduce_mean(ndgrad.take(ce, sel))
    _apply_update(state, g, loss)
    return StepRecord(ce.data.copy(), (sel,), float(loss.data), n_selected=len(sel))


def co_teaching_step(batch, state, config):
    """Each network picks its own small-loss set and its peer trains on it.

    Both networks see the same view (``batch.view_f``).
    """
    net_a, net_b = state.networks["f"], state.networks["g"]
    target = one_hot(batch.noisy_labels, batch.class_count)
    with Graph() as g:
        ce_a, _ = ndgrad.softmax_cross_entropy(net_a.forward(batch.view_f, train=True), target)
        ce_b, _ = ndgrad.softmax_cross_entropy(net_b.forward(batch.view_f, train=True), target)
        sel_a = select_small_loss(ce_a.data, state.rate)
        sel_b = select_small_loss(ce_b.data, state.rate)
        loss_a = ndgrad.reduce_mean(ndgrad.take(ce_a, sel_b))
        loss_b = ndgrad.reduce_mean(ndgrad.take(ce_b, sel_a))
        loss = ndgrad.add(loss_a, loss_b)
    _apply_update(state, g, loss)
    mean_sel = 0.5 * (float(loss_a.data) + float(loss_b.data))
    return StepRecord(np.stack([ce_a.data, ce_b.data]), (sel_a, sel_b), mean_sel,
                      n_selected=len(sel_a) + len(sel_b))


def comatch_losses(batch, state, config):
    """Build the per-sample total loss on the active graph.

    Returns (total, l_c, l_a) tensors; the anchor derived from the weak view of
    network f is a constant target for network g's strong-view prediction.
    """
    net_f, net_g = state.networks["f"], state.networks["g"]
    target = one_hot(batch.noisy_labels, batch.class_count)
    logits_f = net_f.forward(batch.view_f, train=True)
    logits_g = net_g.forward(batch.view_g, train=True)
    ce_f, probs_f = ndgrad.softmax_cross_entropy(logits_f, target)
    ce_g, _ = ndgrad.softmax_cross_entropy(logits_g, target)
    anchor = hard_pseudo_label(probs_f) if config.pseudo_label_mode == "hard" else probs_f
    l_a, _ = ndgrad.softmax_cross_entropy(logits_g, anchor)
    l_c = ndgrad.add(ce_f, ce_g)
    total = ndgrad.add(ndgrad.scale(l_c, 1.0 - config.lam), ndgrad.scale(l_a, config.lam))
    return total, l_c, l_a


def comatch_step(batch, state, config):
    with Graph() as g:
        total, _, _ = comatch_losses(batch, state, config)
        sel = select_small_loss(total.data, state.rate)
        loss = ndgrad.reduce_mean(ndgrad.take(total, sel))
    _apply_update(state, g, loss)
    return StepRecord(total.data.copy(), (sel,), float(loss.data), n_selected=len(sel))


STEP_FUNCTIONS = {
    "standard": standard_step,
    "standard_plus": standard_plus_step,
    "co_teaching": co_teaching_step,
    "co_matching": comatch_step,
}


# ---------------------------------------------------------------- metrics


def label_precision(records):
    """Clean fraction of everything selected over the records; None if nothing was selected."""
    clean = sum(r.clean_selected for r in records)
    total = sum(r.n_selected for r in records)
    if total == 0:
        return None
    return clean / total


# ---------------------------------------------------------------- trainer


class Trainer:
    """Runs the epoch loop for one algorithm on one (noisy) training set.

    ``build_network(key)`` must return a fresh network; ``policies`` maps the
    view key ("f"/"g") to an :class:`AugmentationPolicy`.
    """

    def __init__(self, config, train_set, test_set, build_network, policies):
        self.config = config.validate()
        self.train_set = train_set
        self.test_set = test_set
        self.policies = policies
        keys = ("f", "g") if config.algorithm in TWO_NETWORK else ("f",)
        networks = {k: build_network(k) for k in keys}
        self.state = TrainState(networks, AdamState(), 0, rate_schedule(0, config.t_k, config.tau), config.lr)
        self.step_fn = STEP_FUNCTIONS[config.algorithm]
        self._clean_flag = train_set.clean_flag  # metrics only; never handed to a step

    def batches(self, epoch):
        n = len(self.train_set)
        rng = np.random.default_rng([self.config.seed, epoch, 7])
        order = rng.permutation(n)
        bs = self.config.batch_size
        # a trailing batch smaller than 2 would break batch statistics
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            yield idx

    def make_batch(self, idx, epoch):
        images = self.train_set.images[idx]
        seed = self.config.seed
        view_f = augment_batch(images, idx, self.policies["f"], seed, epoch, VIEW_F)
        if self.config.algorithm == "co_matching":
            view_g = augment_batch(images, idx, self.policies["g"], seed, epoch, VIEW_G)
        else:
            view_g = view_f
        return Batch(view_f, view_g, self.train_set.noisy_labels[idx], idx, self.train_set.class_count)

    def run_epoch(self, epoch, evaluate=True):
        """Train one epoch (zero based); returns a metrics dict.

        With ``evaluate=False`` the test accuracies are left as None.
        """
        cfg = self.config
        self.state.epoch = epoch
        self.state.lr = lr_schedule(epoch, cfg)
        for net in self.state.networks.values():
            net.train()
        records = []
        for idx in self.batches(epoch):
            batch = self.make_batch(idx, epoch)
            rec = self.step_fn(batch, self.state, cfg)
            flags = self._clean_flag[idx]
            rec.clean_selected = int(sum(flags[s].sum() for s in rec.selected))
            records.append(rec)
        if evaluate:
            accs = {k: accuracy(net, self.test_set.images, self.test_set.clean_labels)
                    for k, net in self.state.networks.items()}
        else:
            accs = {k: None for k in self.state.networks}
        result = {
            "epoch": epoch + 1,
            "test_acc": float(np.mean(list(accs.values()))) if evaluate else None,
            "test_acc_f": accs["f"],
            "test_acc_g": accs.get("g"),
            "label_precision": label_precision(records),
            "mean_total_loss": float(np.mean(np.concatenate([np.ravel(r.losses) for r in records]))),
            "mean_selected_loss": float(np.mean([r.mean_selected_loss for r in records])),
            "rate": self.state.rate,
            "lr": self.state.lr,
        }
        # R(t) is updated after the epoch's batches
        self.state.rate = rate_schedule(epoch + 1, cfg.t_k, cfg.tau)
        return result
