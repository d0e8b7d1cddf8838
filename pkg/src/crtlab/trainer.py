"""Continual robust training: initial adversarial training, then fine-tuning as attacks appear."""

from __future__ import annotations

import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics as M
from . import tensor as T
from . import threats
from .errors import NonFiniteError
from .model import MlpModel, forward_logits
from .optim import SgdState, lr_schedule, sgd_step
from .regularizers import RegularizerConfig, regularized_loss
from .rng import name_key, substream

log = logging.getLogger(__name__)

STRATEGIES = ("FT_SINGLE", "FT_MAX", "FT_CROCE", "SCRATCH_AVG", "SCRATCH_MAX", "SCRATCH_RANDOM")


class KnowledgeSet:
    """Attacks ordered by introduction time; ``at(t)`` is the set known at time ``t``."""

    def __init__(self, attacks):
        self.attacks = list(attacks)
        names = [tm.label for tm in self.attacks]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"attack names must be unique, repeated: {dupes}")
        times = [tm.introduced_at for tm in self.attacks]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError(f"introduction times must be non-decreasing in list order, got {times}")

    def at(self, t):
        return [tm for tm in self.attacks if tm.introduced_at <= t]

    def newest(self, t):
        known = self.at(t)
        if not known:
            raise ValueError(f"no attack known at t={t}")
        return known[-1]

    @property
    def times(self):
        return sorted({tm.introduced_at for tm in self.attacks})

    def __len__(self):
        return len(self.attacks)


@dataclass
class TrainConfig:
    epochs_initial: int = 30
    epochs_finetune: int = 10
    batch_size: int = 50
    base_lr_initial: float = 0.1
    lr_finetune: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    strategy: str = "FT_SINGLE"
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    regularize_initial: bool = True
    hidden: tuple = (64, 64)
    holdout_fraction: float = 0.1
    croce_window: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.epochs_initial < 1 or self.epochs_finetune < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")

    @property
    def label(self):
        reg = self.regularizer
        return self.strategy + (f"+{reg.kind}" if reg.active else "")


class RunningErr:
    """Arithmetic mean of the last ``window`` batch robust losses, per attack."""

    def __init__(self, window=50):
        self.window = window
        self._hist = {}

    def update(self, name, loss):
        if loss < 0:
            raise ValueError(f"robust loss must be >= 0, got {loss}")
        self._hist.setdefault(name, deque(maxlen=self.window)).append(float(loss))

    def value(self, name):
        hist = self._hist.get(name)
        return float(np.mean(hist)) if hist else 0.0

    def values(self, tms):
        return np.array([self.value(tm.label) for tm in tms])


def croce_probabilities(running, known):
    errs = running.values(known)
    total = errs.sum()
    if total <= 0:
        return np.full(len(known), 1.0 / len(known))
    return errs / total


def select_attack_croce(running, known, rng):
    """Sample an attack with probability proportional to its running robust loss."""
    if not known:
        raise ValueError("select_attack_croce: empty knowledge set")
    probs = croce_probabilities(running, known)
    return known[int(rng.choice(len(known), p=probs))]


def attacked_losses(model, x, y, tms, rng, image_shape=None):
    """Per-example cross-entropy Tensors, one per attack, differentiable in the parameters."""
    out = []
    for tm in tms:
        x_adv = threats.attack(model, x, y, tm, rng=rng, image_shape=image_shape)
        out.append(T.softmax_cross_entropy(forward_logits(model, x_adv), y))
    return out


def batch_objective_max(model, x, y, known, rng, image_shape=None):
    losses = attacked_losses(model, x, y, known, rng, image_shape)
    worst = losses[0]
    for loss in losses[1:]:
        worst = T.maximum(worst, loss)
    return T.mean(worst)


def batch_objective_avg(model, x, y, known, rng, image_shape=None):
    losses = attacked_losses(model, x, y, known, rng, image_shape)
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return T.mean(total * (1.0 / len(losses)))


def batch_objective_random(model, x, y, known, rng, select_rng=None, image_shape=None):
    """One attack drawn uniformly (from ``select_rng``) for the whole batch."""
    select_rng = rng if select_rng is None else select_rng
    tm = known[int(select_rng.integers(len(known)))]
    return T.mean(attacked_losses(model, x, y, [tm], rng, image_shape)[0]), tm


class _Streams:
    def __init__(self, seed, t):
        self.shuffle = substream(seed, "sampling", t)
        self.attack = substream(seed, "attack", t)
        self.choice = substream(seed, "choice", t)
        self.reg = substream(seed, "reg", t)


def _batch_loss(model, xb, yb, mode, known, streams, running, image_shape):
    """Training loss for one batch and the attack whose regularizer it uses."""
    if mode == "clean":
        return T.mean(T.softmax_cross_entropy(forward_logits(model, xb), yb)), None
    if mode in ("FT_SINGLE", "single"):
        tm = known[-1]
        return T.mean(attacked_losses(model, xb, yb, [tm], streams.attack, image_shape)[0]), tm
    if mode == "FT_CROCE":
        tm = select_attack_croce(running, known, streams.choice)
        loss = T.mean(attacked_losses(model, xb, yb, [tm], streams.attack, image_shape)[0])
        running.update(tm.label, loss.item())
        return loss, tm
    if mode == "SCRATCH_RANDOM":
        return batch_objective_random(model, xb, yb, known, streams.attack, streams.choice, image_shape)
    # MAX / AVG regularize against one uniformly chosen known attack
    reg_tm = known[int(streams.choice.integers(len(known)))]
    if mode in ("FT_MAX", "SCRATCH_MAX"):
        return batch_objective_max(model, xb, yb, known, streams.attack, image_shape), reg_tm
    if mode == "SCRATCH_AVG":
        return batch_objective_avg(model, xb, yb, known, streams.attack, image_shape), reg_tm
    raise ValueError(f"unknown training mode {mode!r}")


def selection_score(model, holdout, known, mode, batch_size, seed, t, image_shape=None):
    """Held-out known-attack score used to pick the best epoch.

    MAX-type training is scored by union accuracy, AVG by mean accuracy, and
    single-attack-per-batch strategies by accuracy with one attack sampled
    uniformly per batch.  The random draws are identical for every epoch.
    """
    if mode == "clean" or not known:
        return float(np.mean(M.predict(model, holdout.images) == holdout.labels))
    rng = substream(seed, "select", t)
    x, y = holdout.images, holdout.labels
    if mode in ("FT_MAX", "SCRATCH_MAX", "SCRATCH_AVG"):
        correct = [
            M.attacked_outcomes(model, tm, x, y, rng, steps=tm.steps, image_shape=image_shape)[0] for tm in known
        ]
        if mode == "SCRATCH_AVG":
            return float(np.mean([c.mean() for c in correct]))
        return M.union_from_correct(correct)
    hits = 0
    for start in range(0, len(y), batch_size):
        sl = slice(start, start + batch_size)
        tm = known[int(rng.integers(len(known)))]
        hits += int(M.attacked_outcomes(model, tm, x[sl], y[sl], rng, steps=tm.steps, image_shape=image_shape)[0].sum())
    return hits / len(y)


def run_epochs(model, fit, holdout, known, cfg, mode, epochs, lr_fn, t, image_shape=None, epoch_callback=None):
    """Train ``model`` in place; returns ``(best_model, history)`` with history rows per epoch."""
    params = model.parameters()
    state = SgdState(lr_fn(0), cfg.momentum, cfg.weight_decay)
    streams = _Streams(cfg.seed, t)
    running = RunningErr(cfg.croce_window)
    reg_cfg = cfg.regularizer
    history = []
    best_model, best_score, best_epoch = None, -np.inf, -1
    n = len(fit)
    for epoch in range(epochs):
        state.learning_rate = lr_fn(epoch)
        order = streams.shuffle.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb, yb = fit.images[idx], fit.labels[idx]
            try:
                loss, reg_tm = _batch_loss(model, xb, yb, mode, known, streams, running, image_shape)
                if reg_tm is not None:
                    loss = regularized_loss(model, xb, loss, reg_cfg, reg_tm, streams.reg, image_shape)
            except NonFiniteError as exc:
                raise NonFiniteError(f"t={t} epoch={epoch} batch={b}: {exc}") from exc
            T.backward(loss)
            sgd_step(params, state)
            total += loss.item() * len(idx)
            count += len(idx)
        score = selection_score(model, holdout, known, mode, cfg.batch_size, cfg.seed, t, image_shape)
        history.append({"epoch": epoch, "lr": state.learning_rate, "train_loss": total / count, "score": score})
        log.info("t=%d epoch=%d loss=%.4f score=%.4f", t, epoch, total / count, score)
        if score > best_score:
            best_model, best_score, best_epoch = model.copy(), score, epoch
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    best_model.metadata.update({"epoch": best_epoch, "time_step": t, "seed": cfg.seed})
    return best_model, history


def split_holdout(dataset, cfg):
    return dataset.holdout_split(cfg.holdout_fraction, substream(cfg.seed, "split"))


def init_model(dataset, cfg, t=0):
    dims = [dataset.images.shape[1], *cfg.hidden, dataset.k]
    return MlpModel.init(dims, substream(cfg.seed, "init", t))


def train_initial(dataset, tm_init, cfg, image_shape=None, epoch_callback=None):
    """Adversarial training against ``tm_init`` (clean training when ``None``); best held-out epoch wins."""
    fit, holdout = split_holdout(dataset, cfg)
    image_shape = image_shape or (dataset.H, dataset.W)
    model = init_model(dataset, cfg)
    run_cfg = cfg if cfg.regularize_initial else replace(cfg, regularizer=RegularizerConfig())
    known = [] if tm_init is None else [tm_init]
    mode = "clean" if tm_init is None else "single"
    return run_epochs(
        model, fit, holdout, known, run_cfg, mode, cfg.epochs_initial,
        lambda e: lr_schedule(e, cfg.epochs_initial, cfg.base_lr_initial), 0, image_shape, epoch_callback,
    )


def finetune(model, knowledge, t, dataset, cfg, image_shape=None, epoch_callback=None):
    """Adapt to ``K(t)`` with the configured strategy; SCRATCH_* strategies retrain from a fresh init."""
    known = knowledge.at(t)
    if not known:
        raise ValueError(f"finetune: K({t}) is empty")
    fit, holdout = split_holdout(dataset, cfg)
    image_shape = image_shape or (dataset.H, dataset.W)
    if cfg.strategy.startswith("SCRATCH"):
        fresh = init_model(dataset, cfg, t)
        return run_epochs(
            fresh, fit, holdout, known, cfg, cfg.strategy, cfg.epochs_initial,
            lambda e: lr_schedule(e, cfg.epochs_initial, cfg.base_lr_initial), t, image_shape, epoch_callback,
        )
    work = model.copy()
    # FT_SINGLE trains on known[-1] only but still selects epochs against all of K(t)
    return run_epochs(
        work, fit, holdout, known, cfg, cfg.strategy, cfg.epochs_finetune, lambda e: cfg.lr_finetune, t, image_shape,
        epoch_callback,
    )


def evaluate(model, knowledge, t, test, seed, strategy, steps=M.EVAL_STEPS, image_shape=None, workers=1):
    """Test metrics at time ``t``: clean, every scheduled attack, and known/all aggregates.

    Each attack owns its random stream, so ``workers > 1`` changes wall time only.
    """
    image_shape = image_shape or (test.H, test.W)
    x, y = test.images, test.labels
    clean = float(np.mean(M.predict(model, x) == y))

    def one(tm):
        rng = substream(seed, "eval", t, name_key(tm.label))
        return M.attacked_outcomes(model, tm, x, y, rng, steps, image_shape=image_shape)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, knowledge.attacks))
    else:
        outcomes = [one(tm) for tm in knowledge.attacks]
    correct = {tm.label: o[0] for tm, o in zip(knowledge.attacks, outcomes)}
    losses = {tm.label: o[1] for tm, o in zip(knowledge.attacks, outcomes)}
    known = [tm.label for tm in knowledge.at(t)]
    every = [tm.label for tm in knowledge.attacks]
    acc = {name: float(correct[name].mean()) for name in every}
    union_loss = float(np.max(np.stack([losses[n] for n in known]), axis=0).mean())
    return M.RunMetrics(
        time_step=t,
        strategy=strategy,
        clean_acc=clean,
        attack_acc=acc,
        union_known=M.union_from_correct([correct[n] for n in known]),
        avg_known=float(np.mean([acc[n] for n in known])),
        union_all=M.union_from_correct([correct[n] for n in every]),
        avg_all=float(np.mean([acc[n] for n in every])),
        union_known_loss=union_loss,
    )


def run_timeline(knowledge, train, test, cfg, image_shape=None, on_step=None, workers=1):
    """Full schedule: initial training at the first time step, then one adaptation per introduction time.

    Returns ``[(t, model, RunMetrics, history), ...]``.
    """
    out = []
    model = None
    image_shape = image_shape or (train.H, train.W)
    for i, t in enumerate(knowledge.times):
        start = time.perf_counter()
        if i == 0:
            model, history = train_initial(train, knowledge.at(t)[0], cfg, image_shape)
            label = "initial" + (f"+{cfg.regularizer.kind}" if cfg.regularizer.active and cfg.regularize_initial else "")
        else:
            model, history = finetune(model, knowledge, t, train, cfg, image_shape)
            label = cfg.label
        wall = time.perf_counter() - start
        metrics = evaluate(model, knowledge, t, test, cfg.seed, label, image_shape=image_shape, workers=workers)
        metrics.wall_time = wall
        metrics.epochs = len(history)
        metrics.best_epoch = int(model.metadata.get("epoch", -1))
        out.append((t, model, metrics, history))
        if on_step is not None:
            on_step(t, model, metrics, history)
    return out
