"""Accuracy metrics, CAR verdicts and the loss-gap bound diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import threats
from .errors import ConfigError
from .model import final_layer_spectral_norm, forward_logits
from .rng import name_key, substream

EVAL_STEPS = 20
CE_LIPSCHITZ = math.sqrt(2.0)  # ||softmax(z) - e_y||_2 <= sqrt(2)
ZERO_ONE_BOUND = 1.0


@dataclass
class RunMetrics:
    time_step: int
    strategy: str
    clean_acc: float
    attack_acc: dict
    union_known: float
    avg_known: float
    union_all: float
    avg_all: float
    wall_time: float = 0.0
    union_known_loss: float = float("nan")
    epochs: int = 0
    best_epoch: int = -1
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CarCriteria:
    delta_known: float
    delta_unknown: float
    delta_t: int

    def __post_init__(self):
        if not 0 < self.delta_known < self.delta_unknown:
            raise ConfigError(
                f"CAR criteria need 0 < delta_known < delta_unknown, got {self.delta_known} and {self.delta_unknown}"
            )
        if self.delta_t < 0:
            raise ConfigError(f"CAR grace period must be >= 0, got {self.delta_t}")


def predict(model, x):
    return np.argmax(forward_logits(model.frozen(), x).data, axis=1)


def _batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def attacked_outcomes(model, tm, x, y, rng, steps=EVAL_STEPS, batch_size=500, image_shape=None):
    """Per-example (correct, cross-entropy) under ``tm`` with ``steps`` ascent steps."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    correct = np.zeros(len(y), dtype=bool)
    losses = np.zeros(len(y))
    frozen = model.frozen()
    for sl in _batches(len(y), batch_size):
        x_adv, _, _ = threats.perturb(frozen, x[sl], tm, threats.cross_entropy(y[sl]), rng, image_shape, steps=steps)
        logits = forward_logits(frozen, x_adv)
        correct[sl] = np.argmax(logits.data, axis=1) == y[sl]
        losses[sl] = T.softmax_cross_entropy(logits, y[sl]).data
    return correct, losses


def robust_correct(model, tm, dataset, rng=None, steps=EVAL_STEPS, image_shape=None):
    if rng is None:
        rng = substream(0, "eval", name_key(tm.label))
    shape = image_shape or (dataset.H, dataset.W)
    return attacked_outcomes(model, tm, dataset.images, dataset.labels, rng, steps, image_shape=shape)[0]


def robust_accuracy(model, tm, dataset, rng=None, steps=EVAL_STEPS, image_shape=None):
    if len(dataset) == 0:
        raise ValueError("robust_accuracy: empty dataset")
    return float(np.mean(robust_correct(model, tm, dataset, rng, steps, image_shape)))


def union_from_correct(correct_lists):
    if not correct_lists:
        raise ValueError("union accuracy needs at least one attack")
    return float(np.mean(np.logical_and.reduce([np.asarray(c, dtype=bool) for c in correct_lists])))


def union_accuracy(model, tms, dataset, rngs=None, steps=EVAL_STEPS, image_shape=None):
    """Fraction of examples classified correctly under every attack in ``tms``."""
    if not tms:
        raise ValueError("union_accuracy: empty attack list")
    rngs = rngs or [None] * len(tms)
    return union_from_correct([robust_correct(model, tm, dataset, r, steps, image_shape) for tm, r in zip(tms, rngs)])


def check_car(timeline, criteria, introduction_times):
    """Verdict per time step for a timeline of ``(t, union_robust_loss)`` pairs.

    For ``t > 0`` the binding threshold is ``delta_unknown`` when some attack
    was introduced at ``T < t`` with ``t - T < delta_t``, otherwise
    ``delta_known``.  ``t = 0`` is not judged.
    """
    steps = {int(t) for t, _ in timeline}
    missing = sorted(set(int(t) for t in introduction_times) - steps)
    if missing:
        raise ValueError(f"check_car: timeline lacks introduction time(s) {missing}")
    verdicts = []
    for t, loss in timeline:
        if t == 0:
            verdicts.append((t, "exempt", None))
            continue
        grace = any(tp < t and t - tp < criteria.delta_t for tp in introduction_times)
        if grace:
            verdicts.append((t, "grace-ok" if loss <= criteria.delta_unknown else "violated", "delta_unknown"))
        else:
            verdicts.append((t, "steady-ok" if loss <= criteria.delta_known else "violated", "delta_known"))
    return verdicts


# bound diagnostics ----------------------------------------------------------


@dataclass
class BoundCheck:
    lhs: float
    rhs_distance_term: float
    hoeffding_d: float | None
    lipschitz: float

    @property
    def holds(self):
        return self.lhs <= self.rhs_distance_term


def hoeffding_term(n, rho, bound=ZERO_ONE_BOUND):
    return bound * math.sqrt(math.log(rho / 2) / (-2 * n))


def _per_example_losses(logits, y, loss_kind):
    if loss_kind == "cross_entropy":
        return T.softmax_cross_entropy(T.Tensor(logits), y).data
    if loss_kind == "zero_one":
        return (np.argmax(logits, axis=1) != y).astype(np.float64)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _logits(model, x):
    return forward_logits(model.frozen(), np.atleast_2d(x)).data


def _certified_terms(model, x, y, candidate_sets, loss_kind):
    """Per-example max loss and max logit distance over explicit candidate sets."""
    worst_loss = np.empty(len(y))
    worst_dist = np.empty(len(y))
    for i, cands in enumerate(candidate_sets):
        # clean point and candidates share one forward pass so identical rows give identical logits
        both = _logits(model, np.vstack([x[i:i + 1], np.atleast_2d(cands)]))
        lg = both[1:]
        worst_loss[i] = _per_example_losses(lg, np.full(lg.shape[0], y[i]), loss_kind).max()
        worst_dist[i] = np.sqrt(((lg - both[0]) ** 2).sum(axis=1)).max()
    return worst_loss, worst_dist


def _pgd_terms(model, x, y, tm, rng, steps, loss_kind, image_shape):
    frozen = model.frozen()
    x_adv, _, _ = threats.perturb(frozen, x, tm, threats.cross_entropy(y), rng, image_shape, steps=steps)
    worst_loss = _per_example_losses(_logits(model, x_adv), y, loss_kind)
    clean = _logits(model, x)
    _, _, dist = threats.perturb(frozen, x, tm, threats.logit_distance(clean), rng, image_shape, steps=steps)
    return worst_loss, dist


def _gap_terms(model, x, y, tm1, tm2, candidates, rng, steps, loss_kind, image_shape):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if candidates is not None:
        l1, d1 = _certified_terms(model, x, y, candidates[0], loss_kind)
        l2, d2 = _certified_terms(model, x, y, candidates[1], loss_kind)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        l1, d1 = _pgd_terms(model, x, y, tm1, rng, steps, loss_kind, image_shape)
        l2, d2 = _pgd_terms(model, x, y, tm2, rng, steps, loss_kind, image_shape)
    return l1, l2, d1, d2


def _lipschitz(loss_kind):
    return CE_LIPSCHITZ if loss_kind == "cross_entropy" else math.inf


def _distance_term(m1, d1, d2):
    # the 0-1 loss has no finite Lipschitz constant, so its distance term is vacuous
    return m1 * float(np.mean(d1 + d2)) if math.isfinite(m1) else math.inf


def loss_gap_bound_check(model, x, y, tm1=None, tm2=None, candidates=None, loss_kind="cross_entropy",
                         rho=0.05, rng=None, steps=EVAL_STEPS, image_shape=None):
    """``|L1 - L2|`` against ``M1 * mean(max dist in C1 + max dist in C2)``.

    Pass ``candidates=(sets1, sets2)`` (one finite set per example) for
    certification with exact maximizers; otherwise the maxima are
    approximated by PGD with ``tm1`` / ``tm2``.  The Hoeffding term is only
    reported for the bounded 0-1 loss.
    """
    l1, l2, d1, d2 = _gap_terms(model, x, y, tm1, tm2, candidates, rng, steps, loss_kind, image_shape)
    m1 = _lipschitz(loss_kind)
    lhs = abs(float(l1.mean() - l2.mean()))
    rhs = _distance_term(m1, d1, d2)
    d = hoeffding_term(len(l1), rho) if loss_kind == "zero_one" else None
    return BoundCheck(lhs, rhs, d, m1)


def union_clean_gap_check(model, x, y, tm1=None, tm2=None, candidates=None, loss_kind="cross_entropy",
                          rho=0.05, rng=None, steps=EVAL_STEPS, image_shape=None):
    """Union-versus-clean loss gap against the same logit-distance sum."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    l1, l2, d1, d2 = _gap_terms(model, x, y, tm1, tm2, candidates, rng, steps, loss_kind, image_shape)
    clean = _per_example_losses(_logits(model, x), y, loss_kind)
    m1 = _lipschitz(loss_kind)
    lhs = float(np.maximum(l1, l2).mean() - clean.mean())
    rhs = _distance_term(m1, d1, d2)
    d = hoeffding_term(len(l1), rho) if loss_kind == "zero_one" else None
    return BoundCheck(lhs, rhs, d, m1)


def rep_bound_check(model, x1, x2, spectral_norm=None):
    """Per-pair ``||h(x1) - h(x2)||`` and ``||W||_2 * ||g(x1) - g(x2)||``."""
    frozen = model.frozen()
    h1, g1 = forward_logits(frozen, np.atleast_2d(x1), return_rep=True)
    h2, g2 = forward_logits(frozen, np.atleast_2d(x2), return_rep=True)
    if spectral_norm is None:
        spectral_norm = final_layer_spectral_norm(model)
    logit_dist = np.sqrt(((h1.data - h2.data) ** 2).sum(axis=1))
    rep_dist = np.sqrt(((g1.data - g2.data) ** 2).sum(axis=1))
    return logit_dist, spectral_norm * rep_dist


@dataclass
class Correlation:
    r: float | None
    n: int

    @property
    def defined(self):
        return self.r is not None


def correlation_diagnostic(loss_gaps, distance_sums):
    """Pearson correlation of two per-epoch series; undefined when either is constant."""
    a = np.asarray(loss_gaps, dtype=np.float64)
    b = np.asarray(distance_sums, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"correlation_diagnostic: series shapes {a.shape} and {b.shape} differ")
    if a.size < 3:
        raise ValueError(f"correlation_diagnostic: need at least 3 points, got {a.size}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0 or sb == 0:
        return Correlation(None, a.size)
    return Correlation(max(-1.0, min(1.0, float(da @ db) / (sa * sb))), a.size)


def gap_history_point(model, x, y, tm1, tm2, rng, steps=EVAL_STEPS, image_shape=None):
    """One diagnostic sample: (union minus clean loss gap, mean logit-distance sum)."""
    check = union_clean_gap_check(model, x, y, tm1, tm2, rng=rng, steps=steps, image_shape=image_shape)
    return check.lhs, check.rhs_distance_term / check.lipschitz
