"""Oracle certification suite behind ``crt-lab verify``.

Each check builds tiny random instances, runs the production code path and
the matching oracle from :mod:`crtlab.oracle`, and returns the raw
measurements together with a pass verdict at the documented tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from . import oracle as O
from . import tensor as T
from . import threats
from .model import MlpModel, final_layer_spectral_norm, forward_logits
from .rng import substream
from .threats import ThreatModel
from .trainer import RunningErr, croce_probabilities, select_attack_croce

GRAD_RTOL = 1e-4
ATTACK_RATIO = 0.95
ATTACK_QUORUM = 0.90
SANDWICH_TOL = 1e-9
SPECTRAL_TOL = 1e-6
CROCE_TOL = 0.02


@dataclass
class CheckResult:
    name: str
    passed: bool
    instances: int
    candidates: int = 0
    summary: str = ""
    values: dict = field(default_factory=dict)

    def line(self):
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: {self.instances} instances, {self.candidates} candidates; {self.summary}"


def random_model(rng, d, hidden, k, scale=1.0):
    dims = [d, *hidden, k]
    ws = [rng.normal(0.0, scale / math.sqrt(a), size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
    bs = [rng.normal(0.0, 0.1, size=b) for b in dims[1:]]
    return MlpModel.from_arrays(ws, bs)


def _random_arch(rng, d=None):
    d = int(rng.integers(2, 7)) if d is None else d
    hidden = tuple(int(h) for h in rng.integers(2, 7, size=int(rng.integers(1, 3))))
    return d, hidden, int(rng.integers(2, 5))


# gradients -------------------------------------------------------------------


def gradient_errors(seed, n=100):
    """Relative error between tape and central-difference gradients of the mean cross-entropy."""
    rng = substream(seed, "verify", 0)
    errs = []
    for _ in range(n):
        d, hidden, k = _random_arch(rng)
        model = random_model(rng, d, hidden, k)
        batch = int(rng.integers(1, 5))
        x = rng.uniform(0.0, 1.0, size=(batch, d))
        y = rng.integers(0, k, size=batch)
        params = model.parameters()
        T.backward(T.mean(T.softmax_cross_entropy(forward_logits(model, x), y)))
        tape = [p.grad.copy() for p in params]
        for p in params:
            p.grad = None
        arrays = [p.data for p in params]
        weights, biases = arrays[0::2], arrays[1::2]
        fd = O.finite_diff_grad(lambda: float(O.cross_entropy(O.mlp_forward(weights, biases, x)[0], y).mean()), arrays)
        a = np.concatenate([g.ravel() for g in tape])
        b = np.concatenate([g.ravel() for g in fd])
        errs.append(float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)))
    return np.array(errs)


def check_gradients(seed=0, n=100):
    errs = gradient_errors(seed, n)
    return CheckResult("gradients", bool(np.all(errs <= GRAD_RTOL)), n, 0,
                       f"max relative error {errs.max():.2e} (limit {GRAD_RTOL:g})", {"errors": errs})


# attacks versus enumeration ------------------------------------------------------


def attack_instance(kind, rng):
    """``(model, x, y, tm, image_shape, candidates)`` with an enumerable candidate grid."""
    if kind in ("linf", "l2"):
        d = 4
        model = random_model(rng, d, (8,), 3, scale=2.0)
        x = rng.uniform(0.2, 0.8, size=d)
        eps = float(rng.uniform(0.05, 0.2))
        gen = O.linf_candidates if kind == "linf" else O.l2_candidates
        cands = gen(x, eps, range(d))
        shape = None
    elif kind == "spatial_flow":
        shape = (4, 4)
        model = random_model(rng, 16, (8,), 3, scale=2.0)
        x = rng.uniform(0.0, 1.0, size=16)
        eps = float(rng.uniform(0.3, 1.0))
        flat = rng.choice(16, size=2, replace=False)
        cands, _ = O.flow_candidates(x, shape, eps, [divmod(int(p), 4) for p in flat])
    else:
        shape = None
        model = random_model(rng, 16, (8,), 3, scale=2.0)
        x = rng.uniform(0.0, 1.0, size=16)
        eps = float(rng.uniform(0.05, 0.3))
        bins = int(rng.choice([2, 4]))
        cands, _ = O.intensity_candidates(x, eps, bins)
        return model, x, int(rng.integers(3)), ThreatModel(kind, eps, bins=bins), shape, cands
    return model, x, int(rng.integers(3)), ThreatModel(kind, eps), shape, cands


def attack_ratios(kind, seed, n=200, steps=10):
    """Per-instance ratio of PGD cross-entropy to the enumerated maximum, and the candidate total."""
    rng = substream(seed, "verify", 1, threats.KINDS.index(kind))
    ratios, total = [], 0
    for _ in range(n):
        model, x, y, tm, shape, cands = attack_instance(kind, rng)
        total += len(cands)
        _, best = O.brute_force_attack(model, x, y, cands)
        x_adv, params, _ = threats.perturb(model, x[None], tm, threats.cross_entropy(np.array([y])), rng, shape, steps=steps)
        if not threats.membership(tm, x[None], x_adv, params, shape):
            ratios.append(-math.inf)
            continue
        got = float(O.cross_entropy(O.logits_of(model, x_adv), y)[0])
        ratios.append(got / best if best > 0 else 1.0)
    return np.array(ratios), total


def check_attack(kind, seed=0, n=200):
    ratios, total = attack_ratios(kind, seed, n)
    frac = float(np.mean(ratios >= ATTACK_RATIO))
    return CheckResult(f"attack[{kind}]", frac >= ATTACK_QUORUM, n, total,
                       f"{frac:.1%} of instances reach {ATTACK_RATIO:.0%} of the enumerated maximum", {"ratios": ratios})


# regularizer sandwich ---------------------------------------------------------


def sandwich_triples(seed, n=500):
    """``(alr, vr)`` exact values on random (model, input, candidate-set) triples; every set contains ``x``."""
    rng = substream(seed, "verify", 2)
    out, total = [], 0
    for i in range(n):
        d, hidden, k = _random_arch(rng)
        model = random_model(rng, d, hidden, k)
        x = rng.uniform(0.0, 1.0, size=d)
        eps = float(rng.uniform(0.01, 0.5))
        active = range(min(d, 3))
        cands = (O.linf_candidates if i % 2 == 0 else O.l2_candidates)(x, eps, active)
        total += len(cands)
        layer = "logits" if i % 4 < 2 else "representation"
        out.append((O.exact_regularizer(model, x, cands, "ALR", layer), O.exact_regularizer(model, x, cands, "VR", layer)))
    return np.array(out), total


def check_sandwich(seed=0, n=500):
    vals, total = sandwich_triples(seed, n)
    alr, vr = vals[:, 0], vals[:, 1]
    ok = (alr <= vr + SANDWICH_TOL) & (vr <= 2 * alr + SANDWICH_TOL)
    return CheckResult("sandwich", bool(ok.all()), n, total, f"{int(ok.sum())}/{n} satisfy ALR <= VR <= 2 ALR",
                       {"alr": alr, "vr": vr})


# loss-gap certification -----------------------------------------------------------


def loss_gap_instances(seed, n=100, batch=4):
    """Certification-mode bound checks; returns ``(gap_checks, union_checks, candidate_total)``."""
    rng = substream(seed, "verify", 3)
    gaps, unions, total = [], [], 0
    for _ in range(n):
        d, hidden, k = _random_arch(rng, d=int(rng.integers(3, 6)))
        model = random_model(rng, d, hidden, k, scale=float(rng.uniform(0.5, 3.0)))
        x = rng.uniform(0.0, 1.0, size=(batch, d))
        y = rng.integers(0, k, size=batch)
        e1, e2 = float(rng.uniform(0.01, 0.3)), float(rng.uniform(0.01, 0.6))
        sets1 = [O.linf_candidates(xi, e1, range(3)) for xi in x]
        sets2 = [O.l2_candidates(xi, e2, range(3)) for xi in x]
        total += sum(map(len, sets1)) + sum(map(len, sets2))
        gaps.append(M.loss_gap_bound_check(model, x, y, candidates=(sets1, sets2)))
        unions.append(M.union_clean_gap_check(model, x, y, candidates=(sets1, sets2)))
    return gaps, unions, total


def check_loss_gap(seed=0, n=100):
    gaps, unions, total = loss_gap_instances(seed, n)
    ok_g = sum(c.holds for c in gaps)
    ok_u = sum(c.holds for c in unions)
    return CheckResult("loss_gap", ok_g == n and ok_u == n, n, total,
                       f"gap bound {ok_g}/{n}, union-clean bound {ok_u}/{n}", {"gap": gaps, "union": unions})


# final-layer bound ------------------------------------------------------------------


def rep_bound_pairs(seed, n_pairs=1000, per_model=50):
    """``(logit_dist, bound, spectral_error)`` arrays over random pairs drawn from random models."""
    rng = substream(seed, "verify", 4)
    lhs, rhs, spec_err = [], [], []
    for _ in range(math.ceil(n_pairs / per_model)):
        d, hidden, k = _random_arch(rng)
        model = random_model(rng, d, hidden, k, scale=float(rng.uniform(0.5, 3.0)))
        a = rng.uniform(0.0, 1.0, size=(per_model, d))
        b = np.clip(a + rng.normal(0.0, float(rng.uniform(0.01, 0.5)), size=a.shape), 0.0, 1.0)
        sigma = final_layer_spectral_norm(model)
        ref = O.spectral_norm_svd(model.final_layer_matrix())
        spec_err.append(abs(sigma - ref))
        l, r = M.rep_bound_check(model, a, b, spectral_norm=sigma)
        lhs.append(l)
        rhs.append(r)
    return np.concatenate(lhs)[:n_pairs], np.concatenate(rhs)[:n_pairs], np.array(spec_err)


def check_rep_bound(seed=0, n=1000):
    lhs, rhs, spec = rep_bound_pairs(seed, n)
    ok = lhs <= rhs * (1 + 1e-12) + 1e-12
    passed = bool(ok.all()) and bool(np.all(spec <= SPECTRAL_TOL))
    return CheckResult("rep_bound", passed, n, 0,
                       f"{int(ok.sum())}/{n} pairs bounded, spectral norm error {spec.max():.1e}", {"lhs": lhs, "rhs": rhs})


# union accuracy -------------------------------------------------------------------


def union_instances(seed, n=50, batch=6):
    """Per-instance ``(union_via_metrics, union_via_joint_enumeration, per_attack_accuracies)``."""
    rng = substream(seed, "verify", 5)
    out, total = [], 0
    for _ in range(n):
        d, hidden, k = _random_arch(rng, d=4)
        model = random_model(rng, d, hidden, k, scale=2.0)
        x = rng.uniform(0.0, 1.0, size=(batch, d))
        logits = O.logits_of(model, x)
        y = np.argmax(logits, axis=1)
        flip = rng.random(batch) < 0.2
        y[flip] = (y[flip] + 1) % k
        eps = rng.uniform(0.02, 0.4, size=2)
        sets = [[O.linf_candidates(xi, eps[0], range(d)) for xi in x], [O.l2_candidates(xi, eps[1], range(d)) for xi in x]]
        correct = []
        for family in sets:
            total += sum(map(len, family))
            correct.append(np.array([np.all(np.argmax(O.logits_of(model, c), axis=1) == yi) for c, yi in zip(family, y)]))
        joint = np.mean([np.all(np.argmax(O.logits_of(model, np.vstack([sets[0][i], sets[1][i]])), axis=1) == y[i])
                         for i in range(batch)])
        out.append((M.union_from_correct(correct), float(joint), [float(c.mean()) for c in correct]))
    return out, total


def check_union(seed=0, n=50):
    cases, total = union_instances(seed, n)
    exact = sum(u == j for u, j, _ in cases)
    below = sum(u <= min(accs) for u, _, accs in cases)
    return CheckResult("union", exact == n and below == n, n, total,
                       f"{exact}/{n} equal joint enumeration, {below}/{n} at most the weakest attack", {"cases": cases})


# Croce sampler ------------------------------------------------------------------


def croce_frequencies(errors, draws, seed):
    known = [ThreatModel("linf", 0.1, name=f"a{i}") for i in range(len(errors))]
    running = RunningErr()
    for tm, e in zip(known, errors):
        if e > 0:
            running.update(tm.label, e)
    rng = substream(seed, "verify", 6)
    counts = np.zeros(len(known))
    index = {tm.label: i for i, tm in enumerate(known)}
    for _ in range(draws):
        counts[index[select_attack_croce(running, known, rng).label]] += 1
    return counts / draws, croce_probabilities(running, known)


def check_croce(seed=0, draws=100_000, profiles=3):
    rng = substream(seed, "verify", 7)
    worst = 0.0
    cases = [rng.uniform(0.0, 3.0, size=int(rng.integers(2, 6))) for _ in range(profiles)] + [np.zeros(3)]
    for errs in cases:
        freq, _ = croce_frequencies(errs, draws, seed)
        target = errs / errs.sum() if errs.sum() > 0 else np.full(len(errs), 1.0 / len(errs))
        worst = max(worst, float(np.abs(freq - target).max()))
    return CheckResult("croce", worst <= CROCE_TOL, len(cases), draws * len(cases),
                       f"largest frequency deviation {worst:.4f} (limit {CROCE_TOL})")


def run_suite(seed=0, scale=1.0):
    """Every check at ``scale`` times its default instance count."""
    def sz(n):
        return max(1, int(round(n * scale)))

    results = [check_gradients(seed, sz(100))]
    results += [check_attack(kind, seed, sz(200)) for kind in threats.KINDS]
    results += [
        check_sandwich(seed, sz(500)),
        check_loss_gap(seed, sz(100)),
        check_rep_bound(seed, sz(1000)),
        check_union(seed, sz(50)),
        check_croce(seed, sz(100_000)),
    ]
    return results
