"""Threat models and their projected-gradient attacks.

Four constraint families are supported:

``linf``            additive perturbation with ``||x' - x||_inf <= eps``
``l2``              additive perturbation with ``||x' - x||_2 <= eps``
``spatial_flow``    per-pixel displacement field ``f``, ``||f||_inf <= eps`` pixels,
                    with ``x'`` read off ``x`` by bilinear sampling
``intensity_shift`` per-bin shifts ``s`` over ``bins`` uniform intensity bins,
                    ``x' = clamp(x + s[bin(x)])``, ``||s||_inf <= eps``

The flow and intensity families are simplified stand-ins for smooth spatial
warps and colour remapping: a hard box budget on the transform parameters
replaces the smoothness penalties of the full-size attacks.

Every attack ascends an :class:`AttackObjective` (cross-entropy or a logit /
representation distance) by iterated gradient steps on the perturbation
parameters, projecting onto the budget and the ``[0, 1]`` box after each step.
The best iterate per example is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import forward_logits

KINDS = ("linf", "l2", "spatial_flow", "intensity_shift")


def default_step_size(kind, epsilon):
    if kind == "linf":
        return epsilon / 4  # 2/255 at eps = 8/255
    if kind == "l2":
        return 0.15 * epsilon  # 0.075 at eps = 0.5
    return epsilon / 8


@dataclass(frozen=True)
class ThreatModel:
    kind: str
    epsilon: float
    steps: int = 10
    step_size: float | None = None
    name: str = ""
    introduced_at: int = 0
    bins: int = 8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown threat kind {self.kind!r}; expected one of {KINDS}")
        if self.epsilon < 0 or self.steps < 0:
            raise ValueError(f"{self.label}: epsilon and steps must be >= 0")
        if self.step_size is None:
            object.__setattr__(self, "step_size", default_step_size(self.kind, self.epsilon))
        if self.steps > 0 and self.epsilon > 0 and not self.step_size > 0:
            raise ValueError(f"{self.label}: step_size must be > 0 when steps > 0")
        if self.bins < 1:
            raise ValueError(f"{self.label}: bins must be >= 1")

    @property
    def label(self):
        return self.name or f"{self.kind}({self.epsilon:g})"

    def with_steps(self, steps):
        return ThreatModel(self.kind, self.epsilon, steps, self.step_size, self.name, self.introduced_at, self.bins)


@dataclass(frozen=True)
class AttackObjective:
    """What an attack maximizes, per example.

    ``kind`` is ``"cross_entropy"`` (``target`` = labels), ``"logit_l2"`` or
    ``"rep_l2"`` (``target`` = reference logits / representations).
    """

    kind: str
    target: np.ndarray

    def __call__(self, model, x_adv):
        if self.kind == "cross_entropy":
            return T.softmax_cross_entropy(forward_logits(model, x_adv), self.target)
        if self.kind == "logit_l2":
            return T.l2_norm(forward_logits(model, x_adv) - self.target)
        if self.kind == "rep_l2":
            _, rep = forward_logits(model, x_adv, return_rep=True)
            return T.l2_norm(rep - self.target)
        raise ValueError(f"unknown objective {self.kind!r}")


def cross_entropy(labels):
    return AttackObjective("cross_entropy", np.asarray(labels))


def logit_distance(reference_logits):
    return AttackObjective("logit_l2", np.asarray(reference_logits, dtype=np.float64))


def representation_distance(reference_rep):
    return AttackObjective("rep_l2", np.asarray(reference_rep, dtype=np.float64))


def project_linf(delta, epsilon):
    return np.clip(delta, -epsilon, epsilon)


def project_l2(delta, epsilon):
    """Rescale rows (last axis) whose L2 norm exceeds ``epsilon`` onto the sphere."""
    delta = np.asarray(delta, dtype=np.float64)
    norm = np.sqrt((delta * delta).sum(axis=-1, keepdims=True))
    scale = np.where(norm > epsilon, epsilon / np.where(norm > 0, norm, 1.0), 1.0)
    return delta * scale


def infer_image_shape(d):
    side = math.isqrt(d)
    if side * side != d:
        raise ValueError(f"cannot infer a square image from {d} features; pass image_shape")
    return side, side


def intensity_bins(x, bins):
    return np.minimum(np.floor(x * bins), bins - 1).astype(np.int64)


class Perturbation:
    """Parameterization of one threat family for a fixed clean batch ``x``."""

    def __init__(self, tm, x, image_shape=None):
        self.tm = tm
        self.x = np.asarray(x, dtype=np.float64)
        self.n, self.d = self.x.shape
        self.eps = float(tm.epsilon)
        if tm.kind == "spatial_flow":
            self.H, self.W = image_shape or infer_image_shape(self.d)
            rr, cc = np.meshgrid(np.arange(self.H, dtype=np.float64), np.arange(self.W, dtype=np.float64), indexing="ij")
            self.base = np.stack([rr, cc], axis=-1)
        elif tm.kind == "intensity_shift":
            self.bin_index = intensity_bins(self.x, tm.bins)

    @property
    def param_shape(self):
        kind = self.tm.kind
        if kind == "spatial_flow":
            return (self.n, self.H, self.W, 2)
        if kind == "intensity_shift":
            return (self.n, self.tm.bins)
        return (self.n, self.d)

    def zero(self):
        return np.zeros(self.param_shape)

    def random_start(self, rng):
        if self.tm.kind == "l2":
            direction = rng.normal(size=self.param_shape)
            norm = np.linalg.norm(direction, axis=1, keepdims=True)
            direction /= np.where(norm > 0, norm, 1.0)
            radius = rng.uniform(0.0, 1.0, size=(self.n, 1)) * self.eps
            return self.project(direction * radius)
        return self.project(rng.uniform(-self.eps, self.eps, size=self.param_shape))

    def project(self, params):
        if self.tm.kind == "l2":
            params = project_l2(params, self.eps)
        else:
            params = project_linf(params, self.eps)
        if self.tm.kind in ("linf", "l2"):
            params = np.clip(self.x + params, 0.0, 1.0) - self.x
        return params

    def step(self, params, grad):
        if self.tm.kind == "l2":
            norm = np.linalg.norm(grad, axis=1, keepdims=True)
            unit = np.where(norm > 0, grad / np.where(norm > 0, norm, 1.0), 0.0)
            return params + self.tm.step_size * unit
        return params + self.tm.step_size * np.sign(grad)

    def apply(self, params):
        """Perturbed batch as a Tensor, differentiable in ``params`` when it is one."""
        kind = self.tm.kind
        if kind in ("linf", "l2"):
            return T.add(self.x, params)
        if kind == "spatial_flow":
            coords = T.add(self.base, params)
            grid = self.x.reshape(self.n, self.H, self.W)
            return T.reshape(T.bilinear_sample(grid, coords), (self.n, self.d))
        shift = T.take_along_last(params, self.bin_index)
        return T.clamp(T.add(self.x, shift), 0.0, 1.0)

    def apply_numpy(self, params):
        return self.apply(T.Tensor(params)).data


def _ascend(perturbation, objective, model, params, steps):
    best_params = params.copy()
    best_obj = np.full(perturbation.n, -np.inf)
    for it in range(steps + 1):
        p = T.Tensor(params, requires_grad=True)
        obj = objective(model, perturbation.apply(p))
        improved = obj.data > best_obj
        best_obj = np.where(improved, obj.data, best_obj)
        best_params[improved] = params[improved]
        if it == steps:
            break
        T.backward(T.tensor_sum(obj))
        params = perturbation.project(perturbation.step(params, p.grad))
    return best_params, best_obj


def perturb(model, x, tm, objective, rng, image_shape=None, random_start=True, steps=None):
    """Run the attack; returns ``(x_adv, params, objective_values)``."""
    x = np.asarray(x, dtype=np.float64)
    steps = tm.steps if steps is None else steps
    pert = Perturbation(tm, x, image_shape)
    if tm.epsilon == 0:
        params = pert.zero()
        frozen = model.frozen()
        return x.copy(), params, objective(frozen, T.Tensor(x)).data
    params = pert.random_start(rng) if random_start else pert.zero()
    params, best = _ascend(pert, objective, model.frozen(), params, steps)
    return pert.apply_numpy(params), params, best


def attack(model, x, y, tm, objective=None, rng=None, image_shape=None, steps=None):
    """Adversarial batch ``x'`` in ``C(x)`` maximizing ``objective`` (cross-entropy on ``y`` by default)."""
    if objective is None:
        objective = cross_entropy(y)
    if rng is None:
        rng = np.random.default_rng(0)
    return perturb(model, x, tm, objective, rng, image_shape=image_shape, steps=steps)[0]


def membership_mask(tm, x, x_adv, params=None, image_shape=None, tol=1e-12):
    """Per-example verdict that ``x_adv`` lies in ``C(x)`` and in the unit box."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    in_box = np.all((x_adv >= 0.0) & (x_adv <= 1.0), axis=1)
    diff = x_adv - x
    if tm.kind == "linf":
        ok = np.max(np.abs(diff), axis=1, initial=0.0) <= tm.epsilon + tol
    elif tm.kind == "l2":
        ok = np.sqrt((diff * diff).sum(axis=1)) <= tm.epsilon + tol
    elif params is None:
        ok = np.all(diff == 0, axis=1)
    else:
        params = np.asarray(params, dtype=np.float64)
        flat = params.reshape(params.shape[0], -1)
        within = np.max(np.abs(flat), axis=1, initial=0.0) <= tm.epsilon + tol
        rebuilt = Perturbation(tm, x, image_shape).apply_numpy(params)
        ok = within & np.all(np.abs(rebuilt - x_adv) <= 1e-12, axis=1)
    return ok & in_box


def membership(tm, x, x_adv, params=None, image_shape=None, tol=1e-12):
    x = np.atleast_2d(x)
    x_adv = np.atleast_2d(x_adv)
    return bool(np.all(membership_mask(tm, x, x_adv, params, image_shape, tol)))
