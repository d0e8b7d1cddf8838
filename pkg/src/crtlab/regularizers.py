"""Logit-distance regularizers added to the training loss as ``L + lambda * R``.

* ``ALR`` - mean over the batch of ``max_{x' in C(x)} ||h(x') - h(x)||_2``
* ``VR``  - mean of ``max_{x', x'' in C(x)} ||h(x') - h(x'')||_2``
* ``UR``  - mean of ``||h(clip(x + u)) - h(x)||_2`` with ``u ~ U(-sigma, sigma)^d``
* ``GR``  - same with ``u ~ N(0, sigma^2)`` per coordinate

The inner maximizers of ALR/VR come from a few gradient-ascent steps on the
distance objective and are treated as constants when differentiating with
respect to the model parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import threats
from .model import forward_logits

KINDS = ("none", "ALR", "VR", "UR", "GR")


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = "none"
    lam: float = 0.5
    sigma: float = 0.0
    inner_steps: int = 1
    target_layer: str = "logits"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {KINDS}")
        if self.lam < 0 or self.sigma < 0:
            raise ValueError("lambda and sigma must be >= 0")
        if self.kind in ("ALR", "VR") and self.inner_steps < 1:
            raise ValueError("ALR/VR need inner_steps >= 1")
        if self.target_layer not in ("logits", "representation"):
            raise ValueError(f"target_layer must be 'logits' or 'representation', got {self.target_layer!r}")

    @property
    def active(self):
        return self.kind != "none" and self.lam > 0


def _features(model, x, layer):
    logits, rep = forward_logits(model, x, return_rep=True)
    return logits if layer == "logits" else rep


def alr(model, x, tm, cfg, rng, image_shape=None):
    x = np.asarray(x, dtype=np.float64)
    clean = _features(model, x, cfg.target_layer)
    if cfg.target_layer == "logits":
        objective = threats.logit_distance(clean.data)
    else:
        objective = threats.representation_distance(clean.data)
    # a zero start has a zero distance gradient, so the ascent begins at the random start
    x_adv, _, _ = threats.perturb(model, x, tm, objective, rng, image_shape=image_shape, steps=cfg.inner_steps)
    adv = _features(model, x_adv, cfg.target_layer)
    return T.mean(T.l2_norm(adv - clean))


def vr(model, x, tm, cfg, rng, image_shape=None):
    x = np.asarray(x, dtype=np.float64)
    if tm.epsilon == 0:
        feats = _features(model, x, cfg.target_layer)
        return T.mean(T.l2_norm(feats - feats))
    pert = threats.Perturbation(tm, x, image_shape)
    frozen = model.frozen()
    p1, p2 = pert.random_start(rng), pert.random_start(rng)
    best1, best2 = p1.copy(), p2.copy()
    best = np.full(pert.n, -np.inf)
    for it in range(cfg.inner_steps + 1):
        t1 = T.Tensor(p1, requires_grad=True)
        t2 = T.Tensor(p2, requires_grad=True)
        dist = T.l2_norm(_features(frozen, pert.apply(t1), cfg.target_layer) - _features(frozen, pert.apply(t2), cfg.target_layer))
        up = dist.data > best
        best = np.where(up, dist.data, best)
        best1[up], best2[up] = p1[up], p2[up]
        if it == cfg.inner_steps:
            break
        T.backward(T.tensor_sum(dist))
        p1 = pert.project(pert.step(p1, t1.grad))
        p2 = pert.project(pert.step(p2, t2.grad))
    a = _features(model, pert.apply_numpy(best1), cfg.target_layer)
    b = _features(model, pert.apply_numpy(best2), cfg.target_layer)
    return T.mean(T.l2_norm(a - b))


def _noise_reg(model, x, noise, layer):
    x = np.asarray(x, dtype=np.float64)
    noisy = np.clip(x + noise, 0.0, 1.0)
    return T.mean(T.l2_norm(_features(model, noisy, layer) - _features(model, x, layer)))


def ur(model, x, sigma, rng, layer="logits"):
    x = np.asarray(x, dtype=np.float64)
    return _noise_reg(model, x, rng.uniform(-sigma, sigma, size=x.shape), layer)


def gr(model, x, sigma, rng, layer="logits"):
    x = np.asarray(x, dtype=np.float64)
    return _noise_reg(model, x, rng.normal(0.0, sigma, size=x.shape), layer)


def regularizer(model, x, cfg, tm, rng, image_shape=None):
    if cfg.kind == "ALR":
        return alr(model, x, tm, cfg, rng, image_shape)
    if cfg.kind == "VR":
        return vr(model, x, tm, cfg, rng, image_shape)
    if cfg.kind == "UR":
        return ur(model, x, cfg.sigma, rng, cfg.target_layer)
    if cfg.kind == "GR":
        return gr(model, x, cfg.sigma, rng, cfg.target_layer)
    raise ValueError("regularizer kind 'none' has no value")


def regularized_loss(model, x, base_loss, cfg, tm, rng, image_shape=None):
    """``base_loss + lam * R``; returns ``base_loss`` itself when the regularizer is off."""
    if not cfg.active:
        return base_loss
    return base_loss + cfg.lam * regularizer(model, x, cfg, tm, rng, image_shape)
