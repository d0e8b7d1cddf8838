"""Brute-force and finite-difference oracles.

Nothing here touches :mod:`crtlab.tensor` or the attack code: the MLP
forward pass, cross-entropy, bilinear warp and intensity remap are all
re-derived with plain numpy / scipy so the checks stay independent of the
paths they verify.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

GRID_LEVELS = (-1.0, -0.5, 0.0, 0.5, 1.0)


def model_arrays(model):
    return [w.data for w in model.weights], [b.data for b in model.biases]


def mlp_forward(weights, biases, x):
    """Logits and penultimate activations for ``x`` of shape ``[n, d]``."""
    act = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for w, b in zip(weights[:-1], biases[:-1]):
        act = np.maximum(act @ w + b, 0.0)
    return act @ weights[-1] + biases[-1], act


def logits_of(model, x):
    return mlp_forward(*model_arrays(model), x)[0]


def cross_entropy(logits, labels):
    logits = np.atleast_2d(logits)
    labels = np.broadcast_to(np.asarray(labels), (logits.shape[0],))
    return logsumexp(logits, axis=1) - logits[np.arange(logits.shape[0]), labels]


# candidate sets --------------------------------------------------------------


def _level_grid(n_params, levels, eps):
    grid = np.array(list(itertools.product(levels, repeat=n_params)), dtype=np.float64).reshape(-1, n_params)
    return grid * eps


def linf_candidates(x, eps, active, levels=GRID_LEVELS):
    """``clip(x + delta)`` for every per-coordinate level choice on ``active`` coordinates."""
    x = np.asarray(x, dtype=np.float64)
    grid = _level_grid(len(active), levels, eps)
    deltas = np.zeros((grid.shape[0], x.size))
    deltas[:, list(active)] = grid
    return np.clip(x + deltas, 0.0, 1.0)


def l2_candidates(x, eps, active, levels=GRID_LEVELS):
    """Level grid on ``active`` coordinates, each point radially pulled into the ``eps`` ball."""
    x = np.asarray(x, dtype=np.float64)
    grid = _level_grid(len(active), levels, eps)
    norms = np.sqrt((grid ** 2).sum(axis=1))
    shrink = np.ones_like(norms)
    big = norms > eps
    shrink[big] = eps / norms[big]
    deltas = np.zeros((grid.shape[0], x.size))
    deltas[:, list(active)] = grid * shrink[:, None]
    return np.clip(x + deltas, 0.0, 1.0)


def warp(image, flow):
    """Bilinear warp of an ``[H, W]`` image by a ``[H, W, 2]`` (row, col) flow, border-clamped."""
    H, W = image.shape
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    r = np.clip(rr + flow[..., 0], 0, H - 1)
    c = np.clip(cc + flow[..., 1], 0, W - 1)
    return ndimage.map_coordinates(image, [r, c], order=1, mode="nearest")


def flow_candidates(x, shape, eps, active_pixels, levels=(-1.0, 0.0, 1.0)):
    """Warps whose flow is nonzero only at ``active_pixels`` (list of (row, col))."""
    H, W = shape
    image = np.asarray(x, dtype=np.float64).reshape(H, W)
    grid = _level_grid(2 * len(active_pixels), levels, eps)
    out = np.empty((grid.shape[0], H * W))
    flows = np.zeros((grid.shape[0], H, W, 2))
    for ci, values in enumerate(grid):
        for pi, (r, c) in enumerate(active_pixels):
            flows[ci, r, c] = values[2 * pi:2 * pi + 2]
        out[ci] = warp(image, flows[ci]).ravel()
    return out, flows


def remap_intensity(x, shifts):
    bins = len(shifts)
    out = np.empty_like(x)
    for i, v in enumerate(x):
        b = min(int(math.floor(v * bins)), bins - 1)
        out[i] = min(max(v + shifts[b], 0.0), 1.0)
    return out


def intensity_candidates(x, eps, bins, levels=(-1.0, 0.0, 1.0)):
    x = np.asarray(x, dtype=np.float64)
    grid = _level_grid(bins, levels, eps)
    return np.array([remap_intensity(x, s) for s in grid]), grid


# attack / regularizer oracles -----------------------------------------------


def _objective_values(model, candidates, y, objective):
    logits, rep = mlp_forward(*model_arrays(model), candidates)
    if objective == "cross_entropy":
        return cross_entropy(logits, y)
    if callable(objective):
        return np.asarray(objective(logits, rep), dtype=np.float64)
    raise ValueError(f"unknown objective {objective!r}")


def brute_force_attack(model, x, y, candidates, objective="cross_entropy"):
    """Exact maximizer over a finite candidate set; ties go to the first candidate."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if candidates.shape[0] == 0:
        raise ValueError("brute_force_attack: empty candidate set")
    values = _objective_values(model, candidates, y, objective)
    best = int(np.argmax(values))
    return candidates[best].copy(), float(values[best])


def brute_force_attack_loop(model, x, y, candidates):
    """Second enumerator for cross-entropy: scalar loops, no vectorization."""
    weights, biases = model_arrays(model)
    if len(candidates) == 0:
        raise ValueError("brute_force_attack_loop: empty candidate set")
    best_val, best_x = -math.inf, None
    for cand in candidates:
        act = list(map(float, cand))
        for li, (w, b) in enumerate(zip(weights, biases)):
            nxt = [sum(act[i] * w[i, j] for i in range(w.shape[0])) + b[j] for j in range(w.shape[1])]
            act = nxt if li == len(weights) - 1 else [max(v, 0.0) for v in nxt]
        top = max(act)
        loss = top + math.log(sum(math.exp(v - top) for v in act)) - act[int(y)]
        if loss > best_val:
            best_val, best_x = loss, np.array(cand, dtype=np.float64)
    return best_x, best_val


def exact_regularizer(model, x, candidates, kind, layer="logits"):
    """ALR: ``max_c ||h(c) - h(x)||``; VR: ``max_{c, c'} ||h(c) - h(c')||``."""
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if candidates.shape[0] == 0:
        raise ValueError("exact_regularizer: empty candidate set")
    logits, rep = mlp_forward(*model_arrays(model), candidates)
    feats = logits if layer == "logits" else rep
    if kind == "ALR":
        lx, rx = mlp_forward(*model_arrays(model), np.atleast_2d(x))
        ref = lx if layer == "logits" else rx
        return float(np.sqrt(((feats - ref) ** 2).sum(axis=1)).max())
    if kind == "VR":
        best = 0.0
        for row in feats:
            best = max(best, float(np.sqrt(((feats - row) ** 2).sum(axis=1)).max()))
        return best
    raise ValueError(f"unknown regularizer kind {kind!r}")


def finite_diff_grad(f, params, step=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. each array in ``params`` (mutated and restored)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def spectral_norm_svd(W):
    """Largest singular value from the eigenvalues of ``W^T W``."""
    W = np.asarray(W, dtype=np.float64)
    return float(math.sqrt(max(np.linalg.eigvalsh(W.T @ W).max(), 0.0)))
