"""Data-poisoning generators: CLB, FGSM, PGD, MIM and label flipping.

Perturbation attacks climb the victim's clean-path classification loss with
respect to the input fingerprints and keep results inside ``[0, 1]``. The
iterative ones take ``iterations`` steps of length ``epsilon / iterations``
along per-sample L2-normalized directions and project onto the L-infinity
ball of radius ``epsilon`` around the original fingerprints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .model import FusedParams, _check_input
from .nn import dense_backward, dense_forward, softmax_cross_entropy
from .seeding import make_rng

ATTACK_KINDS = ("clb", "fgsm", "pgd", "mim", "label_flip")
PERTURBATION_KINDS = ("clb", "fgsm", "pgd", "mim")

GradFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    epsilon: float = 0.5
    alpha: float = 0.9
    iterations: int = 10
    mask_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if not 0 <= self.epsilon <= 1:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not 0 < self.mask_fraction <= 1:
            raise ConfigError("mask_fraction must lie in (0, 1]")


def input_gradient(params: FusedParams, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean clean-path cross-entropy with respect to ``x``."""
    _check_input(x, params)
    acts = [x]
    for layer in params.encoder:
        acts.append(dense_forward(acts[-1], layer, "relu"))
    logits = dense_forward(acts[-1], params.classifier, "identity")
    _, g = softmax_cross_entropy(logits, labels)
    g, _, _ = dense_backward(g, acts[-1], params.classifier, "identity")
    for layer, inp in zip(reversed(params.encoder), reversed(acts[:-1])):
        g, _, _ = dense_backward(g, inp, layer, "relu")
    return g


def _grad_fn(params: FusedParams, labels: np.ndarray) -> GradFn:
    return lambda x: input_gradient(params, x, labels)


def _unit_rows(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``g`` divided by their L2 norms; zero-norm rows stay zero."""
    norms = np.sqrt(np.sum(g.astype(np.float64) ** 2, axis=1)).astype(g.dtype)
    ok = norms > 0
    out = np.zeros_like(g)
    out[ok] = g[ok] / norms[ok, None]
    return out, ok


def fgsm_step(x: np.ndarray, grad: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(x + np.float32(epsilon) * np.sign(grad), 0.0, 1.0).astype(x.dtype)


def attack_fgsm(params: FusedParams, x: np.ndarray, labels: np.ndarray, spec: AttackSpec) -> np.ndarray:
    return fgsm_step(x, input_gradient(params, x, labels), spec.epsilon)


def iterative_attack(
    x: np.ndarray,
    grad_fn: GradFn,
    epsilon: float,
    iterations: int,
    momentum: float | None = None,
) -> list[np.ndarray]:
    """Iterates of PGD (``momentum=None``) or MIM (decay ``momentum``).

    Returns ``[x_0, x_1, ..., x_K]``. Samples whose step direction has zero
    norm are left in place for that iteration.
    """
    x0 = x
    eps = np.float32(epsilon)
    step = np.float32(epsilon / iterations)
    lo = np.clip(x0 - eps, 0.0, 1.0)
    hi = np.clip(x0 + eps, 0.0, 1.0)
    cur = x0.copy()
    acc = np.zeros_like(x0)
    out = [cur]
    for _ in range(iterations):
        unit_g, ok = _unit_rows(grad_fn(cur))
        if not momentum:  # alpha=0 is plain PGD; skip the redundant renormalization
            direction = unit_g
        else:
            acc = np.float32(momentum) * acc + unit_g
            direction, ok = _unit_rows(acc)
        nxt = cur + step * direction
        nxt = np.clip(nxt, lo, hi)  # L-inf projection and [0, 1] clamp in one go
        cur = np.where(ok[:, None], nxt, cur).astype(x0.dtype)
        out.append(cur)
    return out


def attack_pgd(params: FusedParams, x: np.ndarray, labels: np.ndarray, spec: AttackSpec) -> np.ndarray:
    return iterative_attack(x, _grad_fn(params, labels), spec.epsilon, spec.iterations)[-1]


def attack_mim(params: FusedParams, x: np.ndarray, labels: np.ndarray, spec: AttackSpec) -> np.ndarray:
    return iterative_attack(x, _grad_fn(params, labels), spec.epsilon, spec.iterations, momentum=spec.alpha)[-1]


def mask_size(mask_fraction: float, num_features: int) -> int:
    """``ceil(mask_fraction * num_features)``, robust to float noise like ``0.1 * 30``."""
    return min(num_features, math.ceil(round(mask_fraction * num_features, 9)))


def gradient_mask(grad: np.ndarray, mask_fraction: float) -> np.ndarray:
    """Boolean mask selecting, per row, the largest-|grad| features.

    Ties go to the lowest feature index.
    """
    k = mask_size(mask_fraction, grad.shape[1])
    order = np.argsort(-np.abs(grad), axis=1, kind="stable")[:, :k]
    mask = np.zeros(grad.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def attack_clb(params: FusedParams, x: np.ndarray, labels: np.ndarray, spec: AttackSpec) -> np.ndarray:
    g = input_gradient(params, x, labels)
    mask = gradient_mask(g, spec.mask_fraction)
    delta = np.float32(spec.epsilon) * np.sign(g) * mask
    return np.clip(x + delta, 0.0, 1.0).astype(x.dtype)


def attack_label_flip(labels: np.ndarray, num_classes: int, spec: AttackSpec) -> np.ndarray:
    """Move ``round(epsilon * N)`` randomly chosen labels to a different class."""
    if num_classes < 2:
        raise ConfigError("label flipping needs at least two classes")
    labels = np.asarray(labels)
    n = labels.shape[0]
    count = int(round(spec.epsilon * n))
    rng = make_rng(spec.seed, "label_flip")
    chosen = rng.permutation(n)[:count]
    shift = rng.integers(1, num_classes, size=count)
    out = labels.copy()
    out[chosen] = (labels[chosen] + shift) % num_classes
    return out


_PERTURB = {"fgsm": attack_fgsm, "pgd": attack_pgd, "mim": attack_mim, "clb": attack_clb}


def poison_features(params: FusedParams, x: np.ndarray, labels: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Apply a perturbation attack; label flipping leaves features untouched."""
    if spec.kind == "label_flip":
        return x
    return _PERTURB[spec.kind](params, x, labels, spec)
