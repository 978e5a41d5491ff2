"""Dense-network engine: layers, losses, Adam, and a finite-difference checker.

Matrices are plain 2-D numpy arrays. Learned math runs in float32; every
function preserves the dtype of its inputs so the gradient checker can replay
the same code path in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, LabelError, NumericError

DTYPE = np.float32
ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerParams:
    """Weights ``[fan_in, fan_out]`` and biases ``[fan_out]`` of one dense layer."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise DimensionError("weights must be 2-D and biases 1-D")
        if self.weights.shape[1] != self.biases.shape[0]:
            raise DimensionError(
                f"bias length {self.biases.shape[0]} does not match fan_out {self.weights.shape[1]}"
            )

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(self.weights.astype(dtype), self.biases.astype(dtype))


def init_layer(fan_in: int, fan_out: int, rng: np.random.Generator) -> LayerParams:
    """Glorot-uniform weights, zero biases."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)
    return LayerParams(w, np.zeros(fan_out, dtype=DTYPE))


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a


def _check_activation(activation: str):
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")


def dense_forward(x: np.ndarray, layer: LayerParams, activation: str = "relu") -> np.ndarray:
    _check_activation(activation)
    if x.ndim != 2 or x.shape[1] != layer.fan_in:
        raise DimensionError(f"input shape {x.shape} incompatible with fan_in {layer.fan_in}")
    out = x @ layer.weights + layer.biases
    if activation == "relu":
        out = np.maximum(out, 0)
    return _check_finite(out, "dense output")


def dense_backward(
    grad_output: np.ndarray,
    cached_input: np.ndarray,
    layer: LayerParams,
    activation: str = "relu",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backpropagate through one dense layer.

    Returns ``(grad_input, grad_weights, grad_biases)``. The ReLU derivative is
    taken as 0 at the kink.
    """
    _check_activation(activation)
    n = cached_input.shape[0]
    if cached_input.ndim != 2 or cached_input.shape[1] != layer.fan_in:
        raise DimensionError(f"cached input shape {cached_input.shape} incompatible with layer")
    if grad_output.shape != (n, layer.fan_out):
        raise DimensionError(f"grad_output shape {grad_output.shape} != {(n, layer.fan_out)}")
    if activation == "relu":
        pre = cached_input @ layer.weights + layer.biases
        grad_output = grad_output * (pre > 0)
    grad_w = cached_input.T @ grad_output
    grad_b = grad_output.sum(axis=0)
    grad_in = grad_output @ layer.weights.T
    return grad_in, grad_w, grad_b


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if prediction.shape != target.shape:
        raise DimensionError(f"shape mismatch {prediction.shape} vs {target.shape}")
    diff = prediction - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(prediction.dtype, copy=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, class_labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``class_labels`` and its logit gradient."""
    labels = np.asarray(class_labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelError(f"labels must lie in [0, {logits.shape[1]})")
    n = logits.shape[0]
    rows = np.arange(n)
    top = logits.argmax(axis=1)
    shifted = logits - logits[rows, top][:, None]
    e = np.exp(shifted)
    e[rows, top] = 0  # the max term is exactly 1; summing the rest keeps log1p exact
    log_z = np.log1p(e.sum(axis=1))
    nll = log_z - shifted[rows, labels]
    loss = float(np.mean(nll.astype(np.float64)))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad


@dataclass
class AdamState:
    """First/second moments for a list of parameter arrays."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stability: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            **kw,
        )


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionError("params, grads and moments must have equal length")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; Adam step aborted")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        step = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_stability)
        new_params.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    new_state = AdamState(
        new_m,
        new_v,
        step_count=t,
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        eps_stability=state.eps_stability,
    )
    return new_params, new_state


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: tuple[int, int] | None = None
    per_param: list[float] = field(default_factory=list)
    checked: int = 0
    skipped: int = 0  # entries whose +/-h probe crossed a kink

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a| + |n|, floor)``; ``floor`` keeps near-zero entries from dominating."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


PatternFn = Callable[[list[np.ndarray]], np.ndarray]


def numeric_gradient(
    loss_fn: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    h: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    pattern_fn: PatternFn | None = None,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Central-difference gradient in float64.

    Returns one ``(flat_indices, values, valid)`` triple per parameter. With
    ``max_entries`` only a random subset of each parameter is probed. When
    ``pattern_fn`` is given it should return the boolean pattern of every
    piecewise switch in the graph (ReLU on/off, clamp active); an entry whose
    probes change that pattern straddles a kink, where central differences
    are meaningless, and is marked invalid.
    """
    work = [np.array(p, dtype=np.float64) for p in params]
    base = pattern_fn(work) if pattern_fn else None
    out = []
    for p in work:
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        vals = np.empty(idx.size)
        valid = np.ones(idx.size, dtype=bool)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(work)
            if base is not None:
                valid[j] = np.array_equal(pattern_fn(work), base)
            flat[i] = orig - h
            down = loss_fn(work)
            if base is not None:
                valid[j] &= np.array_equal(pattern_fn(work), base)
            flat[i] = orig
            vals[j] = (up - down) / (2 * h)
        out.append((idx, vals, valid))
    return out


def check_gradients(
    loss_and_grads: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
    params: Sequence[np.ndarray],
    h: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    pattern_fn: PatternFn | None = None,
) -> GradCheckResult:
    """Compare analytic gradients with central differences, all in float64.

    Entries flagged by ``pattern_fn`` (see ``numeric_gradient``) are left out
    of the error and counted in ``skipped``.
    """
    params64 = [np.array(p, dtype=np.float64) for p in params]
    _, analytic = loss_and_grads(params64)
    numeric = numeric_gradient(
        lambda ps: loss_and_grads(ps)[0], params64, h=h, max_entries=max_entries,
        rng=np.random.default_rng(seed), pattern_fn=pattern_fn,
    )
    worst, worst_at, per, checked, skipped = 0.0, None, [], 0, 0
    for k, (g, (idx, vals, valid)) in enumerate(zip(analytic, numeric)):
        idx, vals = idx[valid], vals[valid]
        checked += idx.size
        skipped += int((~valid).sum())
        err = relative_error(np.asarray(g, dtype=np.float64).reshape(-1)[idx], vals)
        m = float(err.max()) if err.size else 0.0
        per.append(m)
        if m > worst:
            worst, worst_at = m, (k, int(idx[int(err.argmax())]))
    return GradCheckResult(worst, worst_at, per, checked, skipped)
