"""Fused autoencoder/classifier with reconstruction-error routing.

Topology::

    x ─enc1─enc2─enc3─> z ─cls─> logits
                        └─dec1─dec2─out─> x̂  (clamped to [0, 1])

The decoder is weight-tied: ``dec1``, ``dec2`` and ``out`` use the transposes of
``enc3``, ``enc2`` and ``enc1``. Only the two hidden decoder layers carry their
own biases; the output projection has none. Reconstruction loss therefore
trains the encoder weights through both directions. Training sees the
unclamped projection; the ``[0, 1]`` clamp applies at inference.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FingerprintSet
from .errors import ConfigError, DimensionError, SchemaError
from .nn import (
    DTYPE,
    AdamState,
    LayerParams,
    adam_step,
    dense_backward,
    dense_forward,
    init_layer,
    mse_loss,
    softmax_cross_entropy,
)
from .seeding import make_rng

HIDDEN = (128, 89, 62)
DEFAULT_TAU = 0.1
RECON_WEIGHT = 10.0
DENOISE_WEIGHT = 1.0

TENSOR_NAMES = (
    "enc1.weight", "enc1.bias",
    "enc2.weight", "enc2.bias",
    "enc3.weight", "enc3.bias",
    "cls.weight", "cls.bias",
    "dec1.bias", "dec2.bias",
)


@dataclass(frozen=True)
class FusedParams:
    encoder: tuple[LayerParams, LayerParams, LayerParams]
    classifier: LayerParams
    decoder_biases: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        e1, e2, e3 = self.encoder
        if e1.fan_out != e2.fan_in or e2.fan_out != e3.fan_in or e3.fan_out != self.classifier.fan_in:
            raise DimensionError("encoder/classifier layer sizes do not chain")
        if self.decoder_biases[0].shape != (e3.fan_in,) or self.decoder_biases[1].shape != (e2.fan_in,):
            raise DimensionError("decoder bias sizes must mirror encoder layers 3 and 2")
        if self.num_rps < 2 or self.input_dim < 1:
            raise ConfigError("need num_rps >= 2 and input_dim >= 1")

    @property
    def input_dim(self) -> int:
        return self.encoder[0].fan_in

    @property
    def num_rps(self) -> int:
        return self.classifier.fan_out

    def decoder_layers(self) -> tuple[LayerParams, LayerParams, LayerParams]:
        """Tied decoder layers as views onto the encoder weights."""
        e1, e2, e3 = self.encoder
        out_bias = np.zeros(e1.fan_in, dtype=e1.weights.dtype)
        return (
            LayerParams(e3.weights.T, self.decoder_biases[0]),
            LayerParams(e2.weights.T, self.decoder_biases[1]),
            LayerParams(e1.weights.T, out_bias),
        )

    def tensors(self) -> list[np.ndarray]:
        """Trainable arrays in ``TENSOR_NAMES`` order."""
        out = []
        for layer in (*self.encoder, self.classifier):
            out += [layer.weights, layer.biases]
        return out + list(self.decoder_biases)

    def named_tensors(self) -> dict[str, np.ndarray]:
        return dict(zip(TENSOR_NAMES, self.tensors()))

    @classmethod
    def from_tensors(cls, arrays: Sequence[np.ndarray]) -> "FusedParams":
        if len(arrays) != len(TENSOR_NAMES):
            raise DimensionError(f"expected {len(TENSOR_NAMES)} tensors, got {len(arrays)}")
        a = list(arrays)
        enc = tuple(LayerParams(a[2 * i], a[2 * i + 1]) for i in range(3))
        return cls(enc, LayerParams(a[6], a[7]), (a[8], a[9]))

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray]) -> "FusedParams":
        missing = set(TENSOR_NAMES) - set(named)
        if missing:
            raise SchemaError(f"missing tensors: {sorted(missing)}")
        return cls.from_tensors([named[n] for n in TENSOR_NAMES])

    def astype(self, dtype) -> "FusedParams":
        return FusedParams.from_tensors([t.astype(dtype) for t in self.tensors()])


def init_fused(
    input_dim: int, num_rps: int, seed: int, hidden: Sequence[int] = HIDDEN
) -> FusedParams:
    if num_rps < 2 or input_dim < 1:
        raise ConfigError("need num_rps >= 2 and input_dim >= 1")
    rng = make_rng(seed, "init_fused")
    h1, h2, h3 = hidden
    enc = (init_layer(input_dim, h1, rng), init_layer(h1, h2, rng), init_layer(h2, h3, rng))
    cls_layer = init_layer(h3, num_rps, rng)
    return FusedParams(enc, cls_layer, (np.zeros(h2, dtype=DTYPE), np.zeros(h1, dtype=DTYPE)))


def parameter_count(params: FusedParams) -> int:
    """Trainable scalars; tied decoder weights are counted once."""
    return int(sum(t.size for t in params.tensors()))


def parameter_count_formula(input_dim: int, num_rps: int, hidden: Sequence[int] = HIDDEN) -> int:
    h1, h2, h3 = hidden
    return (
        (input_dim * h1 + h1) + (h1 * h2 + h2) + (h2 * h3 + h3) + (h3 * num_rps + num_rps) + (h2 + h1)
    )


def _check_input(x: np.ndarray, params: FusedParams):
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(f"input shape {x.shape} does not match input_dim {params.input_dim}")


def encode(x: np.ndarray, params: FusedParams) -> np.ndarray:
    _check_input(x, params)
    h = x
    for layer in params.encoder:
        h = dense_forward(h, layer, "relu")
    return h


def decode(latent: np.ndarray, params: FusedParams) -> np.ndarray:
    d1, d2, out = params.decoder_layers()
    if latent.ndim != 2 or latent.shape[1] != d1.fan_in:
        raise DimensionError(f"latent shape {latent.shape} does not match {d1.fan_in}")
    h = dense_forward(latent, d1, "relu")
    h = dense_forward(h, d2, "relu")
    return np.clip(dense_forward(h, out, "identity"), 0.0, 1.0)


def classify(latent: np.ndarray, params: FusedParams) -> np.ndarray:
    return dense_forward(latent, params.classifier, "identity")


def reconstruction_error(x: np.ndarray, reconstruction: np.ndarray, per_sample: bool = True):
    """MSE between fingerprints and reconstructions, one value per row by default."""
    if x.shape != reconstruction.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {reconstruction.shape}")
    diff = x.astype(np.float64) - reconstruction.astype(np.float64)
    per = np.mean(diff**2, axis=1)
    return per if per_sample else float(per.mean())


@dataclass
class RoutingOutcome:
    rce: np.ndarray  # per-sample reconstruction error
    denoised: np.ndarray  # bool per sample; True = denoise path
    logits: np.ndarray
    reconstructed: np.ndarray

    @property
    def paths(self) -> np.ndarray:
        return np.where(self.denoised, "denoise", "clean")

    @property
    def denoise_count(self) -> int:
        return int(self.denoised.sum())

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)


def route_and_classify(x: np.ndarray, params: FusedParams, tau: float = DEFAULT_TAU) -> RoutingOutcome:
    """Classify each sample from its latent code, or from the re-encoded
    reconstruction when its reconstruction error exceeds ``tau``."""
    if tau < 0:
        raise ConfigError("tau must be >= 0")
    latent = encode(x, params)
    recon = decode(latent, params)
    rce = reconstruction_error(x, recon)
    denoised = rce > tau
    logits = classify(latent, params)
    if denoised.any():
        logits = logits.copy()
        logits[denoised] = classify(encode(recon[denoised], params), params)
    return RoutingOutcome(rce, denoised, logits, recon)


def joint_loss_and_grads(
    params: FusedParams, x: np.ndarray, labels: np.ndarray, *,
    recon_weight: float = RECON_WEIGHT, denoise_weight: float = DENOISE_WEIGHT,
) -> tuple[float, list[np.ndarray]]:
    """Joint training objective and its gradients in ``TENSOR_NAMES`` order.

    ``recon_weight * MSE + CE(clean path) + denoise_weight * CE(denoise path)``,
    where the denoise path re-encodes and classifies the clamped
    reconstruction. The MSE weight keeps cross-entropy from swamping the
    shared encoder; the denoise term teaches the decoder to emit
    reconstructions the classifier can read, so rerouting a clean sample
    does not change its prediction. ``recon_weight=1, denoise_weight=0`` is
    the plain two-term loss.
    """
    _check_input(x, params)
    e1, e2, e3 = params.encoder
    d1, d2, out = params.decoder_layers()
    cls = params.classifier
    h1 = dense_forward(x, e1)
    h2 = dense_forward(h1, e2)
    z = dense_forward(h2, e3)
    logits = dense_forward(z, cls, "identity")
    g1 = dense_forward(z, d1)
    g2 = dense_forward(g1, d2)
    # Loss on the unclamped projection: the clamp would zero the gradient of
    # every output that starts below 0 and it could never recover.
    r_pre = dense_forward(g2, out, "identity")

    rec_loss, g_rpre = mse_loss(r_pre, x)
    rec_loss *= recon_weight
    g_rpre = g_rpre * recon_weight
    ce_loss, g_logits = softmax_cross_entropy(logits, labels)
    loss = rec_loss + ce_loss

    gw1 = np.zeros_like(e1.weights)
    gb1 = np.zeros_like(e1.biases)
    gw2 = np.zeros_like(e2.weights)
    gb2 = np.zeros_like(e2.biases)
    gw3 = np.zeros_like(e3.weights)
    gb3 = np.zeros_like(e3.biases)
    g_z_cls, gw_c, gb_c = dense_backward(g_logits, z, cls, "identity")

    if denoise_weight:
        recon = np.clip(r_pre, 0.0, 1.0)
        k1 = dense_forward(recon, e1)
        k2 = dense_forward(k1, e2)
        z2 = dense_forward(k2, e3)
        logits2 = dense_forward(z2, cls, "identity")
        ce2, g_logits2 = softmax_cross_entropy(logits2, labels)
        loss += denoise_weight * ce2
        g_z2, gw_c2, gb_c2 = dense_backward(denoise_weight * g_logits2, z2, cls, "identity")
        gw_c = gw_c + gw_c2
        gb_c = gb_c + gb_c2
        g_k2, gw3, gb3 = dense_backward(g_z2, k2, e3)
        g_k1, gw2, gb2 = dense_backward(g_k2, k1, e2)
        g_recon, gw1, gb1 = dense_backward(g_k1, recon, e1)
        g_rpre = g_rpre + g_recon * ((r_pre > 0) & (r_pre < 1))

    g_g2, gw_out, _ = dense_backward(g_rpre, g2, out, "identity")
    g_g1, gw_d2, gb_d2 = dense_backward(g_g2, g1, d2)
    g_z_dec, gw_d1, gb_d1 = dense_backward(g_g1, z, d1)
    g_h2, gw3_a, gb3_a = dense_backward(g_z_dec + g_z_cls, h2, e3)
    g_h1, gw2_a, gb2_a = dense_backward(g_h2, h1, e2)
    _, gw1_a, gb1_a = dense_backward(g_h1, x, e1)

    grads = [
        gw1 + gw1_a + gw_out.T, gb1 + gb1_a,
        gw2 + gw2_a + gw_d2.T, gb2 + gb2_a,
        gw3 + gw3_a + gw_d1.T, gb3 + gb3_a,
        gw_c, gb_c,
        gb_d1, gb_d2,
    ]
    return loss, grads


def activation_pattern(params: FusedParams, x: np.ndarray) -> np.ndarray:
    """Every ReLU and clamp switch in the training graph, flattened.

    Finite differences are only valid where a parameter probe leaves this
    pattern unchanged; the gradient checker uses it to skip kink crossings.
    """
    e1, e2, e3 = params.encoder
    d1, d2, out = params.decoder_layers()
    masks = []

    def relu_chain(inp, layers):
        h = inp
        for layer in layers:
            pre = h @ layer.weights + layer.biases
            masks.append(pre > 0)
            h = np.maximum(pre, 0)
        return h

    z = relu_chain(x, (e1, e2, e3))
    g2 = relu_chain(z, (d1, d2))
    r_pre = g2 @ out.weights
    masks += [r_pre > 0, r_pre < 1]
    relu_chain(np.clip(r_pre, 0.0, 1.0), (e1, e2, e3))
    return np.concatenate([m.reshape(-1) for m in masks])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    recon_weight: float = RECON_WEIGHT
    denoise_weight: float = DENOISE_WEIGHT

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.recon_weight <= 0 or self.denoise_weight < 0:
            raise ConfigError("recon_weight > 0 and denoise_weight >= 0 required")


PRETRAIN_DESK = TrainConfig(epochs=200, learning_rate=1e-3)
PRETRAIN_FULL = TrainConfig(epochs=700, learning_rate=1e-3)
FINETUNE = TrainConfig(epochs=5, learning_rate=1e-4)


def train(
    params: FusedParams, features: np.ndarray, labels: np.ndarray, config: TrainConfig
) -> tuple[FusedParams, list[float]]:
    """Mini-batch Adam on the joint loss. Returns new params and per-epoch mean loss."""
    n = features.shape[0]
    if n == 0:
        raise ConfigError("training data is empty")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= params.num_rps:
        raise ConfigError("labels must be one RP index per sample")
    rng = make_rng(config.seed, "train_shuffle")
    tensors = [t.copy() for t in params.tensors()]
    state = AdamState.for_params(tensors, learning_rate=config.learning_rate)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = joint_loss_and_grads(
                FusedParams.from_tensors(tensors), features[idx], labels[idx],
                recon_weight=config.recon_weight, denoise_weight=config.denoise_weight,
            )
            tensors, state = adam_step(tensors, grads, state)
            total += loss * idx.size
        history.append(total / n)
    return FusedParams.from_tensors(tensors), history


@dataclass
class PretrainResult:
    params: FusedParams
    clean_rce: np.ndarray  # per training sample, after training
    loss_history: list[float] = field(default_factory=list)

    def rce_quantile(self, q: float) -> float:
        return float(np.quantile(self.clean_rce, q))


def server_pretrain(
    train_set: FingerprintSet,
    config: TrainConfig = PRETRAIN_DESK,
    hidden: Sequence[int] = HIDDEN,
) -> PretrainResult:
    if len(train_set) == 0:
        raise ConfigError("pre-training set is empty")
    init = init_fused(train_set.num_aps, train_set.num_rps, config.seed, hidden)
    params, history = train(init, train_set.features, train_set.labels, config)
    recon = decode(encode(train_set.features, params), params)
    return PretrainResult(params, reconstruction_error(train_set.features, recon), history)


def client_finetune(
    params: FusedParams, local_set: FingerprintSet, config: TrainConfig = FINETUNE
) -> FusedParams:
    """Lightweight local training on the client's (inputs, labels) pairs."""
    if len(local_set) == 0:
        raise ConfigError("local training set is empty")
    new_params, _ = train(params, local_set.features, local_set.labels, config)
    return new_params


# Checkpoint file layout (all integers ASCII, one header line each):
#
#   RSSGUARD-CKPT 1
#   tensors <n>
#   <name> float32 <ndim> <dim_0> ... <dim_{ndim-1}>     (n lines, TENSOR_NAMES order)
#   END
#   <raw little-endian float32 data, C order, tensors concatenated in header order>
CKPT_MAGIC = "RSSGUARD-CKPT 1"


def checkpoint_bytes(params: FusedParams) -> bytes:
    named = params.named_tensors()
    buf = io.BytesIO()
    lines = [CKPT_MAGIC, f"tensors {len(named)}"]
    for name, t in named.items():
        lines.append(" ".join([name, "float32", str(t.ndim), *map(str, t.shape)]))
    lines.append("END")
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for t in named.values():
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(params: FusedParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> FusedParams:
    raw = Path(path).read_bytes()
    stream = io.BytesIO(raw)

    def line() -> str:
        return stream.readline().decode("ascii").rstrip("\n")

    if line() != CKPT_MAGIC:
        raise SchemaError("not a checkpoint file (bad magic line)")
    head = line().split()
    if len(head) != 2 or head[0] != "tensors":
        raise SchemaError("malformed tensor-count line")
    specs = []
    for _ in range(int(head[1])):
        parts = line().split()
        if len(parts) < 3 or parts[1] != "float32":
            raise SchemaError(f"malformed tensor header: {parts}")
        ndim = int(parts[2])
        specs.append((parts[0], tuple(int(d) for d in parts[3:3 + ndim])))
    if line() != "END":
        raise SchemaError("missing END marker")
    named = {}
    for name, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        data = stream.read(4 * count)
        if len(data) != 4 * count:
            raise SchemaError(f"truncated data for {name}")
        named[name] = np.frombuffer(data, dtype="<f4").astype(DTYPE).reshape(shape)
    if stream.read(1):
        raise SchemaError("trailing bytes after tensor data")
    return FusedParams.from_named(named)
