"""Federated round loop and aggregation rules.

Server-side code only sees ``ClientUpdate`` tensors and sample counts; the
``malicious`` flag on clients is simulation bookkeeping and is never read by
an aggregator.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .attacks import AttackSpec, attack_label_flip, poison_features
from .data import FingerprintSet
from .errors import ConfigError, ProtocolError
from .metrics import ClientRecord, RoundReport, evaluate
from .model import FINETUNE, TENSOR_NAMES, FusedParams, TrainConfig, client_finetune, route_and_classify
from .seeding import derive_seed

AGGREGATIONS = ("saliency", "fedavg")
SALIENCY_MODES = ("normalized", "paper_literal")
# What a client trains on for samples routed to the denoise path.
FLAGGED_POLICIES = ("exclude", "raw", "reconstruction")

Tensors = dict[str, np.ndarray]


@dataclass
class ClientConfig:
    client_id: str
    device_id: str
    local_data: FingerprintSet
    malicious: bool = False
    attack: AttackSpec | None = None

    def __post_init__(self):
        if self.malicious != (self.attack is not None):
            raise ConfigError(f"client {self.client_id}: malicious flag and attack must go together")


@dataclass
class ClientUpdate:
    client_id: str
    params: FusedParams
    sample_count: int

    @property
    def tensors(self) -> Tensors:
        return self.params.named_tensors()


def _as_tensors(p: ClientUpdate | FusedParams) -> Tensors:
    return p.tensors if isinstance(p, ClientUpdate) else p.named_tensors()


def _check_match(lm: Tensors, gm: Tensors):
    if list(lm) != list(gm):
        raise ProtocolError(f"tensor names differ: {list(lm)} vs {list(gm)}")
    for name in gm:
        if lm[name].shape != gm[name].shape:
            raise ProtocolError(f"{name}: shape {lm[name].shape} != {gm[name].shape}")


def deviation_matrix(lm: ClientUpdate | FusedParams | Tensors, gm: FusedParams | Tensors) -> Tensors:
    """Elementwise ``|W_lm - W_gm|`` per named tensor."""
    lm_t = lm if isinstance(lm, dict) else _as_tensors(lm)
    gm_t = gm if isinstance(gm, dict) else _as_tensors(gm)
    _check_match(lm_t, gm_t)
    return {k: np.abs(lm_t[k] - gm_t[k]) for k in gm_t}


def saliency_map(deviation: Tensors) -> Tensors:
    """Inverse-deviation weights ``1 / (1 + dW)``, in ``(0, 1]``."""
    out = {}
    for k, d in deviation.items():
        if np.any(d < 0):
            raise AssertionError(f"negative deviation in {k}")
        out[k] = (1.0 / (1.0 + d)).astype(d.dtype, copy=False)
    return out


def adjust_update(lm: ClientUpdate | FusedParams | Tensors, saliency: Tensors) -> Tensors:
    lm_t = lm if isinstance(lm, dict) else _as_tensors(lm)
    _check_match(lm_t, saliency)
    return {k: saliency[k] * lm_t[k] for k in lm_t}


def _sorted(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ConfigError("aggregation needs at least one update")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate client ids in update list")
    return sorted(updates, key=lambda u: u.client_id)


def aggregate_saliency(
    gm: FusedParams, updates: Sequence[ClientUpdate], mode: str = "normalized"
) -> FusedParams:
    """Combine saliency-adjusted local models with the global model.

    ``paper_literal`` adds the mean adjusted update to the GM; ``normalized``
    averages the two, which keeps ``updates == [gm, ...]`` a fixed point.
    Sums run in float64 in client-id order, so the result is independent of
    list order and exact at the fixed point.
    """
    if mode not in SALIENCY_MODES:
        raise ConfigError(f"unknown saliency mode {mode!r}")
    ups = _sorted(updates)
    gm_t = gm.named_tensors()
    acc = {k: np.zeros(v.shape, dtype=np.float64) for k, v in gm_t.items()}
    for u in ups:
        adj = adjust_update(u, saliency_map(deviation_matrix(u, gm_t)))
        for k in acc:
            acc[k] += adj[k]
    out = []
    for k in TENSOR_NAMES:
        combined = gm_t[k].astype(np.float64) + acc[k] / len(ups)
        if mode == "normalized":
            combined = combined / 2.0
        out.append(combined.astype(gm_t[k].dtype))
    return FusedParams.from_tensors(out)


def aggregate_fedavg(gm: FusedParams, updates: Sequence[ClientUpdate]) -> FusedParams:
    """Sample-count-weighted mean of the local models; replaces the GM.

    If every update carries zero samples the GM is returned unchanged.
    """
    ups = _sorted(updates)
    gm_t = gm.named_tensors()
    total = sum(u.sample_count for u in ups)
    if total == 0:  # no client had anything to train on
        return gm
    acc = {k: np.zeros(v.shape, dtype=np.float64) for k, v in gm_t.items()}
    for u in ups:
        t = u.tensors
        _check_match(t, gm_t)
        for k in acc:
            acc[k] += u.sample_count * t[k].astype(np.float64)
    return FusedParams.from_tensors([(acc[k] / total).astype(gm_t[k].dtype) for k in TENSOR_NAMES])


def aggregate(gm: FusedParams, updates: Sequence[ClientUpdate], aggregation: str, mode: str = "normalized") -> FusedParams:
    if aggregation == "saliency":
        return aggregate_saliency(gm, updates, mode)
    if aggregation == "fedavg":
        return aggregate_fedavg(gm, updates)
    raise ConfigError(f"unknown aggregation {aggregation!r}; expected one of {AGGREGATIONS}")


def local_training_set(
    gm: FusedParams, client: ClientConfig, tau: float, round_seed: int, flagged: str = "exclude"
) -> tuple[FingerprintSet | None, ClientRecord]:
    """What a client trains on this round, and what it saw while routing.

    Fingerprints are paired with the GM's routed predictions. Samples routed
    to the denoise path are dropped (``exclude``), kept as they are
    (``raw``), or replaced by their reconstruction (``reconstruction``).
    Malicious clients poison fingerprints before routing, or flip the
    predicted labels after it. Returns ``None`` when nothing is left to train
    on.
    """
    if flagged not in FLAGGED_POLICIES:
        raise ConfigError(f"unknown flagged-sample policy {flagged!r}; expected one of {FLAGGED_POLICIES}")
    ds = client.local_data
    x = ds.features
    attack = client.attack
    if attack is not None and attack.kind != "label_flip":
        x = poison_features(gm, x, ds.labels, attack)
    routed = route_and_classify(x, gm, tau)
    labels = routed.predictions
    if attack is not None and attack.kind == "label_flip":
        flip_spec = replace(attack, seed=derive_seed(attack.seed, round_seed, client.client_id))
        labels = attack_label_flip(labels, gm.num_rps, flip_spec)
    if flagged == "reconstruction":
        x = np.where(routed.denoised[:, None], routed.reconstructed, x).astype(np.float32)
    elif flagged == "exclude":
        keep = ~routed.denoised
        x, labels = x[keep], labels[keep]
    train_set = FingerprintSet(x, labels, ds.rp_coords, ds.building_id, ds.device_id) if len(x) else None
    record = ClientRecord(
        client_id=client.client_id,
        device_id=client.device_id,
        malicious=client.malicious,
        attack=attack.kind if attack else "",
        samples=len(ds),
        denoise_count=routed.denoise_count,
        rce_mean=float(routed.rce.mean()),
        rce_max=float(routed.rce.max()),
        trained_samples=len(x),
    )
    return train_set, record


def client_step(
    gm: FusedParams,
    client: ClientConfig,
    tau: float,
    round_seed: int,
    finetune: TrainConfig = FINETUNE,
    flagged: str = "exclude",
) -> tuple[ClientUpdate, ClientRecord]:
    """Local training for one client. With nothing to train on, the client
    returns the GM itself and a sample count of zero."""
    train_set, record = local_training_set(gm, client, tau, round_seed, flagged)
    if train_set is None:
        return ClientUpdate(client.client_id, gm, 0), record
    cfg = replace(finetune, seed=derive_seed(round_seed, "finetune", client.client_id))
    lm = client_finetune(gm, train_set, cfg)
    return ClientUpdate(client.client_id, lm, len(train_set)), record


def run_round(
    gm: FusedParams,
    clients: Sequence[ClientConfig],
    aggregation: str,
    tau: float,
    round_seed: int,
    test_sets: Sequence[FingerprintSet],
    *,
    mode: str = "normalized",
    finetune: TrainConfig = FINETUNE,
    round_index: int = 0,
    flagged: str = "exclude",
) -> tuple[FusedParams, RoundReport]:
    """One FL round: every client trains locally, the server aggregates, and
    the new GM is scored on ``test_sets``."""
    if not clients:
        raise ConfigError("a round needs at least one client")
    if aggregation not in AGGREGATIONS:
        raise ConfigError(f"unknown aggregation {aggregation!r}")
    ordered = sorted(clients, key=lambda c: c.client_id)
    updates, records = [], []
    for client in ordered:
        up, rec = client_step(gm, client, tau, round_seed, finetune, flagged)
        updates.append(up)
        records.append(rec)
    new_gm = aggregate(gm, updates, aggregation, mode)
    overall, per_device = evaluate(new_gm, list(test_sets), tau)
    return new_gm, RoundReport(round_index, aggregation, overall, per_device, records)
