"""Synthetic Wi-Fi RSS fingerprints and CSV ingestion.

Propagation follows a log-distance law with a static lognormal shadowing
field tied to the floorplan, plus per-device gain/offset distortion and
per-sample measurement noise. RSS is reported in whole dBm, the way phones
expose it, and normalized to ``[0, 1]`` via ``(rss + 100) / 100``.

CSV layout (header row required)::

    building_id,device_id,rp_index,x_m,y_m,rss_0,...,rss_{k-1}

``rss_*`` are dBm; -100 means "not visible".
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError
from .seeding import derive_seed, make_rng

log = logging.getLogger(__name__)

RSS_FLOOR_DBM = -100.0
RSS_CEIL_DBM = 0.0


def normalize_rss(rss_dbm):
    return (np.clip(rss_dbm, RSS_FLOOR_DBM, RSS_CEIL_DBM) - RSS_FLOOR_DBM) / 100.0


def denormalize_rss(features):
    return np.asarray(features, dtype=np.float64) * 100.0 + RSS_FLOOR_DBM


@dataclass(frozen=True)
class FloorplanConfig:
    building_id: str
    num_rps: int
    num_aps: int
    rp_coords: np.ndarray  # [num_rps, 2] meters
    ap_coords: np.ndarray  # [num_aps, 2] meters
    path_loss_exponent: float = 3.0
    ref_power_dbm: float = -40.0
    shadowing_sigma_db: float = 4.0
    shadowing_corr_m: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.num_rps < 2:
            raise ConfigError("a floorplan needs at least 2 RPs")
        if self.num_aps < 1:
            raise ConfigError("a floorplan needs at least 1 AP")
        if self.rp_coords.shape != (self.num_rps, 2) or self.ap_coords.shape != (self.num_aps, 2):
            raise ConfigError("coordinate arrays do not match RP/AP counts")
        if not (np.all(np.isfinite(self.rp_coords)) and np.all(np.isfinite(self.ap_coords))):
            raise ConfigError("coordinates must be finite")

    def distances(self) -> np.ndarray:
        """RP-to-AP distances, ``[num_rps, num_aps]``."""
        d = self.rp_coords[:, None, :] - self.ap_coords[None, :, :]
        return np.sqrt((d**2).sum(axis=-1))

    def shadowing_db(self) -> np.ndarray:
        """Static shadowing field, fixed by the floorplan seed.

        Each AP gets a zero-mean Gaussian field over the RPs with exponential
        spatial correlation ``exp(-d / shadowing_corr_m)``.
        """
        rng = make_rng(self.seed, "shadowing", self.building_id)
        z = rng.standard_normal((self.num_rps, self.num_aps))
        if self.shadowing_corr_m <= 0:
            return self.shadowing_sigma_db * z
        d = np.sqrt(((self.rp_coords[:, None] - self.rp_coords[None]) ** 2).sum(-1))
        corr = np.exp(-d / self.shadowing_corr_m)
        chol = np.linalg.cholesky(corr + 1e-9 * np.eye(self.num_rps))
        return self.shadowing_sigma_db * (chol @ z)

    def mean_rss_dbm(self, shadowing: bool = True) -> np.ndarray:
        d = np.maximum(self.distances(), 1.0)
        rss = self.ref_power_dbm - 10.0 * self.path_loss_exponent * np.log10(d)
        if shadowing and self.shadowing_sigma_db > 0:
            rss = rss + self.shadowing_db()
        return rss


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    gain_offset_db: float = 0.0
    gain_scale: float = 1.0
    noise_sigma_db: float = 0.0

    def __post_init__(self):
        if self.gain_scale <= 0:
            raise ConfigError(f"device {self.device_id}: gain_scale must be positive")

    def apply(self, rss_dbm: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        out = self.gain_scale * rss_dbm + self.gain_offset_db
        if self.noise_sigma_db > 0 and rng is not None:
            out = out + rng.normal(0.0, self.noise_sigma_db, size=out.shape)
        return out


# Offsets/scales are made-up but plausible; the names follow common handsets.
DEFAULT_DEVICES: tuple[DeviceProfile, ...] = (
    DeviceProfile("galaxy_s7", gain_offset_db=-4.0, gain_scale=1.05, noise_sigma_db=5.0),
    DeviceProfile("oneplus_3", gain_offset_db=3.0, gain_scale=0.95, noise_sigma_db=5.0),
    DeviceProfile("moto_z2", gain_offset_db=0.0, gain_scale=1.0, noise_sigma_db=5.0),
    DeviceProfile("lg_v20", gain_offset_db=-6.0, gain_scale=0.92, noise_sigma_db=5.0),
    DeviceProfile("blu_vivo_8", gain_offset_db=6.0, gain_scale=1.1, noise_sigma_db=5.0),
    DeviceProfile("htc_u11", gain_offset_db=-2.0, gain_scale=0.9, noise_sigma_db=5.0),
)
DEFAULT_TRAIN_DEVICE = "moto_z2"


@dataclass
class FingerprintSet:
    features: np.ndarray  # [N, num_aps] float32 in [0, 1]
    labels: np.ndarray  # [N] int64 RP indices
    rp_coords: np.ndarray  # [num_rps, 2]
    building_id: str = ""
    device_id: str = ""
    clamped_values: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.rp_coords = np.asarray(self.rp_coords, dtype=np.float64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise SchemaError("features must be [N, k] with one label per row")
        if self.features.size and (self.features.min() < 0 or self.features.max() > 1):
            raise SchemaError("features must be normalized to [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.rp_coords)):
            raise SchemaError("labels must index rp_coords")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_aps(self) -> int:
        return self.features.shape[1]

    @property
    def num_rps(self) -> int:
        return self.rp_coords.shape[0]


def serpentine_path(num_rps: int, row_length: int = 12, row_gap: int = 4) -> np.ndarray:
    """RP coordinates along a back-and-forth corridor, 1 m between neighbours.

    Rows of ``row_length`` RPs run along x, joined by ``row_gap`` one-metre
    steps along y, alternating direction.
    """
    moves = []
    direction = 1
    while len(moves) < num_rps:
        moves += [(direction, 0)] * (row_length - 1) + [(0, 1)] * row_gap
        direction = -direction
    pts = np.zeros((num_rps, 2))
    for i in range(1, num_rps):
        pts[i] = pts[i - 1] + moves[i - 1]
    return pts


def generate_floorplan(
    building_id: str,
    num_rps: int,
    num_aps: int,
    seed: int,
    *,
    path_loss_exponent: float = 3.0,
    ref_power_dbm: float = -40.0,
    shadowing_sigma_db: float = 4.0,
    shadowing_corr_m: float = 8.0,
    row_length: int = 12,
    row_gap: int = 4,
    ap_margin_m: float = 10.0,
) -> FloorplanConfig:
    """Lay RPs along a serpentine corridor and scatter APs over the footprint.

    APs are uniform in the RP bounding box padded by ``ap_margin_m``.
    """
    if num_rps < 2 or num_aps < 1:
        raise ConfigError("need num_rps >= 2 and num_aps >= 1")
    rps = serpentine_path(num_rps, row_length, row_gap)
    lo = rps.min(axis=0) - ap_margin_m
    hi = rps.max(axis=0) + ap_margin_m
    rng = make_rng(seed, "floorplan", building_id)
    aps = rng.uniform(lo, hi, size=(num_aps, 2))
    return FloorplanConfig(
        building_id=building_id,
        num_rps=num_rps,
        num_aps=num_aps,
        rp_coords=rps,
        ap_coords=aps,
        path_loss_exponent=path_loss_exponent,
        ref_power_dbm=ref_power_dbm,
        shadowing_sigma_db=shadowing_sigma_db,
        shadowing_corr_m=shadowing_corr_m,
        seed=seed,
    )


def synthesize_fingerprints(
    floorplan: FloorplanConfig,
    device: DeviceProfile,
    samples_per_rp: int,
    seed: int,
    *,
    quantize: bool = True,
) -> FingerprintSet:
    if samples_per_rp < 1:
        raise ConfigError("samples_per_rp must be >= 1")
    rng = make_rng(seed, "fingerprints", floorplan.building_id, device.device_id)
    mean = floorplan.mean_rss_dbm()
    rss = np.repeat(mean, samples_per_rp, axis=0)
    rss = device.apply(rss, rng)
    if quantize:
        rss = np.round(rss)
    rss = np.clip(rss, RSS_FLOOR_DBM, RSS_CEIL_DBM)
    labels = np.repeat(np.arange(floorplan.num_rps), samples_per_rp)
    return FingerprintSet(
        features=normalize_rss(rss).astype(np.float32),
        labels=labels,
        rp_coords=floorplan.rp_coords,
        building_id=floorplan.building_id,
        device_id=device.device_id,
    )


def split_train_test(
    floorplan: FloorplanConfig,
    devices: Sequence[DeviceProfile],
    train_device: str,
    seed: int,
    train_samples_per_rp: int = 5,
    test_samples_per_rp: int = 1,
) -> tuple[FingerprintSet, list[FingerprintSet]]:
    """One training set from ``train_device`` and one test set per other device."""
    if len(devices) < 2:
        raise ConfigError("need at least two device profiles")
    ids = [d.device_id for d in devices]
    if train_device not in ids:
        raise ConfigError(f"training device {train_device!r} not among {ids}")
    train, tests = None, []
    for dev in devices:
        if dev.device_id == train_device:
            train = synthesize_fingerprints(floorplan, dev, train_samples_per_rp, derive_seed(seed, "split", "train"))
        else:
            tests.append(synthesize_fingerprints(floorplan, dev, test_samples_per_rp, derive_seed(seed, "split", "test")))
    return train, tests


def concat_sets(sets: Sequence[FingerprintSet]) -> FingerprintSet:
    first = sets[0]
    return FingerprintSet(
        features=np.concatenate([s.features for s in sets]),
        labels=np.concatenate([s.labels for s in sets]),
        rp_coords=first.rp_coords,
        building_id=first.building_id,
        device_id="+".join(s.device_id for s in sets),
    )


def nearest_centroid_accuracy(train: FingerprintSet, test: FingerprintSet) -> float:
    """Accuracy of a nearest-class-mean classifier; a separability sanity check."""
    cents = np.stack([train.features[train.labels == c].mean(axis=0) for c in range(train.num_rps)])
    d = ((test.features[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float(np.mean(d.argmin(axis=1) == test.labels))


def export_csv(fs: FingerprintSet, path: str | Path) -> None:
    path = Path(path)
    rss = denormalize_rss(fs.features)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["building_id", "device_id", "rp_index", "x_m", "y_m"] + [f"rss_{k}" for k in range(fs.num_aps)])
        for row, label in zip(rss, fs.labels):
            x, y = fs.rp_coords[label]
            w.writerow([fs.building_id, fs.device_id, int(label), repr(float(x)), repr(float(y))] + [repr(float(v)) for v in row])


_FIXED_COLS = ("building_id", "device_id", "rp_index", "x_m", "y_m")


def ingest_csv(path: str | Path) -> FingerprintSet:
    """Read a fingerprint CSV; out-of-range RSS is clamped and counted.

    RP coordinates are taken from the rows; RPs never observed in the file get
    NaN coordinates, which the error metric rejects if they are predicted.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file (header row required)", line=1) from None
        if tuple(header[:5]) != _FIXED_COLS:
            raise SchemaError(f"header must start with {','.join(_FIXED_COLS)}")
        rss_cols = header[5:]
        if not rss_cols or rss_cols != [f"rss_{k}" for k in range(len(rss_cols))]:
            raise SchemaError("RSS columns must be rss_0..rss_{k-1}")
        k = len(rss_cols)
        buildings, devices, labels, coords, rows = set(), set(), [], {}, []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 5 + k:
                raise SchemaError(f"line {lineno}: expected {5 + k} columns, got {len(rec)}")
            try:
                rp = int(rec[2])
                xy = (float(rec[3]), float(rec[4]))
                vals = [float(v) for v in rec[5:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if rp < 0:
                raise ParseError("negative rp_index", line=lineno)
            prev = coords.setdefault(rp, xy)
            if prev != xy:
                raise ParseError(f"rp {rp} has inconsistent coordinates", line=lineno)
            buildings.add(rec[0])
            devices.add(rec[1])
            labels.append(rp)
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows", line=2)
    rss = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(rss)):
        raise ParseError("non-finite RSS value")
    clamped = int(np.count_nonzero((rss > RSS_CEIL_DBM) | (rss < RSS_FLOOR_DBM)))
    if clamped:
        log.warning("%s: clamped %d RSS values into [-100, 0] dBm", path, clamped)
    num_rps = max(coords) + 1
    rp_coords = np.full((num_rps, 2), np.nan)
    for rp, xy in coords.items():
        rp_coords[rp] = xy
    return FingerprintSet(
        features=normalize_rss(rss).astype(np.float32),
        labels=np.array(labels),
        rp_coords=rp_coords,
        building_id="+".join(sorted(buildings)),
        device_id="+".join(sorted(devices)),
        clamped_values=clamped,
    )
