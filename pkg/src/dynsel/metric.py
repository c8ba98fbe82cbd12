"""Latent-space distances, prototype banks, prototype posteriors, ICS and calibration."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from . import subsets as sub

METRICS = ("squared-euclidean", "cosine")
SIGMA_FLOOR = 1e-6
BANK_VERSION = 1


class DegenerateScaleError(ValueError):
    pass


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def distance(u, v, metric: str) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    _check_metric(metric)
    if metric == "squared-euclidean":
        d = u - v
        return float(d @ d)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(max(0.0, 1.0 - (u @ v) / (nu * nv)))


def distances(z: np.ndarray, protos: np.ndarray, metric: str) -> np.ndarray:
    """Distances from rows of ``z`` (N, D) -- or a single vector -- to each prototype (K, D)."""
    _check_metric(metric)
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if metric == "squared-euclidean":
        diff = z2[:, None, :] - protos[None, :, :]
        out = (diff * diff).sum(axis=-1)
    else:
        zn = np.linalg.norm(z2, axis=1)
        pn = np.linalg.norm(protos, axis=1)
        if np.any(zn == 0) or np.any(pn == 0):
            raise ValueError("cosine distance is undefined for a zero vector")
        out = np.maximum(0.0, 1.0 - (z2 @ protos.T) / (zn[:, None] * pn[None, :]))
    return out[0] if single else out


def log_softmax_neg(d: np.ndarray) -> np.ndarray:
    """log softmax(-d) along the last axis."""
    a = -np.asarray(d, dtype=np.float64)
    mx = a.max(axis=-1, keepdims=True)
    return a - mx - np.log(np.exp(a - mx).sum(axis=-1, keepdims=True))


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def ics_from_standardized(x: float) -> float:
    """2 (1 - Phi(x)), evaluated as erfc(x / sqrt 2) to keep the upper tail accurate."""
    return math.erfc(x / math.sqrt(2.0))


def alpha(ics_before: float, ics_after: float) -> float:
    """Asymmetric calibration: 1 when the fused representation is more representative."""
    if not 0.0 < ics_before <= 1.0:
        raise ValueError(f"ics_before must lie in (0, 1], got {ics_before}")
    if not 0.0 <= ics_after <= 1.0:
        raise ValueError(f"ics_after must lie in [0, 1], got {ics_after}")
    if ics_after > ics_before:
        return 1.0
    return ics_after / ics_before


@dataclass
class PrototypeBank:
    metric: str
    n_classes: int
    n_modalities: int
    means: dict[tuple[int, int], np.ndarray]  # (class, subset) -> c_{k,S}
    counts: dict[tuple[int, int], int]
    sigma_raw: dict[tuple[int, int], float]
    averaged: np.ndarray  # (K, D); row k-1 is c̄_k
    model_hash: str = ""
    degenerate: set = field(default_factory=set)

    def __post_init__(self):
        self.degenerate = {
            key for key, s in self.sigma_raw.items() if self.counts[key] < 2 or s < SIGMA_FLOOR
        }

    @property
    def latent_dim(self) -> int:
        return self.averaged.shape[1]

    def sigma(self, k: int, subset: int, strict: bool = False) -> float:
        key = (k, subset)
        if key not in self.sigma_raw:
            raise KeyError(f"no prototype for class {k}, subset {sub.label(subset)}")
        if strict and key in self.degenerate:
            raise DegenerateScaleError(f"degenerate scale for class {k}, subset {sub.label(subset)}")
        return max(self.sigma_raw[key], SIGMA_FLOOR)

    def posterior(self, zhat: np.ndarray) -> np.ndarray:
        return np.exp(self.log_posterior(zhat))

    def log_posterior(self, zhat: np.ndarray) -> np.ndarray:
        return log_softmax_neg(distances(zhat, self.averaged, self.metric))

    def ics(self, k: int, zhat: np.ndarray, subset: int, strict: bool = False) -> float:
        d = distance(zhat, self.means[(k, subset)], self.metric)
        return ics_from_standardized(d / self.sigma(k, subset, strict))

    def equals(self, other: "PrototypeBank") -> bool:
        return (
            self.metric == other.metric
            and self.n_classes == other.n_classes
            and self.n_modalities == other.n_modalities
            and self.means.keys() == other.means.keys()
            and all(np.array_equal(self.means[k], other.means[k]) for k in self.means)
            and self.counts == other.counts
            and self.sigma_raw == other.sigma_raw
            and np.array_equal(self.averaged, other.averaged)
        )


def posterior(zhat: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    return bank.posterior(zhat)


def ics(k: int, zhat: np.ndarray, subset: int, bank: PrototypeBank, strict: bool = False) -> float:
    return bank.ics(k, zhat, subset, strict)


def bank_from_latents(
    latents: dict[int, np.ndarray], labels: np.ndarray, n_classes: int, n_modalities: int, metric: str
) -> PrototypeBank:
    """Build a bank from precomputed projected latents, one (N, D) array per subset."""
    _check_metric(metric)
    labels = np.asarray(labels)
    for k in range(1, n_classes + 1):
        if not np.any(labels == k):
            raise ValueError(f"class {k} has no training samples")
    means, counts, sigma = {}, {}, {}
    for subset in sub.all_nonempty(n_modalities):
        zs = latents[subset]
        for k in range(1, n_classes + 1):
            members = zs[labels == k]
            c = members.mean(axis=0)
            d = distances(members, c[None, :], metric)[:, 0]
            means[(k, subset)] = c
            counts[(k, subset)] = int(len(members))
            sigma[(k, subset)] = float(np.sqrt(np.mean(d * d)))
    pool = sub.all_nonempty(n_modalities)
    averaged = np.stack(
        [np.mean([means[(k, s)] for s in pool], axis=0) for k in range(1, n_classes + 1)]
    )
    return PrototypeBank(metric, n_classes, n_modalities, means, counts, sigma, averaged)


def build_bank(model, train, metric: str, batch: int = 1024) -> PrototypeBank:
    """Encode every training sample under every nonempty subset and summarise per class."""
    from .model import fingerprint

    m = model.cfg.n_modalities
    n = len(train)
    latents = {}
    for subset in sub.all_nonempty(m):
        mask_row = sub.to_bool(subset, m)
        chunks = []
        for start in range(0, n, batch):
            stop = min(n, start + batch)
            payloads = [p[start:stop] for p in train.payloads]
            mask = np.broadcast_to(mask_row, (stop - start, m))
            chunks.append(model.forward_batch(payloads, mask).zhat)
        latents[subset] = np.concatenate(chunks)
    bank = bank_from_latents(latents, train.labels, model.cfg.n_classes, m, metric)
    bank.model_hash = fingerprint(model)
    return bank


# -- persistence -------------------------------------------------------------

def save_bank(bank: PrototypeBank, path) -> None:
    header = {
        "version": BANK_VERSION,
        "M": bank.n_modalities,
        "K": bank.n_classes,
        "metric": bank.metric,
        "latent_dim": bank.latent_dim,
        "model_hash": bank.model_hash,
    }
    chunks = []
    for (k, s) in sorted(bank.means):
        chunks.append(struct.pack("<HII", k, s, bank.counts[(k, s)]))
        chunks.append(bank.means[(k, s)].astype("<f8").tobytes())
        chunks.append(struct.pack("<d", bank.sigma_raw[(k, s)]))
    for k in range(bank.n_classes):
        chunks.append(struct.pack("<H", k + 1))
        chunks.append(bank.averaged[k].astype("<f8").tobytes())
    binio.write_atomic(path, header, b"".join(chunks))


def load_bank(path) -> PrototypeBank:
    header, rest = binio.split(Path(path).read_bytes())
    try:
        m, k_count, metric, dim = header["M"], header["K"], header["metric"], header["latent_dim"]
    except KeyError as exc:
        raise binio.MalformedHeaderError(f"bank header lacks {exc}") from exc
    if header.get("version") != BANK_VERSION or metric not in METRICS:
        raise binio.MalformedHeaderError("unsupported bank version or metric")
    reader = binio.Reader(rest)
    means, counts, sigma = {}, {}, {}
    for _ in range(k_count * ((1 << m) - 1)):
        k, s, count = reader.unpack("<HII")
        means[(k, s)] = reader.floats(dim)
        counts[(k, s)] = count
        (sigma[(k, s)],) = reader.unpack("<d")
    averaged = np.empty((k_count, dim))
    for _ in range(k_count):
        (k,) = reader.unpack("<H")
        averaged[k - 1] = reader.floats(dim)
    if reader.remaining != 4:
        if reader.remaining < 4:
            raise binio.TruncatedPayloadError("bank ends before its checksum")
        raise binio.MalformedHeaderError("bank has bytes beyond its declared records")
    binio.verify(rest[: reader.pos], rest[reader.pos:])
    return PrototypeBank(
        metric, k_count, m, means, counts, sigma, averaged, model_hash=header.get("model_hash", "")
    )
