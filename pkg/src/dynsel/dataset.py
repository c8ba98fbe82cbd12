"""Synthetic multimodal Gaussian class-mean data, missingness simulation, and I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import binio

FORMAT_VERSION = 1
PARTITIONS = ("train", "val", "test")


@dataclass(frozen=True)
class ModalitySpec:
    dim: int
    relevance: float = 1.0
    noise: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"modality dim must be >= 1, got {self.dim}")
        if not 0.0 <= self.relevance <= 1.0:
            raise ValueError(f"relevance must lie in [0, 1], got {self.relevance}")
        if not self.noise > 0:
            raise ValueError(f"noise must be positive, got {self.noise}")


@dataclass(frozen=True)
class DatasetSpec:
    """Generator settings.

    ``separation`` is the pairwise class-mean distance of a modality with
    relevance 1.  With ``linked`` set, every modality after the first is a fixed
    random linear image of modality 0 (used to exercise cross-modal recovery).
    """

    n_classes: int
    modalities: tuple[ModalitySpec, ...]
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 500
    seed: int = 0
    separation: float = 4.0
    linked: bool = False

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if len(self.modalities) < 2:
            raise ValueError("need at least two modalities")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("all partition sizes must be >= 1")

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def dims(self) -> list[int]:
        return [m.dim for m in self.modalities]

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "modalities": [
                {"dim": m.dim, "relevance": m.relevance, "noise": m.noise} for m in self.modalities
            ],
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "seed": self.seed,
            "separation": self.separation,
            "linked": self.linked,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["modalities"] = tuple(ModalitySpec(**m) for m in d["modalities"])
        return cls(**d)


@dataclass
class Sample:
    payloads: list[np.ndarray]
    observed: int  # bitmask over modalities
    label: int  # 1..K

    def observed_set(self) -> list[int]:
        return [m for m in range(len(self.payloads)) if self.observed >> m & 1]


@dataclass
class Partition:
    """Column-wise storage: ``payloads[m]`` is (N, dim_m); labels are 1-based."""

    payloads: list[np.ndarray]
    observed: np.ndarray  # (N, M) bool
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_modalities(self) -> int:
        return len(self.payloads)

    def sample(self, i: int) -> Sample:
        mask = 0
        for m in range(self.n_modalities):
            if self.observed[i, m]:
                mask |= 1 << m
        return Sample([p[i].copy() for p in self.payloads], mask, int(self.labels[i]))

    def subset(self, idx) -> "Partition":
        idx = np.asarray(idx)
        return Partition([p[idx] for p in self.payloads], self.observed[idx], self.labels[idx])

    def with_observed(self, observed: np.ndarray) -> "Partition":
        return Partition(self.payloads, np.asarray(observed, dtype=bool), self.labels)

    def equals(self, other: "Partition") -> bool:
        return (
            len(self.payloads) == len(other.payloads)
            and all(np.array_equal(a, b) for a, b in zip(self.payloads, other.payloads))
            and np.array_equal(self.observed, other.observed)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class Dataset:
    spec: DatasetSpec
    train: Partition
    val: Partition
    test: Partition
    class_means: list[np.ndarray] = field(default_factory=list, compare=False)

    def partition(self, name: str) -> Partition:
        return getattr(self, name)

    def equals(self, other: "Dataset") -> bool:
        return self.spec == other.spec and all(
            self.partition(p).equals(other.partition(p)) for p in PARTITIONS
        )


def _class_means(rng: np.random.Generator, spec: DatasetSpec, mod: ModalitySpec) -> np.ndarray:
    k, dim = spec.n_classes, mod.dim
    if k <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, k)))
        directions = q.T
    else:
        directions = rng.standard_normal((k, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    # orthonormal directions are sqrt(2) apart
    return directions * (mod.relevance * spec.separation / np.sqrt(2.0))


def _draw(rng, spec: DatasetSpec, means, links, n: int) -> Partition:
    labels = rng.integers(1, spec.n_classes + 1, size=n)
    payloads = []
    for m, mod in enumerate(spec.modalities):
        if links is not None and m > 0:
            payloads.append(payloads[0] @ links[m].T)
            continue
        noise = rng.standard_normal((n, mod.dim)) * mod.noise
        payloads.append(means[m][labels - 1] + noise)
    observed = np.ones((n, spec.n_modalities), dtype=bool)
    return Partition(payloads, observed, labels.astype(np.int64))


def generate(spec: DatasetSpec) -> Dataset:
    """Draw class means once, then the train/val/test partitions, all from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    means = [_class_means(rng, spec, mod) for mod in spec.modalities]
    links = None
    if spec.linked:
        d0 = spec.modalities[0].dim
        links = [None] + [
            rng.standard_normal((mod.dim, d0)) / np.sqrt(d0) for mod in spec.modalities[1:]
        ]
    parts = [_draw(rng, spec, means, links, n) for n in (spec.n_train, spec.n_val, spec.n_test)]
    return Dataset(spec, *parts, class_means=means)


def n_dropped(eta: float, n_modalities: int) -> int:
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"missing rate must lie in [0, 1], got {eta}")
    # half-up rounding so eta*M = 1.5 drops 2
    drop = int(np.floor(eta * n_modalities + 0.5))
    if drop > n_modalities - 1:
        raise ValueError(
            f"missing rate {eta} would mask all {n_modalities} modalities"
        )
    return drop


def apply_missingness(part: Partition, eta: float, seed: int) -> Partition:
    """Mask exactly round(eta*M) modalities per sample, uniformly without replacement.

    Payloads are kept (recovery oracles read them); only the observed mask changes.
    """
    m = part.n_modalities
    drop = n_dropped(eta, m)
    rng = np.random.default_rng(seed)
    observed = part.observed.copy()
    if drop:
        order = rng.random((len(part), m)).argsort(axis=1)[:, :drop]
        observed[np.arange(len(part))[:, None], order] = False
        if not observed.any(axis=1).all():
            raise ValueError("missingness left a sample with no observed modality")
    return part.with_observed(observed)


def drop_modalities(part: Partition, modalities) -> Partition:
    """Mask the same fixed modalities in every sample."""
    observed = part.observed.copy()
    observed[:, list(modalities)] = False
    if not observed.any(axis=1).all():
        raise ValueError("fixed missing pattern masks every modality of some sample")
    return part.with_observed(observed)


# -- persistence -------------------------------------------------------------

def _encode(part: Partition) -> bytes:
    chunks = []
    weights = 1 << np.arange(part.n_modalities)
    masks = (part.observed.astype(np.int64) * weights).sum(axis=1)
    for i in range(len(part)):
        chunks.append(struct.pack("<HI", int(part.labels[i]), int(masks[i])))
        for p in part.payloads:
            chunks.append(p[i].astype("<f8").tobytes())
    return b"".join(chunks)


def save(dataset: Dataset, path: str | Path) -> None:
    spec = dataset.spec
    header = {
        "version": FORMAT_VERSION,
        "M": spec.n_modalities,
        "K": spec.n_classes,
        "dims": spec.dims,
        "counts": {name: len(dataset.partition(name)) for name in PARTITIONS},
        "seed": spec.seed,
        "spec": spec.to_dict(),
    }
    body = b"".join(_encode(dataset.partition(name)) for name in PARTITIONS)
    binio.write_atomic(path, header, body)


def _check_header(h: dict) -> None:
    try:
        if h["version"] != FORMAT_VERSION:
            raise binio.MalformedHeaderError(f"unsupported version {h['version']}")
        m, dims, counts = h["M"], h["dims"], h["counts"]
        if not isinstance(m, int) or m < 2 or len(dims) != m:
            raise binio.MalformedHeaderError(f"header M={m} does not match dims {dims}")
        if any(not isinstance(d, int) or d < 1 for d in dims):
            raise binio.MalformedHeaderError(f"bad dims {dims}")
        if any(not isinstance(counts.get(p), int) or counts[p] < 0 for p in PARTITIONS):
            raise binio.MalformedHeaderError(f"bad counts {counts}")
        spec = h.get("spec")
        if spec is not None and (
            len(spec["modalities"]) != m or [s["dim"] for s in spec["modalities"]] != dims
        ):
            raise binio.MalformedHeaderError("embedded spec disagrees with M/dims")
    except (KeyError, TypeError, AttributeError) as exc:
        raise binio.MalformedHeaderError(f"missing or ill-typed header field: {exc}") from exc


def load(path: str | Path) -> Dataset:
    blob = Path(path).read_bytes()
    header, rest = binio.split(blob)
    _check_header(header)
    m, k, dims = header["M"], header["K"], header["dims"]
    record = 2 + 4 + 8 * sum(dims)
    total = sum(header["counts"][p] for p in PARTITIONS) * record
    if len(rest) < total + 4:
        raise binio.TruncatedPayloadError(
            f"expected {total} record bytes plus checksum, found {len(rest)} bytes"
        )
    if len(rest) > total + 4:
        raise binio.MalformedHeaderError(
            f"{len(rest) - total - 4} trailing bytes: header counts/dims disagree with the rows"
        )
    body = rest[:total]
    binio.verify(body, rest[total:])
    reader = binio.Reader(body)
    parts = []
    for name in PARTITIONS:
        n = header["counts"][name]
        labels = np.empty(n, dtype=np.int64)
        observed = np.zeros((n, m), dtype=bool)
        payloads = [np.empty((n, d)) for d in dims]
        for i in range(n):
            label, mask = reader.unpack("<HI")
            if not 1 <= label <= k:
                raise binio.MalformedHeaderError(f"label {label} outside 1..{k}")
            labels[i] = label
            observed[i] = [(mask >> j) & 1 for j in range(m)]
            for j, d in enumerate(dims):
                payloads[j][i] = reader.floats(d)
        parts.append(Partition(payloads, observed, labels))
    if "spec" in header:
        spec = DatasetSpec.from_dict(header["spec"])
    else:
        spec = DatasetSpec(
            n_classes=k,
            modalities=tuple(ModalitySpec(d) for d in dims),
            n_train=header["counts"]["train"],
            n_val=header["counts"]["val"],
            n_test=header["counts"]["test"],
            seed=header["seed"],
        )
    return Dataset(spec, *parts)


def with_sizes(spec: DatasetSpec, **kwargs) -> DatasetSpec:
    return replace(spec, **kwargs)
