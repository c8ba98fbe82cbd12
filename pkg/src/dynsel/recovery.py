"""Recovery (imputation) methods for missing modalities.

Each method maps a sample to ``{modality: payload}`` for exactly the modalities
absent from its observed mask.  Methods never look at the label.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import subsets as sub
from .dataset import Partition, Sample
from .model import load_params, save_params
from .numerics import ParameterStore

RIDGE = 1e-3


class UnfittedPairError(KeyError):
    pass


def _missing(sample: Sample) -> list[int]:
    return [m for m in range(len(sample.payloads)) if not sample.observed >> m & 1]


class OracleRecovery:
    """Ground truth for a fraction ``rate`` of samples, zero vectors for the rest.

    The coin is flipped once per sample, so all missing modalities of a sample
    are either correct or all zero.
    """

    kind = "oracle"

    def __init__(self, rate: float, seed: int = 0):
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"correct recovery rate must lie in [0, 1], got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)

    def recover(self, sample: Sample) -> dict[int, np.ndarray]:
        missing = _missing(sample)
        correct = self.rng.random() < self.rate
        if correct:
            return {u: np.array(sample.payloads[u], dtype=np.float64) for u in missing}
        return {u: np.zeros(len(sample.payloads[u])) for u in missing}


class NoiseRecovery:
    kind = "noise"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def recover(self, sample: Sample) -> dict[int, np.ndarray]:
        return {u: self.rng.standard_normal(len(sample.payloads[u])) for u in _missing(sample)}


class CrossModalLinear:
    """Ridge maps from the concatenated observed payloads to each missing modality.

    One map per (target u, source subset S) with u not in S.  Inputs and targets
    are centred so the intercept is not penalised.
    """

    kind = "cross-modal-linear"

    def __init__(self, ridge: float = RIDGE):
        self.ridge = ridge
        self.maps: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self.dims: list[int] = []

    def fit(self, train: Partition) -> "CrossModalLinear":
        if not train.observed.all():
            raise ValueError("cross-modal fitting needs complete training data")
        m = train.n_modalities
        self.dims = [p.shape[1] for p in train.payloads]
        for u in range(m):
            others = [j for j in range(m) if j != u]
            for r in range(1, len(others) + 1):
                for src in itertools.combinations(others, r):
                    x = np.concatenate([train.payloads[j] for j in src], axis=1)
                    y = train.payloads[u]
                    xm, ym = x.mean(axis=0), y.mean(axis=0)
                    xc, yc = x - xm, y - ym
                    gram = xc.T @ xc + self.ridge * np.eye(x.shape[1])
                    w = np.linalg.solve(gram, xc.T @ yc)
                    self.maps[(u, sub.from_members(src))] = (w, ym - xm @ w)
        return self

    def predict(self, u: int, source: int, payloads) -> np.ndarray:
        key = (u, source)
        if key not in self.maps:
            raise UnfittedPairError(f"no fitted map for target {u} from {sub.label(source)}")
        w, b = self.maps[key]
        x = np.concatenate([np.asarray(payloads[j], dtype=np.float64) for j in sub.members(source)])
        return x @ w + b

    def recover(self, sample: Sample) -> dict[int, np.ndarray]:
        return {u: self.predict(u, sample.observed, sample.payloads) for u in _missing(sample)}

    # persisted with the checkpoint layout
    def save(self, path) -> None:
        store = ParameterStore()
        for (u, s), (w, b) in sorted(self.maps.items()):
            store.add(f"u{u}.s{s}.w", w)
            store.add(f"u{u}.s{s}.b", b)
        save_params(path, {"version": 1, "kind": self.kind, "ridge": self.ridge, "dims": self.dims}, store)

    @classmethod
    def load(cls, path) -> "CrossModalLinear":
        header, store = load_params(path)
        method = cls(header["ridge"])
        method.dims = list(header["dims"])
        for name in store.names():
            if name.endswith(".w"):
                u_part, s_part, _ = name.split(".")
                key = (int(u_part[1:]), int(s_part[1:]))
                method.maps[key] = (store[name], store[f"{u_part}.{s_part}.b"])
        return method


def recover(method, sample: Sample) -> dict[int, np.ndarray]:
    if sample.observed == 0:
        raise ValueError("sample has no observed modality")
    out = method.recover(sample)
    if sorted(out) != _missing(sample):
        raise AssertionError("recovery did not cover exactly the missing modalities")
    return out


def recover_partition(method, part: Partition) -> list[dict[int, np.ndarray]]:
    return [recover(method, part.sample(i)) for i in range(len(part))]


def make_method(kind: str, train: Partition | None = None, rate: float = 1.0, seed: int = 0):
    if kind == "oracle":
        return OracleRecovery(rate, seed)
    if kind == "noise":
        return NoiseRecovery(seed)
    if kind == "cross-modal-linear":
        if train is None:
            raise ValueError("cross-modal-linear recovery needs training data to fit")
        return CrossModalLinear().fit(train)
    raise ValueError(f"unknown recovery kind {kind!r}")
