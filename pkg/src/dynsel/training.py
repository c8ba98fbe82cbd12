"""Incomplete-simulation training with a prototype-anchored auxiliary loss."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import subsets as sub
from .dataset import Partition
from .metric import METRICS
from .model import FusionModel
from .numerics import NumericsError, ParameterStore, Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class MissingPrototypeError(KeyError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    subsets_per_batch: int = 2
    batch_size: int = 256
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 20
    min_delta: float = 1e-4
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    metric: str = "squared-euclidean"
    # "all": sample from every nonempty subset; "full": always train on the full set
    subset_pool: str = "all"
    # "class": one prototype per class pooled over subsets; "subset": one per (class, subset)
    prototype_scope: str = "class"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.subsets_per_batch < 1:
            raise ValueError("need at least one subset per batch")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.subset_pool not in ("all", "full"):
            raise ValueError(f"unknown subset pool {self.subset_pool!r}")
        if self.prototype_scope not in ("class", "subset"):
            raise ValueError(f"unknown prototype scope {self.prototype_scope!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class RunningPrototypes:
    """Streaming per-(class, subset) sums and counts of projected latents."""

    def __init__(self):
        self.sums: dict[tuple[int, int], np.ndarray] = {}
        self.counts: dict[tuple[int, int], int] = {}

    def add(self, zhat: np.ndarray, labels: np.ndarray, row_subsets: np.ndarray) -> None:
        for key in sorted(set(zip(labels.tolist(), row_subsets.tolist()))):
            rows = (labels == key[0]) & (row_subsets == key[1])
            total = zhat[rows].sum(axis=0)
            if key in self.sums:
                self.sums[key] = self.sums[key] + total
                self.counts[key] += int(rows.sum())
            else:
                self.sums[key] = total
                self.counts[key] = int(rows.sum())

    def means(self) -> dict[tuple[int, int], np.ndarray]:
        return {k: self.sums[k] / self.counts[k] for k in sorted(self.sums) if self.counts[k] > 0}

    def class_means(self) -> dict[tuple[int, int], np.ndarray]:
        """Per-class means pooled over every subset, keyed ``(k, 0)``."""
        sums: dict[int, np.ndarray] = {}
        counts: dict[int, int] = {}
        for (k, _), total in sorted(self.sums.items()):
            sums[k] = sums[k] + total if k in sums else total
            counts[k] = counts.get(k, 0) + self.counts[(k, _)]
        return {(k, 0): sums[k] / counts[k] for k in sorted(sums) if counts[k] > 0}

    def count_for_subset(self, subset: int) -> int:
        return sum(c for (_, s), c in self.counts.items() if s == subset)


# -- losses ------------------------------------------------------------------

def class_loss(tape: Tape, logits: Tensor, labels: np.ndarray) -> Tensor:
    return tape.nll(logits, np.asarray(labels) - 1)


def aux_loss(
    tape: Tape, zhat: Tensor, protos: np.ndarray, labels: np.ndarray, temperature: float, metric: str
) -> Tensor:
    """Mean -log softmax_k(-d(ẑ_i, c_k)/t) at the true class; ``protos`` is (N, K, D), constant."""
    d = tape.proto_distances(zhat, protos, metric)
    return tape.nll(tape.scale(d, -1.0 / temperature), np.asarray(labels) - 1)


def prototype_rows(
    prototypes: dict[tuple[int, int], np.ndarray], row_subsets: np.ndarray, n_classes: int
) -> np.ndarray:
    """Stack c_{k,S_i} for every row i and class k into (N, K, D).

    Class-scope prototypes are stored under subset key 0; pass zeros as
    ``row_subsets`` to use them for every row.
    """
    out = []
    cache = {}
    for s in row_subsets.tolist():
        if s not in cache:
            rows = []
            for k in range(1, n_classes + 1):
                if (k, s) not in prototypes:
                    raise MissingPrototypeError(f"no prototype for class {k}, subset {sub.label(s)}")
                rows.append(prototypes[(k, s)])
            cache[s] = np.stack(rows)
        out.append(cache[s])
    return np.stack(out)


def stack_rows(part: Partition, idx: np.ndarray, subset_list) -> tuple[list[np.ndarray], np.ndarray, np.ndarray, np.ndarray]:
    """Replicate samples ``idx`` once per subset, intersected with their observed modalities.

    Returns (payloads, mask, labels, row_subsets); empty intersections are dropped.
    """
    m = part.n_modalities
    obs = part.observed[idx]
    masks, keep_idx = [], []
    for s in subset_list:
        rows = obs & sub.to_bool(s, m)[None, :]
        ok = rows.any(axis=1)
        masks.append(rows[ok])
        keep_idx.append(idx[ok])
    mask = np.concatenate(masks)
    rows_idx = np.concatenate(keep_idx)
    weights = 1 << np.arange(m)
    row_subsets = (mask.astype(np.int64) * weights).sum(axis=1)
    payloads = [p[rows_idx] for p in part.payloads]
    return payloads, mask, part.labels[rows_idx], row_subsets


def batch_prototypes(zhat: np.ndarray, labels: np.ndarray, row_subsets: np.ndarray, n_classes: int):
    """Detached within-batch class means per subset (first-epoch surrogate prototypes).

    A (class, subset) pair absent from the batch falls back to the class mean over
    all subsets in the batch, then to the batch mean.  Pass zeros as
    ``row_subsets`` for class-scope means.
    """
    protos = {}
    overall = zhat.mean(axis=0)
    for s in np.unique(row_subsets).tolist():
        for k in range(1, n_classes + 1):
            rows = (labels == k) & (row_subsets == s)
            if rows.any():
                protos[(k, s)] = zhat[rows].mean(axis=0)
            elif (labels == k).any():
                protos[(k, s)] = zhat[labels == k].mean(axis=0)
            else:
                protos[(k, s)] = overall
    return protos


def overall_loss(
    model: FusionModel,
    tape: Tape,
    payloads,
    mask: np.ndarray,
    labels: np.ndarray,
    protos: np.ndarray,
    metric: str,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Return (total, class, aux, ẑ) tensors for prepared rows and (N, K, D) prototypes."""
    _, logits, zhat = model.graph(tape, payloads, mask)
    lc = class_loss(tape, logits, labels)
    la = aux_loss(tape, zhat, protos, labels, model.cfg.temperature, metric)
    return tape.add(lc, la), lc, la, zhat


# -- optimiser ---------------------------------------------------------------

class Adam:
    def __init__(self, store: ParameterStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in self.store.names():
            g = self.store.grads[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            update = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            self.store.params[name] -= update


# -- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    model: FusionModel
    prototypes: dict[tuple[int, int], np.ndarray]
    running: RunningPrototypes
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def log_lines(self) -> str:
        return "".join(json.dumps(row, sort_keys=True) + "\n" for row in self.history)


def subset_pool(cfg: TrainConfig, n_modalities: int) -> list[int]:
    if cfg.subset_pool == "full":
        return [sub.full(n_modalities)]
    return sub.all_nonempty(n_modalities)


def evaluate_loss(model: FusionModel, part: Partition, pool: list[int], batch: int = 2048) -> tuple[float, float]:
    """Mean CE over samples x subsets in ``pool`` and full-modality accuracy."""
    from .model import predict_batch

    idx = np.arange(len(part))
    total, count = 0.0, 0
    for start in range(0, len(idx), batch):
        chunk = idx[start:start + batch]
        payloads, mask, labels, _ = stack_rows(part, chunk, pool)
        logits = model.forward_batch(payloads, mask).logits
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        total += float(-logp[np.arange(len(labels)), labels - 1].sum())
        count += len(labels)
    full = sub.full(part.n_modalities)
    payloads, mask, labels, _ = stack_rows(part, idx, [full])
    acc = float(np.mean(predict_batch(model.forward_batch(payloads, mask).logits) == labels))
    return total / max(count, 1), acc


def train(model: FusionModel, train_part: Partition, val_part: Partition, cfg: TrainConfig) -> TrainResult:
    """Adam on L_class + L_aux with A random subsets per minibatch and early stopping.

    Parameters of the epoch with the lowest validation loss are restored at the end.
    """
    m = model.cfg.n_modalities
    k_count = model.cfg.n_classes
    pool = subset_pool(cfg, m)
    if cfg.subset_pool == "all" and cfg.subsets_per_batch > len(pool):
        raise ValueError(
            f"subsets_per_batch={cfg.subsets_per_batch} exceeds the {len(pool)} available subsets"
        )
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg.lr, cfg.betas, cfg.eps)
    prototypes: dict[tuple[int, int], np.ndarray] = {}
    result = TrainResult(model, {}, RunningPrototypes())
    best_loss, best_params, best_protos, stale = np.inf, model.params.copy(), {}, 0
    n = len(train_part)
    class_scope = cfg.prototype_scope == "class"

    for epoch in range(1, cfg.max_epochs + 1):
        running = RunningPrototypes()
        order = rng.permutation(n)
        sums = {"class": 0.0, "aux": 0.0}
        steps = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if cfg.subset_pool == "full":
                chosen = [pool[0]] * cfg.subsets_per_batch
            else:
                chosen = sub.sample_subsets(m, cfg.subsets_per_batch, rng)
            payloads, mask, labels, row_subsets = stack_rows(train_part, idx, chosen)
            if len(labels) == 0:
                continue
            keys = row_subsets if class_scope is False else np.zeros_like(row_subsets)
            tape = Tape(model.params)
            try:
                _, logits, zhat = model.graph(tape, payloads, mask)
                current = batch_prototypes(zhat.data, labels, keys, k_count)
                if epoch > 1:
                    current.update({k: v for k, v in prototypes.items() if k in current})
                protos = prototype_rows(current, keys, k_count)
                lc = class_loss(tape, logits, labels)
                la = aux_loss(tape, zhat, protos, labels, model.cfg.temperature, cfg.metric)
                tape.backward(tape.add(lc, la))
            except NumericsError as exc:
                raise TrainingDivergedError(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
            opt.step()
            running.add(zhat.data, labels, row_subsets)
            sums["class"] += lc.item()
            sums["aux"] += la.item()
            steps += 1
        prototypes.update(running.class_means() if class_scope else running.means())
        val_loss, val_acc = evaluate_loss(model, val_part, pool)
        row = {
            "epoch": epoch,
            "loss_class": sums["class"] / max(steps, 1),
            "loss_aux": sums["aux"] / max(steps, 1),
            "val_loss": val_loss,
            "val_acc": val_acc,
            "lr": cfg.lr,
        }
        result.history.append(row)
        result.running = running
        log.debug("epoch %d: %s", epoch, row)
        if not np.isfinite(row["loss_class"] + row["loss_aux"]):
            raise TrainingDivergedError(f"non-finite epoch loss at epoch {epoch}")
        if val_loss < best_loss - cfg.min_delta:
            best_loss, best_params, stale = val_loss, model.params.copy(), 0
            best_protos = dict(prototypes)
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if result.history:
        for name, value in best_params.params.items():
            model.params.params[name][...] = value
        prototypes = best_protos
    result.prototypes = prototypes
    return result
