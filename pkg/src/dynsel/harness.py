"""Experiment configuration, training/evaluation commands, sweeps and diagnostic reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import subsets as sub
from .metric import METRICS, PrototypeBank, build_bank, load_bank, save_bank
from .model import (
    FusionModel,
    ModelConfig,
    fingerprint,
    load_checkpoint,
    predict_batch,
    save_checkpoint,
)
from .recovery import make_method, recover_partition
from .selection import SelectionTrace, select_iterative, select_simultaneous
from .training import TrainConfig, train

log = logging.getLogger(__name__)

MODES = ("observed-only", "baseline-all", "S", "I", "I+C", "full")
SWEEP_MODES = ("observed-only", "baseline-all", "I+C")
RECOVERY_KINDS = ("oracle", "noise", "cross-modal-linear")
CSV_COLUMNS = (
    "mode", "metric", "eta", "r", "seed", "accuracy", "auc", "mean_iterations",
    "acceptance_rate", "cc", "cw", "wc", "ww", "ce_min", "ce_max", "hoeffding_term",
)
DEFAULT_DELTA = 0.1


class ConfigError(ValueError):
    pass


class IncompatibleArtifactsError(ValueError):
    pass


def derive_seed(seed: int, *tags: int) -> int:
    """Independent child seed for one (seed, purpose, ...) combination."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


# -- configuration -----------------------------------------------------------

@dataclass
class ExperimentConfig:
    dataset: dict | str
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    metric: str = "squared-euclidean"
    recovery: dict = field(default_factory=lambda: {"kind": "oracle", "rate": 1.0})
    etas: list = field(default_factory=lambda: [0.5])
    rates: list = field(default_factory=lambda: [1.0])
    # a fixed list of modalities to mask in every test sample; overrides ``etas``
    missing: list | None = None
    modes: list = field(default_factory=lambda: ["observed-only", "baseline-all", "S", "I", "I+C"])
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    delta: float = DEFAULT_DELTA

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" not in d:
            raise ConfigError("config needs a 'dataset' entry (spec object or file path)")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    def dataset_spec(self) -> ds.DatasetSpec:
        if isinstance(self.dataset, str):
            return ds.load(self.dataset).spec
        return ds.DatasetSpec.from_dict(self.dataset)

    def validate(self) -> None:
        if isinstance(self.dataset, str):
            if not Path(self.dataset).is_file():
                raise ConfigError(f"dataset file {self.dataset} does not exist")
            n_modalities = None
        else:
            try:
                n_modalities = ds.DatasetSpec.from_dict(self.dataset).n_modalities
            except (TypeError, KeyError, ValueError) as exc:
                raise ConfigError(f"invalid dataset spec: {exc}") from exc
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        for name in ("etas", "rates", "modes", "seeds"):
            if not getattr(self, name):
                raise ConfigError(f"grid {name!r} must be nonempty")
        for eta in self.etas:
            if not 0.0 <= eta <= 1.0:
                raise ConfigError(f"missing rate eta={eta} outside [0, 1]")
            if n_modalities is not None:
                try:
                    ds.n_dropped(eta, n_modalities)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from exc
        for r in self.rates:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"correct recovery rate r={r} outside [0, 1]")
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        kind = self.recovery.get("kind")
        if kind not in RECOVERY_KINDS:
            raise ConfigError(f"unknown recovery kind {kind!r}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative integers")
        if self.missing is not None and n_modalities is not None:
            if not self.missing or any(not 0 <= m < n_modalities for m in self.missing):
                raise ConfigError(f"fixed missing modalities {self.missing} invalid for M={n_modalities}")
            if len(set(self.missing)) >= n_modalities:
                raise ConfigError("fixed missing pattern would mask every modality")
        try:
            self.train_config(0)
            if n_modalities is not None:
                self.model_config(self.dataset_spec(), 0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model or train settings: {exc}") from exc

    def model_config(self, spec: ds.DatasetSpec, seed: int) -> ModelConfig:
        return ModelConfig(
            dims=tuple(spec.dims), n_classes=spec.n_classes, **{**self.model, "init_seed": seed}
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "metric": self.metric, "seed": seed})

    def grid(self, n_modalities: int) -> list[tuple[float, float]]:
        """(eta, r) grid points; a fixed missing pattern reports eta = |missing| / M."""
        etas = [len(set(self.missing)) / n_modalities] if self.missing is not None else list(self.etas)
        rates = list(self.rates) if self.recovery["kind"] == "oracle" else [float("nan")]
        return [(float(e), float(r)) for e in etas for r in rates]


def load_data(cfg: ExperimentConfig) -> ds.Dataset:
    if isinstance(cfg.dataset, str):
        return ds.load(cfg.dataset)
    return ds.generate(ds.DatasetSpec.from_dict(cfg.dataset))


def run_dir(cfg: ExperimentConfig, seed: int, out: str | None = None) -> Path:
    return Path(out or cfg.out) / f"seed-{seed}"


def _write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


# -- training ----------------------------------------------------------------

def train_seed(cfg: ExperimentConfig, data: ds.Dataset, seed: int):
    model = FusionModel(cfg.model_config(data.spec, seed))
    result = train(model, data.train, data.val, cfg.train_config(seed))
    bank = build_bank(model, data.train, cfg.metric)
    return model, bank, result


def cmd_train(cfg: ExperimentConfig, seed: int, out: str | None = None) -> Path:
    """Train one seed; write checkpoint.bin, bank.bin and train_log.jsonl to the seed directory."""
    data = load_data(cfg)
    model, bank, result = train_seed(cfg, data, seed)
    target = run_dir(cfg, seed, out)
    target.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, target / "checkpoint.bin")
    save_bank(bank, target / "bank.bin")
    _write_text_atomic(target / "train_log.jsonl", result.log_lines())
    log.info("seed %d: best epoch %d, artifacts in %s", seed, result.best_epoch, target)
    return target


def load_artifacts(checkpoint, bank_path) -> tuple[FusionModel, PrototypeBank]:
    model = load_checkpoint(checkpoint)
    bank = load_bank(bank_path)
    if bank.model_hash != fingerprint(model):
        raise IncompatibleArtifactsError(
            f"bank was built for model {bank.model_hash or '<unknown>'}, checkpoint is {fingerprint(model)}"
        )
    if bank.n_modalities != model.cfg.n_modalities or bank.n_classes != model.cfg.n_classes:
        raise IncompatibleArtifactsError("bank and checkpoint disagree on M or K")
    return model, bank


# -- metrics -----------------------------------------------------------------

def auc_rank_sum(scores, labels) -> float:
    """Binary AUC via the Mann-Whitney rank sum with average ranks for ties.

    ``labels`` are 1/2; class 2 is the positive class.
    """
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) == 2
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[np.asarray(labels) == 2]
    neg = scores[np.asarray(labels) != 2]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


def hoeffding_term(g: float, n: int, delta: float = DEFAULT_DELTA) -> float:
    """G * sqrt(ln(1/delta) / (2N))."""
    if n < 1:
        raise ValueError("need at least one sample")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return g * math.sqrt(math.log(1.0 / delta) / (2.0 * n))


def per_sample_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), np.asarray(labels) - 1]


def transitions(base_correct: np.ndarray, correct: np.ndarray) -> dict[str, int]:
    return {
        "cc": int(np.sum(base_correct & correct)),
        "cw": int(np.sum(base_correct & ~correct)),
        "wc": int(np.sum(~base_correct & correct)),
        "ww": int(np.sum(~base_correct & ~correct)),
    }


# -- evaluation --------------------------------------------------------------

@dataclass
class ModeOutcome:
    mode: str
    predictions: np.ndarray
    final: np.ndarray  # fused subset bitmask per sample
    iterations: np.ndarray
    accepted: np.ndarray
    candidates: np.ndarray
    traces: list[SelectionTrace]


def _merged_batch(test: ds.Partition, recovered) -> list[np.ndarray]:
    payloads = [p.copy() for p in test.payloads]
    for i, rec in enumerate(recovered):
        for u, x in rec.items():
            payloads[u][i] = x
    return payloads


def _masks(test: ds.Partition) -> np.ndarray:
    weights = 1 << np.arange(test.n_modalities)
    return (test.observed.astype(np.int64) * weights).sum(axis=1)


def run_mode(mode: str, model: FusionModel, bank: PrototypeBank, test: ds.Partition, recovered) -> ModeOutcome:
    """Predictions for every test sample under one selection mode."""
    n, m = len(test), test.n_modalities
    observed = _masks(test)
    missing_counts = np.array([m - bin(int(s)).count("1") for s in observed])
    if mode in ("observed-only", "baseline-all", "full"):
        if mode == "observed-only":
            final = observed
            payloads = test.payloads
            accepted = np.zeros(n, dtype=np.int64)
        else:
            final = np.full(n, sub.full(m))
            payloads = test.payloads if mode == "full" else _merged_batch(test, recovered)
            accepted = missing_counts if mode == "baseline-all" else np.zeros(n, dtype=np.int64)
        mask = np.array([sub.to_bool(int(s), m) for s in final]).reshape(n, m)
        preds = predict_batch(model.forward_batch(payloads, mask).logits)
        traces = [
            SelectionTrace(mode, sub.members(int(o)), [], sub.members(int(f)), int(p))
            for o, f, p in zip(observed, final, preds)
        ]
        candidates = missing_counts if mode == "baseline-all" else np.zeros(n, dtype=np.int64)
        return ModeOutcome(mode, preds, final, np.zeros(n, dtype=np.int64), accepted, candidates, traces)

    preds, final, iters, acc, traces = [], [], [], [], []
    for i in range(n):
        s = test.sample(i)
        if mode == "S":
            fused, pred, trace = select_simultaneous(s.payloads, s.observed, recovered[i], model, bank)
        else:
            fused, pred, trace = select_iterative(
                s.payloads, s.observed, recovered[i], model, bank, calibrated=(mode == "I+C")
            )
        preds.append(pred)
        final.append(fused)
        iters.append(len(trace.iterations))
        acc.append(sum(len(it.accepted) for it in trace.iterations))
        traces.append(trace)
    return ModeOutcome(
        mode, np.array(preds), np.array(final), np.array(iters), np.array(acc), missing_counts, traces
    )


def report_row(
    outcome: ModeOutcome,
    base: ModeOutcome,
    model: FusionModel,
    test: ds.Partition,
    recovered,
    *,
    metric: str,
    eta: float,
    r: float,
    seed: int,
    delta: float,
) -> dict:
    labels = test.labels
    n, m = len(test), test.n_modalities
    payloads = test.payloads if outcome.mode == "full" else _merged_batch(test, recovered)
    mask = np.array([sub.to_bool(int(s), m) for s in outcome.final]).reshape(n, m)
    logits = model.forward_batch(payloads, mask).logits
    ce = per_sample_ce(logits, labels)
    correct = outcome.predictions == labels
    auc = ""
    if model.cfg.n_classes == 2:
        z = logits - logits.max(axis=1, keepdims=True)
        prob2 = np.exp(z[:, 1]) / np.exp(z).sum(axis=1)
        auc = auc_rank_sum(prob2, labels)
    total_candidates = int(outcome.candidates.sum())
    row = {
        "mode": outcome.mode,
        "metric": metric,
        "eta": eta,
        "r": r,
        "seed": seed,
        "accuracy": float(correct.mean()),
        "auc": auc,
        "mean_iterations": float(outcome.iterations.mean()),
        "acceptance_rate": float(outcome.accepted.sum() / total_candidates) if total_candidates else 0.0,
        **transitions(base.predictions == labels, correct),
        "ce_min": float(ce.min()),
        "ce_max": float(ce.max()),
        "hoeffding_term": hoeffding_term(float(ce.max()), n, delta),
    }
    row["ce_mean"] = float(ce.mean())
    return row


def evaluate(
    model: FusionModel,
    bank: PrototypeBank,
    data: ds.Dataset,
    cfg: ExperimentConfig,
    seed: int,
    modes=None,
    trace_dir: Path | None = None,
) -> list[dict]:
    """Every (eta, r) grid point x mode; rows follow ``CSV_COLUMNS`` plus ``ce_mean``."""
    modes = list(modes or cfg.modes)
    m = data.spec.n_modalities
    rows = []
    for g, (eta, r) in enumerate(cfg.grid(m)):
        if cfg.missing is not None:
            test = ds.drop_modalities(data.test, cfg.missing)
        else:
            test = ds.apply_missingness(data.test, eta, derive_seed(seed, 1, g))
        kind = cfg.recovery["kind"]
        rate = r if kind == "oracle" else cfg.recovery.get("rate", 1.0)
        method = make_method(kind, data.train, rate=rate, seed=derive_seed(seed, 2))
        recovered = recover_partition(method, test)
        base = run_mode("observed-only", model, bank, test, recovered)
        for mode in modes:
            outcome = base if mode == "observed-only" else run_mode(mode, model, bank, test, recovered)
            rows.append(
                report_row(
                    outcome, base, model, test, recovered,
                    metric=bank.metric, eta=eta, r=r, seed=seed, delta=cfg.delta,
                )
            )
            if trace_dir is not None:
                write_traces(trace_dir / f"{mode}_eta{eta:g}_r{r:g}.jsonl", outcome, test.labels)
    return rows


def write_traces(path: Path, outcome: ModeOutcome, labels: np.ndarray) -> None:
    lines = []
    for i, trace in enumerate(outcome.traces):
        d = json.loads(trace.to_json(i))
        d["label"] = int(labels[i])
        lines.append(json.dumps(d, sort_keys=True))
    _write_text_atomic(path, "\n".join(lines) + "\n")


def read_traces(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def cmd_eval(
    cfg: ExperimentConfig,
    seed: int,
    out: str | None = None,
    checkpoint=None,
    bank=None,
    trace: bool = False,
) -> list[dict]:
    """Evaluate a trained seed over the grid; writes eval.csv and eval.json (and traces)."""
    target = run_dir(cfg, seed, out)
    model, bank_obj = load_artifacts(checkpoint or target / "checkpoint.bin", bank or target / "bank.bin")
    data = load_data(cfg)
    if tuple(data.spec.dims) != model.cfg.dims or data.spec.n_classes != model.cfg.n_classes:
        raise IncompatibleArtifactsError("dataset shape does not match the checkpoint config")
    rows = evaluate(model, bank_obj, data, cfg, seed, trace_dir=target / "traces" if trace else None)
    _write_text_atomic(target / "eval.csv", rows_to_csv(rows))
    _write_text_atomic(target / "eval.json", json.dumps(rows, indent=1, sort_keys=True) + "\n")
    return rows


def cmd_sweep_noisy_recovery(
    cfg: ExperimentConfig, out: str | None = None, modes=SWEEP_MODES, trace: bool = False
) -> list[dict]:
    """Train each seed, then sweep the oracle correct-recovery rate; writes sweep.csv."""
    if cfg.recovery["kind"] != "oracle":
        raise ConfigError("the noisy-recovery sweep needs oracle recovery")
    data = load_data(cfg)
    rows = []
    for seed in cfg.seeds:
        model, bank, _ = train_seed(cfg, data, seed)
        trace_dir = run_dir(cfg, seed, out) / "traces" if trace else None
        rows.extend(evaluate(model, bank, data, cfg, seed, modes=modes, trace_dir=trace_dir))
    _write_text_atomic(Path(out or cfg.out) / "sweep.csv", rows_to_csv(rows))
    return rows


# -- diagnostics -------------------------------------------------------------

def _entropy_terms(p_joint: np.ndarray, q_cond: np.ndarray) -> tuple[float, float, float]:
    """Exact I(Y;Z), H(Y) and CE = -E log q(y|z) for a joint table p[y, z]."""
    py = p_joint.sum(axis=1)
    pz = p_joint.sum(axis=0)
    mi = math.fsum(
        p * math.log(p / (py[y] * pz[z]))
        for (y, z), p in np.ndenumerate(p_joint) if p > 0
    )
    hy = -math.fsum(p * math.log(p) for p in py if p > 0)
    ce = -math.fsum(p * math.log(q_cond[y, z]) for (y, z), p in np.ndenumerate(p_joint) if p > 0)
    return mi, hy, ce


def cmd_mi_bound_check(trials: int = 100, seed: int = 0, max_support: int = 8, slack: float = 1e-12) -> dict:
    """Check I(Y;Z) >= H(Y) - CE on random discrete joints and equality for the true conditional."""
    rng = np.random.default_rng(seed)
    violations, worst_gap, worst_equality = 0, math.inf, 0.0
    for _ in range(trials):
        ny, nz = rng.integers(2, max_support + 1, size=2)
        p = rng.dirichlet(np.ones(ny * nz)).reshape(ny, nz)
        q = np.stack([rng.dirichlet(np.ones(ny)) for _ in range(nz)], axis=1)  # q[y, z]
        mi, hy, ce = _entropy_terms(p, q)
        gap = mi - (hy - ce)
        worst_gap = min(worst_gap, gap)
        if gap < -slack:
            violations += 1
        exact = p / p.sum(axis=0, keepdims=True)
        mi, hy, ce = _entropy_terms(p, exact)
        worst_equality = max(worst_equality, abs(mi - (hy - ce)))
    return {
        "trials": trials,
        "violations": violations,
        "min_gap": worst_gap,
        "max_equality_error": worst_equality,
        "passed": violations == 0 and worst_equality <= slack,
    }


def cmd_loss_range(
    model: FusionModel, bank: PrototypeBank, data: ds.Dataset, delta: float = DEFAULT_DELTA
) -> dict:
    """Per-sample test CE range under each sample's observed modalities, and the Hoeffding term."""
    if bank.model_hash and bank.model_hash != fingerprint(model):
        raise IncompatibleArtifactsError("bank was built for a different model")
    test = data.test
    logits = model.forward_batch(test.payloads, test.observed).logits
    ce = per_sample_ce(logits, test.labels)
    g = float(ce.max())
    return {
        "n": len(test),
        "delta": delta,
        "ce_min": float(ce.min()),
        "ce_max": g,
        "ce_mean": float(ce.mean()),
        "G": g,
        "hoeffding_term": hoeffding_term(g, len(test), delta),
    }


def cmd_gen_data(cfg: ExperimentConfig, out: str | None = None, seed: int | None = None) -> Path:
    if isinstance(cfg.dataset, str):
        raise ConfigError("gen-data needs an inline dataset spec, not a file path")
    spec = ds.DatasetSpec.from_dict(cfg.dataset)
    if seed is not None:
        spec = ds.with_sizes(spec, seed=seed)
    path = Path(out or cfg.out) / "dataset.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.save(ds.generate(spec), path)
    return path


# -- preset scenarios ----------------------------------------------------------

def toy_spec(**kw) -> ds.DatasetSpec:
    """M=3, K=4, equal relevance."""
    base = dict(
        n_classes=4,
        modalities=tuple(ds.ModalitySpec(8, 1.0) for _ in range(3)),
        n_train=4000, n_val=1000, n_test=600, seed=1,
    )
    return ds.DatasetSpec(**{**base, **kw})


def heterogeneous_spec(**kw) -> ds.DatasetSpec:
    """M=3, K=4, relevance (1.0, 0.6, 0.2); modality 0 is the most informative."""
    base = dict(
        n_classes=4,
        modalities=tuple(ds.ModalitySpec(8, rho) for rho in (1.0, 0.6, 0.2)),
        n_train=4000, n_val=1000, n_test=600, seed=1,
    )
    return ds.DatasetSpec(**{**base, **kw})


def linked_spec(**kw) -> ds.DatasetSpec:
    """Modalities 1 and 2 are exact linear images of modality 0."""
    base = dict(
        n_classes=4,
        modalities=tuple(ds.ModalitySpec(8, rho) for rho in (1.0, 0.6, 0.2)),
        n_train=4000, n_val=1000, n_test=600, seed=1, linked=True,
    )
    return ds.DatasetSpec(**{**base, **kw})
