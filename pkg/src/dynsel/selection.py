"""Per-sample modality selection driven by the prototype-posterior reward.

A candidate ``u`` (a recovered modality) is scored against the current fused set
``S`` by how much the prototype log-posterior of the predicted class improves
when ``u`` is added.  The calibrated score rescales the post-fusion term by the
ratio of intra-class similarity scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import subsets as sub
from .metric import PrototypeBank, alpha, distances
from .model import FusionModel, predict


@dataclass
class RewardRecord:
    candidate: int
    raw: float
    calibrated: float
    logpost_before: float
    logpost_after: float
    ics_before: float
    ics_after: float
    alpha: float
    pred_before: int
    pred_after: int

    def score(self, calibrated: bool) -> float:
        return self.calibrated if calibrated else self.raw


@dataclass
class Iteration:
    records: list[RewardRecord]
    accepted: list[int]  # at most one entry in iterative modes
    pruned: list[int]


@dataclass
class SelectionTrace:
    mode: str
    initial: list[int]
    iterations: list[Iteration] = field(default_factory=list)
    final: list[int] = field(default_factory=list)
    prediction: int = 0

    def to_json(self, index: int | None = None) -> str:
        def fmt(x):
            return float(f"{x:.12g}") if isinstance(x, float) else x

        d = asdict(self)
        for it in d["iterations"]:
            for rec in it["records"]:
                for key, value in rec.items():
                    rec[key] = fmt(value)
        if index is not None:
            d = {"sample": index, **d}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionTrace":
        iterations = [
            Iteration([RewardRecord(**rec) for rec in it["records"]], list(it["accepted"]), list(it["pruned"]))
            for it in d["iterations"]
        ]
        return cls(d["mode"], list(d["initial"]), iterations, list(d["final"]), int(d["prediction"]))

    def violations(self) -> list[str]:
        """Structural checks: termination bound, acceptance soundness, monotone growth."""
        problems = []
        n_modalities_missing = None
        fused = set(self.initial)
        if self.iterations:
            n_modalities_missing = len(self.iterations[0].records)
            if len(self.iterations) > n_modalities_missing:
                problems.append("more iterations than missing modalities")
        calibrated = self.mode == "I+C"
        for it in self.iterations:
            scores = {r.candidate: r.score(calibrated) for r in it.records}
            for u in it.accepted:
                if not scores[u] > 0:
                    problems.append(f"accepted modality {u} with score {scores[u]}")
                fused.add(u)
            for p in it.pruned:
                if scores[p] > 0:
                    problems.append(f"pruned modality {p} with positive score")
        if not set(self.initial) <= set(self.final) or fused != set(self.final):
            problems.append("fused set is not the initial set plus accepted modalities")
        return problems


def _merge(payloads, recovered: dict[int, np.ndarray]) -> list:
    out = list(payloads)
    for u, x in recovered.items():
        out[u] = x
    return out


def score_candidates(
    model: FusionModel,
    bank: PrototypeBank,
    payloads,
    current: int,
    candidates: list[int],
) -> tuple[list[RewardRecord], int]:
    """Score every candidate against ``current`` with one batched forward.

    Returns the reward records and the prediction under ``current``.
    """
    subsets = [current] + [current | (1 << u) for u in candidates]
    out = model.forward_subsets(payloads, subsets)
    pred0 = predict(out.logits[0])
    lp0 = float(bank.log_posterior(out.zhat[0])[pred0 - 1])
    ics0 = bank.ics(pred0, out.zhat[0], current)
    records = []
    for row, u in enumerate(candidates, start=1):
        pred_u = predict(out.logits[row])
        lpu = float(bank.log_posterior(out.zhat[row])[pred_u - 1])
        ics_u = bank.ics(pred_u, out.zhat[row], subsets[row])
        a = alpha(ics0, ics_u)
        records.append(
            RewardRecord(
                candidate=u,
                raw=-lp0 + lpu,
                calibrated=-lp0 + a * lpu,
                logpost_before=lp0,
                logpost_after=lpu,
                ics_before=ics0,
                ics_after=ics_u,
                alpha=a,
                pred_before=pred0,
                pred_after=pred_u,
            )
        )
    return records, pred0


def reward_raw(u: int, observed: int, payloads, model: FusionModel, bank: PrototypeBank) -> float:
    if observed >> u & 1:
        raise ValueError(f"modality {u} is already in the observed set")
    records, _ = score_candidates(model, bank, payloads, observed, [u])
    return records[0].raw


def reward_calibrated(u: int, observed: int, payloads, model: FusionModel, bank: PrototypeBank) -> RewardRecord:
    if observed >> u & 1:
        raise ValueError(f"modality {u} is already in the observed set")
    records, _ = score_candidates(model, bank, payloads, observed, [u])
    return records[0]


def select_iterative(
    payloads,
    observed: int,
    recovered: dict[int, np.ndarray],
    model: FusionModel,
    bank: PrototypeBank,
    calibrated: bool = True,
) -> tuple[int, int, SelectionTrace]:
    """Greedy loop: accept the best candidate if its score is positive, prune non-positive ones."""
    m = model.cfg.n_modalities
    missing = [u for u in range(m) if not observed >> u & 1]
    if sorted(recovered) != missing:
        raise ValueError(f"recovered modalities {sorted(recovered)} do not match missing {missing}")
    merged = _merge(payloads, recovered)
    trace = SelectionTrace("I+C" if calibrated else "I", sub.members(observed))
    current = observed
    candidates = list(missing)
    while candidates:
        records, _ = score_candidates(model, bank, merged, current, candidates)
        scores = [r.score(calibrated) for r in records]
        best = int(np.argmax(scores))  # first maximum -> lowest modality index
        accepted = None
        if scores[best] > 0:
            accepted = candidates[best]
            current |= 1 << accepted
        pruned = [u for u, s in zip(candidates, scores) if s <= 0]
        trace.iterations.append(Iteration(records, [] if accepted is None else [accepted], pruned))
        candidates = [u for u in candidates if u not in pruned and u != accepted]
    trace.final = sub.members(current)
    trace.prediction = predict(model.forward(merged, current).logits)
    return current, trace.prediction, trace


def select_simultaneous(
    payloads,
    observed: int,
    recovered: dict[int, np.ndarray],
    model: FusionModel,
    bank: PrototypeBank,
) -> tuple[int, int, SelectionTrace]:
    """Score each candidate once against the observed set; fuse every one with raw reward > 0."""
    m = model.cfg.n_modalities
    missing = [u for u in range(m) if not observed >> u & 1]
    if sorted(recovered) != missing:
        raise ValueError(f"recovered modalities {sorted(recovered)} do not match missing {missing}")
    merged = _merge(payloads, recovered)
    trace = SelectionTrace("S", sub.members(observed))
    current = observed
    if missing:
        records, _ = score_candidates(model, bank, merged, observed, missing)
        positive = [r.candidate for r in records if r.raw > 0]
        for u in positive:
            current |= 1 << u
        trace.iterations.append(
            Iteration(records, positive, [r.candidate for r in records if r.raw <= 0])
        )
    trace.final = sub.members(current)
    trace.prediction = predict(model.forward(merged, current).logits)
    return current, trace.prediction, trace


def reward_loss_equivalence_check(
    payloads,
    observed: int,
    u: int,
    label: int,
    model: FusionModel,
    bank: PrototypeBank,
    reward_fn=None,
) -> float:
    """|(CE before - CE after) - log-posterior reward| with the true label shared.

    The CE route evaluates -log(exp(-d_y) / sum_k exp(-d_k)) term by term; the
    reward route goes through ``bank.log_posterior`` (or ``reward_fn`` if given).
    """
    subsets = [observed, observed | (1 << u)]
    out = model.forward_subsets(payloads, subsets)
    before, after = out.zhat

    def ce(zhat):
        d = distances(zhat, bank.averaged, bank.metric)
        shift = d.min()
        denom = math.fsum(math.exp(-(dk - shift)) for dk in d)
        return (d[label - 1] - shift) + math.log(denom)

    loss_route = ce(before) - ce(after)
    if reward_fn is None:
        reward = -bank.log_posterior(before)[label - 1] + bank.log_posterior(after)[label - 1]
    else:
        reward = reward_fn(before, after, label)
    return abs(loss_route - float(reward))
