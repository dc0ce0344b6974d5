"""Hider detection across epoch snapshots and the relative-position prior.

A hider is an input (natural or perturbed) that an earlier snapshot classifies
correctly and a later snapshot gets wrong. The relative position of a hider is
summarised by the ratio of its displacement from the clean input to that of
the current adversarial example, both projected on the current input gradient.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from hfat.attacks import AttackSpec, ce_objective, run_attack
from hfat.errors import ContractError, InsufficientDataError
from hfat.model import Checkpoint, ModelWeights, predict

RATIO_FLOOR = 1e-8
DEFAULT_R_MAX = 2.0
DEFAULT_WARMUP = 200
DEFAULT_INTERVALS = (1, 5, 20, 50)


@dataclass(frozen=True)
class HiderRecord:
    sample_index: int
    epoch_i: int
    epoch_j: int
    delta: np.ndarray
    kind: str  # "adversarial" or "natural"

    def __post_init__(self):
        if self.epoch_j <= self.epoch_i:
            raise ContractError("a hider's later epoch must exceed its earlier epoch")


@dataclass(frozen=True)
class RatioSample:
    r: float
    epoch_interval: int = 1


@dataclass(frozen=True)
class GaussianPrior:
    mu: float
    sigma: float
    n: int = 0
    interval: int = 1
    fixed: bool = False

    def __post_init__(self):
        if self.sigma < 0 or self.n < 0:
            raise ContractError("sigma and n must be non-negative")

    def to_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "n": self.n, "interval": self.interval, "fixed": self.fixed}


@dataclass
class HiderStats:
    """Hider proportions per (present epoch, interval, kind), plus reported gaps."""

    rows: list[tuple[int, int, str, float]] = field(default_factory=list)
    gaps: list[tuple[int, int]] = field(default_factory=list)

    def proportion(self, present_epoch: int, interval: int, kind: str = "adversarial") -> float | None:
        for e, k, kd, p in self.rows:
            if (e, k, kd) == (present_epoch, interval, kind):
                return p
        return None

    def series(self, interval: int, kind: str = "adversarial") -> dict[int, float]:
        return {e: p for e, k, kd, p in self.rows if k == interval and kd == kind}


def _weights(snapshot) -> ModelWeights:
    return snapshot.weights if isinstance(snapshot, Checkpoint) else snapshot


def _epoch(snapshot) -> int:
    return snapshot.epoch if isinstance(snapshot, Checkpoint) else snapshot.epoch_tag


def detect_hiders(ckpt_i, ckpt_j, x, y, deltas=None) -> list[HiderRecord]:
    """Samples ``x + delta`` correct under ``ckpt_i`` and wrong under ``ckpt_j``."""
    ei, ej = _epoch(ckpt_i), _epoch(ckpt_j)
    if ej <= ei:
        raise ContractError(f"later snapshot epoch {ej} must exceed earlier epoch {ei}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    deltas = np.zeros_like(x) if deltas is None else np.asarray(deltas, dtype=np.float64)
    probe = x + deltas
    ok_i = predict(_weights(ckpt_i), probe) == y
    bad_j = predict(_weights(ckpt_j), probe) != y
    records = []
    for idx in np.flatnonzero(ok_i & bad_j):
        d = deltas[idx].copy()
        kind = "adversarial" if np.any(d != 0) else "natural"
        records.append(HiderRecord(int(idx), ei, ej, d, kind))
    return records


def compute_ratio(x, x_hider, x_adv, grad_dir, interval: int = 1, floor: float = RATIO_FLOOR) -> RatioSample | None:
    """Signed projection ratio of the hider displacement to the adversarial one.

    ``grad_dir`` need not be normalized. Returns ``None`` when the adversarial
    displacement's projection is below ``floor`` (the sample is skipped).
    """
    g = np.asarray(grad_dir, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(g)
    if norm == 0:
        return None
    g = g / norm
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    den = float(np.dot(np.asarray(x_adv, dtype=np.float64).reshape(-1) - x, g))
    if den <= floor:
        return None
    num = float(np.dot(np.asarray(x_hider, dtype=np.float64).reshape(-1) - x, g))
    return RatioSample(num / den, interval)


def fit_gaussian(samples: Sequence[RatioSample | float], interval: int | None = None) -> GaussianPrior:
    """Maximum-likelihood Gaussian: sample mean and population std."""
    values = np.array([s.r if isinstance(s, RatioSample) else s for s in samples], dtype=np.float64)
    if values.size < 2:
        raise InsufficientDataError(f"need at least 2 ratio samples, got {values.size}")
    if interval is None:
        intervals = {s.epoch_interval for s in samples if isinstance(s, RatioSample)}
        interval = intervals.pop() if len(intervals) == 1 else 1
    return GaussianPrior(float(values.mean()), float(values.std()), int(values.size), int(interval))


def sample_ratio(
    prior: GaussianPrior,
    rng: np.random.Generator | None,
    r_max: float = DEFAULT_R_MAX,
    warmup: int = DEFAULT_WARMUP,
    deterministic: bool = True,
) -> float:
    """One draw from N(mu, sigma^2) clipped to [0, r_max]."""
    if not prior.fixed and prior.n < warmup:
        raise ContractError(f"online prior has {prior.n} samples, below the warm-up of {warmup}")
    if rng is None:
        if deterministic:
            raise ContractError("sample_ratio needs a seeded Generator in deterministic mode")
        rng = np.random.default_rng()
    r = prior.mu + prior.sigma * rng.standard_normal()
    return float(min(max(r, 0.0), r_max))


class OnlinePrior:
    """Accumulates interval-1 ratios; falls back to a fixed prior until warmed up."""

    def __init__(self, fallback: GaussianPrior, warmup: int = DEFAULT_WARMUP):
        self.fallback = fallback
        self.warmup = warmup
        self.samples: list[RatioSample] = []

    def add(self, samples: Iterable[RatioSample]) -> None:
        self.samples.extend(s for s in samples if s.epoch_interval == 1)

    def current(self) -> GaussianPrior:
        if len(self.samples) < max(self.warmup, 2):
            return self.fallback
        return fit_gaussian(self.samples, interval=1)


# ---------------------------------------------------------------------------
# ratio collection


def input_gradients(weights: ModelWeights, x, y) -> np.ndarray:
    """Per-sample input gradients of the cross-entropy (up to the 1/B factor)."""
    _, g = ce_objective(weights, np.asarray(x, dtype=np.float64), y)
    return g


def hider_ratios(
    earlier: ModelWeights,
    later: ModelWeights,
    x,
    y,
    attack: AttackSpec,
    interval: int = 1,
    bounds=None,
    rng=None,
) -> tuple[list[RatioSample], int]:
    """Ratios for hiders of ``earlier`` with respect to ``later``.

    Hider candidates are the later model's adversarial examples that the
    earlier model still classifies correctly while the later one does not.
    The reference adversarial example and gradient come from the earlier model.
    Returns the samples and the number skipped by the denominator floor.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    cand = run_attack(later, x, y, attack, rng=rng, bounds=bounds).x_adv
    mask = (predict(earlier, cand) == y) & (predict(later, cand) != y)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return [], 0
    x_adv = run_attack(earlier, x[idx], y[idx], attack, rng=rng, bounds=bounds).x_adv
    grads = input_gradients(earlier, x[idx], y[idx])
    out: list[RatioSample] = []
    skipped = 0
    for k, i in enumerate(idx):
        s = compute_ratio(x[i], cand[i], x_adv[k], grads[k], interval)
        if s is None:
            skipped += 1
        else:
            out.append(s)
    return out, skipped


# ---------------------------------------------------------------------------
# proportion and occurrence statistics


def proportion_report(
    snapshots: Mapping[int, object],
    x,
    y,
    attack: AttackSpec,
    intervals: Sequence[int] = DEFAULT_INTERVALS,
    bounds=None,
    seed: int = 0,
) -> HiderStats:
    """Fraction of present-epoch defended/correct samples that fail ``k`` epochs later.

    Adversarial examples are crafted once against each present-epoch snapshot
    and re-evaluated, unchanged, on the later snapshot.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    stats = HiderStats()
    epochs = sorted(snapshots)
    clean_pred = {e: predict(_weights(snapshots[e]), x) for e in epochs}
    for e in epochs:
        wanted = [k for k in intervals if e + k <= epochs[-1]]
        if not wanted:
            continue
        w = _weights(snapshots[e])
        rng = np.random.default_rng([seed, e])
        x_adv = run_attack(w, x, y, attack, rng=rng, bounds=bounds).x_adv
        defended = predict(w, x_adv) == y
        correct = clean_pred[e] == y
        for k in wanted:
            if e + k not in snapshots:
                stats.gaps.append((e, k))
                continue
            later = _weights(snapshots[e + k])
            if defended.any():
                fail = predict(later, x_adv[defended]) != y[defended]
                stats.rows.append((e, k, "adversarial", float(fail.mean())))
            if correct.any():
                fail = clean_pred[e + k][correct] != y[correct]
                stats.rows.append((e, k, "natural", float(fail.mean())))
    return stats


def occurrence_indices(snapshots: Mapping[int, object], probe, x_adv, y, failed_set=None) -> dict[int, list[int]]:
    """For each earlier snapshot, the members of ``failed_set`` it classifies correctly.

    ``x_adv`` are the probe snapshot's adversarial examples; ``failed_set``
    defaults to the indices the probe misclassifies.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    y = np.asarray(y)
    if failed_set is None:
        failed_set = np.flatnonzero(predict(_weights(probe), x_adv) != y)
    failed = np.asarray(sorted(int(i) for i in failed_set), dtype=np.intp)
    out: dict[int, list[int]] = {}
    for e in sorted(snapshots):
        if failed.size == 0:
            out[e] = []
            continue
        ok = predict(_weights(snapshots[e]), x_adv[failed]) == y[failed]
        out[e] = [int(i) for i in failed[ok]]
    return out


# ---------------------------------------------------------------------------
# CSV exchange


def stats_to_csv(stats: HiderStats) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["present_epoch", "interval", "kind", "proportion"])
    for e, k, kind, p in stats.rows:
        w.writerow([e, k, kind, f"{p:.17g}"])
    return buf.getvalue()


def stats_from_csv(text: str) -> HiderStats:
    rows = [
        (int(r["present_epoch"]), int(r["interval"]), r["kind"], float(r["proportion"]))
        for r in csv.DictReader(io.StringIO(text))
    ]
    return HiderStats(rows)


def occurrences_to_csv(probe_epoch: int, occ: Mapping[int, Sequence[int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["probe_epoch", "earlier_epoch", "sample_index"])
    for e in sorted(occ):
        for i in occ[e]:
            w.writerow([probe_epoch, e, i])
    return buf.getvalue()


def occurrences_from_csv(text: str) -> tuple[int | None, dict[int, list[int]]]:
    probe = None
    occ: dict[int, list[int]] = {}
    for r in csv.DictReader(io.StringIO(text)):
        probe = int(r["probe_epoch"])
        occ.setdefault(int(r["earlier_epoch"]), []).append(int(r["sample_index"]))
    return probe, occ


def ratios_to_csv(samples: Sequence[RatioSample], epochs: Sequence[int] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if epochs is None:
        w.writerow(["r", "epoch_interval"])
        for s in samples:
            w.writerow([f"{s.r:.17g}", s.epoch_interval])
    else:
        w.writerow(["r", "epoch_interval", "epoch"])
        for s, e in zip(samples, epochs):
            w.writerow([f"{s.r:.17g}", s.epoch_interval, e])
    return buf.getvalue()


def ratios_from_csv(text: str) -> list[RatioSample]:
    return [RatioSample(float(r["r"]), int(r["epoch_interval"])) for r in csv.DictReader(io.StringIO(text))]
