"""l-inf inner-maximization solvers: FGSM, PGD, MIM and the C&W margin attack."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from hfat import autodiff as ad
from hfat.autodiff import Tensor
from hfat.errors import CapabilityError, ContractError
from hfat.model import ModelWeights, forward, logits

KINDS = ("fgsm", "pgd", "mim", "cw")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "pgd"
    eps: float = 0.3
    alpha: float | None = None
    steps: int = 10
    random_start: bool = False
    mim_decay: float = 1.0
    cw_kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if not self.eps >= 0:
            raise ContractError(f"eps must be >= 0, got {self.eps}")
        if self.alpha is None:
            # eps/4 underflows to 0 for subnormal eps; fall back to a single full step
            object.__setattr__(self, "alpha", self.eps / 4 or self.eps)
        if not self.alpha >= 0 or (self.alpha == 0 and self.eps > 0):
            raise ContractError(f"alpha must be > 0, got {self.alpha}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ContractError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, eps: float | None = None) -> AttackSpec:
        d = dict(d)
        if "eps" not in d and eps is not None:
            d["eps"] = eps
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ContractError(f"unknown attack fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdvBatch:
    x_adv: np.ndarray
    delta: np.ndarray
    loss_trace: list[float] = field(default_factory=list)


def project_linf(delta, eps: float) -> np.ndarray:
    return np.clip(delta, -eps, eps)


def _clamp(x: np.ndarray, bounds) -> np.ndarray:
    if bounds is None:
        return x
    return np.clip(x, bounds[0], bounds[1])


def _sign(g: np.ndarray) -> np.ndarray:
    # np.sign maps 0 to 0, which is the documented convention
    return np.sign(g)


def ce_objective(weights: ModelWeights, x: np.ndarray, y) -> tuple[float, np.ndarray]:
    xt = Tensor(x, requires_grad=True)
    loss = ad.cross_entropy(forward(weights, xt), y)
    (g,) = ad.grad(loss, [xt])
    return loss.item(), g


def neg_margin_objective(kappa: float) -> Callable:
    def objective(weights: ModelWeights, x: np.ndarray, y) -> tuple[float, np.ndarray]:
        xt = Tensor(x, requires_grad=True)
        m = ad.margin_loss(forward(weights, xt), y, kappa)
        (g,) = ad.grad(m, [xt])
        return -m.item(), -g

    return objective


def _objective_value(objective, weights, x, y) -> float:
    return objective(weights, x, y)[0]


def _random_start(x: np.ndarray, eps: float, rng) -> np.ndarray:
    if rng is None:
        raise ContractError("random_start requires a seeded numpy Generator")
    return rng.uniform(-eps, eps, size=x.shape)


def _iterate(weights, x, y, spec: AttackSpec, objective, rng, bounds, decay: float | None) -> AdvBatch:
    x = np.asarray(x, dtype=np.float64)
    delta = _random_start(x, spec.eps, rng) if spec.random_start else np.zeros_like(x)
    x_adv = _clamp(x + delta, bounds)
    delta = x_adv - x
    trace: list[float] = []
    momentum = np.zeros_like(x)
    for _ in range(spec.steps):
        value, g = objective(weights, x_adv, y)
        trace.append(value)
        if decay is not None:
            l1 = np.abs(g).sum(axis=1, keepdims=True)
            # rows with an all-zero gradient skip normalization
            normed = np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
            momentum = decay * momentum + normed
            step = _sign(momentum)
        else:
            step = _sign(g)
        delta = project_linf(delta + spec.alpha * step, spec.eps)
        x_adv = _clamp(x + delta, bounds)
        delta = x_adv - x
    trace.append(_objective_value(objective, weights, x_adv, y))
    return AdvBatch(x_adv, delta, trace)


def fgsm(weights: ModelWeights, x, y, spec: AttackSpec, rng=None, bounds=None) -> AdvBatch:
    x = np.asarray(x, dtype=np.float64)
    value, g = ce_objective(weights, x, y)
    x_adv = _clamp(x + spec.eps * _sign(g), bounds)
    final = _objective_value(ce_objective, weights, x_adv, y)
    return AdvBatch(x_adv, x_adv - x, [value, final])


def pgd(weights: ModelWeights, x, y, spec: AttackSpec, rng=None, bounds=None) -> AdvBatch:
    return _iterate(weights, x, y, spec, ce_objective, rng, bounds, decay=None)


def mim(weights: ModelWeights, x, y, spec: AttackSpec, rng=None, bounds=None) -> AdvBatch:
    return _iterate(weights, x, y, spec, ce_objective, rng, bounds, decay=spec.mim_decay)


def cw_margin_pgd(weights: ModelWeights, x, y, spec: AttackSpec, rng=None, bounds=None) -> AdvBatch:
    """Projected sign-descent on the C&W margin; the trace holds the negated margin."""
    if weights.spec.n_classes < 2:
        raise ContractError("the margin attack needs at least two classes")
    return _iterate(weights, x, y, spec, neg_margin_objective(spec.cw_kappa), rng, bounds, decay=None)


_DISPATCH = {"fgsm": fgsm, "pgd": pgd, "mim": mim, "cw": cw_margin_pgd}


def run_attack(weights: ModelWeights, x, y, spec: AttackSpec, rng=None, bounds=None) -> AdvBatch:
    return _DISPATCH[spec.kind](weights, x, y, spec, rng=rng, bounds=bounds)


def brute_force_worst_case(weights: ModelWeights, x, y, eps: float, grid_n: int = 201, bounds=None):
    """Exhaustive grid search of the cross-entropy over the eps-ball of one sample.

    Returns ``(delta, loss)`` at the first grid point attaining the maximum.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    if d > 3:
        raise CapabilityError(f"grid search supports input dim <= 3, got {d}")
    if grid_n > 301 or grid_n < 1:
        raise CapabilityError(f"grid_n must be in [1, 301], got {grid_n}")
    axis = np.linspace(-eps, eps, grid_n) if eps > 0 else np.zeros(1)
    deltas = np.array(list(itertools.product(axis, repeat=d)))
    pts = _clamp(x[None, :] + deltas, bounds)
    z = logits(weights, pts)
    logp = ad.log_softmax_array(z)
    losses = -logp[:, int(np.asarray(y).reshape(-1)[0])]
    k = int(np.argmax(losses))
    return pts[k] - x, float(losses[k])
