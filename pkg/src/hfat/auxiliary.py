"""Auxiliary model built by reverse training at probe points, and its momentum term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hfat.attacks import AttackSpec, pgd
from hfat.errors import ContractError, NumericError
from hfat.model import ModelWeights, param_grads


@dataclass(frozen=True)
class ProbePoint:
    x_probe: np.ndarray
    r_used: float
    noise_scale: float


@dataclass(frozen=True)
class MomentumP:
    grads: tuple[np.ndarray, ...]
    x_adv: np.ndarray
    loss: float


def transform_T(x, x_adv, r: float, eps: float, rng=None, noise: bool = True, bounds=None) -> ProbePoint:
    """Point at relative position ``r`` on the clean-to-adversarial segment.

    Uniform noise in [-eps/10, eps/10] is added after the interpolation; the
    total displacement is clamped back into the eps-ball, then into the domain.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ContractError(f"x and x_adv shapes differ: {x.shape} vs {x_adv.shape}")
    disp = r * (x_adv - x)
    scale = eps / 10 if noise else 0.0
    if noise:
        if rng is None:
            raise ContractError("probe noise needs a seeded Generator")
        disp = disp + rng.uniform(-scale, scale, size=x.shape)
    probe = x + np.clip(disp, -eps, eps)
    if bounds is not None:
        probe = np.clip(probe, bounds[0], bounds[1])
    return ProbePoint(probe, float(r), scale)


def reverse_train_step(theta: ModelWeights, probe: ProbePoint | np.ndarray, y, eta: float, steps: int = 1) -> ModelWeights:
    """Gradient *ascent* on the cross-entropy at the probe batch; ``theta`` is untouched."""
    if eta < 0:
        raise ContractError(f"eta must be non-negative, got {eta}")
    if steps < 1:
        raise ContractError("reverse training needs at least one step")
    if eta == 0:
        return theta
    x_probe = probe.x_probe if isinstance(probe, ProbePoint) else np.asarray(probe)
    hat = theta
    for _ in range(steps):
        _, grads = param_grads(hat, x_probe, y)
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericError("non-finite gradient during reverse training")
        hat = hat.axpy(eta, grads)
    return hat


def compute_momentum_p(
    theta_hat: ModelWeights,
    x,
    y,
    aux_attack: AttackSpec,
    rng=None,
    bounds=None,
    like: ModelWeights | None = None,
) -> MomentumP:
    """Adversarial-training gradient of the auxiliary model, in the main model's layout."""
    if aux_attack.kind != "pgd":
        raise ContractError(f"the auxiliary attack must be pgd, got {aux_attack.kind}")
    if like is not None and like.spec != theta_hat.spec:
        raise ContractError("auxiliary and main model architectures differ")
    adv = pgd(theta_hat, x, y, aux_attack, rng=rng, bounds=bounds)
    loss, grads = param_grads(theta_hat, adv.x_adv, y)
    return MomentumP(tuple(grads), adv.x_adv, loss)
