"""Outer minimization: AT, TRADES and their hider-focused variants.

Every epoch draws its randomness from independent streams keyed by
``(seed, epoch, stream)``: batch order, the main-branch attack, the auxiliary
branch, and online prior estimation. The auxiliary branch therefore never
shifts the random numbers seen by the main branch, and a run can resume from
any snapshot without storing generator state.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from hfat import autodiff as ad
from hfat.attacks import AttackSpec, _clamp, pgd, project_linf
from hfat.autodiff import Tensor
from hfat.auxiliary import compute_momentum_p, reverse_train_step, transform_T
from hfat.data import Dataset, DatasetSpec
from hfat.errors import ContractError, FormatError, NumericError
from hfat.hiders import GaussianPrior, OnlinePrior, RatioSample, hider_ratios, sample_ratio
from hfat.model import (
    Checkpoint,
    MlpSpec,
    ModelWeights,
    _atomic_write,
    forward,
    init_weights,
    load_checkpoint,
    logits,
    param_grads,
    predict,
    save_checkpoint,
)

MODES = ("at", "trades", "at_hf", "trades_hf")
STREAM_SHUFFLE, STREAM_ATTACK, STREAM_AUX, STREAM_PRIOR = range(4)
LAMBDA_CLIP = 1e-12

EPOCH_LOG_COLUMNS = ["epoch", "lr", "train_loss", "natural_acc", "robust_acc", "lambda_A_mean", "seconds"]


DEFAULT_TRAIN_ATTACK = {"kind": "pgd", "steps": 10, "random_start": True}
DEFAULT_AUX_ATTACK = {"kind": "pgd", "steps": 5, "random_start": True}


@dataclass
class TrainConfig:
    mode: str = "at"
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    lr_drops: list = field(default_factory=lambda: [(30, 0.1), (45, 0.1)])
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    eps: float = 0.3
    train_attack: AttackSpec | None = None
    aux_attack: AttackSpec | None = None
    eta_aux: float | None = None
    aux_reverse_steps: int = 1
    probe_noise: bool = True
    lambda_mode: str = "adaptive"
    lambda_static: float = 0.0
    trades_beta: float = 6.0
    prior_mode: str = "fixed"
    prior_mu: float = 0.8
    prior_sigma: float = 0.2
    prior_warmup: int = 200
    r_max: float = 2.0
    probe_size: int = 512
    seed: int = 0
    snapshot_every: int = 1
    hidden: list = field(default_factory=lambda: [64, 64])

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.snapshot_every < 1:
            raise ContractError("epochs, batch_size and snapshot_every must be >= 1")
        self.lr_drops = [(int(e), float(f)) for e, f in self.lr_drops]
        if [e for e, _ in self.lr_drops] != sorted(e for e, _ in self.lr_drops):
            raise ContractError("lr_drops must be sorted by epoch")
        if self.lambda_mode not in ("adaptive", "static"):
            raise ContractError("lambda_mode must be 'adaptive' or 'static'")
        if self.lambda_static < 0 or self.trades_beta < 0:
            raise ContractError("lambda_static and trades_beta must be non-negative")
        if self.prior_mode not in ("fixed", "online"):
            raise ContractError("prior_mode must be 'fixed' or 'online'")
        if self.eta_aux is not None and self.eta_aux < 0:
            raise ContractError("eta_aux must be non-negative")
        if self.train_attack is None:
            self.train_attack = AttackSpec.from_dict(DEFAULT_TRAIN_ATTACK, eps=self.eps)
        if self.aux_attack is None:
            self.aux_attack = AttackSpec.from_dict(DEFAULT_AUX_ATTACK, eps=self.eps)
        if isinstance(self.train_attack, dict):
            self.train_attack = AttackSpec.from_dict(self.train_attack, eps=self.eps)
        if isinstance(self.aux_attack, dict):
            self.aux_attack = AttackSpec.from_dict(self.aux_attack, eps=self.eps)
        if self.train_attack.eps != self.eps or self.aux_attack.eps != self.eps:
            raise ContractError("train_attack/aux_attack eps must equal the config eps")
        if self.aux_attack.kind != "pgd":
            raise ContractError("aux_attack must be a pgd attack")

    @property
    def hider_focused(self) -> bool:
        return self.mode.endswith("_hf")

    @property
    def aux_lr(self) -> float:
        return self.lr if self.eta_aux is None else self.eta_aux

    def fixed_prior(self) -> GaussianPrior:
        return GaussianPrior(self.prior_mu, self.prior_sigma, 0, 1, fixed=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drops"] = [list(p) for p in self.lr_drops]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for (1-based) ``epoch``; a drop at epoch k applies from epoch k+1."""
    lr = cfg.lr
    for drop_epoch, factor in cfg.lr_drops:
        if epoch > drop_epoch:
            lr *= factor
    return lr


@dataclass(frozen=True)
class WeightPair:
    lambda_S: float
    lambda_A: float


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    natural_acc: float
    robust_acc: float
    lambda_A_mean: float
    seconds: float = 0.0

    def row(self) -> list[str]:
        return [str(self.epoch)] + [f"{v:.17g}" for v in (self.lr, self.train_loss, self.natural_acc,
                                                          self.robust_acc, self.lambda_A_mean, self.seconds)]


@dataclass
class SgdState:
    velocity: list[np.ndarray] | None = None


def sgd_momentum_step(
    theta: ModelWeights,
    grads: Sequence[np.ndarray],
    state: SgdState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> ModelWeights:
    """``v <- momentum*v + grad + weight_decay*theta``; ``theta <- theta - lr*v``."""
    theta.check_congruent(grads)
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in theta.params]
    new_v, new_p = [], []
    for p, g, v in zip(theta.params, grads, state.velocity):
        v = momentum * v + g + weight_decay * p
        new_v.append(v)
        new_p.append(p - lr * v)
    state.velocity = new_v
    return theta.with_params(new_p)


def lambda_from_kls(kl_main: float, kl_aux: float) -> WeightPair:
    """Softmax over exponentiated branch KLs, evaluated as a logistic of their difference."""
    if not (math.isfinite(kl_main) and math.isfinite(kl_aux)):
        raise NumericError(f"non-finite KL in adaptive weighting: {kl_main}, {kl_aux}")
    d = kl_main - kl_aux
    lam_a = 1.0 / (1.0 + math.exp(d)) if d < 700 else 0.0
    # keep both branches strictly weighted even when the KL gap saturates exp()
    lam_a = min(max(lam_a, LAMBDA_CLIP), 1.0 - LAMBDA_CLIP)
    return WeightPair(1.0 - lam_a, lam_a)


def _kl(weights: ModelWeights, x, x_other) -> float:
    return ad.kl_divergence(Tensor(logits(weights, x)), Tensor(logits(weights, x_other))).item()


def adaptive_lambda(theta, theta_hat, x, x_adv_main, x_adv_aux) -> WeightPair:
    """Branch weights from each model's clean-vs-own-adversarial KL (no gradient flows)."""
    return lambda_from_kls(_kl(theta, x, x_adv_main), _kl(theta_hat, x, x_adv_aux))


# ---------------------------------------------------------------------------
# per-batch objectives


def at_batch(theta: ModelWeights, x, y, cfg: TrainConfig, rng, bounds):
    adv = pgd(theta, x, y, cfg.train_attack, rng=rng, bounds=bounds)
    loss, grads = param_grads(theta, adv.x_adv, y)
    return loss, grads, adv.x_adv


def trades_adversary(theta: ModelWeights, x, spec: AttackSpec, rng, bounds) -> np.ndarray:
    """PGD ascent on KL(f(x) || f(x')) from a small Gaussian start."""
    x = np.asarray(x, dtype=np.float64)
    clean = Tensor(logits(theta, x))
    delta = project_linf(0.001 * rng.standard_normal(x.shape), spec.eps)
    x_adv = _clamp(x + delta, bounds)
    for _ in range(spec.steps):
        xt = Tensor(x_adv, requires_grad=True)
        kl = ad.kl_divergence(clean, forward(theta, xt))
        (g,) = ad.grad(kl, [xt])
        delta = project_linf(x_adv - x + spec.alpha * np.sign(g), spec.eps)
        x_adv = _clamp(x + delta, bounds)
    return x_adv


def trades_loss_and_grads(theta: ModelWeights, x, x_adv, y, beta: float):
    params = theta.tensors(requires_grad=True)
    nat = forward(params, x)
    loss = ad.cross_entropy(nat, y) + beta * ad.kl_divergence(nat, forward(params, x_adv))
    return loss.item(), ad.grad(loss, params)


def trades_batch(theta: ModelWeights, x, y, cfg: TrainConfig, rng, bounds):
    x_adv = trades_adversary(theta, x, cfg.train_attack, rng, bounds)
    loss, grads = trades_loss_and_grads(theta, x, x_adv, y, cfg.trades_beta)
    return loss, grads, x_adv


def combine_gradients(g_main, p, pair: WeightPair) -> list[np.ndarray]:
    return [pair.lambda_S * g + pair.lambda_A * q for g, q in zip(g_main, p)]


@dataclass
class AuxOutcome:
    theta_hat: ModelWeights
    p: tuple[np.ndarray, ...]
    pair: WeightPair
    r: float


def hider_branch(theta, x, y, x_adv_main, cfg: TrainConfig, prior: GaussianPrior, rng, bounds) -> AuxOutcome:
    """Probe sampling, reverse training, auxiliary attack and branch weighting for one batch."""
    r = sample_ratio(prior, rng, r_max=cfg.r_max, warmup=cfg.prior_warmup)
    probe = transform_T(x, x_adv_main, r, cfg.eps, rng=rng, noise=cfg.probe_noise, bounds=bounds)
    theta_hat = reverse_train_step(theta, probe, y, cfg.aux_lr, steps=cfg.aux_reverse_steps)
    mom = compute_momentum_p(theta_hat, x, y, cfg.aux_attack, rng=rng, bounds=bounds, like=theta)
    if cfg.lambda_mode == "static":
        pair = WeightPair(1.0, cfg.lambda_static)
    else:
        pair = adaptive_lambda(theta, theta_hat, x, x_adv_main, mom.x_adv)
    return AuxOutcome(theta_hat, mom.grads, pair, r)


# ---------------------------------------------------------------------------
# epochs


@dataclass
class EpochResult:
    theta: ModelWeights
    log: EpochLog
    lambdas: list[WeightPair]


def _rng(cfg: TrainConfig, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, epoch, stream])


def _run_epoch(theta, data: Dataset, cfg: TrainConfig, epoch: int, opt: SgdState, prior, main_step) -> EpochResult:
    start = time.perf_counter()
    lr = lr_at(cfg, epoch)
    x_all, y_all = data.x_train, data.y_train
    order = _rng(cfg, epoch, STREAM_SHUFFLE).permutation(len(y_all))
    rng_main = _rng(cfg, epoch, STREAM_ATTACK)
    rng_aux = _rng(cfg, epoch, STREAM_AUX)
    loss_sum = nat_hits = rob_hits = 0.0
    lambdas: list[WeightPair] = []
    for lo in range(0, len(order), cfg.batch_size):
        idx = order[lo:lo + cfg.batch_size]
        x, y = x_all[idx], y_all[idx]
        loss, g_main, x_adv = main_step(theta, x, y, cfg, rng_main, data.bounds)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        nat_hits += float((predict(theta, x) == y).sum())
        rob_hits += float((predict(theta, x_adv) == y).sum())
        loss_sum += loss * len(idx)
        if cfg.hider_focused:
            aux = hider_branch(theta, x, y, x_adv, cfg, prior.current(), rng_aux, data.bounds)
            pair = aux.pair
            grads = combine_gradients(g_main, aux.p, pair)
        else:
            pair = WeightPair(1.0, 0.0)
            grads = g_main
        lambdas.append(pair)
        theta = sgd_momentum_step(theta, grads, opt, lr, cfg.sgd_momentum, cfg.weight_decay)
    n = len(order)
    log = EpochLog(
        epoch,
        lr,
        loss_sum / n,
        nat_hits / n,
        rob_hits / n,
        float(np.mean([p.lambda_A for p in lambdas])),
        time.perf_counter() - start,
    )
    return EpochResult(theta.with_params(theta.params, epoch_tag=epoch), log, lambdas)


class _FixedOnly:
    def __init__(self, prior: GaussianPrior):
        self.prior = prior

    def current(self) -> GaussianPrior:
        return self.prior


def train_epoch_at(theta, data: Dataset, cfg: TrainConfig, epoch: int = 1, opt: SgdState | None = None) -> EpochResult:
    return _run_epoch(theta, data, cfg, epoch, opt or SgdState(), None, at_batch)


def train_epoch_trades(theta, data: Dataset, cfg: TrainConfig, epoch: int = 1, opt: SgdState | None = None) -> EpochResult:
    return _run_epoch(theta, data, cfg, epoch, opt or SgdState(), None, trades_batch)


def train_epoch_hfat(theta, data: Dataset, cfg: TrainConfig, prior=None, epoch: int = 1,
                     opt: SgdState | None = None) -> EpochResult:
    """One HFAT epoch: main-branch gradient plus the weighted auxiliary momentum."""
    if not cfg.hider_focused:
        raise ContractError(f"train_epoch_hfat needs an *_hf mode, got {cfg.mode}")
    if prior is None:
        prior = cfg.fixed_prior()
    if isinstance(prior, GaussianPrior):
        prior = _FixedOnly(prior)
    main = trades_batch if cfg.mode == "trades_hf" else at_batch
    return _run_epoch(theta, data, cfg, epoch, opt or SgdState(), prior, main)


def train_one_epoch(theta, data, cfg, epoch, opt, prior) -> EpochResult:
    if cfg.hider_focused:
        return train_epoch_hfat(theta, data, cfg, prior=prior, epoch=epoch, opt=opt)
    if cfg.mode == "trades":
        return train_epoch_trades(theta, data, cfg, epoch=epoch, opt=opt)
    return train_epoch_at(theta, data, cfg, epoch=epoch, opt=opt)


# ---------------------------------------------------------------------------
# run directory


def probe_subset(data: Dataset, cfg: TrainConfig) -> np.ndarray:
    n = len(data.y_train)
    return np.random.default_rng([cfg.seed, 0, STREAM_PRIOR]).permutation(n)[: min(cfg.probe_size, n)]


def online_prior_update(prev: ModelWeights, theta: ModelWeights, data: Dataset, cfg: TrainConfig, epoch: int):
    """Interval-1 ratios between the previous epoch's snapshot and the current weights."""
    idx = probe_subset(data, cfg)
    attack = AttackSpec("pgd", cfg.train_attack.eps, cfg.train_attack.alpha, cfg.train_attack.steps, False)
    samples, _ = hider_ratios(prev, theta, data.x_train[idx], data.y_train[idx], attack, 1, data.bounds,
                              rng=_rng(cfg, epoch, STREAM_PRIOR))
    return samples


def _csv_text(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_csv_rows(path: Path) -> list[list[str]]:
    if not path.exists():
        return []
    rows = list(csv.reader(io.StringIO(path.read_text())))
    return rows[1:]


def model_spec(cfg: TrainConfig, data: Dataset) -> MlpSpec:
    return MlpSpec((data.dim, *cfg.hidden, data.n_classes))


def _latest_resumable(run_dir: Path, epochs: int) -> int:
    best = 0
    for p in run_dir.glob("epoch_*.ckpt"):
        try:
            n = int(p.stem.split("_")[1])
        except (IndexError, ValueError):
            continue
        if n <= epochs and (run_dir / f"optim_{n}.ckpt").exists():
            best = max(best, n)
    return best


def run_training(cfg: TrainConfig, data: Dataset, run_dir, config_text: str | None = None,
                 resume: bool = False, on_epoch: Callable | None = None) -> Path:
    """Train for ``cfg.epochs`` epochs, writing snapshots and logs into ``run_dir``.

    With ``resume=True`` training restarts after the latest snapshot that has
    optimizer state; the continuation is bit-identical to an uninterrupted run.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    spec = model_spec(cfg, data)
    if config_text is None:
        config_text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    steps_per_epoch = math.ceil(len(data.y_train) / cfg.batch_size)

    start_epoch = _latest_resumable(run_dir, cfg.epochs) if resume else 0
    log_rows: list[list[str]] = []
    lam_rows: list[list[str]] = []
    ratio_rows: list[list[str]] = []
    opt = SgdState()
    online = OnlinePrior(cfg.fixed_prior(), cfg.prior_warmup) if cfg.prior_mode == "online" else _FixedOnly(cfg.fixed_prior())
    if start_epoch:
        ck = load_checkpoint(run_dir / f"epoch_{start_epoch}.ckpt")
        if ck.spec != spec:
            raise FormatError("checkpoint architecture does not match the configuration")
        theta = ck.weights
        opt.velocity = [np.array(v) for v in load_checkpoint(run_dir / f"optim_{start_epoch}.ckpt").weights.params]
        log_rows = [r for r in _read_csv_rows(run_dir / "epoch_log.csv") if int(r[0]) <= start_epoch]
        lam_rows = [r for r in _read_csv_rows(run_dir / "lambda_trace.csv")
                    if int(r[0]) <= start_epoch * steps_per_epoch]
        ratio_rows = [r for r in _read_csv_rows(run_dir / "ratios.csv") if int(r[2]) <= start_epoch]
        if isinstance(online, OnlinePrior):
            online.add(RatioSample(float(r[0]), int(r[1])) for r in ratio_rows)
    else:
        theta = init_weights(spec, cfg.seed)
        _atomic_write(run_dir / "config.json", config_text.encode())

    prev = theta
    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        res = train_one_epoch(theta, data, cfg, epoch, opt, online)
        theta = res.theta
        log_rows.append(res.log.row())
        for pair in res.lambdas:
            step += 1
            lam_rows.append([str(step), f"{pair.lambda_S:.17g}", f"{pair.lambda_A:.17g}"])
        if cfg.hider_focused and isinstance(online, OnlinePrior):
            new = online_prior_update(prev, theta, data, cfg, epoch)
            online.add(new)
            ratio_rows += [[f"{s.r:.17g}", str(s.epoch_interval), str(epoch)] for s in new]
            _atomic_write(run_dir / "ratios.csv", _csv_text(["r", "epoch_interval", "epoch"], ratio_rows).encode())
        if epoch % cfg.snapshot_every == 0 or epoch == cfg.epochs:
            save_checkpoint(Checkpoint(spec, theta, epoch, cfg.seed), run_dir / f"epoch_{epoch}.ckpt")
            vel = ModelWeights(spec, tuple(opt.velocity), epoch)
            save_checkpoint(Checkpoint(spec, vel, epoch, cfg.seed), run_dir / f"optim_{epoch}.ckpt")
        _atomic_write(run_dir / "epoch_log.csv", _csv_text(EPOCH_LOG_COLUMNS, log_rows).encode())
        _atomic_write(run_dir / "lambda_trace.csv", _csv_text(["step", "lambda_S", "lambda_A"], lam_rows).encode())
        if on_epoch is not None:
            on_epoch(res)
        prev = theta
    return run_dir


def load_config(path) -> tuple[TrainConfig, DatasetSpec | None, str]:
    """Parse a JSON config file; returns the train config, dataset spec and verbatim text."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    ds = raw.pop("dataset", None)
    cfg = TrainConfig.from_dict(raw)
    return cfg, (DatasetSpec.from_dict(ds) if ds is not None else None), text


def read_snapshots(run_dir) -> dict[int, Checkpoint]:
    out = {}
    for p in Path(run_dir).glob("epoch_*.ckpt"):
        try:
            n = int(p.stem.split("_")[1])
        except (IndexError, ValueError):
            continue
        out[n] = load_checkpoint(p)
    return dict(sorted(out.items()))


def read_epoch_log(run_dir) -> list[EpochLog]:
    rows = _read_csv_rows(Path(run_dir) / "epoch_log.csv")
    return [EpochLog(int(r[0]), *map(float, r[1:])) for r in rows]


def read_lambda_trace(run_dir) -> list[tuple[int, float, float]]:
    return [(int(r[0]), float(r[1]), float(r[2])) for r in _read_csv_rows(Path(run_dir) / "lambda_trace.csv")]
