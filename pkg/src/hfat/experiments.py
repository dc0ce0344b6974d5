"""Desk-scale experiment drivers: mode comparison, static-lambda ablation, full pipeline."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from hfat.attacks import AttackSpec
from hfat.data import Dataset, DatasetSpec, make_dataset
from hfat.evaluate import EvalReport, adversarial_set, default_attack_suite, evaluate
from hfat.hiders import detect_hiders, proportion_report, stats_to_csv
from hfat.landscape import grid_to_csv, landscape_grid
from hfat.trainer import TrainConfig, read_epoch_log, read_snapshots, run_training

ABLATION_LAMBDAS = (0.0, 0.01, 0.1, 1.0, 2.0, 3.0, 5.0)
ABLATION_LR = 0.05  # lambda_A = 3 and 5 diverge at the desk lr of 0.1


def shipped_config_text(name: str = "desk_moons") -> str:
    return resources.files("hfat").joinpath("configs", f"{name}.json").read_text()


def desk_setup(name: str = "desk_moons", **overrides) -> tuple[TrainConfig, Dataset, str]:
    """Shipped desk config with field overrides, its dataset, and the resulting config text."""
    raw = json.loads(shipped_config_text(name))
    ds = DatasetSpec.from_dict(raw.pop("dataset"))
    raw.update(overrides)
    cfg = TrainConfig.from_dict(raw)
    text = json.dumps(dict(raw, dataset=ds.to_dict()), indent=2, sort_keys=True) + "\n"
    return cfg, make_dataset(ds), text


def hider_attack(cfg: TrainConfig) -> AttackSpec:
    return AttackSpec("pgd", eps=cfg.eps, steps=20)


@dataclass
class RunSummary:
    mode: str
    seed: int
    run_dir: Path
    natural: float
    pgd20: float
    hider_last: float  # mean interval-1 adversarial hider proportion over the trailing window
    lambda_first: float
    lambda_last: float


def summarize_run(run_dir, cfg: TrainConfig, data: Dataset, window: int = 20) -> RunSummary:
    snaps = read_snapshots(run_dir)
    last = max(snaps)
    report = evaluate(snaps[last], data, default_attack_suite(cfg.eps, ["pgd20"]), seed=cfg.seed)
    series = proportion_report(snaps, data.x_test, data.y_test, hider_attack(cfg), intervals=(1,),
                               bounds=data.bounds, seed=cfg.seed).series(1)
    tail = [series[e] for e in sorted(series)[-window:]]
    logs = read_epoch_log(run_dir)
    return RunSummary(cfg.mode, cfg.seed, Path(run_dir), report.natural, report.accuracy("pgd20"),
                      float(np.mean(tail)) if tail else float("nan"),
                      logs[0].lambda_A_mean, logs[-1].lambda_A_mean)


def compare_modes(root, seeds: Sequence[int] = (0, 1, 2, 3, 4), modes: Sequence[str] = ("at", "at_hf"),
                  config: str = "desk_moons", **overrides) -> list[RunSummary]:
    """Train every (mode, seed) pair from the shipped config and summarize each run."""
    out = []
    for seed in seeds:
        for mode in modes:
            cfg, data, text = desk_setup(config, mode=mode, seed=seed, **overrides)
            run_dir = Path(root) / f"{mode}_s{seed}"
            run_training(cfg, data, run_dir, config_text=text)
            out.append(summarize_run(run_dir, cfg, data))
    return out


def static_lambda_ablation(root, values: Sequence[float] = ABLATION_LAMBDAS, config: str = "desk_moons",
                           **overrides) -> dict[float, EvalReport]:
    """One HFAT run per static auxiliary weight (main weight fixed at 1), each evaluated once.

    The unnormalized pair scales the step by up to 1 + max(values), so every
    grid point shares the reduced ``ABLATION_LR`` unless ``lr`` is overridden.
    """
    overrides.setdefault("lr", ABLATION_LR)
    reports = {}
    for lam in values:
        cfg, data, text = desk_setup(config, mode="at_hf", lambda_mode="static", lambda_static=lam, **overrides)
        run_dir = Path(root) / f"static_{lam:g}"
        run_training(cfg, data, run_dir, config_text=text)
        snaps = read_snapshots(run_dir)
        report = evaluate(snaps[max(snaps)], data, default_attack_suite(cfg.eps), seed=cfg.seed,
                          model_id=f"static_{lam:g}")
        (run_dir / "eval.json").write_text(report.to_json())
        reports[lam] = report
    return reports


def run_pipeline(cfg: TrainConfig, data: Dataset, out_dir, config_text: str | None = None) -> Path:
    """Train, evaluate, report hiders and emit a hider-direction landscape into ``out_dir``."""
    out_dir = Path(out_dir)
    run_training(cfg, data, out_dir, config_text=config_text)
    snaps = read_snapshots(out_dir)
    last = max(snaps)
    report = evaluate(snaps[last], data, default_attack_suite(cfg.eps), seed=cfg.seed, model_id=f"epoch_{last}")
    (out_dir / "eval.json").write_text(report.to_json())
    (out_dir / "eval.csv").write_text(report.to_csv())
    stats = proportion_report(snaps, data.x_test, data.y_test, hider_attack(cfg), intervals=(1, 5),
                              bounds=data.bounds, seed=cfg.seed)
    (out_dir / "hider_stats.csv").write_text(stats_to_csv(stats))
    first = min(snaps)
    # perturbations crafted against the earliest snapshot, re-scored on the last one
    x_adv = adversarial_set(snaps[first], data.x_test, data.y_test, hider_attack(cfg), cfg.seed, data.bounds)
    hiders = detect_hiders(snaps[first], snaps[last], data.x_test, data.y_test, deltas=x_adv - data.x_test)
    h = next((r for r in hiders if r.kind == "adversarial"), None)
    if h is not None:
        grid = landscape_grid(snaps[first], data.x_test[h.sample_index], int(data.y_test[h.sample_index]),
                              mode="hider", extent=1.5 * cfg.eps, n=21, seed=cfg.seed, hider=h,
                              anchor_index=h.sample_index)
        (out_dir / "landscape_hider.csv").write_text(grid_to_csv(grid))
    return out_dir


def run_dir_digest(run_dir) -> dict[str, bytes]:
    """File contents keyed by name, with wall-clock fields removed for comparison."""
    out = {}
    for p in sorted(Path(run_dir).iterdir()):
        raw = p.read_bytes()
        if p.name == "epoch_log.csv":
            lines = raw.decode().splitlines()
            raw = "\n".join(",".join(line.split(",")[:-1]) for line in lines).encode()
        out[p.name] = raw
    return out

