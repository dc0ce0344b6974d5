"""Command-line entry point: ``hfat <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from hfat.attacks import AttackSpec, run_attack
from hfat.data import Dataset, DatasetSpec, dataset_to_csv, load_csv, make_dataset
from hfat.errors import ContractError, HfatError, NumericError
from hfat.evaluate import SUITE, adversarial_set, default_attack_suite, evaluate, transfer_matrix
from hfat.hiders import (
    DEFAULT_INTERVALS,
    detect_hiders,
    fit_gaussian,
    hider_ratios,
    occurrence_indices,
    occurrences_to_csv,
    proportion_report,
    ratios_from_csv,
    ratios_to_csv,
    stats_to_csv,
)
from hfat.landscape import grid_to_csv, landscape_grid
from hfat.model import load_checkpoint
from hfat.trainer import load_config, read_snapshots, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _bounds(text: str | None):
    if text is None:
        return None
    lo, hi = (float(t) for t in text.split(","))
    return lo, hi


def _dataset_from_args(args) -> tuple[Dataset, float | None]:
    """Dataset plus the eps of the config it came from (if any)."""
    if args.config:
        cfg, ds, _ = load_config(args.config)
        if ds is None:
            raise ContractError(f"{args.config} has no 'dataset' section")
        return make_dataset(ds), cfg.eps
    if args.dataset is None:
        raise UsageError("one of --dataset or --config is required")
    path = Path(args.dataset)
    if path.suffix == ".json":
        return make_dataset(DatasetSpec.from_dict(json.loads(path.read_text()))), None
    return load_csv(path, bounds=_bounds(args.bounds)), None


def _eps(args, cfg_eps) -> float:
    eps = args.eps if args.eps is not None else cfg_eps
    if eps is None:
        raise UsageError("--eps is required when no --config is given")
    return eps


def _add_data_args(p):
    p.add_argument("--dataset", help="dataset spec (.json) or dataset file (.csv)")
    p.add_argument("--config", help="training config whose 'dataset' section (and eps) to use")
    p.add_argument("--bounds", help="domain bounds 'lo,hi' for a CSV dataset")
    p.add_argument("--eps", type=float)
    p.add_argument("--seed", type=int, default=0)


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_train(args) -> int:
    cfg, ds, text = load_config(args.config)
    if ds is None:
        raise ContractError(f"{args.config} has no 'dataset' section")
    if args.seed is not None:
        cfg.seed = args.seed
        # keep the saved config truthful about the seed actually used
        text = json.dumps({**json.loads(text), "seed": args.seed}, indent=2) + "\n"
    run_dir = Path(args.run_dir) if args.run_dir else Path("runs") / f"{Path(args.config).stem}_s{cfg.seed}"
    data = make_dataset(ds)

    def report(res):
        log = res.log
        print(f"epoch {log.epoch:3d} lr={log.lr:.4g} loss={log.train_loss:.4f} "
              f"nat={log.natural_acc:.4f} rob={log.robust_acc:.4f} lambda_A={log.lambda_A_mean:.4f}")

    run_training(cfg, data, run_dir, config_text=text, resume=args.resume, on_epoch=None if args.quiet else report)
    print(run_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    data, cfg_eps = _dataset_from_args(args)
    eps = _eps(args, cfg_eps)
    names = args.attacks.split(",") if args.attacks else list(SUITE)
    unknown = set(names) - set(SUITE)
    if unknown:
        raise UsageError(f"unknown attacks {sorted(unknown)}; choose from {list(SUITE)}")
    ckpt = load_checkpoint(args.ckpt)
    report = evaluate(ckpt, data, default_attack_suite(eps, names), seed=args.seed, model_id=Path(args.ckpt).stem)
    _write(args.out, report.to_json())
    if args.csv:
        _write(args.csv, report.to_csv())
    print(f"natural={report.natural:.4f} " + " ".join(f"{n}={report.accuracy(n):.4f}" for n in names))
    return EXIT_OK


def cmd_transfer(args) -> int:
    data, cfg_eps = _dataset_from_args(args)
    kind, steps = SUITE[args.attack]
    spec = AttackSpec(kind, eps=_eps(args, cfg_eps), steps=steps)
    models = [load_checkpoint(p) for p in args.ckpt]
    names = [Path(p).stem if len({Path(q).stem for q in args.ckpt}) == len(args.ckpt) else str(p) for p in args.ckpt]
    matrix = transfer_matrix(models, data, spec, seed=args.seed, names=names)
    _write(args.out, matrix.to_csv())
    return EXIT_OK


def cmd_hiders(args) -> int:
    if args.dataset is None and args.config is None:
        args.config = str(Path(args.run_dir) / "config.json")
    data, cfg_eps = _dataset_from_args(args)
    eps = _eps(args, cfg_eps)
    snaps = read_snapshots(args.run_dir)
    if len(snaps) < 2:
        raise ContractError(f"{args.run_dir} needs at least two epoch snapshots")
    attack = AttackSpec("pgd", eps=eps, steps=args.steps)
    out = Path(args.out_dir or args.run_dir)
    intervals = _int_list(args.intervals)
    stats = proportion_report(snaps, data.x_test, data.y_test, attack, intervals, data.bounds, args.seed)
    _write(out / "hider_stats.csv", stats_to_csv(stats))
    for e, k in stats.gaps:
        print(f"gap: no snapshot for epoch {e + k} (present epoch {e}, interval {k})", file=sys.stderr)

    epochs = sorted(snaps)
    probe_epoch = args.probe_epoch or epochs[-1]
    if probe_epoch not in snaps:
        raise ContractError(f"no snapshot for probe epoch {probe_epoch}")
    rng = np.random.default_rng([args.seed, probe_epoch])
    x_adv = run_attack(snaps[probe_epoch].weights, data.x_test, data.y_test, attack, rng=rng, bounds=data.bounds).x_adv
    earlier = {e: snaps[e] for e in epochs if e < probe_epoch}
    occ = occurrence_indices(earlier, snaps[probe_epoch], x_adv, data.y_test)
    _write(out / "occurrences.csv", occurrences_to_csv(probe_epoch, occ))

    samples, epochs_of = [], []
    for k in intervals:
        for e in epochs:
            if e + k in snaps:
                s, _ = hider_ratios(snaps[e].weights, snaps[e + k].weights, data.x_test, data.y_test, attack, k,
                                    data.bounds, rng=np.random.default_rng([args.seed, e, k]))
                samples += s
                epochs_of += [e + k] * len(s)
    _write(out / "ratios.csv", ratios_to_csv(samples, epochs_of))
    print(out)
    return EXIT_OK


def cmd_fitprior(args) -> int:
    samples = ratios_from_csv(Path(args.ratios).read_text())
    intervals = [args.interval] if args.interval is not None else sorted({s.epoch_interval for s in samples})
    priors = [fit_gaussian(samples, interval=k).to_dict() for k in intervals]
    text = json.dumps(priors[0] if args.interval is not None else priors, indent=2) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_landscape(args) -> int:
    data, cfg_eps = _dataset_from_args(args)
    ckpt = load_checkpoint(args.ckpt)
    extent = args.extent if args.extent is not None else 1.5 * _eps(args, cfg_eps)
    x, y = data.x_test, data.y_test
    record = None
    anchor = args.anchor
    if args.mode == "hider":
        if args.later is None:
            raise UsageError("--mode hider needs --later (a later snapshot)")
        later = load_checkpoint(args.later)
        spec = AttackSpec("pgd", eps=_eps(args, cfg_eps), steps=20)
        x_adv = adversarial_set(ckpt, x, y, spec, args.seed, data.bounds)
        found = [r for r in detect_hiders(ckpt, later, x, y, deltas=x_adv - x) if r.kind == "adversarial"]
        if anchor is None:
            if not found:
                raise ContractError("no adversarial hider between the two snapshots")
            record = found[0]
        else:
            record = next((r for r in found if r.sample_index == anchor), None)
            if record is None:
                raise ContractError(f"test sample {anchor} is not a hider between the two snapshots")
        anchor = record.sample_index
    anchor = anchor or 0
    if not 0 <= anchor < len(y):
        raise ContractError(f"anchor index {anchor} outside the test split (size {len(y)})")
    grid = landscape_grid(ckpt, x[anchor], int(y[anchor]), mode=args.mode, extent=extent, n=args.n,
                          seed=args.seed, hider=record, anchor_index=anchor)
    _write(args.out, grid_to_csv(grid))
    return EXIT_OK


def cmd_dataset(args) -> int:
    spec = DatasetSpec.from_dict(json.loads(Path(args.spec).read_text()))
    _write(args.out, dataset_to_csv(make_dataset(spec)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hfat", description="Hider-focused adversarial training on desk-scale data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train from a JSON config into a run directory")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="natural and robust accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    _add_data_args(p)
    p.add_argument("--attacks", help=f"comma list from {','.join(SUITE)} (default: all)")
    p.add_argument("--out", required=True, help="EvalReport JSON path")
    p.add_argument("--csv", help="optional CSV copy of the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="source x target transfer accuracy matrix")
    p.add_argument("--ckpt", nargs="+", required=True)
    _add_data_args(p)
    p.add_argument("--attack", default="pgd20", choices=list(SUITE))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("hiders", help="hider proportions, occurrences and ratio samples of a run")
    p.add_argument("--run-dir", required=True)
    _add_data_args(p)
    p.add_argument("--intervals", default=",".join(map(str, DEFAULT_INTERVALS)))
    p.add_argument("--steps", type=int, default=20, help="PGD steps for the probe attack")
    p.add_argument("--probe-epoch", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_hiders)

    p = sub.add_parser("fitprior", help="fit Gaussian priors to ratio samples")
    p.add_argument("--ratios", required=True)
    p.add_argument("--interval", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fitprior)

    p = sub.add_parser("landscape", help="loss grid around a test anchor")
    p.add_argument("--ckpt", required=True)
    _add_data_args(p)
    p.add_argument("--mode", choices=("grad", "hider"), default="grad")
    p.add_argument("--later", help="later snapshot used to find hiders (hider mode)")
    p.add_argument("--anchor", type=int)
    p.add_argument("--extent", type=float, help="half-width per axis (default 1.5*eps)")
    p.add_argument("--n", type=int, default=41)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("dataset", help="materialize a dataset spec as CSV")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hfat {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, OverflowError) as exc:
        print(f"hfat {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HfatError, OSError, ValueError, KeyError, IndexError, json.JSONDecodeError) as exc:
        print(f"hfat {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
