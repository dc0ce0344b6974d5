"""Robustness evaluation and transfer (black-box) matrices."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from hfat.attacks import AttackSpec, run_attack
from hfat.data import Dataset
from hfat.errors import ContractError
from hfat.model import Checkpoint, ModelWeights, predict

# attack suite mirroring the usual robustness table: name -> (kind, steps)
SUITE = {"fgsm": ("fgsm", 1), "pgd20": ("pgd", 20), "pgd100": ("pgd", 100), "mim20": ("mim", 20), "cw30": ("cw", 30)}


def default_attack_suite(eps: float, names: Sequence[str] = tuple(SUITE)) -> dict[str, AttackSpec]:
    return {n: AttackSpec(SUITE[n][0], eps=eps, steps=SUITE[n][1]) for n in names}


@dataclass
class EvalReport:
    model: str
    dataset: str
    natural: float
    attacks: dict[str, dict] = field(default_factory=dict)
    seed: int = 0

    def accuracy(self, name: str) -> float:
        return self.attacks[name]["accuracy"]

    def to_dict(self) -> dict:
        return {"model": self.model, "dataset": self.dataset, "natural": self.natural,
                "attacks": self.attacks, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        d = json.loads(text)
        return cls(d["model"], d["dataset"], d["natural"], d["attacks"], d.get("seed", 0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "dataset", "attack", "accuracy"])
        w.writerow([self.model, self.dataset, "natural", f"{self.natural:.17g}"])
        for name, entry in self.attacks.items():
            w.writerow([self.model, self.dataset, name, f"{entry['accuracy']:.17g}"])
        return buf.getvalue()


def _weights(model) -> ModelWeights:
    return model.weights if isinstance(model, Checkpoint) else model


def _attack_rng(seed: int):
    return np.random.default_rng(seed)


def adversarial_set(model, x, y, spec: AttackSpec, seed: int = 0, bounds=None) -> np.ndarray:
    return run_attack(_weights(model), x, y, spec, rng=_attack_rng(seed), bounds=bounds).x_adv


def evaluate(model, data: Dataset, attack_specs: Mapping[str, AttackSpec], seed: int = 0,
             model_id: str = "model") -> EvalReport:
    """Natural accuracy and per-attack robust accuracy on the test split."""
    w = _weights(model)
    x, y = data.x_test, data.y_test
    natural = float((predict(w, x) == y).mean())
    report = EvalReport(model_id, data.name, natural, {}, seed)
    for name, spec in attack_specs.items():
        x_adv = adversarial_set(w, x, y, spec, seed, data.bounds)
        acc = float((predict(w, x_adv) == y).mean())
        report.attacks[name] = {"spec": spec.to_dict(), "accuracy": acc}
    return report


@dataclass
class TransferMatrix:
    models: list[str]
    acc: np.ndarray  # acc[s, t]: accuracy of target t on examples crafted against source s

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source"] + self.models)
        for name, row in zip(self.models, self.acc):
            w.writerow([name] + [f"{v:.17g}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> TransferMatrix:
        rows = list(csv.reader(io.StringIO(text)))
        models = rows[0][1:]
        acc = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(models, acc)


def transfer_matrix(models: Sequence, data: Dataset, spec: AttackSpec, seed: int = 0,
                    names: Sequence[str] | None = None) -> TransferMatrix:
    """Each source's adversarial set is crafted once and scored by every target."""
    ws = [_weights(m) for m in models]
    if not ws:
        raise ContractError("transfer_matrix needs at least one model")
    if len({w.spec.input_dim for w in ws}) != 1 or ws[0].spec.input_dim != data.dim:
        raise ContractError("all models must share the dataset's input dimension")
    names = list(names) if names is not None else [f"m{i}" for i in range(len(ws))]
    x, y = data.x_test, data.y_test
    acc = np.zeros((len(ws), len(ws)))
    for s, src in enumerate(ws):
        x_adv = adversarial_set(src, x, y, spec, seed, data.bounds)
        for t, tgt in enumerate(ws):
            acc[s, t] = float((predict(tgt, x_adv) == y).mean())
    return TransferMatrix(names, acc)
