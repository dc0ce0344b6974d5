"""Input-space loss surfaces around an anchor sample along two directions."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from hfat import autodiff as ad
from hfat.errors import ContractError, FormatError
from hfat.hiders import HiderRecord, input_gradients
from hfat.model import Checkpoint, ModelWeights, logits


@dataclass
class LandscapeGrid:
    mode: str  # "grad" or "hider"
    extent: float
    values: np.ndarray  # values[i, j] = loss at anchor + coords[i]*d1 + coords[j]*d2
    anchor_index: int
    d1: np.ndarray
    d2: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def coords(self) -> np.ndarray:
        return grid_coords(self.extent, self.n)

    @property
    def origin(self) -> float:
        c = self.n // 2
        return float(self.values[c, c])


def grid_coords(extent: float, n: int) -> np.ndarray:
    # built from integer offsets so the centre coordinate is exactly 0.0
    c = n // 2
    return extent * (np.arange(n) - c) / c


def per_sample_ce(weights: ModelWeights, x, y) -> np.ndarray:
    logp = ad.log_softmax_array(logits(weights, x))
    y = np.broadcast_to(np.asarray(y), (logp.shape[0],))
    return -logp[np.arange(logp.shape[0]), y]


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ContractError("direction vector is zero")
    return v / norm


def landscape_grid(
    model,
    anchor_x,
    anchor_y: int,
    mode: str = "grad",
    extent: float = 0.45,
    n: int = 41,
    seed: int = 0,
    hider: HiderRecord | None = None,
    anchor_index: int = 0,
) -> LandscapeGrid:
    """Cross-entropy on an ``n x n`` grid spanned by (d1, random orthogonal d2).

    ``mode="grad"`` takes d1 along the input gradient at the anchor;
    ``mode="hider"`` takes d1 along the hider's perturbation.
    """
    w = model.weights if isinstance(model, Checkpoint) else model
    if n < 3 or n % 2 == 0:
        raise ContractError(f"n must be odd and >= 3 so the anchor is a grid point, got {n}")
    if not extent > 0:
        raise ContractError(f"extent must be positive, got {extent}")
    x0 = np.asarray(anchor_x, dtype=np.float64).reshape(-1)
    if x0.size < 2:
        raise ContractError("a two-direction landscape needs input dim >= 2")
    if mode == "grad":
        d1 = _unit(input_gradients(w, x0[None, :], np.array([anchor_y]))[0])
    elif mode == "hider":
        if hider is None:
            raise ContractError("hider mode requires a HiderRecord")
        d1 = _unit(np.asarray(hider.delta, dtype=np.float64).reshape(-1))
    else:
        raise ContractError(f"unknown landscape mode {mode!r}")
    r = np.random.default_rng(seed).standard_normal(x0.size)
    d2 = _unit(r - np.dot(r, d1) * d1)
    coords = grid_coords(extent, n)
    a, b = np.meshgrid(coords, coords, indexing="ij")
    pts = x0[None, :] + a.reshape(-1, 1) * d1[None, :] + b.reshape(-1, 1) * d2[None, :]
    values = per_sample_ce(w, pts, anchor_y).reshape(n, n)
    return LandscapeGrid(mode, float(extent), values, anchor_index, d1, d2)


def grid_to_csv(grid: LandscapeGrid) -> str:
    buf = io.StringIO()
    buf.write(f"# mode={grid.mode} extent={grid.extent!r} n={grid.n} anchor={grid.anchor_index}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"b={c:.17g}" for c in grid.coords])
    for row in grid.values:
        w.writerow([f"{v:.17g}" for v in row])
    return buf.getvalue()


def grid_from_csv(text: str) -> LandscapeGrid:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FormatError("landscape CSV must start with a '# mode=... extent=...' line")
    meta = dict(item.split("=", 1) for item in lines[0][1:].split())
    rows = list(csv.reader(lines[2:]))
    values = np.array([[float(v) for v in r] for r in rows])
    if values.shape != (int(meta["n"]), int(meta["n"])):
        raise FormatError(f"grid body has shape {values.shape}, header says n={meta['n']}")
    return LandscapeGrid(meta["mode"], float(meta["extent"]), values, int(meta["anchor"]),
                         np.array([]), np.array([]))
