"""MLP classifiers, initialization, prediction and checkpoint persistence."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from hfat import autodiff as ad
from hfat.autodiff import Tensor
from hfat.errors import ContractError, DimensionError, FormatError, UnsupportedVersionError

MAGIC = b"HFATCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIqqI")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ContractError("an MLP needs at least an input and an output size")
        if any(s <= 0 for s in sizes):
            raise ContractError(f"layer sizes must be positive, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes


@dataclass(frozen=True)
class ModelWeights:
    """Read-only parameter arrays ordered ``[W1, b1, W2, b2, ...]``."""

    spec: MlpSpec
    params: tuple[np.ndarray, ...]
    epoch_tag: int = 0

    def __post_init__(self):
        shapes = self.spec.param_shapes()
        if len(self.params) != len(shapes):
            raise DimensionError(f"expected {len(shapes)} parameter arrays, got {len(self.params)}")
        frozen = []
        for p, shape in zip(self.params, shapes):
            arr = np.array(p, dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"parameter shape {arr.shape} does not match spec {shape}")
            if not np.all(np.isfinite(arr)):
                raise ContractError("model weights must be finite")
            arr.flags.writeable = False
            frozen.append(arr)
        object.__setattr__(self, "params", tuple(frozen))

    def tensors(self, requires_grad: bool = False) -> list[Tensor]:
        return [Tensor(p, requires_grad=requires_grad) for p in self.params]

    def with_params(self, params: Sequence[np.ndarray], epoch_tag: int | None = None) -> ModelWeights:
        return ModelWeights(self.spec, tuple(params), self.epoch_tag if epoch_tag is None else epoch_tag)

    def axpy(self, scale: float, direction: Sequence[np.ndarray]) -> ModelWeights:
        """New weights ``self + scale * direction``."""
        self.check_congruent(direction)
        return self.with_params([p + scale * d for p, d in zip(self.params, direction)])

    def check_congruent(self, arrays: Sequence[np.ndarray]) -> None:
        if len(arrays) != len(self.params) or any(
            np.shape(a) != p.shape for a, p in zip(arrays, self.params)
        ):
            raise ContractError("parameter list is not shape-congruent with the model")


@dataclass(frozen=True)
class Checkpoint:
    spec: MlpSpec
    weights: ModelWeights
    epoch: int
    seed: int = 0
    format_version: int = FORMAT_VERSION


def init_weights(spec: MlpSpec, seed: int) -> ModelWeights:
    """He-normal weights (std sqrt(2/fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    params: list[np.ndarray] = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        params.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        params.append(np.zeros(fan_out))
    return ModelWeights(spec, tuple(params), 0)


def forward(weights: ModelWeights | Sequence[Tensor], x, spec: MlpSpec | None = None) -> Tensor:
    """Affine/ReLU stack ending in raw logits.

    ``weights`` is either a :class:`ModelWeights` (treated as constants) or a
    list of parameter tensors, e.g. from ``weights.tensors(requires_grad=True)``.
    """
    if isinstance(weights, ModelWeights):
        params = weights.tensors()
        spec = weights.spec
    else:
        params = list(weights)
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.data.ndim != 2:
        raise DimensionError(f"input must be a B x d batch, got shape {h.shape}")
    expected = params[0].shape[0]
    if h.shape[1] != expected:
        raise DimensionError(f"input dim {h.shape[1]} does not match model input size {expected}")
    n_layers = len(params) // 2
    for k in range(n_layers):
        h = ad.linear(h, params[2 * k], params[2 * k + 1])
        if k < n_layers - 1:
            h = ad.relu(h)
    return h


def logits(weights: ModelWeights, x) -> np.ndarray:
    """Forward pass on plain arrays, no graph."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != weights.spec.input_dim:
        raise DimensionError(f"input shape {h.shape} incompatible with input size {weights.spec.input_dim}")
    n_layers = len(weights.params) // 2
    for k in range(n_layers):
        h = h @ weights.params[2 * k] + weights.params[2 * k + 1]
        if k < n_layers - 1:
            h = np.where(h > 0, h, 0.0)
    return h


def predict(weights: ModelWeights, x) -> np.ndarray:
    # np.argmax returns the first maximal index, so ties go to the smallest class
    return logits(weights, x).argmax(axis=1)


def ce_loss(weights: ModelWeights, x, y) -> float:
    return ad.cross_entropy(Tensor(logits(weights, x)), y).item()


def param_grads(weights: ModelWeights, x, y) -> tuple[float, list[np.ndarray]]:
    """Cross-entropy value and its gradient with respect to every parameter."""
    params = weights.tensors(requires_grad=True)
    loss = ad.cross_entropy(forward(params, x), y)
    return loss.item(), ad.grad(loss, params)


# ---------------------------------------------------------------------------
# checkpoint files


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    sizes = ckpt.spec.layer_sizes
    parts = [
        _HEADER.pack(MAGIC, ckpt.format_version, ckpt.epoch, ckpt.seed, len(sizes)),
        struct.pack(f"<{len(sizes)}I", *sizes),
    ]
    parts += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in ckpt.weights.params]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    _atomic_write(path, checkpoint_bytes(ckpt))
    return path


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < _HEADER.size:
        raise FormatError("checkpoint truncated inside the header")
    magic, version, epoch, seed, n_sizes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint format version {version} (reader supports {FORMAT_VERSION})")
    offset = _HEADER.size
    if len(raw) < offset + 4 * n_sizes:
        raise FormatError("checkpoint truncated inside the layer-size block")
    sizes = struct.unpack_from(f"<{n_sizes}I", raw, offset)
    offset += 4 * n_sizes
    try:
        spec = MlpSpec(sizes)
    except ContractError as exc:
        raise FormatError(f"invalid layer sizes in header: {sizes}") from exc
    shapes = spec.param_shapes()
    expected = offset + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != expected:
        raise FormatError(f"checkpoint payload is {len(raw)} bytes, header implies {expected}")
    params = []
    for shape in shapes:
        count = int(np.prod(shape))
        params.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape))
        offset += 8 * count
    weights = ModelWeights(spec, tuple(params), epoch)
    return Checkpoint(spec, weights, epoch, seed, version)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
