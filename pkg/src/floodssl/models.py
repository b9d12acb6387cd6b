"""Desk-scale networks: a small residual CNN classifier and a 2-level UNet."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"FSSLCKPT"
_KINDS = {"classifier": 0, "unet_lite": 1}


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    n_classes: int = 2
    width: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")


class _Model:
    kind = ""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {}

    def _conv(self, name: str, c_in: int, c_out: int, k: int) -> None:
        fan_in = c_in * k * k
        bound = np.sqrt(6.0 / fan_in)
        self.params[f"{name}.weight"] = Tensor(
            self._rng.uniform(-bound, bound, size=(c_out, c_in, k, k)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)

    def _dense(self, name: str, f_in: int, f_out: int) -> None:
        bound = np.sqrt(6.0 / f_in)
        self.params[f"{name}.weight"] = Tensor(
            self._rng.uniform(-bound, bound, size=(f_in, f_out)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(f_out), requires_grad=True)

    def conv(self, name: str, x: Tensor, pad: int = 1) -> Tensor:
        return T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], 1, pad)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params.values()]

    def load_arrays(self, arrays: list[np.ndarray]) -> None:
        if len(arrays) != len(self.params):
            raise ValueError(f"expected {len(self.params)} arrays, got {len(arrays)}")
        for p, a in zip(self.params.values(), arrays):
            if p.data.shape != a.shape:
                raise ValueError(f"parameter shape {a.shape} != {p.data.shape}")
            p.data = np.array(a, dtype=np.float64)

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected N×{self.config.in_channels}×H×W, got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"H and W must be divisible by 4, got {x.shape[2:]}")

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class ClassifierModel(_Model):
    """conv(3→w)-relu-pool, conv(w→2w)-relu, residual conv(2w→2w), pool, GAP, dense→1."""

    kind = "classifier"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        w = config.width
        self._conv("stage1", config.in_channels, w, 3)
        self._conv("stage2a", w, 2 * w, 3)
        self._conv("stage2b", 2 * w, 2 * w, 3)
        self._dense("head", 2 * w, 1)

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        h = T.maxpool2d(T.relu(self.conv("stage1", x)))
        h = T.relu(self.conv("stage2a", h))
        h = T.relu(self.conv("stage2b", h) + h)
        h = T.maxpool2d(h)
        feats = T.global_avg_pool(h)
        return T.linear(feats, self.params["head.weight"], self.params["head.bias"])


class SegmenterModel(_Model):
    """UNet-lite: two encoder levels, a bottleneck, two decoder levels with skips."""

    kind = "unet_lite"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        w = config.width
        self._conv("enc1", config.in_channels, w, 3)
        self._conv("enc2", w, 2 * w, 3)
        self._conv("bottleneck", 2 * w, 4 * w, 3)
        self._conv("dec2", 4 * w + 2 * w, 2 * w, 3)
        self._conv("dec1", 2 * w + w, w, 3)
        self._conv("head", w, config.n_classes, 1)

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        e1 = T.relu(self.conv("enc1", x))
        e2 = T.relu(self.conv("enc2", T.maxpool2d(e1)))
        b = T.relu(self.conv("bottleneck", T.maxpool2d(e2)))
        d2 = T.relu(self.conv("dec2", T.concat_channels(T.upsample_nearest(b), e2)))
        d1 = T.relu(self.conv("dec1", T.concat_channels(T.upsample_nearest(d2), e1)))
        return self.conv("head", d1, pad=0)


def init_classifier(config: ModelConfig) -> ClassifierModel:
    return ClassifierModel(config)


def init_unet_lite(config: ModelConfig) -> SegmenterModel:
    return SegmenterModel(config)


def forward(model: _Model, batch: Tensor) -> Tensor:
    return model.forward(batch)


# -- checkpoints --------------------------------------------------------------
#
# layout (little-endian):
#   8s  magic
#   5q  kind, in_channels, n_classes, width, seed
#   q   number of parameter arrays
#   per array: q ndim, ndim*q extents, prod(extents)*f8 values

def save_checkpoint(model: _Model, path: str | Path) -> None:
    c = model.config
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<5q", _KINDS[model.kind], c.in_channels, c.n_classes, c.width, c.seed)
    arrays = [p.data for p in model.params.values()]
    buf += struct.pack("<q", len(arrays))
    for a in arrays:
        buf += struct.pack(f"<q{a.ndim}q", a.ndim, *a.shape)
        buf += np.ascontiguousarray(a, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def _read_checkpoint(path: str | Path) -> tuple[str, ModelConfig, list[np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = 8
    try:
        kind_id, c_in, n_cls, width, seed = struct.unpack_from("<5q", raw, off)
        off += 40
        (count,) = struct.unpack_from("<q", raw, off)
        off += 8
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<q", raw, off)
            off += 8
            shape = struct.unpack_from(f"<{ndim}q", raw, off)
            off += 8 * ndim
            n = int(np.prod(shape))
            if off + 8 * n > len(raw):
                raise ValueError("truncated")
            arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off)
                          .astype(np.float64).reshape(shape))
            off += 8 * n
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    kind = {v: k for k, v in _KINDS.items()}.get(kind_id)
    if kind is None:
        raise ValueError(f"{path}: unknown model kind {kind_id}")
    return kind, ModelConfig(c_in, n_cls, width, seed), arrays


def load_checkpoint(path: str | Path, model: _Model | None = None) -> _Model:
    """Load parameters from ``path``.

    With ``model`` given, the stored kind and architecture (channels, classes,
    width) must match it, otherwise ValueError. The seed is not compared since
    it only affects initial values.
    """
    kind, config, arrays = _read_checkpoint(path)
    if model is None:
        model = (ClassifierModel if kind == "classifier" else SegmenterModel)(config)
    else:
        mine = model.config
        if (kind != model.kind or config.in_channels != mine.in_channels
                or config.n_classes != mine.n_classes or config.width != mine.width):
            raise ValueError(f"{path}: checkpoint config {kind}/{config} does not match "
                             f"{model.kind}/{mine}")
    model.load_arrays(arrays)
    return model
