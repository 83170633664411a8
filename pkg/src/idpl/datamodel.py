"""Shared value types, label conventions and the tensor checkpoint container.

Dense arrays are plain numpy (float32 for reals). Anything that takes part in
gradient computation is a ``torch.Tensor``; the value types here are the
frozen, validated snapshots passed between pipeline stages.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

IGNORE = 255

CKPT_MAGIC = b"IDPLTNS\x00"
CKPT_VERSION = 1
_CKPT_DTYPES = ("float32", "float64", "int64", "int32", "uint8", "bool")


class ValidationError(ValueError):
    """Bad input: wrong shape, out-of-range value, non-finite data."""


class ShapeError(ValidationError):
    pass


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf where a finite value is required."""


class StateError(RuntimeError):
    """An object is used before a required field has been populated."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def check_finite(arr, name: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")


def _to_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def validate_label_map(labels: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label map must be 2-D, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError(f"label map must be integer, got {labels.dtype}")
    if labels.size and (labels.min() < 0):
        raise ValidationError("label map contains negative ids")
    if num_classes is not None:
        bad = (labels >= num_classes) & (labels != IGNORE)
        if bad.any():
            raise ValidationError(
                f"label {int(labels[bad][0])} out of range for {num_classes} classes"
            )
    return labels


def _validate_pixels(pixels) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"pixels must be H x W x 3, got {pixels.shape}")
    check_finite(pixels, "pixels")
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise ValidationError("pixels must lie in [0, 1]")
    return pixels


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    labels: np.ndarray
    id: str = ""

    def __post_init__(self):
        pixels = _validate_pixels(self.pixels)
        labels = validate_label_map(self.labels).astype(np.int64)
        if labels.shape != pixels.shape[:2]:
            raise ShapeError(
                f"pixels {pixels.shape[:2]} and labels {labels.shape} differ in size"
            )
        object.__setattr__(self, "pixels", _frozen(pixels))
        object.__setattr__(self, "labels", _frozen(labels))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class UnlabeledImage:
    """A target-domain image. Deliberately has no label field."""

    pixels: np.ndarray
    id: str

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen(_validate_pixels(self.pixels)))
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("UnlabeledImage needs a non-empty string id")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class ProbMap:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float32)
        if probs.ndim != 3:
            raise ShapeError(f"ProbMap must be H x W x C, got {probs.shape}")
        if probs.shape[2] < 2:
            raise ValidationError("ProbMap needs at least 2 classes")
        check_finite(probs, "probs")
        if probs.size and (probs.min() < 0.0 or probs.max() > 1.0 + 1e-6):
            raise ValidationError("probabilities must lie in [0, 1]")
        if not np.allclose(probs.sum(axis=2), 1.0, atol=1e-5):
            raise ValidationError("per-pixel probabilities must sum to 1")
        object.__setattr__(self, "probs", _frozen(probs))

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[:2]

    def argmax(self) -> np.ndarray:
        return self.probs.argmax(axis=2)


@dataclass(frozen=True)
class PseudoLabelMap:
    labels: np.ndarray
    coverage: float = field(default=-1.0)

    def __post_init__(self):
        labels = validate_label_map(self.labels).astype(np.int64)
        measured = float(np.mean(labels != IGNORE)) if labels.size else 0.0
        if self.coverage == -1.0:
            object.__setattr__(self, "coverage", measured)
        elif not np.isclose(self.coverage, measured, atol=1e-12):
            raise ValidationError(
                f"coverage {self.coverage} disagrees with measured {measured}"
            )
        object.__setattr__(self, "labels", _frozen(labels))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def downsample(self, stride: int) -> "PseudoLabelMap":
        """Nearest-neighbour subsample onto a grid ``stride`` times coarser."""
        if stride == 1:
            return self
        off = stride // 2
        return PseudoLabelMap(self.labels[off::stride, off::stride])


def softmax_over_channels(logits) -> ProbMap:
    logits = _to_numpy(logits)
    if logits.ndim != 3:
        raise ShapeError(f"logits must be H x W x C, got shape {logits.shape}")
    if logits.shape[2] < 2:
        raise ValidationError("softmax needs at least 2 channels")
    check_finite(logits, "logits")
    z = logits.astype(np.float64)
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=2, keepdims=True)
    return ProbMap(probs.astype(np.float32))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = validate_label_map(_to_numpy(labels), num_classes)
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float32)
    mask = labels != IGNORE
    rows, cols = np.nonzero(mask)
    out[rows, cols, labels[mask]] = 1.0
    return out


# --- checkpoint container -------------------------------------------------
#
# layout: MAGIC(8) | version u16 | header_len u32 | header JSON | payload
# header = {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
# payload arrays are little-endian, C order, concatenated in header order.


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payload = io.BytesIO()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(_to_numpy(arr))
        if arr.dtype.name not in _CKPT_DTYPES:
            raise ValidationError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        if arr.dtype.kind == "f":
            check_finite(arr, name)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": payload.tell(),
                "nbytes": len(raw),
            }
        )
        payload.write(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValidationError(f"{path}: not a tensor container")
    pos = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<HI", data, pos)
    if version != CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported container version {version}")
    pos += struct.calcsize("<HI")
    header = json.loads(data[pos : pos + hlen].decode())
    base = pos + hlen
    tensors = {}
    for ent in header["tensors"]:
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        start = base + ent["offset"]
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(ent["shape"], dtype=np.int64)),
                            offset=start)
        tensors[ent["name"]] = arr.reshape(ent["shape"]).astype(dt.newbyteorder("="))
    return tensors, header["meta"]
