"""Voxel volume containers and the raw + JSON sidecar file format.

Arrays are indexed ``data[x, y, z]`` so that ``data.shape == dims``.  On disk
the payload is written in Fortran order, which gives the x-fastest linear
layout ``index = x + y*nx + z*nx*ny``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

PORE = 1
ROCK = 0

_KINDS = {"binary": np.uint8, "gray8": np.uint8, "gray16": np.dtype("<u2")}


class VolumeFormatError(ValueError):
    """Raised when a raw volume or its sidecar cannot be interpreted."""


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class BinaryVolume:
    """Two-phase voxel volume, 0 = rock and 1 = pore, isotropic voxels.

    Attributes:
        data: uint8 array of shape (nx, ny, nz); read-only.
        scale: voxel edge length in micrometres.
    """

    data: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"expected a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        elif not np.isin(np.unique(arr), (0, 1)).all():
            raise ValueError("binary volume values must be 0 or 1")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "data", _frozen(arr, np.uint8))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def kind(self) -> str:
        return "binary"

    @property
    def pore(self) -> np.ndarray:
        return self.data.astype(bool)

    def porosity(self) -> float:
        return float(self.data.mean())

    def with_data(self, data: np.ndarray) -> "BinaryVolume":
        return BinaryVolume(data, self.scale)

    def __eq__(self, other):
        if not isinstance(other, BinaryVolume):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class GrayVolume:
    """Grayscale voxel volume with 8- or 16-bit unsigned intensities."""

    data: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"expected a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype not in (np.uint8, np.uint16):
            raise ValueError(f"gray volumes must be uint8 or uint16, got {arr.dtype}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "data", _frozen(arr, arr.dtype))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def kind(self) -> str:
        return "gray8" if self.data.dtype == np.uint8 else "gray16"

    def __eq__(self, other):
        if not isinstance(other, GrayVolume):
            return NotImplemented
        return (self.scale == other.scale and self.data.dtype == other.data.dtype
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class LabelField:
    """Connected-component labels: 0 is background, 1..count are components."""

    labels: np.ndarray
    count: int
    connectivity: int = 26
    scale: float = 1.0

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    def sizes(self) -> np.ndarray:
        """Voxel count of each component, index 0 is component 1."""
        return np.bincount(self.labels.ravel(), minlength=self.count + 1)[1:]


Volume = Union[BinaryVolume, GrayVolume]


def sidecar_path(path: Union[str, os.PathLike]) -> Path:
    return Path(path).with_suffix(".json")


def load_volume(path: Union[str, os.PathLike]) -> Volume:
    """Read a raw voxel file and its JSON sidecar.

    Raises:
        VolumeFormatError: missing or corrupt sidecar, unknown kind or phase
            encoding, or a payload whose length disagrees with the dims.
    """
    path = Path(path)
    meta_path = sidecar_path(path)
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise VolumeFormatError(f"sidecar not found: {meta_path}") from None
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"corrupt sidecar {meta_path}: {exc}") from None

    try:
        dims = tuple(int(d) for d in meta["dims"])
        scale = float(meta["scale_um"])
        kind = meta["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"corrupt sidecar {meta_path}: {exc!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"corrupt sidecar {meta_path}: bad dims {dims}")
    if kind not in _KINDS:
        raise VolumeFormatError(f"unknown volume kind {kind!r}")
    if kind == "binary" and meta.get("pore_value", PORE) != PORE:
        raise VolumeFormatError(f"unknown phase encoding: pore_value={meta['pore_value']!r}")

    dtype = np.dtype(_KINDS[kind])
    raw = path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"data length mismatch: {path} holds {len(raw)} bytes, sidecar implies {expected}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    if kind == "binary":
        if arr.max(initial=0) > 1:
            raise VolumeFormatError("unknown phase encoding: binary payload holds values > 1")
        return BinaryVolume(arr, scale)
    return GrayVolume(arr.astype(dtype.newbyteorder("=")), scale)


def save_volume(volume: Volume, path: Union[str, os.PathLike]) -> None:
    """Write ``volume`` as a raw payload plus JSON sidecar next to it."""
    path = Path(path)
    kind = volume.kind
    dtype = np.dtype(_KINDS[kind])
    payload = np.asarray(volume.data, dtype=dtype).tobytes(order="F")
    meta = {"dims": list(volume.dims), "scale_um": volume.scale, "kind": kind}
    if kind == "binary":
        meta["pore_value"] = PORE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")
