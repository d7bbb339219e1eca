"""Edge-pattern and micro-pore dictionaries learned from a high-resolution volume.

A 5x5x5 template is split into a 3x3x3 skeleton lattice (the voxels with all
coordinates even) and 98 pending positions.  Skeleton codes are 27-bit
integers, edge fills 98-bit integers; both use the x-fastest position order
``p = x + 5*y + 25*z``.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .imageops import downsample_mean, label_components
from .scaleplan import ScalePlan
from .volume import BinaryVolume

TEMPLATE = 5
_P = np.arange(TEMPLATE ** 3)
_PX, _PY, _PZ = _P % 5, (_P // 5) % 5, _P // 25
_EVEN = (_PX % 2 == 0) & (_PY % 2 == 0) & (_PZ % 2 == 0)

SKELETON_POSITIONS = _P[_EVEN]
PENDING_POSITIONS = _P[~_EVEN]
N_SKELETON = len(SKELETON_POSITIONS)  # 27
N_PENDING = len(PENDING_POSITIONS)  # 98
FILL_BYTES = (N_PENDING + 7) // 8

SKELETON_XYZ = np.stack([_PX[_EVEN], _PY[_EVEN], _PZ[_EVEN]], axis=1)
PENDING_XYZ = np.stack([_PX[~_EVEN], _PY[~_EVEN], _PZ[~_EVEN]], axis=1)

_EPD_MAGIC = b"MSEP"
_MPD_MAGIC = b"MSMP"
_FORMAT_VERSION = 1


class DictionaryError(ValueError):
    pass


# ---------------------------------------------------------------- block codes

def _check_block(block: np.ndarray) -> np.ndarray:
    block = np.asarray(block)
    if block.shape != (TEMPLATE,) * 3:
        raise ValueError(f"expected a 5x5x5 block, got shape {block.shape}")
    return block


def extract_skeleton(block: np.ndarray) -> int:
    """Skeleton code of a 5x5x5 block: bit k is the k-th even-lattice voxel."""
    block = _check_block(block)
    bits = block[SKELETON_XYZ[:, 0], SKELETON_XYZ[:, 1], SKELETON_XYZ[:, 2]]
    return sum(int(b) << k for k, b in enumerate(bits) if b)


def extract_fill(block: np.ndarray) -> int:
    """98-bit edge fill of a 5x5x5 block."""
    block = _check_block(block)
    bits = block[PENDING_XYZ[:, 0], PENDING_XYZ[:, 1], PENDING_XYZ[:, 2]]
    return sum(1 << t for t, b in enumerate(bits) if b)


def assemble(code: int, fill: int) -> np.ndarray:
    """Rebuild the 5x5x5 block holding ``code`` on the skeleton and ``fill`` elsewhere."""
    block = np.zeros((TEMPLATE,) * 3, dtype=np.uint8)
    sk = np.array([(code >> k) & 1 for k in range(N_SKELETON)], dtype=np.uint8)
    pd = np.array([(fill >> t) & 1 for t in range(N_PENDING)], dtype=np.uint8)
    block[SKELETON_XYZ[:, 0], SKELETON_XYZ[:, 1], SKELETON_XYZ[:, 2]] = sk
    block[PENDING_XYZ[:, 0], PENDING_XYZ[:, 1], PENDING_XYZ[:, 2]] = pd
    return block


def split_fill(fill: int) -> tuple[int, int]:
    return fill & 0xFFFFFFFFFFFFFFFF, fill >> 64


def fills_to_bits(fills: np.ndarray) -> np.ndarray:
    """Unpack an (F, 2) array of (low, high) uint64 words into (F, 98) bits."""
    fills = np.asarray(fills, dtype=np.uint64).reshape(-1, 2)
    t = np.arange(64, dtype=np.uint64)
    lo = (fills[:, :1] >> t) & np.uint64(1)
    hi = (fills[:, 1:] >> t[: N_PENDING - 64]) & np.uint64(1)
    return np.concatenate([lo, hi], axis=1).astype(np.uint8)


def bits_to_fills(bits: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fills_to_bits`."""
    bits = np.asarray(bits, dtype=np.uint64).reshape(-1, N_PENDING)
    t = np.arange(64, dtype=np.uint64)
    lo = (bits[:, :64] << t).sum(axis=1, dtype=np.uint64)
    hi = (bits[:, 64:] << t[: N_PENDING - 64]).sum(axis=1, dtype=np.uint64)
    return np.stack([lo, hi], axis=1)


def scan_patterns(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Codes and fills of every 5x5x5 block at stride 1, in scan order.

    Scan order is x fastest, then y, then z over the block origin.

    Returns:
        ``codes`` of shape (S,) uint32 and ``fills`` of shape (S, 2) uint64.
    """
    data = np.asarray(data, dtype=np.uint8)
    sx, sy, sz = (d - TEMPLATE + 1 for d in data.shape)
    if min(sx, sy, sz) < 1:
        raise DictionaryError(f"volume of dims {data.shape} is smaller than the 5^3 template")

    def window(dx, dy, dz):
        return data[dx:dx + sx, dy:dy + sy, dz:dz + sz].astype(np.uint64)

    codes = np.zeros((sx, sy, sz), dtype=np.uint64)
    for k, (dx, dy, dz) in enumerate(SKELETON_XYZ):
        codes |= window(dx, dy, dz) << np.uint64(k)
    lo = np.zeros_like(codes)
    hi = np.zeros_like(codes)
    for t, (dx, dy, dz) in enumerate(PENDING_XYZ):
        if t < 64:
            lo |= window(dx, dy, dz) << np.uint64(t)
        else:
            hi |= window(dx, dy, dz) << np.uint64(t - 64)
    codes = codes.ravel(order="F").astype(np.uint32)
    fills = np.stack([lo.ravel(order="F"), hi.ravel(order="F")], axis=1)
    return codes, fills


# ------------------------------------------------------ edge pattern dictionary

@dataclass(frozen=True, eq=False)
class EdgePatternDictionary:
    """Skeleton classes, each with its deduplicated list of edge fills.

    Class ``i`` has skeleton code ``codes[i]`` and fills
    ``fills[offsets[i]:offsets[i+1]]`` (rows of low/high 64-bit words).
    Classes and fills within a class are ordered by first occurrence in
    the scan.
    """

    level: int
    scale: float
    codes: np.ndarray
    offsets: np.ndarray
    fills: np.ndarray
    _bits_cache: dict = field(default_factory=dict, repr=False, compare=False)
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("codes", "offsets", "fills"):
            getattr(self, name).setflags(write=False)
        if not self._index:
            self._index.update({int(c): i for i, c in enumerate(self.codes)})

    @property
    def n_classes(self) -> int:
        return len(self.codes)

    @property
    def n_fills(self) -> int:
        return len(self.fills)

    def class_of(self, code: int) -> int | None:
        return self._index.get(int(code))

    def fill_count(self, cls: int) -> int:
        return int(self.offsets[cls + 1] - self.offsets[cls])

    def fills_of(self, cls: int) -> list[int]:
        rows = self.fills[self.offsets[cls]:self.offsets[cls + 1]]
        return [int(lo) | (int(hi) << 64) for lo, hi in rows]

    def fill_bits(self, cls: int) -> np.ndarray:
        """Fills of class ``cls`` as a read-only (nf, 98) uint8 array."""
        bits = self._bits_cache.get(cls)
        if bits is None:
            bits = fills_to_bits(self.fills[self.offsets[cls]:self.offsets[cls + 1]])
            bits.setflags(write=False)
            self._bits_cache[cls] = bits
        return bits

    def entries(self) -> dict[int, list[int]]:
        return {int(c): self.fills_of(i) for i, c in enumerate(self.codes)}

    def __eq__(self, other):
        if not isinstance(other, EdgePatternDictionary):
            return NotImplemented
        return (self.level == other.level and self.scale == other.scale
                and np.array_equal(self.codes, other.codes)
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.fills, other.fills))

    # -------------------------------------------------------- serialization
    def to_bytes(self) -> bytes:
        head = struct.pack("<4sHHdI", _EPD_MAGIC, _FORMAT_VERSION, self.level,
                           self.scale, self.n_classes)
        fill_bytes = np.concatenate(
            [self.fills[:, 0].astype("<u8").view(np.uint8).reshape(-1, 8),
             self.fills[:, 1].astype("<u8").view(np.uint8).reshape(-1, 8)[:, :FILL_BYTES - 8]],
            axis=1).tobytes()
        parts = [head]
        for i, code in enumerate(self.codes):
            a, b = int(self.offsets[i]), int(self.offsets[i + 1])
            parts.append(struct.pack("<II", int(code), b - a))
            parts.append(fill_bytes[a * FILL_BYTES:b * FILL_BYTES])
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EdgePatternDictionary":
        hsize = struct.calcsize("<4sHHdI")
        if len(buf) < hsize:
            raise DictionaryError("truncated edge-pattern dictionary")
        magic, version, level, scale, n_classes = struct.unpack_from("<4sHHdI", buf)
        if magic != _EPD_MAGIC:
            raise DictionaryError("not an edge-pattern dictionary file")
        if version != _FORMAT_VERSION:
            raise DictionaryError(f"unsupported dictionary version {version}")
        pos = hsize
        codes = np.empty(n_classes, dtype=np.uint32)
        counts = np.empty(n_classes, dtype=np.int64)
        chunks = []
        for i in range(n_classes):
            code, nf = struct.unpack_from("<II", buf, pos)
            pos += 8
            codes[i], counts[i] = code, nf
            chunks.append(buf[pos:pos + nf * FILL_BYTES])
            pos += nf * FILL_BYTES
        if pos != len(buf):
            raise DictionaryError("edge-pattern dictionary length mismatch")
        raw = np.frombuffer(b"".join(chunks), dtype=np.uint8).reshape(-1, FILL_BYTES)
        padded = np.zeros((len(raw), 16), dtype=np.uint8)
        padded[:, :FILL_BYTES] = raw
        fills = padded.view("<u8").astype(np.uint64).reshape(-1, 2)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(int(level), float(scale), codes, offsets, fills)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EdgePatternDictionary":
        return cls.from_bytes(Path(path).read_bytes())


def level_volume(hr: BinaryVolume, level: int) -> BinaryVolume:
    """The HR volume after ``level - 1`` successive factor-2 mean-pool halvings."""
    if level < 1:
        raise ValueError(f"dictionary level must be >= 1, got {level}")
    vol = hr
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(level - 1):
            vol = downsample_mean(vol, 2)
    return vol


def dictionary_from_patterns(codes: np.ndarray, fills: np.ndarray, level: int,
                             scale: float) -> EdgePatternDictionary:
    """Group scanned (code, fill) pairs into classes, dropping repeats."""
    keys = np.empty((len(codes), 3), dtype=np.uint64)
    keys[:, 0] = codes
    keys[:, 1:] = fills
    void = np.ascontiguousarray(keys).view(np.dtype((np.void, 24))).ravel()
    _, first = np.unique(void, return_index=True)
    first.sort()
    ucodes = codes[first]
    ufills = fills[first]
    # class rank = order of first appearance of the code
    cvals, cfirst, cinv = np.unique(ucodes, return_index=True, return_inverse=True)
    rank_of_sorted = np.empty(len(cvals), dtype=np.int64)
    rank_of_sorted[np.argsort(cfirst, kind="stable")] = np.arange(len(cvals))
    rank = rank_of_sorted[cinv.ravel()]
    order = np.argsort(rank, kind="stable")
    class_codes = cvals[np.argsort(cfirst, kind="stable")].astype(np.uint32)
    counts = np.bincount(rank, minlength=len(cvals))
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return EdgePatternDictionary(int(level), float(scale), class_codes, offsets,
                                 np.ascontiguousarray(ufills[order]))


def build_epd(hr: BinaryVolume, level: int = 1) -> EdgePatternDictionary:
    """Scan the level-``level`` version of ``hr`` with a 5^3 template at stride 1."""
    vol = level_volume(hr, level)
    if min(vol.dims) < TEMPLATE:
        raise DictionaryError(
            f"volume too small for template: level {level} volume has dims {vol.dims}")
    codes, fills = scan_patterns(vol.data)
    return dictionary_from_patterns(codes, fills, level, vol.scale)


def build_multi_epd(hr: BinaryVolume, plan: ScalePlan) -> list[EdgePatternDictionary]:
    """Dictionaries for levels ``m_max`` down to 1, coarsest first."""
    return [build_epd(hr, level) for level in range(plan.m_max, 0, -1)]


# -------------------------------------------------------- micro-pore dictionary

@dataclass(frozen=True, eq=False)
class MicroPore:
    """One connected pore shape cropped to its tight bounding box."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask, dtype=np.uint8, copy=True)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.mask.shape)

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other):
        return isinstance(other, MicroPore) and np.array_equal(self.mask, other.mask)


@dataclass(frozen=True, eq=False)
class MicroPoreDictionary:
    elements: tuple[MicroPore, ...]
    scale: float
    connectivity: int = 26

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __eq__(self, other):
        if not isinstance(other, MicroPoreDictionary):
            return NotImplemented
        return (self.scale == other.scale and self.connectivity == other.connectivity
                and len(self) == len(other)
                and all(a == b for a, b in zip(self.elements, other.elements)))

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<4sHBdI", _MPD_MAGIC, _FORMAT_VERSION, self.connectivity,
                             self.scale, len(self.elements))]
        for el in self.elements:
            parts.append(struct.pack("<HHHI", *el.dims, el.size))
            parts.append(np.packbits(el.mask.ravel(order="F"), bitorder="little").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "MicroPoreDictionary":
        hfmt = "<4sHBdI"
        magic, version, conn, scale, count = struct.unpack_from(hfmt, buf)
        if magic != _MPD_MAGIC:
            raise DictionaryError("not a micro-pore dictionary file")
        if version != _FORMAT_VERSION:
            raise DictionaryError(f"unsupported dictionary version {version}")
        pos = struct.calcsize(hfmt)
        elements = []
        for _ in range(count):
            bx, by, bz, size = struct.unpack_from("<HHHI", buf, pos)
            pos += struct.calcsize("<HHHI")
            n = bx * by * bz
            nbytes = (n + 7) // 8
            bits = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, pos),
                                 count=n, bitorder="little")
            pos += nbytes
            el = MicroPore(bits.reshape((bx, by, bz), order="F"))
            if el.size != size:
                raise DictionaryError("micro-pore element voxel count mismatch")
            elements.append(el)
        if pos != len(buf):
            raise DictionaryError("micro-pore dictionary length mismatch")
        return cls(tuple(elements), float(scale), int(conn))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MicroPoreDictionary":
        return cls.from_bytes(Path(path).read_bytes())


def build_mpd(hr: BinaryVolume, plan: ScalePlan, connectivity: int = 26) -> MicroPoreDictionary:
    """Collect HR pore components whose voxel count lies in ``plan.cc_range``.

    Elements follow component label order (first appearance in an x-fastest
    scan) and hold only their own voxels within the bounding box.
    """
    lf = label_components(hr, connectivity)
    lo, hi = plan.cc_range
    sizes = lf.sizes()
    elements = []
    for lab, slc in enumerate(ndimage.find_objects(lf.labels), start=1):
        if slc is None or not lo <= sizes[lab - 1] <= hi:
            continue
        elements.append(MicroPore(lf.labels[slc] == lab))
    if not elements:
        warnings.warn("micro-pore dictionary is empty: no HR component in "
                      f"size range [{lo}, {hi}]", stacklevel=2)
    return MicroPoreDictionary(tuple(elements), hr.scale, connectivity)


def from_elements(masks: Iterable[np.ndarray], scale: float,
                  connectivity: int = 26) -> MicroPoreDictionary:
    return MicroPoreDictionary(tuple(MicroPore(m) for m in masks), float(scale), connectivity)


def summarize(dicts: Sequence[EdgePatternDictionary]) -> list[dict]:
    return [{"level": d.level, "scale_um": d.scale, "classes": d.n_classes,
             "fills": d.n_fills} for d in dicts]
