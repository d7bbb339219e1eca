"""Staged edge reconstruction and micro-pore padding.

Random draws all come from numpy generators seeded by ``cfg.seed``.  The
edge stages share one generator (stream 0) that draws a ``(n_blocks, 2)``
array of uniforms before each stage's scan: column 0 breaks skeleton ties,
column 1 breaks fill ties for the block at that scan position.  Padding
uses its own generator (stream 1) and draws three anchor integers per
placement attempt, elements in dictionary order, copies in sequence.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np
from numba import types
from numba.extending import intrinsic
from scipy import ndimage

from .dictionaries import (N_SKELETON, PENDING_XYZ, SKELETON_XYZ, TEMPLATE,
                           EdgePatternDictionary, MicroPoreDictionary)
from .imageops import CONNECTIVITIES, dilate
from .scaleplan import ScalePlan
from .volume import BinaryVolume

TIE_BREAKS = ("first", "seeded-random")
EDGE_STREAM = 0
PAD_STREAM = 1

# how many block faces each pending position lies on
FACE_COUNT = ((PENDING_XYZ == 0) | (PENDING_XYZ == TEMPLATE - 1)).sum(axis=1).astype(np.int64)

SKELETON_ROCK, SKELETON_PORE, PENDING_UNSET, PENDING_ROCK, PENDING_PORE = range(5)


@dataclass(frozen=True)
class ReconstructionConfig:
    seed: int = 0
    tie_break: str = "seeded-random"
    dilation_radius: int = 1
    max_placement_attempts: int = 1000
    single_epd_baseline: bool = False
    connectivity: int = 26

    def __post_init__(self):
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"tie_break must be one of {TIE_BREAKS}, got {self.tie_break!r}")
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be >= 0")
        if self.max_placement_attempts < 1:
            raise ValueError("max_placement_attempts must be >= 1")
        if self.connectivity not in CONNECTIVITIES:
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")

    def to_dict(self) -> dict:
        return asdict(self)


def edge_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), EDGE_STREAM])


def pad_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), PAD_STREAM])


# ------------------------------------------------------------ upsampling map

@dataclass
class PseudoHRGrid:
    """Interleaved grid produced by the upsampling map.

    Input voxel ``(i, j, k)`` sits at ``(2i, 2j, 2k)``; every other voxel is
    pending until a block commits it.
    """

    values: np.ndarray
    committed: np.ndarray
    scale: float

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def skeleton(self) -> np.ndarray:
        sk = np.zeros(self.values.shape, dtype=bool)
        sk[::2, ::2, ::2] = True
        return sk

    def states(self) -> np.ndarray:
        sk = self.skeleton
        st = np.full(self.values.shape, PENDING_UNSET, dtype=np.uint8)
        st[sk] = np.where(self.values[sk] == 1, SKELETON_PORE, SKELETON_ROCK)
        done = ~sk & self.committed
        st[done] = np.where(self.values[done] == 1, PENDING_PORE, PENDING_ROCK)
        return st

    def to_volume(self) -> BinaryVolume:
        if not self.committed.all():
            raise ValueError("grid still holds pending voxels")
        return BinaryVolume(self.values, self.scale)


def phi_upsample(volume: BinaryVolume) -> PseudoHRGrid:
    """Spread ``volume`` onto the even lattice of a ``2n - 1`` grid at half the scale."""
    if min(volume.dims) < 3:
        raise ValueError(f"every dim must be >= 3 for the template to fit, got {volume.dims}")
    shape = tuple(2 * d - 1 for d in volume.dims)
    values = np.zeros(shape, dtype=np.uint8)
    committed = np.zeros(shape, dtype=bool)
    values[::2, ::2, ::2] = volume.data
    committed[::2, ::2, ::2] = True
    return PseudoHRGrid(values, committed, volume.scale / 2)


def block_offsets(n: int) -> list[int]:
    """Input-space origins of the 3-voxel skeleton blocks along one axis."""
    offs = list(range(0, n - 2, 2))
    if offs[-1] != n - 3:
        offs.append(n - 3)
    return offs


def block_codes(data: np.ndarray, bi: np.ndarray, bj: np.ndarray, bk: np.ndarray) -> np.ndarray:
    """Skeleton codes of the 3x3x3 input blocks with origins (bi, bj, bk)."""
    codes = np.zeros(len(bi), dtype=np.uint32)
    for bit, (a, b, c) in enumerate(SKELETON_XYZ // 2):
        codes |= data[bi + a, bj + b, bk + c].astype(np.uint32) << np.uint32(bit)
    return codes


# ------------------------------------------------------------ skeleton match

@intrinsic
def _popcount(typingctx, x):
    sig = types.int64(types.int64)

    def codegen(context, builder, signature, args):
        return builder.ctpop(args[0])

    return sig, codegen


@numba.njit(cache=True)
def _hamming_minimizers(queries, codes, order, bucket_start):
    # classes grouped by popcount; |pop(q) - pop(c)| bounds the distance from below
    nq = queries.shape[0]
    best = np.empty(nq, dtype=np.int64)
    counts = np.zeros(nq, dtype=np.int64)
    hits = np.empty(codes.shape[0], dtype=np.int64)
    chunks = []
    for q in range(nq):
        qv = np.int64(queries[q])
        pq = _popcount(qv)
        b = 64
        for d in range(28):
            if d > b:
                break
            for p in (pq - d, pq + d):
                if p < 0 or p > 27 or (d == 0 and p != pq):
                    continue
                for s in range(bucket_start[p], bucket_start[p + 1]):
                    dist = _popcount(qv ^ np.int64(codes[order[s]]))
                    if dist < b:
                        b = dist
                if d == 0:
                    break
        n = 0
        for p in range(max(0, pq - b), min(27, pq + b) + 1):
            for s in range(bucket_start[p], bucket_start[p + 1]):
                c = order[s]
                if _popcount(qv ^ np.int64(codes[c])) == b:
                    hits[n] = c
                    n += 1
        best[q] = b
        counts[q] = n
        chunks.append(np.sort(hits[:n]))
    offsets = np.zeros(nq + 1, dtype=np.int64)
    for q in range(nq):
        offsets[q + 1] = offsets[q] + counts[q]
    idx = np.empty(offsets[nq], dtype=np.int64)
    for q in range(nq):
        idx[offsets[q]:offsets[q + 1]] = chunks[q]
    return best, offsets, idx


def _popcount_index(epd: EdgePatternDictionary) -> tuple[np.ndarray, np.ndarray]:
    pops = np.bitwise_count(epd.codes).astype(np.int64)
    order = np.argsort(pops, kind="stable")
    start = np.searchsorted(pops[order], np.arange(N_SKELETON + 2)).astype(np.int64)
    return order.astype(np.int64), start


def nearest_classes(queries: np.ndarray, epd: EdgePatternDictionary):
    """Brute-force Hamming search: (distances, offsets, flat class indices)."""
    order, start = _popcount_index(epd)
    return _hamming_minimizers(np.asarray(queries, dtype=np.uint32), epd.codes, order, start)


def skeleton_minimizers(code: int, epd: EdgePatternDictionary) -> tuple[int, np.ndarray]:
    """Minimal Hamming distance to ``code`` and the classes attaining it."""
    if epd.n_classes == 0:
        raise ValueError("empty edge-pattern dictionary")
    hit = epd.class_of(code)
    if hit is not None:
        return 0, np.array([hit])
    best, offsets, idx = nearest_classes(np.array([code]), epd)
    return int(best[0]), idx[offsets[0]:offsets[1]]


def _pick(n: int, tie_break: str, u: float) -> int:
    if tie_break == "first" or n == 1:
        return 0
    return min(int(u * n), n - 1)


def match_skeleton(code: int, epd: EdgePatternDictionary, tie_break: str = "first",
                   u: float = 0.0) -> int:
    """Class whose skeleton code is nearest to ``code`` in Hamming distance.

    With ``tie_break="seeded-random"`` the uniform draw ``u`` in [0, 1)
    picks among the minimizers in class order.
    """
    _, cands = skeleton_minimizers(code, epd)
    return int(cands[_pick(len(cands), tie_break, u)])


# ----------------------------------------------------------- fill selection

def fill_scores(candidates: np.ndarray, values: np.ndarray, committed: np.ndarray) -> np.ndarray:
    """Face mismatch of each candidate fill against the committed voxels.

    ``values`` and ``committed`` give the current grid content at the 98
    pending positions of the block.  A committed voxel lying on ``f`` block
    faces contributes ``f`` times, once per face sum.
    """
    w = FACE_COUNT * np.asarray(committed, dtype=bool)
    if not w.any():
        return np.zeros(len(candidates), dtype=np.int64)
    return (np.asarray(candidates) != np.asarray(values)[None, :]).astype(np.int64) @ w


def select_edge_fill(candidates: np.ndarray, values: np.ndarray, committed: np.ndarray,
                     tie_break: str = "first", u: float = 0.0) -> int:
    """Index of the candidate fill with the smallest committed-face mismatch."""
    if len(candidates) == 0:
        raise ValueError("empty fill list")
    scores = fill_scores(candidates, values, committed)
    ties = np.flatnonzero(scores == scores.min())
    return int(ties[_pick(len(ties), tie_break, u)])


# -------------------------------------------------------- staged reconstruction

@dataclass
class StageResult:
    volume: BinaryVolume
    level: int
    n_blocks: int
    exact_match_rate: float
    seconds: float

    def summary(self) -> dict:
        return {"level": self.level, "blocks": self.n_blocks,
                "exact_match_rate": self.exact_match_rate,
                "dims": list(self.volume.dims), "scale_um": self.volume.scale}


@numba.njit(cache=True)
def _pick_nb(n, random_tie, u):
    if not random_tie or n == 1:
        return 0
    return min(int(u * n), n - 1)


@numba.njit(cache=True)
def _commit_blocks(values, committed, bi, bj, bk, block_q, cand_start, cand_count, flat,
                   draws, offsets, fills, pend, face_count, random_tie):
    # sequential raster scan; same arithmetic as match_skeleton + select_edge_fill
    npend = pend.shape[0]
    gx = np.empty(npend, dtype=np.int64)
    gy = np.empty(npend, dtype=np.int64)
    gz = np.empty(npend, dtype=np.int64)
    vals = np.empty(npend, dtype=np.uint8)
    comm = np.empty(npend, dtype=np.bool_)
    scores = np.empty(fills.shape[0], dtype=np.int64)
    for b in range(bi.shape[0]):
        q = block_q[b]
        cls = flat[cand_start[q] + _pick_nb(cand_count[q], random_tie, draws[b, 0])]
        for t in range(npend):
            gx[t] = 2 * bi[b] + pend[t, 0]
            gy[t] = 2 * bj[b] + pend[t, 1]
            gz[t] = 2 * bk[b] + pend[t, 2]
            vals[t] = values[gx[t], gy[t], gz[t]]
            comm[t] = committed[gx[t], gy[t], gz[t]]
        f0 = offsets[cls]
        nf = offsets[cls + 1] - f0
        j = f0
        if nf > 1:
            best = np.int64(1) << 62
            for f in range(nf):
                lo = fills[f0 + f, 0]
                hi = fills[f0 + f, 1]
                sc = 0
                for t in range(npend):
                    if comm[t]:
                        bit = (lo >> np.uint64(t)) & np.uint64(1) if t < 64 else \
                            (hi >> np.uint64(t - 64)) & np.uint64(1)
                        if np.uint8(bit) != vals[t]:
                            sc += face_count[t]
                scores[f] = sc
                if sc < best:
                    best = sc
            nties = 0
            for f in range(nf):
                if scores[f] == best:
                    nties += 1
            k = _pick_nb(nties, random_tie, draws[b, 1])
            for f in range(nf):
                if scores[f] == best:
                    if k == 0:
                        j = f0 + f
                        break
                    k -= 1
        lo = fills[j, 0]
        hi = fills[j, 1]
        for t in range(npend):
            if not comm[t]:
                bit = (lo >> np.uint64(t)) & np.uint64(1) if t < 64 else \
                    (hi >> np.uint64(t - 64)) & np.uint64(1)
                values[gx[t], gy[t], gz[t]] = np.uint8(bit)
                committed[gx[t], gy[t], gz[t]] = True


def reconstruct_stage(volume: BinaryVolume, epd: EdgePatternDictionary,
                      cfg: ReconstructionConfig = ReconstructionConfig(),
                      rng: Optional[np.random.Generator] = None) -> StageResult:
    """One upsample-match-commit pass producing a volume at half the scale."""
    if epd.n_classes == 0:
        raise ValueError("empty edge-pattern dictionary")
    t0 = time.perf_counter()
    rng = edge_rng(cfg.seed) if rng is None else rng
    grid = phi_upsample(volume)
    ox, oy, oz = (np.array(block_offsets(n)) for n in volume.dims)
    bk, bj, bi = np.meshgrid(oz, oy, ox, indexing="ij")
    bi, bj, bk = bi.ravel(), bj.ravel(), bk.ravel()
    n_blocks = len(bi)
    draws = rng.random((n_blocks, 2))

    codes = block_codes(volume.data, bi, bj, bk)
    uniq, inverse = np.unique(codes, return_inverse=True)
    inverse = inverse.ravel()
    dist = np.zeros(len(uniq), dtype=np.int64)
    cand_start = np.zeros(len(uniq), dtype=np.int64)
    cand_count = np.ones(len(uniq), dtype=np.int64)
    flat = []
    misses = []
    for u, code in enumerate(uniq):
        hit = epd.class_of(code)
        if hit is None:
            misses.append(u)
        else:
            cand_start[u] = len(flat)
            flat.append(hit)
    if misses:
        best, offs, idx = nearest_classes(uniq[misses], epd)
        base = len(flat)
        flat.extend(idx.tolist())
        for n, u in enumerate(misses):
            dist[u] = best[n]
            cand_start[u] = base + offs[n]
            cand_count[u] = offs[n + 1] - offs[n]
    flat = np.array(flat, dtype=np.int64)

    _commit_blocks(grid.values, grid.committed, bi, bj, bk, inverse, cand_start, cand_count,
                   flat, draws, epd.offsets, epd.fills, PENDING_XYZ.astype(np.int64), FACE_COUNT,
                   cfg.tie_break == "seeded-random")

    exact = float(np.mean(dist[inverse] == 0)) if n_blocks else 1.0
    return StageResult(grid.to_volume(), epd.level, n_blocks, exact,
                       time.perf_counter() - t0)


@dataclass
class MultiStageResult:
    volume: BinaryVolume
    stages: list[StageResult] = field(default_factory=list)


def reconstruct_multistage(lri: BinaryVolume, dicts: Sequence[EdgePatternDictionary],
                           cfg: ReconstructionConfig = ReconstructionConfig()) -> MultiStageResult:
    """Apply one stage per dictionary, coarsest level first.

    With ``cfg.single_epd_baseline`` every stage uses the finest dictionary
    (the last one) instead.
    """
    if not dicts:
        raise ValueError("at least one edge-pattern dictionary is required")
    rng = edge_rng(cfg.seed)
    vol = lri
    out = MultiStageResult(lri)
    for epd in dicts:
        use = dicts[-1] if cfg.single_epd_baseline else epd
        res = reconstruct_stage(vol, use, cfg, rng)
        out.stages.append(res)
        vol = res.volume
    out.volume = vol
    return out


# ---------------------------------------------------------- micro-pore padding

@dataclass
class PaddingResult:
    volume: BinaryVolume
    placed: int
    skipped: int
    attempts: int
    placements: list[tuple[int, int, int, int]] = field(default_factory=list)

    def summary(self) -> dict:
        return {"placed": self.placed, "skipped": self.skipped, "attempts": self.attempts}


def _footprint(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return mask
    padded = np.pad(mask, radius)
    return ndimage.binary_dilation(padded, structure=np.ones((3, 3, 3), bool),
                                   iterations=radius)


def pad_micropores(pms: BinaryVolume, mpd: MicroPoreDictionary, plan: ScalePlan,
                   cfg: ReconstructionConfig = ReconstructionConfig()) -> PaddingResult:
    """Scatter micro-pore elements into rock away from existing pores.

    Each element is placed ``plan.pad_multiplicity`` times at a uniformly
    drawn bounding-box anchor.  An anchor is accepted when none of the
    element's voxels touches the dilated pore mask or the dilated footprint
    of an earlier placement; a copy is skipped after
    ``cfg.max_placement_attempts`` rejections.
    """
    rng = pad_rng(cfg.seed)
    r = cfg.dilation_radius
    out = np.array(pms.data, copy=True)
    occupied = np.array(dilate(pms, r).data, dtype=bool)
    dims = np.array(pms.dims)
    result = PaddingResult(pms, 0, 0, 0)
    for e, el in enumerate(mpd):
        mask = el.mask.astype(bool)
        bdims = np.array(el.dims)
        if np.any(bdims > dims):
            result.skipped += plan.pad_multiplicity
            continue
        foot = _footprint(mask, r)
        high = dims - bdims + 1
        for _ in range(plan.pad_multiplicity):
            for _attempt in range(cfg.max_placement_attempts):
                result.attempts += 1
                x0, y0, z0 = (int(v) for v in rng.integers(0, high))
                box = (slice(x0, x0 + bdims[0]), slice(y0, y0 + bdims[1]),
                       slice(z0, z0 + bdims[2]))
                if (occupied[box] & mask).any():
                    continue
                out[box] |= mask.astype(np.uint8)
                lo = np.array([x0, y0, z0]) - r
                a = np.maximum(lo, 0)
                b = np.minimum(lo + foot.shape, dims)
                occupied[a[0]:b[0], a[1]:b[1], a[2]:b[2]] |= foot[
                    a[0] - lo[0]:b[0] - lo[0], a[1] - lo[1]:b[1] - lo[1], a[2] - lo[2]:b[2] - lo[2]]
                result.placed += 1
                result.placements.append((e, x0, y0, z0))
                break
            else:
                result.skipped += 1
    result.volume = BinaryVolume(out, pms.scale)
    return result
