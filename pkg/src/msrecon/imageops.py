"""Classical voxel operations: thresholding, pooling, labeling, morphology, EDT."""

from __future__ import annotations

import warnings

import numba
import numpy as np
from scipy import ndimage

from .volume import BinaryVolume, GrayVolume, LabelField, Volume

CONNECTIVITIES = (6, 26)


def otsu_level(gray: GrayVolume) -> int:
    """Return the Otsu threshold ``t``: classes are ``I < t`` and ``I >= t``.

    Between-class variance is evaluated for every candidate threshold of the
    intensity range; ties go to the smallest ``t``.
    """
    nbins = 256 if gray.data.dtype == np.uint8 else 65536
    hist = np.bincount(gray.data.ravel(), minlength=nbins).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        raise ValueError("constant-intensity volume: no threshold separates two classes")
    levels = np.arange(nbins, dtype=np.float64)
    total = hist.sum()
    total_sum = (hist * levels).sum()
    # candidate t in 1..nbins-1; lower class holds intensities < t
    n0 = np.cumsum(hist)[:-1]
    s0 = np.cumsum(hist * levels)[:-1]
    n1 = total - n0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (total_sum * n0 - s0 * total) ** 2 / (n0 * n1)
    between[(n0 == 0) | (n1 == 0)] = -1.0
    return int(np.argmax(between)) + 1


def otsu_threshold(gray: GrayVolume, pores_are_dark: bool = True) -> BinaryVolume:
    """Segment ``gray`` with Otsu's threshold into a pore/rock volume."""
    t = otsu_level(gray)
    dark = gray.data < t
    pore = dark if pores_are_dark else ~dark
    return BinaryVolume(pore.astype(np.uint8), gray.scale)


def downsample_mean(volume: Volume, factor: int) -> Volume:
    """Block-mean pooling by ``factor`` along every axis.

    Gray volumes take the mean rounded half up; binary volumes become pore
    where at least half of the block is pore.  Trailing voxels that do not
    fill a whole block are dropped with a warning.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return volume
    dims = volume.dims
    out_dims = tuple(d // factor for d in dims)
    if min(out_dims) < 1:
        raise ValueError(f"volume of dims {dims} is smaller than one {factor}^3 block")
    if any(d % factor for d in dims):
        warnings.warn(f"dims {dims} not divisible by {factor}; trailing voxels dropped",
                      stacklevel=2)
    a = volume.data[: out_dims[0] * factor, : out_dims[1] * factor, : out_dims[2] * factor]
    blocks = a.reshape(out_dims[0], factor, out_dims[1], factor, out_dims[2], factor)
    sums = blocks.sum(axis=(1, 3, 5), dtype=np.int64)
    n = factor ** 3
    scale = volume.scale * factor
    if isinstance(volume, BinaryVolume):
        return BinaryVolume((2 * sums >= n).astype(np.uint8), scale)
    means = (2 * sums + n) // (2 * n)
    return GrayVolume(means.astype(volume.data.dtype), scale)


def neighbor_offsets(connectivity: int) -> np.ndarray:
    """Offsets (dx, dy, dz) of all neighbours under 6- or 26-connectivity."""
    if connectivity not in CONNECTIVITIES:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    offs = [(dx, dy, dz)
            for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
            if (dx, dy, dz) != (0, 0, 0)
            and (connectivity == 26 or abs(dx) + abs(dy) + abs(dz) == 1)]
    return np.array(offs, dtype=np.int64)


def _backward_offsets(connectivity: int) -> np.ndarray:
    # neighbours visited earlier in an x-fastest raster scan
    offs = neighbor_offsets(connectivity)
    keep = [o for o in offs if (o[2], o[1], o[0]) < (0, 0, 0)]
    return np.array(keep, dtype=np.int64)


@numba.njit(cache=True)
def _find(parent, a):
    root = a
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


@numba.njit(cache=True)
def _two_pass(pore, offsets):
    nx, ny, nz = pore.shape
    labels = np.zeros((nx, ny, nz), dtype=np.int32)
    parent = np.zeros(np.count_nonzero(pore) + 1, dtype=np.int32)
    nxt = 1
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if pore[x, y, z] == 0:
                    continue
                best = 0
                for k in range(offsets.shape[0]):
                    xx = x + offsets[k, 0]
                    yy = y + offsets[k, 1]
                    zz = z + offsets[k, 2]
                    if xx < 0 or yy < 0 or zz < 0 or xx >= nx or yy >= ny or zz >= nz:
                        continue
                    lab = labels[xx, yy, zz]
                    if lab == 0:
                        continue
                    r = _find(parent, lab)
                    if best == 0:
                        best = r
                    elif r != best:
                        if r < best:
                            parent[best] = r
                            best = r
                        else:
                            parent[r] = best
                if best == 0:
                    parent[nxt] = nxt
                    labels[x, y, z] = nxt
                    nxt += 1
                else:
                    labels[x, y, z] = best
    # second pass: resolve equivalences, number components by first appearance
    remap = np.zeros(nxt, dtype=np.int32)
    count = 0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                lab = labels[x, y, z]
                if lab == 0:
                    continue
                r = _find(parent, lab)
                if remap[r] == 0:
                    count += 1
                    remap[r] = count
                labels[x, y, z] = remap[r]
    return labels, count


def label_components(volume: BinaryVolume, connectivity: int = 26) -> LabelField:
    """Label pore-phase connected components with the Two-Pass algorithm.

    Provisional labels from the forward raster scan are merged through a
    union-find table, then a second scan writes final ids numbered in order
    of first appearance (x fastest, then y, then z).
    """
    offsets = _backward_offsets(connectivity)
    labels, count = _two_pass(np.ascontiguousarray(volume.data), offsets)
    return LabelField(labels, int(count), connectivity, volume.scale)


def dilate(volume: BinaryVolume, radius: int) -> BinaryVolume:
    """Dilate the pore phase ``radius`` times with the full 3x3x3 element."""
    radius = int(radius)
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    if radius == 0:
        return volume
    out = ndimage.binary_dilation(volume.pore, structure=np.ones((3, 3, 3), bool),
                                  iterations=radius)
    return BinaryVolume(out.astype(np.uint8), volume.scale)


def euclidean_distance_transform(volume: BinaryVolume) -> np.ndarray:
    """Exact Euclidean distance (voxel units) from each pore voxel to rock.

    Voxels outside the domain count as rock, so distances stay finite even
    for an all-pore volume.  Rock voxels map to 0.
    """
    padded = np.pad(volume.data, 1, mode="constant", constant_values=0)
    dist = ndimage.distance_transform_edt(padded)
    return dist[1:-1, 1:-1, 1:-1]
