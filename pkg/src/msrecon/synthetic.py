"""Synthetic grain packs used as stand-ins for micro-CT data."""

from __future__ import annotations

import numpy as np

from .volume import BinaryVolume, GrayVolume


def _pack_centres(dims, rmin, rmax, overlap, solid_target, rng, max_failures):
    # random sequential addition with a soft hard-core: grains may interpenetrate
    # by at most ``overlap`` of the sum of their radii
    lo = -rmax * 0.5
    hi = np.array(dims, dtype=float) - 1 + rmax * 0.5
    cell = 2 * rmax
    grid: dict[tuple, list[int]] = {}
    centres: list[np.ndarray] = []
    radii: list[float] = []
    nominal = 0.0
    box_volume = float(np.prod(hi - lo))
    failures = 0
    while nominal < solid_target * box_volume and failures < max_failures:
        c = rng.uniform(lo, hi)
        r = rng.uniform(rmin, rmax)
        key = tuple((c // cell).astype(int))
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for idx in grid.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                        d2 = float(((centres[idx] - c) ** 2).sum())
                        if d2 < ((1.0 - overlap) * (r + radii[idx])) ** 2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
        if not ok:
            failures += 1
            continue
        failures = 0
        grid.setdefault(key, []).append(len(centres))
        centres.append(c)
        radii.append(r)
        nominal += 4.0 / 3.0 * np.pi * r ** 3
    return centres, radii


def sphere_pack(dims, radius=(6.0, 10.0), porosity: float = 0.35, overlap: float = 0.3,
                micropore_fraction: float = 0.004, scale: float = 1.0,
                seed: int = 0) -> BinaryVolume:
    """Packed spherical grains with a pore background.

    Grains are placed by random sequential addition; two grains may overlap
    by up to ``overlap`` times the sum of their radii.  Placement stops once
    the rasterised pore fraction reaches ``porosity`` (or the pack jams).
    Small isolated intragranular pores (1 to 19 voxels) are then carved into
    the rock until about ``micropore_fraction`` of the volume is converted.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    rmin, rmax = float(radius[0]), float(radius[1])
    centres, radii = _pack_centres(dims, rmin, rmax, overlap, 1.2 * (1.0 - porosity),
                                   rng, max_failures=20000)
    solid = np.zeros(dims, dtype=bool)
    total = solid.size
    n_solid = 0
    for c, r in zip(centres, radii):
        if n_solid >= (1.0 - porosity) * total:
            break
        a = np.maximum(np.floor(c - r).astype(int), 0)
        b = np.minimum(np.ceil(c + r).astype(int) + 1, dims)
        if np.any(b <= a):
            continue
        gx, gy, gz = np.ogrid[a[0]:b[0], a[1]:b[1], a[2]:b[2]]
        ball = (gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2 <= r * r
        sub = solid[a[0]:b[0], a[1]:b[1], a[2]:b[2]]
        n_solid += int(np.count_nonzero(ball & ~sub))
        sub |= ball

    pore = ~solid
    target = int(micropore_fraction * total)
    carved = 0
    tries = 0
    while carved < target and tries < 100 * max(target, 1):
        tries += 1
        c = rng.integers(2, np.array(dims) - 2)
        rad = rng.choice([0.0, 1.0, 1.5])
        k = int(np.ceil(rad))
        a, b = c - k, c + k + 1
        # blob plus a one-voxel shell must lie in rock so the pore stays isolated
        shell = pore[max(a[0] - 1, 0):b[0] + 1, max(a[1] - 1, 0):b[1] + 1,
                     max(a[2] - 1, 0):b[2] + 1]
        if shell.any():
            continue
        gx, gy, gz = np.ogrid[a[0]:b[0], a[1]:b[1], a[2]:b[2]]
        blob = (gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2 <= rad * rad
        pore[a[0]:b[0], a[1]:b[1], a[2]:b[2]] |= blob
        carved += int(blob.sum())
    return BinaryVolume(pore.astype(np.uint8), scale)


def render_gray(volume: BinaryVolume, pore_level: int = 60, rock_level: int = 190,
                noise: float = 12.0, seed: int = 0) -> GrayVolume:
    """Turn a binary volume into a noisy 8-bit CT-like image (pores dark)."""
    rng = np.random.default_rng(seed)
    img = np.where(volume.pore, float(pore_level), float(rock_level))
    img += rng.normal(0.0, noise, size=img.shape)
    return GrayVolume(np.clip(np.rint(img), 0, 255).astype(np.uint8), volume.scale)
