import warnings

import numpy as np
import pytest

from msrecon.dictionaries import (N_PENDING, DictionaryError, EdgePatternDictionary,
                                  MicroPoreDictionary, assemble, bits_to_fills, build_epd,
                                  build_mpd, build_multi_epd, extract_fill, extract_skeleton,
                                  fills_to_bits, level_volume)
from msrecon.imageops import downsample_mean, label_components
from msrecon.scaleplan import plan
from msrecon.volume import BinaryVolume

from oracles import flood_fill_components, nested_scan, random_volume

FULL = (1 << 27) - 1


def test_skeleton_extraction():
    assert extract_skeleton(np.ones((5, 5, 5), np.uint8)) == FULL
    assert extract_skeleton(np.zeros((5, 5, 5), np.uint8)) == 0
    b = np.zeros((5, 5, 5), np.uint8)
    b[1, 1, 1] = 1
    assert extract_skeleton(b) == 0
    b[2, 0, 0] = 1  # second even position along x
    assert extract_skeleton(b) == 2
    with pytest.raises(ValueError):
        extract_skeleton(np.zeros((4, 5, 5), np.uint8))


def test_assemble_inverse():
    rng = np.random.default_rng(0)
    for _ in range(200):
        code = int(rng.integers(0, 1 << 27))
        fill = int(rng.integers(0, 1 << 62)) | (int(rng.integers(0, 1 << 36)) << 62)
        blk = assemble(code, fill)
        assert extract_skeleton(blk) == code
        assert extract_fill(blk) == fill


def test_fill_bit_packing_round_trip():
    rng = np.random.default_rng(1)
    bits = (rng.random((50, N_PENDING)) < 0.5).astype(np.uint8)
    np.testing.assert_array_equal(fills_to_bits(bits_to_fills(bits)), bits)


@pytest.mark.parametrize("value", [0, 1])
def test_uniform_volumes(value):
    d = build_epd(BinaryVolume(np.full((8, 8, 8), value, np.uint8), 1.0))
    assert d.n_classes == 1
    code = FULL if value else 0
    fill = (1 << N_PENDING) - 1 if value else 0
    assert d.entries() == {code: [fill]}


@pytest.mark.parametrize("seed", range(10))
def test_epd_matches_nested_scan(seed):
    v = random_volume(np.random.default_rng(seed), (8, 9, 10), p=0.3 + 0.05 * seed)
    d = build_epd(v)
    expected: dict[int, list[int]] = {}
    for code, fill in nested_scan(v.data):
        lst = expected.setdefault(code, [])
        if fill not in lst:
            lst.append(fill)
    assert d.entries() == expected
    assert list(d.entries()) == list(expected)  # class order = first occurrence
    assert d.n_fills <= 4 * 5 * 6


def test_every_pair_reassembles_to_observed_block():
    v = random_volume(np.random.default_rng(5), (9, 9, 9), p=0.4)
    d = build_epd(v)
    observed = {tuple(v.data[x:x + 5, y:y + 5, z:z + 5].ravel())
                for x in range(5) for y in range(5) for z in range(5)}
    for code, fills in d.entries().items():
        for f in fills:
            assert tuple(assemble(code, f).ravel()) in observed


def test_too_small():
    with pytest.raises(DictionaryError, match="too small"):
        build_epd(BinaryVolume(np.zeros((4, 8, 8), np.uint8), 1.0))
    with pytest.raises(DictionaryError, match="too small"):
        build_epd(BinaryVolume(np.zeros((8, 8, 8), np.uint8), 1.0), level=2)


def test_level_volume_is_repeated_halving():
    v = random_volume(np.random.default_rng(2), (24, 24, 24))
    exp = downsample_mean(downsample_mean(v, 2), 2)
    assert level_volume(v, 3) == exp
    d = build_epd(v, 3)
    assert d.level == 3 and d.scale == 4.0
    ref = build_epd(exp, 1)
    for k in ("codes", "offsets", "fills"):
        np.testing.assert_array_equal(getattr(d, k), getattr(ref, k))


def test_multi_epd_order_and_recompute():
    v = random_volume(np.random.default_rng(3), (24, 24, 24), p=0.35)
    p = plan(4.0, 1.0, 6, 24)
    ds = build_multi_epd(v, p)
    assert [d.level for d in ds] == [2, 1]
    for d in ds:
        assert d == build_epd(v, d.level)
    p1 = plan(2.0, 1.0, 6, 24)
    assert [d.level for d in build_multi_epd(v, p1)] == [1]


def test_epd_serialization(tmp_path):
    d = build_epd(random_volume(np.random.default_rng(4), (10, 10, 10)))
    d.save(tmp_path / "e.bin")
    assert EdgePatternDictionary.load(tmp_path / "e.bin") == d
    assert d.to_bytes() == build_epd(random_volume(np.random.default_rng(4), (10, 10, 10))).to_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + d.to_bytes()[4:])
    with pytest.raises(DictionaryError):
        EdgePatternDictionary.load(tmp_path / "bad.bin")
    with pytest.raises(DictionaryError):
        EdgePatternDictionary.from_bytes(d.to_bytes()[:-1])


# ---------------------------------------------------------- micro-pores

def _canonical(mask):
    return (int(mask.sum()), mask.shape, mask.astype(np.uint8).tobytes())


def test_mpd_excludes_components_above_range():
    p = plan(9.4, 2.35, 64, 256)
    d = np.zeros((30, 30, 30), np.uint8)
    d[1:5, 1:5, 1:5] = 1          # 64 voxels, kept
    d[10:15, 10:15, 10:13] = 1    # 75 voxels, dropped
    d[20:23, 20:23, 20:21] = 1    # 9 voxels, kept
    mpd = build_mpd(BinaryVolume(d, 2.35), p)
    assert sorted(e.size for e in mpd) == [9, 64]


def test_mpd_empty_for_rock():
    p = plan(9.4, 2.35, 64, 256)
    with pytest.warns(UserWarning, match="empty"):
        mpd = build_mpd(BinaryVolume(np.zeros((8, 8, 8), np.uint8), 2.35), p)
    assert len(mpd) == 0


@pytest.mark.parametrize("seed", range(5))
def test_mpd_matches_flood_fill(seed):
    v = random_volume(np.random.default_rng(seed), (32, 32, 32), p=0.12)
    p = plan(4.0, 1.0, 8, 32)  # cc_range [1, 64]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mpd = build_mpd(v, p)
    expected = []
    for comp in flood_fill_components(v.data, 26):
        if not p.cc_range[0] <= len(comp) <= p.cc_range[1]:
            continue
        pts = np.array(sorted(comp))
        lo = pts.min(axis=0)
        mask = np.zeros(tuple(pts.max(axis=0) - lo + 1), np.uint8)
        mask[tuple((pts - lo).T)] = 1
        expected.append(_canonical(mask))
    assert sorted(_canonical(e.mask) for e in mpd) == sorted(expected)


def test_mpd_elements_are_single_components_in_range(tmp_path):
    v = random_volume(np.random.default_rng(9), (24, 24, 24), p=0.1)
    p = plan(4.0, 1.0, 8, 24)
    mpd = build_mpd(v, p, connectivity=6)
    assert len(mpd) > 0
    for el in mpd:
        canvas = np.zeros((30, 30, 30), np.uint8)
        bx, by, bz = el.dims
        canvas[3:3 + bx, 4:4 + by, 5:5 + bz] = el.mask
        lf = label_components(BinaryVolume(canvas, 1.0), 6)
        assert lf.count == 1
        assert p.cc_range[0] <= el.size <= p.cc_range[1]
    mpd.save(tmp_path / "m.bin")
    assert MicroPoreDictionary.load(tmp_path / "m.bin") == mpd
