"""End-to-end runs: simulation pairs, dictionary learning, reconstruction, reports.

A run directory looks like::

    config.json            effective configuration minus out_dir (re-runnable)
    plan.json              scale plan
    dicts/epd_level<k>.bin edge-pattern dictionaries, dicts/mpd.bin
    volumes/hr.raw, volumes/lri.raw (+ .json sidecars)
    runs/rep<r>/<branch>/pms<k>.raw, ms.raw
    metrics/<name>.json, <name>_s2.csv, <name>_radius.csv
    comparison.csv, comparison.json
    report.json            seeds, exact-match rates, placements, config echo
    timings.json           wall-clock timings (not covered by determinism)
    manifest.json          file list with sha256 and run status
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import dictionaries, metrics
from .imageops import downsample_mean, otsu_threshold
from .reconstruct import ReconstructionConfig, pad_micropores, reconstruct_multistage
from .scaleplan import plan as make_plan
from .synthetic import render_gray, sphere_pack
from .volume import BinaryVolume, GrayVolume, Volume, load_volume, save_volume

log = logging.getLogger(__name__)

UNHASHED = ("timings.json", "manifest.json")
BRANCHES = ("multi", "single")
DEVIATIONS = [
    "simulation LRI made by block-mean pooling (binary: mean >= 0.5 is pore), not bicubic",
    "pore radius is the per-component maximum of the Euclidean distance transform",
    "S2 is the axis-aligned non-periodic estimator",
]


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    """Everything a pipeline run needs.

    In simulation mode ``source`` names a raw volume; when it is empty a
    synthetic sphere pack built from ``synthetic`` is used instead.
    """

    mode: str = "simulation"
    out_dir: str = "run"
    seed: int = 0
    repeats: int = 1
    baseline: bool = False
    pores_are_dark: bool = True
    # simulation inputs
    source: str = ""
    synthetic: dict = field(default_factory=lambda: {
        "dims": [224, 112, 112], "radius": [6.0, 10.0], "porosity": 0.35, "overlap": 0.3,
        "micropore_fraction": 0.004, "scale": 1.0, "gray": False})
    cut: int = 96
    factor: int = 4
    # real inputs
    hr: str = ""
    lr: str = ""
    hr_scale: Optional[float] = None
    lr_scale: Optional[float] = None
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    max_lag: int = 32
    bins: Optional[list] = None

    def __post_init__(self):
        if self.mode not in ("simulation", "real"):
            raise ConfigError(f"mode must be 'simulation' or 'real', got {self.mode!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        for name in ("hr_scale", "lr_scale"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.mode == "simulation" and (self.cut < 5 or self.factor < 2):
            raise ConfigError("simulation mode needs cut >= 5 and factor >= 2")
        if self.mode == "real" and not (self.hr and self.lr):
            raise ConfigError("real mode needs both 'hr' and 'lr' input paths")

    def to_dict(self) -> dict:
        d = {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}
        d["reconstruction"] = self.reconstruction.to_dict()
        return d

    def portable_dict(self) -> dict:
        """``to_dict`` without ``out_dir``: the same run written elsewhere hashes equal."""
        d = self.to_dict()
        del d["out_dir"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        rc = d.pop("reconstruction", {}) or {}
        try:
            recon = ReconstructionConfig(**rc)
        except TypeError as exc:
            raise ConfigError(f"bad [reconstruction] section: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if "synthetic" in d:
            syn = cls().synthetic
            syn.update(d["synthetic"])
            d["synthetic"] = syn
        return cls(reconstruction=recon, **d)


def load_config(path: Union[str, Path]) -> PipelineConfig:
    """Read a TOML or JSON pipeline config."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except Exception as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return PipelineConfig.from_dict(data)


# ------------------------------------------------------------ simulation pair

@dataclass
class SimulationPair:
    hr: BinaryVolume
    lr: BinaryVolume
    hr_origin: tuple[int, int, int]
    lr_origin: tuple[int, int, int]
    cut: tuple[int, int, int]


def _cut_origins(dims, cut, rng) -> tuple[np.ndarray, np.ndarray]:
    axes = [a for a in range(3) if dims[a] >= 2 * cut[a]]
    if not axes:
        raise ValueError(f"source dims {tuple(dims)} cannot hold two disjoint cuts of {tuple(cut)}")
    split = axes[int(rng.integers(len(axes)))]
    a = np.empty(3, dtype=int)
    b = np.empty(3, dtype=int)
    for ax in range(3):
        if ax == split:
            first = int(rng.integers(0, dims[ax] - 2 * cut[ax] + 1))
            second = int(rng.integers(first + cut[ax], dims[ax] - cut[ax] + 1))
            a[ax], b[ax] = first, second
        else:
            a[ax] = int(rng.integers(0, dims[ax] - cut[ax] + 1))
            b[ax] = int(rng.integers(0, dims[ax] - cut[ax] + 1))
    if rng.integers(2):
        a, b = b, a
    return a, b


def make_simulation_pair(source: Volume, cut, factor: int, seed: int = 0,
                         pores_are_dark: bool = True) -> SimulationPair:
    """Cut two disjoint sub-volumes; keep one as HR and coarsen the other.

    The LR cut is mean-pooled by ``factor``.  Gray sources are segmented by
    Otsu after cutting (HR) or after pooling (LR).
    """
    cut = np.broadcast_to(np.asarray(cut, dtype=int), (3,))
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if np.any(cut % factor):
        raise ValueError(f"cut dims {tuple(cut)} must be divisible by factor {factor}")
    dims = np.array(source.dims)
    if np.any(dims < cut):
        raise ValueError(f"source too small: dims {tuple(dims)} < cut {tuple(cut)}")
    rng = np.random.default_rng(seed)
    a, b = _cut_origins(dims, cut, rng)

    def crop(o):
        return source.data[o[0]:o[0] + cut[0], o[1]:o[1] + cut[1], o[2]:o[2] + cut[2]]

    if isinstance(source, GrayVolume):
        hr = otsu_threshold(GrayVolume(crop(a), source.scale), pores_are_dark)
        lr = otsu_threshold(downsample_mean(GrayVolume(crop(b), source.scale), factor),
                            pores_are_dark)
    else:
        hr = BinaryVolume(crop(a), source.scale)
        lr = downsample_mean(BinaryVolume(crop(b), source.scale), factor)
    return SimulationPair(hr, lr, tuple(int(v) for v in a), tuple(int(v) for v in b),
                          tuple(int(v) for v in cut))


def synthetic_source(cfg: PipelineConfig) -> Volume:
    s = cfg.synthetic
    vol = sphere_pack(s["dims"], radius=s["radius"], porosity=s["porosity"],
                      overlap=s["overlap"], micropore_fraction=s["micropore_fraction"],
                      scale=s["scale"], seed=cfg.seed)
    if s.get("gray"):
        return render_gray(vol, seed=cfg.seed)
    return vol


def _as_binary(vol: Volume, pores_are_dark: bool, scale: Optional[float]) -> BinaryVolume:
    if isinstance(vol, GrayVolume):
        vol = otsu_threshold(vol, pores_are_dark)
    if scale is not None:
        vol = BinaryVolume(vol.data, scale)
    return vol


# ------------------------------------------------------------------ run dir

def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def hash_run_dir(root: Union[str, Path]) -> dict[str, str]:
    """sha256 of every file in a run directory except timings and manifest."""
    root = Path(root)
    return {str(p.relative_to(root)): sha256_file(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in UNHASHED}


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class _Run:
    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []
        self.timings: dict[str, float] = {}

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, *rels: str) -> None:
        self.files.extend(rels)

    def volume(self, vol: Volume, rel: str) -> None:
        save_volume(vol, self.path(rel))
        self.record(rel, str(Path(rel).with_suffix(".json")))

    def json(self, obj, rel: str) -> None:
        _dump(self.path(rel), obj)
        self.record(rel)

    def text(self, text: str, rel: str) -> None:
        self.path(rel).write_text(text)
        self.record(rel)

    def metrics(self, report: metrics.MetricsReport, name: str) -> None:
        self.text(report.to_json(), f"metrics/{name}.json")
        self.text(report.s2_csv(), f"metrics/{name}_s2.csv")
        self.text(report.radius_csv(), f"metrics/{name}_radius.csv")

    def timed(self, key: str, t0: float) -> None:
        self.timings[key] = round(time.perf_counter() - t0, 6)

    def manifest(self, status: str, error: Optional[str] = None) -> None:
        entries = []
        for rel in sorted(set(self.files)):
            p = self.root / rel
            if p.is_file():
                entries.append({"path": rel, "sha256": sha256_file(p)})
        man = {"status": status, "files": entries}
        if error:
            man["error"] = error
        _dump(self.root / "timings.json", self.timings)
        _dump(self.root / "manifest.json", man)


def run_pipeline(cfg: PipelineConfig) -> Path:
    """Execute a full run and return its directory.

    On failure the directory keeps whatever was produced plus a manifest
    with ``status: failed`` and the error, and :class:`PipelineError` is
    raised.
    """
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    run = _Run(root)
    try:
        _execute(cfg, run)
    except Exception as exc:
        run.manifest("failed", f"{type(exc).__name__}: {exc}")
        raise PipelineError(f"pipeline aborted: {exc}") from exc
    run.manifest("complete")
    return root


def _execute(cfg: PipelineConfig, run: _Run) -> None:
    run.json(cfg.portable_dict(), "config.json")
    report: dict = {"seed": cfg.seed, "mode": cfg.mode, "deviations": DEVIATIONS,
                    "config": cfg.portable_dict()}

    t0 = time.perf_counter()
    if cfg.mode == "simulation":
        src = load_volume(cfg.source) if cfg.source else synthetic_source(cfg)
        pair = make_simulation_pair(src, cfg.cut, cfg.factor, cfg.seed, cfg.pores_are_dark)
        hr, lri = pair.hr, pair.lr
        report["simulation"] = {"hr_origin": list(pair.hr_origin),
                                "lr_origin": list(pair.lr_origin), "cut": list(pair.cut),
                                "factor": cfg.factor,
                                "source": cfg.source or "synthetic sphere pack"}
    else:
        hr = _as_binary(load_volume(cfg.hr), cfg.pores_are_dark, cfg.hr_scale)
        lri = _as_binary(load_volume(cfg.lr), cfg.pores_are_dark, cfg.lr_scale)
    run.timed("inputs", t0)
    run.volume(hr, "volumes/hr.raw")
    run.volume(lri, "volumes/lri.raw")

    plan = make_plan(lri.scale, hr.scale, min(lri.dims), min(hr.dims))
    run.json(plan.to_dict(), "plan.json")
    report["plan"] = plan.to_dict()

    t0 = time.perf_counter()
    epds = dictionaries.build_multi_epd(hr, plan)
    mpd = dictionaries.build_mpd(hr, plan, cfg.reconstruction.connectivity)
    run.timed("dictionaries", t0)
    for epd in epds:
        rel = f"dicts/epd_level{epd.level}.bin"
        epd.save(run.path(rel))
        run.record(rel)
    mpd.save(run.path("dicts/mpd.bin"))
    run.record("dicts/mpd.bin")
    report["dictionaries"] = {"edge": dictionaries.summarize(epds), "micropore": len(mpd)}

    conn = cfg.reconstruction.connectivity
    measured = {}

    def measure(vol, name):
        t = time.perf_counter()
        rep = metrics.measure(vol, cfg.max_lag, cfg.bins, conn, name)
        run.timed(f"metrics/{name}", t)
        run.metrics(rep, name)
        measured[name] = rep
        return rep

    measure(hr, "hr")
    measure(lri, "lri")

    branches = BRANCHES if cfg.baseline else BRANCHES[:1]
    report["runs"] = []
    for rep_idx in range(cfg.repeats):
        seed = cfg.seed + rep_idx
        for branch in branches:
            rc = replace(cfg.reconstruction, seed=seed, single_epd_baseline=branch == "single")
            tag = f"rep{rep_idx}/{branch}"
            t0 = time.perf_counter()
            res = reconstruct_multistage(lri, epds, rc)
            run.timed(f"{tag}/edges", t0)
            for k, st in enumerate(res.stages, start=1):
                run.volume(st.volume, f"runs/{tag}/pms{k}.raw")
                run.timings[f"{tag}/stage{k}"] = round(st.seconds, 6)
            t0 = time.perf_counter()
            pad = pad_micropores(res.volume, mpd, plan, rc)
            run.timed(f"{tag}/padding", t0)
            run.volume(pad.volume, f"runs/{tag}/ms.raw")
            name = f"rep{rep_idx}_{branch}"
            measure(res.volume, f"{name}_pms")
            measure(pad.volume, f"{name}_ms")
            report["runs"].append({
                "repeat": rep_idx, "branch": branch, "seed": seed,
                "stages": [st.summary() for st in res.stages],
                "padding": pad.summary(),
                "porosity": {"pms": measured[f"{name}_pms"].porosity,
                             "ms": pad.volume.porosity()},
            })
            log.info("%s: exact-match %s, placed %d, skipped %d", tag,
                     [round(s.exact_match_rate, 4) for s in res.stages], pad.placed, pad.skipped)

    names = [n for n in measured if n != "hr"]
    rows = metrics.compare(measured["hr"], [measured[n] for n in names], names)
    run.text(metrics.comparison_csv(rows), "comparison.csv")
    run.json(rows, "comparison.json")
    run.json(report, "report.json")
