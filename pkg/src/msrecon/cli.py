"""Command-line entry point: ``msrecon <subcommand> ...``.

Exit status: 0 success, 2 usage error, 3 bad input or config, 4 the scales
admit no reconstruction, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import dictionaries, metrics
from .dictionaries import DictionaryError, EdgePatternDictionary, MicroPoreDictionary
from .pipeline import (ConfigError, PipelineConfig, PipelineError, load_config,
                       make_simulation_pair, run_pipeline)
from .reconstruct import ReconstructionConfig, pad_micropores, reconstruct_multistage
from .scaleplan import PlanError, ScalePlan, plan as make_plan
from .synthetic import render_gray, sphere_pack
from .volume import BinaryVolume, GrayVolume, VolumeFormatError, load_volume, save_volume

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_INPUT, EXIT_PLAN = 0, 1, 2, 3, 4


def _binary(path, pores_are_dark=True) -> BinaryVolume:
    vol = load_volume(path)
    if isinstance(vol, GrayVolume):
        from .imageops import otsu_threshold
        vol = otsu_threshold(vol, pores_are_dark)
    return vol


def _recon_config(args) -> ReconstructionConfig:
    return ReconstructionConfig(seed=args.seed, tie_break=args.tie_break,
                                dilation_radius=args.dilation_radius,
                                max_placement_attempts=args.max_attempts,
                                single_epd_baseline=getattr(args, "baseline", False),
                                connectivity=args.connectivity)


def cmd_plan(args) -> int:
    p = make_plan(args.lr_scale, args.hr_scale, args.lr_size, args.hr_size)
    if args.json:
        print(json.dumps(p.to_dict(), indent=2))
        return EXIT_OK
    print(f"n_max={p.n_max}")
    print(f"m_max={p.m_max}")
    print(f"out_scale_um={p.out_scale:g}")
    print(f"cc_range=[{p.cc_range[0]},{p.cc_range[1]}]")
    print(f"pad_multiplicity={p.pad_multiplicity}")
    for st in p.stages:
        print(f"stage {st.index}: input {st.input_scale:g} um, dictionary level {st.level}")
    if p.stage_shortfall:
        print(f"note: HR size limits the run to {p.m_max} of {p.n_max} possible stages")
    return EXIT_OK


def cmd_build_dicts(args) -> int:
    hr = _binary(args.hr)
    if args.lr:
        lr = _binary(args.lr)
        lr_scale, lr_size = lr.scale, min(lr.dims)
    else:
        if args.lr_scale is None or args.lr_size is None:
            raise ConfigError("give --lr or both --lr-scale and --lr-size")
        lr_scale, lr_size = args.lr_scale, args.lr_size
    p = make_plan(lr_scale, hr.scale, lr_size, min(hr.dims))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(json.dumps(p.to_dict(), indent=2) + "\n")
    for epd in dictionaries.build_multi_epd(hr, p):
        epd.save(out / f"epd_level{epd.level}.bin")
        print(f"level {epd.level}: {epd.n_classes} classes, {epd.n_fills} fills")
    mpd = dictionaries.build_mpd(hr, p, args.connectivity)
    mpd.save(out / "mpd.bin")
    print(f"micro-pores: {len(mpd)} elements")
    return EXIT_OK


def _load_dicts(d: Path) -> tuple[ScalePlan, list[EdgePatternDictionary]]:
    plan_path = d / "plan.json"
    if not plan_path.is_file():
        raise ConfigError(f"plan not found: {plan_path}")
    p = ScalePlan.from_dict(json.loads(plan_path.read_text()))
    epds = []
    for level in range(p.m_max, 0, -1):
        f = d / f"epd_level{level}.bin"
        if not f.is_file():
            raise ConfigError(f"dictionary not found: {f}")
        epds.append(EdgePatternDictionary.load(f))
    return p, epds


def cmd_reconstruct(args) -> int:
    lri = _binary(args.lr)
    _, epds = _load_dicts(Path(args.dicts))
    res = reconstruct_multistage(lri, epds, _recon_config(args))
    out = Path(args.out)
    for k, st in enumerate(res.stages, start=1):
        save_volume(st.volume, out.with_name(f"{out.stem}_stage{k}.raw"))
        print(f"stage {k}: level {st.level}, {st.n_blocks} blocks, "
              f"exact-match rate {st.exact_match_rate:.4f}")
    save_volume(res.volume, out)
    return EXIT_OK


def cmd_pad(args) -> int:
    pms = _binary(args.pms)
    d = Path(args.dicts)
    p, _ = _load_dicts(d)
    mpd = MicroPoreDictionary.load(d / "mpd.bin")
    res = pad_micropores(pms, mpd, p, _recon_config(args))
    save_volume(res.volume, args.out)
    print(f"placed {res.placed}, skipped {res.skipped}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    vol = _binary(args.volume)
    bins = [float(b) for b in args.bins.split(",")] if args.bins else None
    rep = metrics.measure(vol, args.max_lag, bins, args.connectivity, Path(args.volume).stem)
    text = rep.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate_pair(args) -> int:
    if args.source:
        src = load_volume(args.source)
    else:
        src = sphere_pack(args.synthetic_dims, scale=args.scale, seed=args.seed)
        if args.gray:
            src = render_gray(src, seed=args.seed)
    pair = make_simulation_pair(src, args.cut, args.factor, args.seed)
    out = Path(args.out)
    save_volume(pair.hr, out / "hr.raw")
    save_volume(pair.lr, out / "lri.raw")
    print(f"hr: dims {pair.hr.dims} at {pair.hr.scale:g} um, origin {pair.hr_origin}")
    print(f"lri: dims {pair.lr.dims} at {pair.lr.scale:g} um, origin {pair.lr_origin}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.baseline:
        overrides["baseline"] = True
    if args.out:
        overrides["out_dir"] = args.out
    if args.repeats is not None:
        overrides["repeats"] = args.repeats
    if overrides:
        cfg = replace(cfg, **overrides)
    root = run_pipeline(cfg)
    print(f"run directory: {root}")
    return EXIT_OK


def _add_recon_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tie-break", choices=("first", "seeded-random"), default="seeded-random")
    p.add_argument("--dilation-radius", type=int, default=1)
    p.add_argument("--max-attempts", type=int, default=1000)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msrecon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="stage counts and scales for an LR/HR pair")
    p.add_argument("--lr-scale", type=float, required=True)
    p.add_argument("--hr-scale", type=float, required=True)
    p.add_argument("--lr-size", type=int, required=True)
    p.add_argument("--hr-size", type=int, required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("build-dicts", help="learn edge and micro-pore dictionaries")
    p.add_argument("--hr", required=True)
    p.add_argument("--lr", help="LR volume (its scale and size drive the plan)")
    p.add_argument("--lr-scale", type=float)
    p.add_argument("--lr-size", type=int)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dicts)

    p = sub.add_parser("reconstruct", help="staged edge reconstruction")
    p.add_argument("--lr", required=True)
    p.add_argument("--dicts", required=True, help="directory written by build-dicts")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", action="store_true", help="use the finest dictionary for every stage")
    _add_recon_args(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("pad", help="micro-pore padding")
    p.add_argument("--pms", required=True)
    p.add_argument("--dicts", required=True)
    p.add_argument("--out", required=True)
    _add_recon_args(p)
    p.set_defaults(func=cmd_pad)

    p = sub.add_parser("metrics", help="porosity, S2, component and radius histograms")
    p.add_argument("--volume", required=True)
    p.add_argument("--max-lag", type=int)
    p.add_argument("--bins", help="comma-separated radius bin edges in um")
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("simulate-pair", help="cut an HR volume and a coarsened LR volume")
    p.add_argument("--source", help="raw volume; omit for a synthetic sphere pack")
    p.add_argument("--synthetic-dims", type=int, nargs=3, default=[224, 112, 112])
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--gray", action="store_true")
    p.add_argument("--cut", type=int, default=96)
    p.add_argument("--factor", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate_pair)

    p = sub.add_parser("pipeline", help="full run into a self-describing directory")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--repeats", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PlanError as exc:
        print(f"error: plan: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except (ConfigError, VolumeFormatError, DictionaryError, FileNotFoundError) as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PipelineError as exc:
        print(f"error: pipeline: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ValueError as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
