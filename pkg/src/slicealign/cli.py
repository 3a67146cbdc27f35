"""``slicealign`` command line.

Subcommands: gen-phantom, register-pair, align, fuse-demo, eval. Exit status is
0 on success, 2 for invalid arguments or inputs (one-line message on stderr)
and 1 for unexpected internal errors. ``SLICEALIGN_WORKERS`` and
``SLICEALIGN_OUTPUT_DIR`` supply defaults for ``--workers`` and ``--out``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .image import (
    Label,
    Mask2D,
    Volume,
    checkerboard,
    normalize_intensity,
    read_masks,
    read_volume,
    write_masks,
    write_pgm,
    write_raw,
    write_volume,
)
from .matching import DEFAULT_ACCEPT_THRESHOLD, MATCHING_REGISTRATION, reconstruct_registered, select_matches
from .metrics import dice, evaluate
from .phantom import PhantomConfig, gen_phantom
from .registration import RegistrationConfig, register_pair
from .transforms import chain_to_dict, compose_chain, warp, warp_labels, write_field

LABEL_NAMES = {l.name: l for l in Label if l is not Label.BACKGROUND}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("SLICEALIGN_OUTPUT_DIR")
    if not out:
        raise UsageError("no output directory: pass --out or set SLICEALIGN_OUTPUT_DIR")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _workers(args) -> int:
    if args.workers is not None:
        n = args.workers
    else:
        env = os.environ.get("SLICEALIGN_WORKERS", "1")
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"SLICEALIGN_WORKERS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("workers must be >= 1")
    return n


# --- config flags mirror dataclass fields ------------------------------------

def _add_config_flags(p, cls, defaults, prefix=""):
    for f in dataclasses.fields(cls):
        default = getattr(defaults, f.name)
        if f.name == "correspondence" or isinstance(default, (tuple, list)):
            continue
        flag = "--" + prefix + f.name.replace("_", "-")
        dest = prefix.replace("-", "_") + f.name
        if isinstance(default, bool):
            p.add_argument(flag, dest=dest, type=lambda s: s.lower() in ("1", "true", "yes"), default=default,
                           metavar="BOOL")
        else:
            # optional fields (None default) are all floats today
            kind = float if default is None else type(default)
            p.add_argument(flag, dest=dest, type=kind, default=default)


def _config_from(args, cls, prefix=""):
    names = [f.name for f in dataclasses.fields(cls)]
    kw = {n: getattr(args, prefix.replace("-", "_") + n) for n in names if hasattr(args, prefix.replace("-", "_") + n)}
    return cls(**kw)


# --- gen-phantom -------------------------------------------------------------

def _write_phantom(case, out: Path) -> None:
    write_volume(out / "lge.raw", case.lge)
    write_volume(out / "t1m.raw", case.t1m)
    write_volume(out / "t2m.raw", case.t2m)
    write_masks(out / "lge_masks.raw", case.masks, case.lge.slice_positions)
    write_masks(out / "mapping_masks.raw", case.mapping_masks, case.t1m.slice_positions)
    chains = []
    for j, ch in enumerate(case.gt_chains):
        d = chain_to_dict(ch)
        if ch.diffeo is not None:
            name = f"gt_velocity_{j}.raw"
            write_field(out / name, ch.diffeo)
            d["velocity_file"] = name
        chains.append(d)
    cfg = dataclasses.asdict(case.config)
    _dump(out / "ground_truth.json", {
        "seed": case.seed,
        "has_mi": case.has_mi,
        "correspondence": [{"fixed": k, "moving": j} for k, j in case.gt_correspondence],
        "chains": chains,
        "config": cfg,
        "files": {
            "lge": "lge.raw", "t1m": "t1m.raw", "t2m": "t2m.raw",
            "lge_masks": "lge_masks.raw", "mapping_masks": "mapping_masks.raw",
        },
    })


def cmd_gen_phantom(args) -> int:
    cfg = _config_from(args, PhantomConfig)
    if args.correspondence_text:
        try:
            corr = tuple(int(v) for v in args.correspondence_text.split(","))
        except ValueError:
            raise UsageError(f"--correspondence must be comma-separated integers, got {args.correspondence_text!r}") from None
        cfg = dataclasses.replace(cfg, correspondence=corr)
    out = _out_dir(args)
    _write_phantom(gen_phantom(args.seed, cfg), out)
    print(out / "ground_truth.json")
    return 0


# --- register-pair -----------------------------------------------------------

def _slice(vol: Volume, idx: int, what: str):
    if not 0 <= idx < len(vol):
        raise UsageError(f"{what} index {idx} out of range for {len(vol)} slices")
    return vol[idx]


def cmd_register_pair(args) -> int:
    cfg = _config_from(args, RegistrationConfig)
    fixed = normalize_intensity(_slice(read_volume(args.fixed), args.fixed_index, "fixed"))
    movers = [normalize_intensity(_slice(read_volume(args.moving), args.moving_index, "moving"))]
    if args.moving2:
        movers.append(normalize_intensity(_slice(read_volume(args.moving2), args.moving_index, "moving2")))
    if any(m.shape != fixed.shape for m in movers):
        raise UsageError("fixed and moving slices must have the same dimensions")
    out = _out_dir(args)
    res = register_pair(fixed, movers, cfg)
    h, w = fixed.shape
    u = compose_chain(res.chain, h, w, cfg.exp_steps)
    warped = [warp(m, u) for m in movers]
    _dump(out / "registration.json", {
        "chain": chain_to_dict(res.chain),
        "initial_loss": res.initial_loss,
        "final_loss": res.final_loss,
        "stage_losses": res.stage_losses,
        "flags": list(res.flags),
        "config": dataclasses.asdict(cfg),
    })
    (out / "trace.csv").write_text(res.trace_csv())
    if res.chain.diffeo is not None:
        write_field(out / "velocity.raw", res.chain.diffeo)
    write_field(out / "displacement.raw", u)
    for i, wimg in enumerate(warped):
        write_raw(out / f"warped_{i}.raw", wimg.intensities, {"height": h, "width": w})
        write_pgm(out / f"overlay_{i}.pgm", checkerboard(fixed.intensities, wimg.intensities))
    print(out / "registration.json")
    return 0


# --- align -------------------------------------------------------------------

def _phantom_paths(args):
    if args.phantom:
        root = Path(args.phantom)
        try:
            files = json.loads((root / "ground_truth.json").read_text())["files"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read phantom directory {root}: {exc}") from None
        defaults = {k: str(root / v) for k, v in files.items()}
    else:
        defaults = {}
    paths = {k: getattr(args, k, None) or defaults.get(k) for k in
             ("lge", "t1m", "t2m", "lge_masks", "mapping_masks")}
    for k in ("lge", "t1m", "t2m"):
        if not paths[k]:
            raise UsageError(f"missing --{k.replace('_', '-')} (or --phantom)")
    return paths


def cmd_align(args) -> int:
    cfg = _config_from(args, RegistrationConfig)
    paths = _phantom_paths(args)
    lge, t1m, t2m = (read_volume(paths[k]) for k in ("lge", "t1m", "t2m"))
    workers = _workers(args)
    out = _out_dir(args)
    result = select_matches(lge, t1m, t2m, cfg, args.accept_threshold, workers=workers)
    reg_t1, reg_t2 = reconstruct_registered(result, lge, t1m, t2m)
    h, w = lge.shape
    report = result.to_dict()
    report["chains"] = [chain_to_dict(m.chain) for m in result.matches]

    for name, rv in (("t1m", reg_t1), ("t2m", reg_t2)):
        write_raw(out / f"{name}_registered.raw", rv.array((h, w)), {
            "height": h, "width": w, "slices": len(rv.slices),
            "slice_positions_mm": list(rv.slice_positions),
            "present": rv.present(),
            "source_indices": rv.source_indices,
            "modality": rv.modality.value,
        })

    if paths.get("lge_masks") and paths.get("mapping_masks"):
        lge_masks = read_masks(paths["lge_masks"])
        map_masks = read_masks(paths["mapping_masks"])
        myo = (Label.MYO, Label.ME, Label.MI)
        per = []
        for m in result.matches:
            u = compose_chain(m.chain, h, w, cfg.exp_steps)
            warped = Mask2D(warp_labels(map_masks[m.moving_index].labels, u.grid))
            per.append({"fixed": m.fixed_index, "moving": m.moving_index,
                        "myocardium_dice_percent": dice(warped, lge_masks[m.fixed_index], myo)})
        report["mask_check"] = per

    if args.overlays:
        for m in result.matches:
            a = normalize_intensity(lge[m.fixed_index]).intensities
            b = normalize_intensity(reg_t1.slices[m.fixed_index]).intensities
            write_pgm(out / f"overlay_fixed{m.fixed_index}_t1m{m.moving_index}.pgm", checkerboard(a, b))

    _dump(out / "matches.json", report)
    print(out / "matches.json")
    return 0


# --- fuse-demo ---------------------------------------------------------------

def cmd_fuse_demo(args) -> int:
    from .fusion_demo import invariant_report

    if args.phantom:
        paths = _phantom_paths(args)
        lge, t1m, t2m = (read_volume(paths[k]) for k in ("lge", "t1m", "t2m"))
        gt = json.loads((Path(args.phantom) / "ground_truth.json").read_text())
        k, j = gt["correspondence"][0]["fixed"], gt["correspondence"][0]["moving"]
    else:
        case = gen_phantom(args.seed, PhantomConfig(size=args.size))
        lge, t1m, t2m = case.lge, case.t1m, case.t2m
        k, j = case.gt_correspondence[0]
    out = _out_dir(args)
    report = invariant_report(lge[k], t1m[j], t2m[j], seed=args.seed)
    report["source"] = {"lge_index": k, "mapping_index": j}
    _dump(out / "fusion_report.json", report)
    print(out / "fusion_report.json")
    return 0 if report["all_pass"] else 1


# --- eval --------------------------------------------------------------------

def _labels(text: str):
    out = []
    for tok in text.split(","):
        tok = tok.strip().upper()
        if tok not in LABEL_NAMES:
            raise UsageError(f"unknown label {tok!r}; choose from {','.join(LABEL_NAMES)}")
        out.append(LABEL_NAMES[tok])
    return out


def cmd_eval(args) -> int:
    labels = _labels(args.labels)
    pred, ref = read_masks(args.pred), read_masks(args.ref)
    report = evaluate(pred, ref, labels)
    out = _out_dir(args)
    (out / "metrics.json").write_text(report.to_json())
    print(out / "metrics.json")
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slicealign", description="Multi-sequence cardiac MR slice alignment toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-phantom", help="write a synthetic phantom case")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.add_argument("--correspondence", dest="correspondence_text", help="comma-separated LGE indices, one per mapping slice")
    _add_config_flags(g, PhantomConfig, PhantomConfig())
    g.set_defaults(func=cmd_gen_phantom)

    r = sub.add_parser("register-pair", help="register one mapping slice (pair) to one LGE slice")
    r.add_argument("--fixed", required=True)
    r.add_argument("--fixed-index", type=int, default=0)
    r.add_argument("--moving", required=True)
    r.add_argument("--moving2", help="second mapping volume registered jointly with --moving")
    r.add_argument("--moving-index", type=int, default=0)
    r.add_argument("--out")
    _add_config_flags(r, RegistrationConfig, RegistrationConfig())
    r.set_defaults(func=cmd_register_pair)

    a = sub.add_parser("align", help="select slice matches and rebuild registered mapping volumes")
    a.add_argument("--phantom", help="gen-phantom output directory (supplies default paths)")
    for k in ("lge", "t1m", "t2m", "lge-masks", "mapping-masks"):
        a.add_argument(f"--{k}")
    a.add_argument("--accept-threshold", type=float, default=DEFAULT_ACCEPT_THRESHOLD)
    a.add_argument("--workers", type=int, default=None)
    a.add_argument("--overlays", action="store_true", help="write fixed/warped checkerboard PGMs")
    a.add_argument("--out")
    _add_config_flags(a, RegistrationConfig, MATCHING_REGISTRATION)
    a.set_defaults(func=cmd_align)

    f = sub.add_parser("fuse-demo", help="run the fusion operators and report invariant checks")
    f.add_argument("--phantom")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--size", type=int, default=128)
    f.add_argument("--out")
    f.set_defaults(func=cmd_fuse_demo)

    e = sub.add_parser("eval", help="Dice and HD95 between two mask stacks")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--labels", default="MYO,ME,MI")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"slicealign: error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"slicealign: internal error: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
