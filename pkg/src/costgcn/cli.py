"""Command-line entry point: ``costgcn <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings

import numpy as np

from . import flops as cost
from .continual import ConfigError, ShortSequenceError
from .graph import GraphError
from .harness import bench, verify
from .io import MODALITIES, FormatError, ModalityStream, derive_modality, load_weights, open_stream, read_clip
from .network import (PRESET_NAMES, VARIANTS, Model, ModeError, NetworkConfig, WeightError, convert, forward_clip,
                      forward_step, init_random, init_stream, preset, reduced_preset)
from .numerics import DimensionError

EXIT_OK, EXIT_VERIFY, EXIT_INVALID, EXIT_MODE = 0, 1, 2, 3

log = logging.getLogger("costgcn")


class _Invalid(Exception):
    pass


def _load_config(path: str) -> NetworkConfig:
    try:
        return NetworkConfig.load(path)
    except json.JSONDecodeError as exc:
        raise _Invalid(f"{path}: not valid JSON ({exc.msg}, line {exc.lineno})") from None


def _load_model(args) -> Model:
    return Model(_load_config(args.config), load_weights(args.weights))


def _top(logits: np.ndarray, k: int) -> list[tuple[int, float]]:
    order = sorted(range(len(logits)), key=lambda i: (-logits[i], i))
    return [(i, float(logits[i])) for i in order[:k]]


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def cmd_infer_clip(args) -> int:
    model = _load_model(args)
    clip = read_clip(args.clip)
    if args.modality != "joints":
        clip = derive_modality(clip, args.modality, model.graph)
    logits = forward_clip(model, clip)
    for rank, (cls, val) in enumerate(_top(logits, args.top), start=1):
        print(f"{rank:>3}  class {cls:>4}  {_fmt(val)}")
    print("logits " + " ".join(_fmt(v) for v in logits))
    return EXIT_OK


def cmd_infer_stream(args) -> int:
    model = _load_model(args)
    if not model.config.is_continual:
        raise ModeError("infer-stream needs a continual config; run "
                        "`costgcn convert --config CFG --target co --out CO.json` first")
    persons = args.persons or model.config.persons
    source = args.file if args.file else "-"
    stream = open_stream(source, V=model.graph.V, channels=model.config.in_channels, persons=persons)
    state = init_stream(model, persons)
    modality = ModalityStream(args.modality, model.graph) if args.modality != "joints" else None
    out = sys.stdout
    for frame in stream:
        x = frame.tensor(persons)
        if modality is not None:
            x = modality.step(x)
        pred = forward_step(model, state, x)
        if pred is None:
            continue
        rec = {"frame_index": pred.frame_index}
        if args.emit == "top":
            rec["top"] = [[c, v] for c, v in _top(pred.logits, args.top)]
        else:
            rec["logits"] = [float(v) for v in pred.logits]
        out.write(json.dumps(rec) + "\n")
    out.flush()
    if stream.skipped:
        print(f"skipped {stream.skipped} malformed line(s)", file=sys.stderr)
    return EXIT_OK


def cmd_convert(args) -> int:
    cfg = _load_config(args.config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # printed from the report below
        out, report = convert(cfg, args.target)
    out.save(args.out)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    print(f"{'block':>5}  {'K':>2}  {'d':>2}  {'pad':>3}  {'delay':>5}  {'stride':>6}")
    for b in report.blocks:
        print(f"{b['block']:>5}  {b['K']:>2}  {b['dilation']:>2}  {b['padding']:>3}  {b['delay']:>5}  {b['stride']:>6}")
    print(f"total delay {report.total_delay} frames, network stride {report.network_stride}")
    return EXIT_OK


def _config_from_args(args) -> tuple[NetworkConfig, NetworkConfig | None]:
    """(config, regular reference) from --config or --preset/--variant."""
    if getattr(args, "config", None):
        return _load_config(args.config), None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if args.scale == "full":
            return preset(args.preset, args.variant), preset(args.preset, "reg")
        return reduced_preset(args.preset, args.variant, args.scale), reduced_preset(args.preset, "reg", args.scale)


def cmd_flops(args) -> int:
    cfg, reference = _config_from_args(args)
    rep = cost.report(cfg, args.T, reference=reference)
    if args.json:
        print(json.dumps(rep.to_dict(), indent=2))
    else:
        print(f"{cfg.name} / {cfg.variant}")
        print(rep.table())
    return EXIT_OK


def cmd_verify(args) -> int:
    report = verify(args.preset, seed=args.seed, scale=args.scale, corrupt_delay=args.corrupt_delay)
    for c in report.checks:
        print(c.line())
    if report.passed:
        print(f"all checks within {report.checks[0].tolerance:g}")
        return EXIT_OK
    bad = ", ".join(f"{c.name} ({c.max_diff:.3e})" for c in report.checks if not c.passed)
    print(f"verification failed: {bad}", file=sys.stderr)
    return EXIT_VERIFY


def cmd_bench(args) -> int:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = bench(args.preset, args.variant, frames=args.frames, reps=args.reps, seed=args.seed)
    if args.json:
        print(json.dumps({**res.__dict__, "speedup": res.speedup}, indent=2))
    else:
        print("\n".join(res.lines()))
    return EXIT_OK


def cmd_init_random(args) -> int:
    if args.config:
        cfg = _load_config(args.config)
    elif args.preset:
        cfg, _ = _config_from_args(args)
    else:
        raise _Invalid("init-random needs --config or --preset")
    if args.config_out:
        cfg.save(args.config_out)
    store = init_random(cfg, args.seed)
    store.save(args.out)
    print(f"wrote {len(store)} tensors ({sum(a.size for a in store.values())} values) to {args.out}")
    return EXIT_OK


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="costgcn", description="Continual spatio-temporal graph networks.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log warnings for skipped stream lines")
    sub = ap.add_subparsers(dest="command", required=True)

    def preset_args(p, variant_default="reg"):
        p.add_argument("--preset", choices=PRESET_NAMES)
        p.add_argument("--variant", choices=VARIANTS, default=variant_default)
        p.add_argument("--scale", choices=("full", "small", "tiny"), default="full")

    p = sub.add_parser("infer-clip", help="classify a clip container")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--modality", choices=MODALITIES, default="joints")
    p.add_argument("--top", type=_positive, default=5)
    p.set_defaults(func=cmd_infer_clip)

    p = sub.add_parser("infer-stream", help="continual inference on a JSON-lines frame stream")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--stdin", action="store_true", help="read frames from standard input (default)")
    src.add_argument("--file")
    p.add_argument("--emit", choices=("jsonl", "top"), default="jsonl")
    p.add_argument("--top", type=_positive, default=5)
    p.add_argument("--modality", choices=MODALITIES, default="joints")
    p.add_argument("--persons", type=_positive)
    p.set_defaults(func=cmd_infer_stream)

    p = sub.add_parser("convert", help="regular config -> continual config")
    p.add_argument("--config", required=True)
    p.add_argument("--target", choices=("co", "co_star"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="also write the delay report as JSON")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("verify", help="clip/step equivalence suite")
    p.add_argument("--preset", choices=PRESET_NAMES, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", choices=("small", "tiny"), default="tiny")
    p.add_argument("--corrupt-delay", type=int, default=0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("flops", help="analytical cost report")
    preset_args(p)
    p.add_argument("--config")
    p.add_argument("--T", type=_positive)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bench", help="clip vs step throughput")
    p.add_argument("--preset", choices=PRESET_NAMES, required=True)
    p.add_argument("--variant", choices=VARIANTS, default="co")
    p.add_argument("--frames", type=_positive, default=200)
    p.add_argument("--reps", type=_positive, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("init-random", help="shape-correct random weights")
    preset_args(p)
    p.add_argument("--config")
    p.add_argument("--config-out", help="write the (preset) config used")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init_random)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s: %(message)s")
    if args.command == "flops" and not (args.config or args.preset):
        print("error: flops needs --preset or --config", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except ModeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODE
    except WeightError as exc:
        print(f"error: weight {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (_Invalid, ConfigError, GraphError, FormatError, DimensionError, ShortSequenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
