"""Command line front end: ``lfkm encode|decode|eval|transfer|ablate|info``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bitstream import HEADER_SIZE, compute_bpp, deserialize, read_header, serialize
from .experiments import VARIANTS, ablate_variants, match_budget, proportion_study
from .lightfield import (
    LightField,
    error_map,
    load_lightfield,
    save_error_map,
    save_lightfield,
    view_filename,
    write_psnr_csv,
)
from .model import NetworkConfig, param_count, render_all
from .quantizer import quantize_model, raw_model
from .trainer import TrainSchedule, evaluate, train
from .transfer import pattern, transfer

THREADS_ENV = "LFKM_NUM_THREADS"


class CommandError(RuntimeError):
    pass


def _write_atomic(path: Path, data: bytes | str) -> None:
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _write_manifest(path: Path, command: str, args: argparse.Namespace, started: float, **results) -> None:
    manifest = {
        "command": command,
        "argv": args.argv,
        "arguments": {k: v for k, v in vars(args).items() if k not in ("func", "argv")},
        "software": {"lfkm": __version__, "numpy": np.__version__},
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    manifest.update(results)
    _write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _load_model(path) -> tuple[bytes, object]:
    data = Path(path).read_bytes()
    return data, deserialize(data)


# ---------------------------------------------------------------------------
# commands


def cmd_encode(args) -> int:
    started = time.perf_counter()
    lf = load_lightfield(args.input)
    cfg = NetworkConfig(
        X=lf.X, Y=lf.Y, U=lf.U, V=lf.V, c_m=args.cm, c_d=args.cd, r=args.rank, n=args.centroids,
        output_activation=args.activation, allocate_modulators=not args.no_alloc,
        decompose_kernels=not args.no_decomp, decoder_kernel=args.decoder_kernel, seed=args.seed,
    )
    schedule = TrainSchedule(lr=args.lr, epochs=args.epochs, quant_epoch_uses=args.quant_uses,
                             seed=args.seed, iterations=args.iterations)
    bank, report = train(cfg, schedule, lf, verbose=args.verbose)
    model = raw_model(bank) if args.skip_quant else quantize_model(bank, lf, schedule, verbose=args.verbose)
    data = serialize(model)
    decoded = deserialize(data).to_bank()
    result = evaluate(decoded, lf)
    bpp = compute_bpp(data, cfg.X, cfg.Y, cfg.U, cfg.V)

    output = Path(args.output)
    _write_atomic(output, data)
    if args.report:
        report.write(args.report)
    manifest = Path(args.manifest) if args.manifest else output.with_name(output.name + ".json")
    _write_manifest(manifest, "encode", args, started, config=cfg.to_dict(), schedule=schedule.__dict__,
                    file_bytes=len(data), bpp=bpp, mean_psnr=result.mean, psnr_variance=result.variance,
                    parameters=param_count(cfg).total)
    print(f"wrote {output} ({len(data)} bytes)  bpp {bpp:.6f}  mean PSNR {result.mean:.4f} dB")
    return 0


def cmd_decode(args) -> int:
    _, model = _load_model(args.model)
    views = render_all(model.to_bank())
    save_lightfield(LightField(views), args.output)
    cfg = model.config
    print(f"wrote {cfg.U * cfg.V} views of {cfg.X}x{cfg.Y} to {args.output}")
    return 0


def cmd_eval(args) -> int:
    data, model = _load_model(args.model)
    cfg = model.config
    reference = load_lightfield(args.reference)
    if reference.extents != (cfg.X, cfg.Y, cfg.U, cfg.V):
        raise CommandError(f"reference is {reference.X}x{reference.Y}x{reference.U}x{reference.V}, "
                           f"model is {cfg.X}x{cfg.Y}x{cfg.U}x{cfg.V}")
    bank = model.to_bank()
    result = evaluate(bank, reference)
    bpp = compute_bpp(data, cfg.X, cfg.Y, cfg.U, cfg.V)
    if args.report:
        write_psnr_csv(result.table, args.report, {"bpp": f"{bpp:.9g}"})
    if args.error_maps:
        out = Path(args.error_maps)
        out.mkdir(parents=True, exist_ok=True)
        decoded = LightField(render_all(bank))
        save_error_map(error_map(decoded, reference), out / "error_map.png")
        for u in range(cfg.U):
            for v in range(cfg.V):
                emap = np.abs(decoded.views[u, v] - reference.views[u, v]).mean(axis=0)
                save_error_map(emap, out / view_filename(u, v).replace(".png", "_error.png"))
    print(f"mean PSNR {result.mean:.4f} dB  variance {result.variance:.6f}  bpp {bpp:.6f}")
    return 0


def cmd_transfer(args) -> int:
    started = time.perf_counter()
    _, model = _load_model(args.pretrained)
    target = load_lightfield(args.target)
    subset = pattern(args.subset, target.U, target.V)
    schedule = TrainSchedule(lr=args.lr, epochs=args.epochs, seed=args.seed, iterations=args.iterations)
    result = transfer(model.to_bank(), target, subset, schedule, verbose=args.verbose)
    result.write(args.output)
    _write_manifest(Path(args.output).with_name(Path(args.output).name + ".json"), "transfer", args, started,
                    schedule=schedule.__dict__, involved_mean=result.involved_mean,
                    uninvolved_mean=result.uninvolved_mean, frozen_modulators="verified")
    print(f"{subset.name}: involved mean {result.involved_mean:.4f} dB  "
          f"uninvolved mean {result.uninvolved_mean:.4f} dB  (modulators verified frozen)")
    return 0


def cmd_ablate(args) -> int:
    lf = load_lightfield(args.input)
    base = NetworkConfig(X=lf.X, Y=lf.Y, U=lf.U, V=lf.V, c_m=args.cm, c_d=args.cd, r=args.rank)
    budget = args.budget or param_count(base).total
    schedule = TrainSchedule(lr=args.lr, epochs=args.epochs, iterations=args.iterations)
    seeds = tuple(range(args.seeds))
    if args.study == "variants":
        rows = list(ablate_variants(lf, base, budget, schedule, seeds).values())
    else:
        rows = proportion_study(lf, base, budget, args.cm_values, schedule, seeds)
    lines = [f"budget {budget} parameters, {len(seeds)} seed(s)"] + [row.line() for row in rows]
    text = "\n".join(lines) + "\n"
    if args.output:
        _write_atomic(Path(args.output), text)
    print(text, end="")
    return 0


def cmd_info(args) -> int:
    data = Path(args.model).read_bytes()
    cfg, raw = read_header(data)
    model = deserialize(data)
    count = param_count(cfg)
    print(f"file        {args.model} ({len(data)} bytes, header {HEADER_SIZE} bytes)")
    print(f"extents     X={cfg.X} Y={cfg.Y} U={cfg.U} V={cfg.V}")
    print(f"channels    c_m={cfg.c_m} c_d={cfg.c_d}  r={cfg.r}  n={cfg.n}")
    print(f"variant     allocation={'on' if cfg.allocate_modulators else 'off'} "
          f"decomposition={'on' if cfg.decompose_kernels else 'off'}  "
          f"payload={'raw float32' if raw else 'quantized'}")
    print(f"activation  {cfg.output_activation}  decoder {cfg.decoder_kernel}x{cfg.decoder_kernel}  seed {cfg.seed}")
    print(f"parameters  {count.total} (modulators {100 * count.modulator_share:.1f}%)")
    print(f"bpp         {compute_bpp(data, cfg.X, cfg.Y, cfg.U, cfg.V):.6f}")
    if not raw:
        for i, book in enumerate(model.layers, start=1):
            used = np.unique(book.assignments).size
            print(f"layer {i}     {book.assignments.size} indices over {used} used centroids")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfkm", description="Kernel-modulated neural light field codec.")
    parser.add_argument("--version", action="version", version=f"lfkm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="train, quantize and write a .lfkm model")
    p.add_argument("--input", required=True, help="directory of view_UU_VV.png files")
    p.add_argument("--output", required=True, help="output .lfkm file")
    p.add_argument("--cm", type=int, default=2, help="modulator channels per layer")
    p.add_argument("--cd", type=int, default=48, help="descriptor channels per layer")
    p.add_argument("--rank", type=int, default=6, help="number of Fourier-Bessel bases")
    p.add_argument("--centroids", type=int, default=256, help="codebook size per layer")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--iterations", type=int, default=None, help="override the epoch schedule")
    p.add_argument("--quant-uses", type=int, default=200, help="view uses per quantization epoch")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-alloc", action="store_true", help="one modulator set per view")
    p.add_argument("--no-decomp", action="store_true", help="dense kernels instead of basis coefficients")
    p.add_argument("--skip-quant", action="store_true", help="store raw float32 parameters")
    p.add_argument("--activation", choices=("sigmoid", "softmax"), default="sigmoid")
    p.add_argument("--decoder-kernel", type=int, choices=(1, 3), default=1)
    p.add_argument("--manifest", default=None, help="run manifest path (default: OUTPUT.json)")
    p.add_argument("--report", default=None, help="write the training trace as TSV")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="render every view of a model to PNG")
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score a model against reference views")
    p.add_argument("--model", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--report", default=None, help="per-view PSNR CSV")
    p.add_argument("--error-maps", default=None, help="directory for error map PNGs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="retrain descriptors on a view subset of a new light field")
    p.add_argument("--pretrained", required=True, help=".lfkm model trained on the first light field")
    p.add_argument("--target", required=True, help="directory of the second light field")
    p.add_argument("--subset", type=int, choices=(5, 9, 13, 25), default=9)
    p.add_argument("--output", required=True, help="report CSV")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("ablate", help="budget-matched variant or modulator-proportion study")
    p.add_argument("--input", required=True)
    p.add_argument("--study", choices=("variants", "proportion"), default="variants")
    p.add_argument("--cm", type=int, default=2)
    p.add_argument("--cd", type=int, default=48)
    p.add_argument("--rank", type=int, default=6)
    p.add_argument("--budget", type=int, default=None, help="parameter budget (default: that of --cm/--cd)")
    p.add_argument("--cm-values", type=int, nargs="+", default=[2, 6, 12])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("info", help="describe a .lfkm file")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    args = build_parser().parse_args(argv)
    args.argv = argv
    threads = os.environ.get(THREADS_ENV)
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"lfkm {args.command}: error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
