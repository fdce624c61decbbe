"""Command line front end.

Exit codes: 0 ok, 1 I/O or parse error, 2 invalid configuration,
3 numerical failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import accounting
from .grouping import parse_grouping
from .net import DivergenceError, ToyAutoencoder, TrainConfig, train
from .quantizer import (
    DomainError,
    ExponentRangeError,
    UnsupportedCombinationError,
    parse_scheme,
    precision_sweep,
    quantize_model,
)
from .store import (
    FXF1_MAGIC,
    FXQ1_MAGIC,
    FixedPointFormat,
    FormatError,
    Grouping,
    Scheme,
    read_float_file,
    read_quantized_file,
    write_float_file,
    write_quantized_file,
)
from .wcft import wcft_from_trained

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_USAGE = 64


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(records, out) -> None:
    for r in records:
        out.write(json.dumps(r, sort_keys=True) + "\n")


def _config_error(fn, value):
    try:
        return fn(value)
    except ValueError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None


def _fmt(fl: int) -> FixedPointFormat:
    return _config_error(FixedPointFormat.from_fl, fl)


def _same_file(a, b) -> bool:
    try:
        return Path(a).resolve() == Path(b).resolve()
    except OSError:
        return False


def _check_outputs(inputs, outputs) -> None:
    for o in outputs:
        if o is None:
            continue
        for i in inputs:
            if _same_file(i, o):
                raise CliError(EXIT_CONFIG, f"output {o} would overwrite input {i}")


def _read(reader, path):
    try:
        return reader(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"{path}: no such file") from None
    except OSError as e:
        raise CliError(EXIT_IO, f"{path}: {e.strerror or e}") from None
    except FormatError as e:
        raise CliError(EXIT_IO, f"{path}: {e}") from None


def _write(writer, model, path):
    try:
        return writer(model, path)
    except OSError as e:
        raise CliError(EXIT_IO, f"{path}: {e.strerror or e}") from None
    except FormatError as e:
        raise CliError(EXIT_NUMERIC, f"{path}: {e}") from None


def _sniff(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read(4)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"{path}: no such file") from None
    except OSError as e:
        raise CliError(EXIT_IO, f"{path}: {e.strerror or e}") from None


def bias_path(path) -> Path:
    """Sidecar FXF1 file carrying the toy network's biases."""
    return Path(str(path) + ".bias")


def _save_net(net: ToyAutoencoder, path) -> None:
    _write(write_float_file, net.weights_model(), path)
    _write(write_float_file, net.biases_model(), bias_path(path))


def _load_net(path) -> ToyAutoencoder:
    weights = _read(read_float_file, path)
    bp = bias_path(path)
    biases = _read(read_float_file, bp) if bp.exists() else None
    try:
        return ToyAutoencoder.from_models(weights, biases)
    except ValueError as e:
        raise CliError(EXIT_IO, f"{path}: not a toy autoencoder model ({e})") from None


def _divergence(e: DivergenceError, out) -> CliError:
    ckpt = Path(str(out) + ".lastgood")
    if e.last_good is not None:
        _save_net(e.last_good, ckpt)
        return CliError(EXIT_NUMERIC, f"{e}; last good checkpoint written to {ckpt}")
    return CliError(EXIT_NUMERIC, f"{e}; no checkpoint available")


def cmd_quantize(args, out) -> int:
    scheme = _config_error(parse_scheme, args.scheme)
    grouping = _config_error(parse_grouping, args.grouping)
    fmt = _fmt(args.fl)
    if scheme is Scheme.LLOYD and grouping is Grouping.CW:
        raise CliError(EXIT_CONFIG, "lloyd with cw grouping is refused: it is not feasible to memorize LUTs "
                                    "for all the channels")
    if args.lloyd_k is not None and not 1 <= args.lloyd_k <= 256:
        raise CliError(EXIT_CONFIG, "--lloyd-k must be in [1, 256]")
    _check_outputs([args.input], [args.output])
    model = _read(read_float_file, args.input)
    try:
        qm = quantize_model(model, scheme, grouping, fmt, lloyd_k=args.lloyd_k)
    except (ExponentRangeError, DomainError) as e:
        raise CliError(EXIT_NUMERIC, str(e)) from None
    except UnsupportedCombinationError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None
    n = _write(write_quantized_file, qm, args.output)
    stats = accounting.quant_error_stats(model, qm)
    if args.json_lines:
        _emit(stats.records() if args.per_group else [stats.model.record(record="model")], out)
        _emit([{"record": "file", "path": str(args.output), "bytes": n}], out)
    else:
        out.write(f"wrote {args.output} ({n} bytes, {scheme.name} {grouping.name} FL={fmt.fl})\n")
        out.write(stats.summary() + "\n")
    return EXIT_OK


def cmd_report(args, out) -> int:
    magic = _sniff(args.input)
    file_bytes = os.path.getsize(args.input)
    if magic == FXQ1_MAGIC:
        qm = _read(read_quantized_file, args.input)
        if args.grouping is not None and _config_error(parse_grouping, args.grouping) is not qm.grouping:
            raise CliError(EXIT_CONFIG, f"--grouping {args.grouping} disagrees with the file ({qm.grouping.name})")
        manifest, grouping = qm.manifest, qm.grouping
        k = qm.codebooks[0].shape[-1] if qm.scheme is Scheme.LLOYD else 0
        overhead = accounting.fxq1_overhead_bytes(manifest, grouping, qm.scheme, k)
        payload = accounting.proposed_model_size(manifest, grouping).total_serialized
    elif magic == FXF1_MAGIC:
        if args.grouping is None:
            raise CliError(EXIT_CONFIG, "--grouping is required for float model files")
        grouping = _config_error(parse_grouping, args.grouping)
        manifest = _read(read_float_file, args.input).manifest
        overhead = accounting.float_overhead_bytes(manifest)
        payload = accounting.original_model_size(manifest)
    else:
        raise CliError(EXIT_IO, f"{args.input}: not an FXF1 or FXQ1 file")
    rep = accounting.size_report(manifest, grouping)
    file_rec = {"record": "file", "path": str(args.input), "bytes": file_bytes,
                "payload_bytes": payload, "header_bytes": overhead}
    if args.json_lines:
        _emit(rep.records() + [file_rec], out)
    else:
        out.write(rep.table() + "\n")
        out.write(f"file {args.input}: {file_bytes} bytes = {payload} payload + {overhead} header\n")
    return EXIT_OK


def cmd_sweep(args, out) -> int:
    grouping = _config_error(parse_grouping, args.grouping)
    bad = [e for e in args.offsets if e not in (0, 1, 2, 3)]
    if bad:
        raise CliError(EXIT_CONFIG, f"precision offsets must be in 0..3, got {bad}")
    fmt = _fmt(args.fl)
    model = _read(read_float_file, args.input)
    points = precision_sweep(model, grouping, args.offsets, fmt)
    if args.json_lines:
        _emit([{"record": "sweep", "offset": p.offset, "fl": p.fl_eff, "mse": p.mse,
                "zero_fraction": p.zero_fraction} for p in points], out)
    else:
        out.write(f"{'offset':>6}{'FL':>4}{'weight MSE':>16}{'zero frac':>11}\n")
        for p in points:
            out.write(f"{p.offset:>6}{p.fl_eff:>4}{p.mse:>16.6e}{p.zero_fraction:>11.4f}\n")
    return EXIT_OK


def _train_config(args, **over) -> TrainConfig:
    kw = dict(lam=args.lam, lr=args.lr, seed=args.seed, batch=args.batch)
    kw.update(over)
    return _config_error(lambda d: TrainConfig(**d), kw)


def cmd_train_toy(args, out) -> int:
    cfg = _train_config(args, i1=args.iters)
    net = ToyAutoencoder.init(args.seed)
    log = (lambda r: _emit([{"record": "metrics", **r}], out)) if args.json_lines else None
    try:
        train(net, cfg, log=log, log_every=args.log_every)
    except DivergenceError as e:
        raise _divergence(e, args.output) from None
    _save_net(net, args.output)
    if not args.json_lines:
        out.write(f"trained {cfg.i1} iterations (seed {cfg.seed}); wrote {args.output} and {bias_path(args.output)}\n")
    return EXIT_OK


def cmd_finetune(args, out) -> int:
    scheme = _config_error(parse_scheme, args.scheme)
    grouping = _config_error(parse_grouping, args.grouping)
    if scheme is Scheme.LLOYD:
        raise CliError(EXIT_CONFIG, "finetune supports the lq and nlq schemes")
    cfg = _train_config(args, i2=args.i2)
    _check_outputs([args.input, bias_path(args.input)], [args.output, args.report])
    net = _load_net(args.input)
    log = (lambda r: _emit([{"record": "metrics", **r}], out)) if args.json_lines else None
    try:
        _, tuned, report = wcft_from_trained(net, cfg, grouping, scheme, log=log)
    except DivergenceError as e:
        raise _divergence(e, args.output or args.input) from None
    except (ExponentRangeError, DomainError) as e:
        raise CliError(EXIT_NUMERIC, str(e)) from None
    if args.output is not None:
        _save_net(tuned, args.output)
    if args.report is not None:
        try:
            with open(args.report, "w") as f:
                _emit(report.records(), f)
        except OSError as e:
            raise CliError(EXIT_IO, f"{args.report}: {e.strerror or e}") from None
    if args.json_lines:
        _emit(report.records(), out)
    else:
        out.write(report.table() + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fixq", description="Fixed-point weight quantization with power-of-two group scaling.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, fl=True):
        sp.add_argument("--json-lines", action="store_true", help="machine-readable records on stdout")
        if fl:
            sp.add_argument("--fl", type=int, default=6, help="fractional bits of the 8-bit format (default 6)")

    q = sub.add_parser("quantize", help="quantize an FXF1 model to FXQ1")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--scheme", default="nlq", help="lq, nlq or lloyd (default nlq)")
    q.add_argument("--grouping", default="cw", help="lw or cw (default cw)")
    q.add_argument("--lloyd-k", type=int, default=None, help="codebook size for lloyd (default 2**FL)")
    q.add_argument("--per-group", action="store_true", help="with --json-lines, emit per-group records")
    common(q)
    q.set_defaults(func=cmd_quantize)

    r = sub.add_parser("report", help="model size report for an FXF1 or FXQ1 file")
    r.add_argument("input")
    r.add_argument("--grouping", default=None, help="lw or cw; required for FXF1 inputs")
    common(r, fl=False)
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("sweep", help="LQ weight error at FL, FL+1, FL+2, FL+3")
    s.add_argument("input")
    s.add_argument("--grouping", default="cw")
    s.add_argument("--offsets", type=int, nargs="+", default=[0, 1, 2, 3])
    common(s)
    s.set_defaults(func=cmd_sweep)

    def training(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--lam", type=float, default=0.015, help="rate-distortion weight (default 0.015)")
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--batch", type=int, default=8)

    t = sub.add_parser("train-toy", help="train the toy autoencoder and save its weights")
    t.add_argument("output")
    t.add_argument("--iters", type=int, default=5000)
    t.add_argument("--log-every", type=int, default=100)
    training(t)
    common(t, fl=False)
    t.set_defaults(func=cmd_train_toy)

    f = sub.add_parser("finetune", help="clip and fine tune a trained toy model, comparing both arms")
    f.add_argument("input")
    f.add_argument("--scheme", default="nlq", help="lq or nlq (default nlq)")
    f.add_argument("--grouping", default="cw")
    f.add_argument("--i2", type=int, default=500)
    f.add_argument("--output", default=None, help="save the fine-tuned model here")
    f.add_argument("--report", default=None, help="write report records here")
    training(f)
    common(f, fl=False)
    f.set_defaults(func=cmd_finetune)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, sys.stdout)
    except CliError as e:
        print(f"fixq: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
