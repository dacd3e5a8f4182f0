"""``contextnet`` command line: analyze, features, train-toy, decode, selftest.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, frontend, plotting, selftest, training
from .encoder import default_config, read_checkpoint
from .errors import ContextNetError, UsageError
from .transducer import Vocab

log = logging.getLogger("contextnet")

KERNELS = (3, 5, 11, 23)
WIDTHS = (0.5, 1.0, 1.5, 2.0)


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _odd_kernel(text: str) -> int:
    value = int(text)
    if value < 1 or value % 2 == 0:
        raise argparse.ArgumentTypeError(f"kernel must be a positive odd integer, got {text}")
    return value


# -- analyze ----------------------------------------------------------------------

def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _sweeps(args, out: Path, report) -> list[Path]:
    kernel_rows = []
    for reduction in ("2x", "8x"):
        for k in KERNELS:
            cfg = default_config(args.alpha, kernel=k, reduction=reduction, se_window=args.se_window)
            kernel_rows.append({"reduction": reduction, "kernel": k,
                                "gflops": analysis.count_flops(cfg, 1.0) / 1e9,
                                "published_gflops": analysis.REFERENCE_GFLOPS.get((reduction, k), "")})
    decoder = analysis.reference_decoder(args.decoder_vocab)
    width_rows = []
    for a in WIDTHS:
        cfg = default_config(a, kernel=args.kernel, reduction=args.reduction, se_window=args.se_window)
        width_rows.append({"alpha": a, "params_m": analysis.count_params(cfg, decoder).total_params / 1e6,
                           "published_params_m": analysis.REFERENCE_PARAMS_M.get(a, "")})
    block_rows = [{"block": b.block_id, "params": b.params, "flops_per_second": b.flops,
                   "output_length_factor": b.output_length_factor, "receptive_field": b.receptive_field}
                  for b in report.per_block]

    _write_csv(out / "per_block.csv", block_rows)
    _write_csv(out / "kernel_sweep.csv", kernel_rows)
    _write_csv(out / "width_sweep.csv", width_rows)
    return [
        out / "per_block.csv", out / "kernel_sweep.csv", out / "width_sweep.csv",
        plotting.block_costs(report, out / "block_costs.png"),
        plotting.kernel_sweep(kernel_rows, out / "kernel_sweep.png", analysis.REFERENCE_GFLOPS),
        plotting.width_sweep(WIDTHS, [r["params_m"] for r in width_rows], out / "width_sweep.png",
                             analysis.REFERENCE_PARAMS_M),
    ]


def cmd_analyze(args) -> int:
    config = default_config(args.alpha, kernel=args.kernel, reduction=args.reduction, se_window=args.se_window)
    decoder = analysis.reference_decoder(args.decoder_vocab) if args.decoder_vocab else None
    report = analysis.count_params(config, decoder, audio_seconds=args.audio_seconds)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report.to_table())
    if args.figures:
        out = Path(args.figures)
        out.mkdir(parents=True, exist_ok=True)
        for path in _sweeps(args, out, report):
            print(f"wrote {path}", file=sys.stderr)
    return 0


# -- features ---------------------------------------------------------------------

def cmd_features(args) -> int:
    wave = frontend.load_wav(args.input)
    feats = frontend.log_mel_filterbank(wave)
    if feats.num_frames == 0:
        print(f"warning: {args.input} is shorter than one analysis window; writing T=0", file=sys.stderr)
    frontend.write_features(args.output, feats)
    print(f"T={feats.num_frames} duration={wave.duration:.3f}s")
    return 0


# -- train-toy -------------------------------------------------------------------

def _ensure_writable(directory: Path) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe = directory / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ContextNetError(f"output directory {directory} is not writable: {exc}") from exc


def cmd_train_toy(args) -> int:
    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ContextNetError(f"cannot read config {args.config}: {exc}") from exc
    train = dict(overrides.get("train", {}))
    if args.seed is not None:
        train["seed"] = args.seed
    if args.max_steps is not None:
        train["max_steps"] = args.max_steps
    overrides["train"] = train
    try:
        task, encoder, decoder, cfg = training.build_setup(overrides)
    except (TypeError, UsageError) as exc:
        raise ContextNetError(f"bad config: {exc}") from exc

    out = Path(args.out)
    _ensure_writable(out)
    result = training.train_toy(task, encoder, decoder, cfg, out_dir=out)
    if result.metrics:
        plotting.training_curves(result.metrics, out / "training_curves.png")
        final = result.metrics[-1]
        print(f"step={final['step']} train_loss={final['train_loss']:.4f} "
              f"dev_token_error_rate={final['dev_token_error_rate']:.4f}")
    print(f"checkpoint {result.checkpoint}")
    return 0


# -- decode ----------------------------------------------------------------------

def _load_input(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".wav":
        frames = frontend.log_mel_filterbank(frontend.load_wav(path)).frames
    else:
        frames = frontend.read_features(path).frames
    return frames.astype(np.float32)


def cmd_decode(args) -> int:
    checkpoint = Path(args.checkpoint)
    vocab_path = Path(args.vocab) if args.vocab else checkpoint.parent / "vocab.txt"
    if not vocab_path.is_file():
        raise ContextNetError(f"vocabulary file not found: {vocab_path}")
    vocab = Vocab.load(vocab_path)
    arrays = read_checkpoint(checkpoint)
    if "joint.out_bias" not in arrays:
        raise ContextNetError(f"{checkpoint}: no joint output layer in checkpoint")
    expected = arrays["joint.out_bias"].shape[0]
    if expected != len(vocab):
        raise ContextNetError(f"vocabulary {vocab_path} has {len(vocab)} tokens "
                              f"but checkpoint output dim is {expected}")
    model = training.load_model(checkpoint, vocab=vocab)
    ids = model.decode(_load_input(Path(args.input)))
    print(" ".join(vocab.decode(ids)))
    return 0


# -- selftest ----------------------------------------------------------------------

def cmd_selftest(args) -> int:
    results = selftest.run()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contextnet", description="Convolutional transducer toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter, FLOPS and receptive-field report")
    p.add_argument("--alpha", type=_positive_float, default=1.0, help="width multiplier")
    p.add_argument("--kernel", type=_odd_kernel, default=5)
    p.add_argument("--reduction", choices=("2x", "8x"), default="8x")
    p.add_argument("--se-window", type=int, default=None, help="frames of SE context (default: global)")
    p.add_argument("--decoder-vocab", type=int, default=1024,
                   help="vocabulary size of the reference decoder; 0 counts the encoder alone")
    p.add_argument("--audio-seconds", type=_positive_float, default=1.0)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--figures", metavar="DIR", help="write sweep CSVs and PNG figures here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("features", help="WAV to 80-dim log-mel feature file")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-toy", help="train on the synthetic tone task")
    p.add_argument("--config", help="JSON file with encoder/decoder/task/train sections")
    p.add_argument("--out", default="toy_run")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("decode", help="greedy decode a WAV or feature file")
    p.add_argument("checkpoint")
    p.add_argument("input", help=".wav or CNFB feature file")
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt beside the checkpoint)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("selftest", help="quick numerical self-checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def _thread_limit():
    value = os.environ.get("CONTEXTNET_THREADS")
    if not value:
        return None
    try:
        threads = int(value)
    except ValueError:
        raise UsageError(f"CONTEXTNET_THREADS must be an integer, got {value!r}") from None
    if threads < 1:
        raise UsageError(f"CONTEXTNET_THREADS must be >= 1, got {threads}")
    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        print(f"contextnet {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ContextNetError, ValueError, OSError) as exc:
        print(f"contextnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
