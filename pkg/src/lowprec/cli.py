"""Command-line entry point: ``lowprec {train,bench,analyze,noise}``.

Exit status is 0 on success, 1 for usage or config errors and 2 when a run
fails at runtime.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import bench as bench_mod
from .noise import fit_slope, variance_law_report
from .stability import SpikeThresholds, TraceError, TrainTrace, analyze_trace
from .train import ConfigError, TrainingError, load_config, run_training, smoothed_final_loss

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lowprec", description="Low-precision training toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a TOML config")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--trace", type=Path, help="override train.trace_path")

    b = sub.add_parser("bench", help="time the quantize and matmul ops")
    b.add_argument("--sizes", default="64x256,256x512", help="comma-separated BxDIM pairs")
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--out", type=Path, help="CSV path (stdout if omitted)")
    b.add_argument("--ops", default=",".join(bench_mod.OPS))
    b.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("analyze", help="find loss and RMS spikes in a trace")
    a.add_argument("--trace", required=True, type=Path)
    d = SpikeThresholds()
    a.add_argument("--rms-threshold", type=float, default=d.rms_threshold)
    a.add_argument("--loss-z", type=float, default=d.loss_z)
    a.add_argument("--warmup-skip", type=int, default=d.warmup_skip)
    a.add_argument("--lag-max", type=int, default=d.lag_max)
    a.add_argument("--embed-tensor")
    a.add_argument("--control-tensor")
    a.add_argument("--out", type=Path, help="report path (default: <trace>.spikes.jsonl)")

    n = sub.add_parser("noise", help="compare sampled and predicted inner-product noise")
    n.add_argument("--k", type=_int_list, default=[64, 256, 1024])
    n.add_argument("--sigma-q", type=float, default=0.05)
    n.add_argument("--trials", type=int, default=100_000)
    n.add_argument("--sigma-u", type=float, default=1.0)
    n.add_argument("--sigma-v", type=float, default=1.0)
    n.add_argument("--seed", type=int, default=0)
    return p


def _train(args) -> int:
    model_cfg, train_cfg = load_config(args.config)
    if args.trace is not None:
        train_cfg = type(train_cfg)(**{**train_cfg.__dict__, "trace_path": str(args.trace)})
    result = run_training(model_cfg, train_cfg)
    trace = result.trace
    skipped = sum(1 for r in trace.records if r["skipped_tensors"])
    print(f"{model_cfg.linear_mode.label}: {len(trace)} iterations, "
          f"final loss {trace.losses[-1]:.4f}, last-100 mean {smoothed_final_loss(trace):.4f}, "
          f"steps with skipped tensors {skipped}")
    if train_cfg.trace_path:
        print(f"trace written to {train_cfg.trace_path}")
    return EXIT_OK


def _bench(args) -> int:
    sizes = bench_mod.parse_sizes(args.sizes)
    ops = [o.strip() for o in args.ops.split(",") if o.strip()]
    rows = bench_mod.bench(ops, sizes, args.repeats, args.seed)
    text = bench_mod.to_csv(rows)
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    for b, dim in sizes:
        frac = bench_mod.quantize_fraction(rows, b, dim)
        if not math.isnan(frac):
            print(f"quantize fraction at {b}x{dim}: {frac:.3f}", file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def _analyze(args) -> int:
    th = SpikeThresholds(rms_threshold=args.rms_threshold, loss_z=args.loss_z,
                         warmup_skip=args.warmup_skip, lag_max=args.lag_max)
    trace = TrainTrace.read(args.trace)
    main, control = analyze_trace(trace, args.embed_tensor, args.control_tensor, th)
    out = args.out or args.trace.with_name(args.trace.name + ".spikes.jsonl")
    out.write_text(main.to_text() + control.to_text())
    for label, rep in (("embedding", main), ("control", control)):
        print(f"[{label}] {rep.tensor}: {len(rep.rms_spike_iters)} RMS spikes, "
              f"{len(rep.loss_spike_iters)} loss spikes, {len(rep.matched_pairs)} matched, "
              f"{len(rep.unmatched_loss_spikes)} unmatched, "
              f"chance probability {rep.chance_probability:.5f}")
        for rms, loss, lag in rep.matched_pairs:
            print(f"  RMS spike {rms} -> loss spike {loss} (lag {lag})")
    print(f"report written to {out}")
    return EXIT_OK


def _noise(args) -> int:
    if not args.k:
        raise ValueError("--k needs at least one value")
    rows = variance_law_report(args.k, args.sigma_q, args.trials, args.seed, args.sigma_u, args.sigma_v)
    print("k,predicted,empirical,rel_error")
    for r in rows:
        print(f"{r['k']},{r['predicted']:.6g},{r['empirical']:.6g},{r['rel_error']:.4f}")
    if len(rows) >= 2:
        slope = fit_slope([r["k"] for r in rows], [r["empirical"] for r in rows])
        per_k = rows[0]["predicted"] / rows[0]["k"]
        print(f"# slope {slope:.6g} vs predicted {per_k:.6g}")
    return EXIT_OK


_COMMANDS = {"train": _train, "bench": _bench, "analyze": _analyze, "noise": _noise}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, TraceError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"lowprec {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError, OverflowError) as exc:
        print(f"lowprec {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
