"""Command line entry point.

Exit codes: 0 success, 1 invalid input (bad arguments, config, files), 2
runtime failure (training divergence, unexpected errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..bounds import FrequencySupport, bounds_report, default_probes, layer_spectrum_report, spectrum_csv
from ..checkpoint import CheckpointError, load_params, save_params
from ..constructions import identity_accounting, identity_network
from ..resampling import StrideNetwork, downsample, upsample
from ..te_linalg import pooling_operator
from .experiments import ConfigError, ExperimentConfig, build_dataset, run_experiment
from .verify import format_table, run_checks

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _size(text: str):
    parts = [int(v) for v in text.split(",")]
    return parts[0] if len(parts) == 1 else tuple(parts)


def _write(path, text: str) -> None:
    Path(path).write_text(text, newline="\n")


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    res = run_experiment(cfg, args.out, with_bounds=not args.no_bounds)
    print(json.dumps({k: round(v, 6) if isinstance(v, float) else v for k, v in res.metrics.items()}))
    print(f"artifacts written to {args.out}")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    params = load_params(args.model)
    text = spectrum_csv(layer_spectrum_report(params))
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _load_inputs(path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npz":
        with np.load(p) as z:
            return z["inputs"]
    return np.load(p)


def cmd_bounds(args) -> int:
    params = load_params(args.model)
    if args.data:
        probes = default_probes(_load_inputs(args.data))
    else:
        c_in = params.widths[0]
        probes = [np.full(params.spatial_shape + (c_in,), v) for v in (0.25, 0.5, 1.0)]
    support = None
    if args.support:
        support = FrequencySupport(json.loads(Path(args.support).read_text()), params.spatial_shape)
    text = bounds_report(params, probes, args.tau, support).to_json() + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_construct(args) -> int:
    pool = pooling_operator(args.pooling, args.beta, n=args.n)
    net = identity_network(args.n, args.c, args.depth, pool, K=args.K)
    save_params(net, args.out)
    acc = identity_accounting(args.n, args.c, args.depth, pool, K=args.K)
    summary = {"norm_sq": net.norm_sq(), "weight_norm_sq": float(net.weight_norms().sum()),
               "bias_norm_sq": float(net.bias_norms().sum()), "accounting_total": acc.total,
               "c_M_bar_depth": args.c * pool.m_bar * args.depth, "M_bar": pool.m_bar}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_resample(args) -> int:
    x = _load_inputs(args.input)
    if args.network:
        y = StrideNetwork.load(args.network)(x)
    elif args.op == "down":
        y = downsample(x, args.stride, args.dims)
    elif args.op == "up":
        y = upsample(x, args.stride, args.dims, symmetric=not args.literal)
    else:
        y = upsample(downsample(x, args.stride, args.dims), args.stride, args.dims, symmetric=not args.literal)
    np.save(args.out, y)
    print(f"{tuple(x.shape)} -> {tuple(y.shape)}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks(fast=args.fast, seed=args.seed)
    sys.stdout.write(format_table(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


def cmd_data(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    ds, loss, c_in, c_out = build_dataset(cfg)
    ds.save(args.out)
    print(f"{len(ds)} samples, inputs {ds.inputs.shape[1:]}, targets {ds.targets.shape[1:] or 'labels'}, "
          f"loss {loss}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cbn", description="Spectral analysis and constructions for cyclic CNNs")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train from a JSON config and write artifacts")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-bounds", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("spectrum", help="per-layer frequency singular values as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("bounds", help="rank and representation-cost bounds as JSON")
    s.add_argument("--model", required=True)
    s.add_argument("--data", help=".npy inputs or .npz dataset used to build probes")
    s.add_argument("--support", help="JSON list of per-channel frequency lists")
    s.add_argument("--tau", type=float, default=1e-6)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bounds)

    s = sub.add_parser("construct", help="build a constructed network")
    s.add_argument("kind", choices=["identity"])
    s.add_argument("--n", type=_size, required=True)
    s.add_argument("--c", type=int, required=True)
    s.add_argument("--depth", type=int, required=True)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--pooling", default="blend_avg3")
    s.add_argument("--K", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_construct)

    s = sub.add_parser("resample", help="Fourier down/up-sampling or a saved stride network")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--op", choices=["down", "up", "roundtrip"], default="roundtrip")
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--dims", type=int, default=1)
    s.add_argument("--literal", action="store_true", help="place coefficients in slots 0..n'-1")
    s.add_argument("--network", help="stride_manifest.json of a saved stride network")
    s.set_defaults(func=cmd_resample)

    s = sub.add_parser("verify", help="run the invariant suite")
    s.add_argument("--fast", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("data", help="generate or ingest the dataset of a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
