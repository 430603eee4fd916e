"""Command-line driver.

Machine-readable JSON goes to stdout, human-readable notes to stderr.
Exit codes: 0 success, 2 usage, 3 I/O or container failure, 4 semantic
mismatch (infeasible ratio, incompatible models).
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys

import numpy as np

from . import analysis
from .checkpoint import model_from_container, model_to_container
from .compress import gaussian_tokens, run_compression
from .container import read_container, write_container
from .errors import ConfigMismatch, ContainerError, RatioOutOfRange
from .kernel import bench_gemv
from .toy_moe import SLOTS, ToyMoEConfig, eval_deviation, generate_toy

EXIT_USAGE, EXIT_IO, EXIT_MISMATCH = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _positive(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}")
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _nonneg(value: str) -> int:
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {n}")
    return n


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_model(path: str):
    try:
        c = read_container(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}")
    except ContainerError as exc:
        raise CliError(EXIT_IO, f"{path}: {type(exc).__name__}: {exc}")
    try:
        return model_from_container(c), c
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_IO, f"{path}: not a toy model container ({exc})")


def _save(path: str, container) -> None:
    try:
        write_container(path, container)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}")


def cmd_gen_toy(args) -> dict:
    try:
        cfg = ToyMoEConfig(args.layers, args.experts, args.top_k, args.d_model, args.d_ff, args.seed)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc))
    model = generate_toy(cfg, duplicate_pairs=args.dup_pairs, noise=args.noise)
    meta = {"seed": args.seed, "dup_pairs": args.dup_pairs, "noise": args.noise}
    _save(args.out, model_to_container(model, meta))
    expert_params = sum(
        model.layers[li].experts[e].slot(s).size
        for li in range(cfg.n_layers) for e in range(cfg.n_experts) for s in SLOTS
    )
    weights = np.concatenate([
        model.layers[li].experts[e].slot(s).ravel()
        for li in range(cfg.n_layers) for e in range(cfg.n_experts) for s in SLOTS
    ])
    _note(f"wrote {args.out}")
    return {
        "path": args.out,
        "config": dataclasses.asdict(cfg),
        "expert_params": int(expert_params),
        "router_params": cfg.n_layers * cfg.n_experts * cfg.d_model,
        "fraction_in_range": analysis.exponent_histogram(weights)["fraction_in_range"],
        "seed": args.seed,
    }


def cmd_compress(args) -> dict:
    model, _ = _load_model(args.model_in)
    try:
        compressed, plan, stats, report = run_compression(
            model, args.ratio, tau=args.tau, seed=args.seed, grouping=args.grouping,
            calib_tokens=args.calib_tokens, calib_seed=args.calib_seed, search_budget=args.search_budget,
        )
    except RatioOutOfRange as exc:
        raise CliError(EXIT_MISMATCH, str(exc))
    meta = {"tau_sim": args.tau, "seed": args.seed, "ratio": args.ratio, "grouping": args.grouping}
    _save(args.model_out, model_to_container(compressed, meta, plan=plan, stats=stats))
    _note(f"wrote {args.model_out}")
    return {**report, "path": args.model_out}


def cmd_eval(args) -> dict:
    original, _ = _load_model(args.original)
    compressed, _ = _load_model(args.compressed)
    x = gaussian_tokens(args.tokens, original.config.d_model, args.seed)
    try:
        result = eval_deviation(original, compressed, x)
    except ConfigMismatch as exc:
        raise CliError(EXIT_MISMATCH, str(exc))
    return {**result, "tokens": args.tokens, "seed": args.seed}


def _all_expert_weights(model):
    cfg = model.config
    for li in range(cfg.n_layers):
        for e in range(cfg.n_experts):
            for s in SLOTS:
                yield li, e, s, model.expert_weight(li, e, s)


def cmd_inspect(args) -> dict:
    if args.what == "theory":
        closed = analysis.similarity_fraction_closed(args.sigma_ratio, args.tau)
        mc = analysis.similarity_fraction_mc(1.0, args.sigma_ratio, args.tau, args.mc_samples, args.seed)
        return {"sigma_ratio": args.sigma_ratio, "tau": args.tau, "closed": closed, "mc": mc,
                "mc_samples": args.mc_samples, "seed": args.seed}
    if args.file is None:
        raise CliError(EXIT_USAGE, f"inspect {args.what} needs a container file")
    model, _ = _load_model(args.file)
    if args.what == "exponents":
        weights = np.concatenate([w.ravel() for *_, w in _all_expert_weights(model)])
        h = analysis.exponent_histogram(weights)
        counts = {str(k): int(v) for k, v in enumerate(h["counts"]) if v}
        return {"fraction_in_range": h["fraction_in_range"], "counts": counts, "n": int(weights.size)}
    # correlation
    cfg = model.config
    layers = []
    for li in range(cfg.n_layers):
        pairs = {}
        for i, j in itertools.combinations(range(cfg.n_experts), 2):
            rs = [analysis.pearson_pairwise(model.expert_weight(li, i, s), model.expert_weight(li, j, s)) for s in SLOTS]
            pairs[f"{i}-{j}"] = float(np.mean(rs))
        layers.append({"mean_r": float(np.mean(list(pairs.values()))) if pairs else None, "pairs": pairs})
    means = [lyr["mean_r"] for lyr in layers if lyr["mean_r"] is not None]
    return {"mean_r": float(np.mean(means)) if means else None, "layers": layers}


def cmd_bench(args) -> dict:
    return bench_gemv(args.rows, args.cols, args.iters, args.seed)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moepack", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=_positive, default=None, help="cap on worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="generate a toy MoE checkpoint")
    g.add_argument("--layers", type=_positive, default=4)
    g.add_argument("--experts", type=_positive, default=8)
    g.add_argument("--top-k", type=_positive, default=2)
    g.add_argument("--d-model", type=_positive, default=64)
    g.add_argument("--d-ff", type=_positive, default=128)
    g.add_argument("--seed", type=_nonneg, default=0)
    g.add_argument("--dup-pairs", action="store_true")
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_toy)

    c = sub.add_parser("compress", help="merge and pack expert pairs")
    c.add_argument("--model-in", required=True)
    c.add_argument("--model-out", required=True)
    c.add_argument("--ratio", type=float, default=0.5)
    c.add_argument("--tau", type=float, default=0.4)
    c.add_argument("--seed", type=_nonneg, default=0)
    c.add_argument("--grouping", choices=("random", "search"), default="random")
    c.add_argument("--calib-tokens", type=_positive, default=512)
    c.add_argument("--calib-seed", type=_nonneg, default=0)
    c.add_argument("--search-budget", type=_positive, default=64)
    c.set_defaults(func=cmd_compress)

    e = sub.add_parser("eval", help="output deviation of a compressed model")
    e.add_argument("--original", required=True)
    e.add_argument("--compressed", required=True)
    e.add_argument("--tokens", type=_positive, default=256)
    e.add_argument("--seed", type=_nonneg, default=1234)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="weight statistics and theory checks")
    i.add_argument("what", choices=("exponents", "correlation", "theory"))
    i.add_argument("file", nargs="?")
    i.add_argument("--sigma-ratio", type=float, default=1.0)
    i.add_argument("--tau", type=float, default=0.4)
    i.add_argument("--mc-samples", type=_positive, default=1_000_000)
    i.add_argument("--seed", type=_nonneg, default=0)
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench", help="time fused vs dense GEMV")
    b.add_argument("--rows", type=_positive, default=1024)
    b.add_argument("--cols", type=_positive, default=1024)
    b.add_argument("--iters", type=_positive, default=20)
    b.add_argument("--seed", type=_nonneg, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads:
        import numba

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        _emit(args.func(args))
    except CliError as exc:
        _note(f"error: {exc}")
        return exc.code
    except ValueError as exc:
        _note(f"error: {exc}")
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
