"""``evtlab`` command-line entry point.

Exit codes: 0 success, 1 check failure (or unreadable weights), 2 numerical
abort, 64 usage error. Output files go to ``--out``, else ``$EVTLAB_OUT``,
else the current directory; every run also writes ``manifest.txt`` there.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from evtlab import __version__
from evtlab import analysis as A
from evtlab._kernels import BACKEND
from evtlab.attention import GroupKind, make_group_plan
from evtlab.config import (MICRO, apply_published_defaults, config_to_text, get_variant, parse_config_text)
from evtlab.decay import DecayKind, DecaySpec, GridCoords, decay_matrix_2d, gamma_schedule, head_decay_stack
from evtlab.errors import FormatError
from evtlab.model import EVT, count_flops, count_params, flops_breakdown
from evtlab.serialize import load_weights, save_weights

EXIT_OK, EXIT_CHECK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 64
OUT_ENV = "EVTLAB_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def fmt(x):
    return f"{x:.17g}"


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class Run:
    """Collects outputs and writes the line-oriented manifest at the end."""

    def __init__(self, args, config_text=""):
        self.args = args
        self.out = Path(args.out or os.environ.get(OUT_ENV) or ".")
        self.out.mkdir(parents=True, exist_ok=True)
        self.config_text = config_text
        self.files = []

    def path(self, name):
        self.files.append(name)
        return self.out / name

    def finish(self, status):
        lines = [f"evtlab-manifest {__version__}", f"command {self.args.command}",
                 f"seed {self.args.seed}", f"backend {BACKEND}", f"status {status}"]
        for key in sorted(vars(self.args)):
            if key not in ("command", "seed", "out", "func"):
                lines.append(f"arg {key} {getattr(self.args, key)}")
        lines += [f"config {line}" for line in self.config_text.splitlines() if line.strip()]
        for name in self.files:
            p = self.out / name
            if p.exists():
                lines.append(f"output {name} sha256={hashlib.sha256(p.read_bytes()).hexdigest()}")
        (self.out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        return status


def _resolve_config(args, default=MICRO):
    """Config from ``--variant`` / ``--config`` (flags override the file), plus its extra sections."""
    extra = {}
    if getattr(args, "config", None):
        try:
            cfg, extra = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    elif getattr(args, "variant", None):
        try:
            cfg = get_variant(args.variant)
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
    else:
        cfg = default
    if args.paper_defaults:
        cfg = apply_published_defaults(cfg)
    if getattr(args, "decay", None):
        cfg = cfg.with_decay(args.decay)
    return cfg, extra


# ---------------------------------------------------------------------------
# commands


def cmd_decay(args):
    try:
        kind = DecayKind.parse(args.kind)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.heads is not None and args.gamma is not None:
        raise UsageError("--gamma and --heads are mutually exclusive")
    gammas = gamma_schedule(args.heads, args.gamma_base) if args.heads is not None else [args.gamma or 0.875]
    try:
        grid = GridCoords(args.h, args.w)
        specs = [DecaySpec(kind, g, args.p, args.rbf_scale) for g in gammas]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run = Run(args)
    for i, spec in enumerate(specs):
        E = decay_matrix_2d(grid, spec)
        name = "decay.csv" if args.heads is None else f"decay_head{i}.csv"
        n = grid.n_tokens
        write_csv(run.path(name), [f"m{j}" for j in range(n)], E.tolist())
        print(f"{name} gamma={fmt(spec.gamma)} min={fmt(E.min())} max={fmt(E.max())} "
              f"mean={fmt(E.mean())} symmetry_residual={fmt(np.abs(E - E.T).max())}")
    return run.finish(EXIT_OK)


def cmd_gradcheck(args):
    from evtlab.checks import SUITES

    run = Run(args)
    results = SUITES[args.scope](args.seed)
    rows = []
    failed = []
    for r in results:
        status = "pass" if r.ok else "FAIL"
        rows.append((r.suite, r.tensor, float(r.max_rel_err), float(r.threshold), status))
        print(f"{r.suite} {r.tensor} max_rel_err={r.max_rel_err:.3e} threshold={r.threshold:.0e} {status}")
        if not r.ok:
            failed.append(f"{r.suite}:{r.tensor}")
    write_csv(run.path("gradcheck.csv"), ["suite", "tensor", "max_rel_err", "threshold", "status"], rows)
    if failed:
        print(f"gradcheck failed for {', '.join(failed)}", file=sys.stderr)
        return run.finish(EXIT_CHECK)
    return run.finish(EXIT_OK)


def cmd_rf(args):
    try:
        kinds = [GroupKind(k.strip()) for k in args.plan.split(",") if k.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --plan: {exc}") from None
    if args.n < 1 or args.k < 1 or not kinds:
        raise UsageError("--n and --k must be positive and --plan non-empty")
    if args.k > args.n:
        raise UsageError(f"group size {args.k} exceeds {args.n} tokens")
    g_default = -(-args.n // args.k)
    w = args.w if args.w is not None else args.k
    g = args.g if args.g is not None else g_default
    L = args.L if args.L is not None else len(kinds)
    if w * g < args.n:
        raise UsageError(f"{g} groups of {w} tokens cannot cover {args.n} tokens")
    try:
        bounds = A.rf_bounds(A.RFModel(w, g, L, args.n))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    reach = A.rf_bruteforce([make_group_plan(args.n, args.k, kind) for kind in kinds], args.n)
    sizes = reach.sum(axis=1)
    coverage = float(reach.mean())
    within = bool(sizes.max() <= bounds.bound_1d)
    run = Run(args)
    lines = [
        f"bounds w={w} g={g} L={L} N={args.n} f_1d={bounds.f_1d} f_2d={bounds.f_2d} ratio={fmt(bounds.ratio)} "
        f"full_coverage_layers={bounds.full_coverage_layers} bound_1d={bounds.bound_1d} bound_2d={bounds.bound_2d}",
        f"bruteforce plan={','.join(k.value for k in kinds)} coverage={fmt(coverage)} "
        f"max_reach={int(sizes.max())} min_reach={int(sizes.min())} within_bounds={str(within).lower()}",
    ]
    print("\n".join(lines))
    run.path("rf.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return run.finish(EXIT_OK if within else EXIT_CHECK)


def cmd_flops(args):
    cfg, _ = _resolve_config(args, default=get_variant("evt-t"))
    try:
        parts = flops_breakdown(cfg, args.res)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run = Run(args, config_to_text(cfg))
    total = count_flops(cfg, args.res)
    lines = [f"variant {cfg.name}", f"resolution {args.res}", f"params {count_params(cfg)}", f"flops {total}"]
    lines += [f"{k} {v}" for k, v in parts.items()]
    print("\n".join(lines))
    run.path("flops.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return run.finish(EXIT_OK)


def _train_settings(args, extra):
    from evtlab.train import OptimSpec, SyntheticSpec

    section = extra.get("train", {})

    def pick(flag, key, cast, default):
        value = getattr(args, flag)
        if value is not None:
            return value
        return cast(section[key]) if key in section else default

    optim = OptimSpec(kind=pick("optim", "optim", str, "adam"), lr=pick("lr", "lr", float, 3e-3),
                      steps=pick("steps", "steps", int, 500), seed=args.seed,
                      batch_size=pick("batch_size", "batch_size", int, 32))
    task = SyntheticSpec(n_samples=pick("samples", "samples", int, 512), seed=args.seed)
    if optim.kind not in ("adam", "sgd"):
        raise UsageError(f"unknown optimiser {optim.kind!r}")
    if optim.lr < 0 or optim.steps < 0 or optim.batch_size < 1 or task.n_samples < 1:
        raise UsageError("lr and steps must be non-negative, batch size and samples positive")
    return task, optim


def cmd_train(args):
    from dataclasses import replace

    from evtlab.train import toy_train

    cfg, extra = _resolve_config(args)
    task, optim = _train_settings(args, extra)
    train_section = {"optim": optim.kind, "lr": repr(optim.lr), "steps": optim.steps,
                     "batch_size": optim.batch_size, "samples": task.n_samples}
    run = Run(args, config_to_text(cfg, {"train": train_section}))

    if args.compare:
        kinds = [k.strip() for k in args.compare.split(",") if k.strip()]
        try:
            cfgs = [cfg.with_decay(k) for k in kinds]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows = []
        for kind, c in zip(kinds, cfgs):
            for s in range(args.seed, args.seed + args.seeds):
                res = toy_train(replace(task, seed=s), c, replace(optim, seed=s))
                final = res.losses[-1] if res.losses else float("nan")
                spikes = sum(e.kind == "spike" for e in res.events)
                rows.append((kind, s, float(final), float(res.accuracy), spikes, str(res.halted).lower()))
                print(f"{kind} seed={s} final_loss={fmt(final)} accuracy={fmt(res.accuracy)} spikes={spikes}")
        write_csv(run.path("comparison.csv"), ["decay", "seed", "final_loss", "accuracy", "spikes", "halted"], rows)
        return run.finish(EXIT_OK)

    try:
        res = toy_train(task, cfg, optim)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_csv(run.path("loss.csv"), ["step", "loss"], [(i, float(v)) for i, v in enumerate(res.losses)])
    write_csv(run.path("events.csv"), ["step", "kind", "loss", "trailing_mean"],
              [(e.step, e.kind, float(e.loss), float(e.trailing_mean)) for e in res.events])
    final = res.losses[-1] if res.losses else float("nan")
    metrics = [f"steps_completed {len(res.losses)}", f"final_loss {fmt(final)}", f"accuracy {fmt(res.accuracy)}",
               f"spikes {sum(e.kind == 'spike' for e in res.events)}", f"halted {str(res.halted).lower()}",
               f"params {res.model.num_parameters()}"]
    run.path("metrics.txt").write_text("\n".join(metrics) + "\n", encoding="utf-8")
    save_weights(run.path("weights.evtw"), res.model.state_dict())
    run.path("config.ini").write_text(run.config_text, encoding="utf-8")
    print("\n".join(metrics))
    return run.finish(EXIT_NUMERIC if res.halted else EXIT_OK)


def _stage_reports(model, image):
    captures = []
    model(image, capture=captures)
    report = A.AttnReport.from_captures(captures)
    return [(s, report.by_tokens()[n]) for s, n in enumerate(sorted(report.by_tokens(), reverse=True))]


def cmd_analyze(args):
    from evtlab.train import SyntheticSpec, quadrant_blob

    config_path = args.config or str(Path(args.weights).with_name("config.ini"))
    try:
        cfg, _ = parse_config_text(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read config {config_path}: {exc}") from None
    if args.paper_defaults:
        cfg = apply_published_defaults(cfg)
    outputs = [o.strip() for o in args.outputs.split(",") if o.strip()]
    bad = set(outputs) - {"js", "entropy", "rollout"}
    if bad or not outputs:
        raise UsageError(f"unknown outputs {sorted(bad)}; choose from js, entropy, rollout")
    try:
        state = load_weights(args.weights)
        model = EVT.from_state(cfg, state)
    except OSError as exc:
        raise UsageError(f"cannot open weights: {exc}") from None
    except (FormatError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    run = Run(args, config_to_text(cfg))
    images, _ = quadrant_blob(SyntheticSpec(n_samples=1, seed=args.input_seed))
    stages = _stage_reports(model, images[0])

    if "js" in outputs:
        rows = []
        for s, rep in stages:
            grid = rep.layers[0].grid
            heads = rep.layers[0].weights.shape[0]
            gammas = gamma_schedule(heads, cfg.gamma_base)
            rows.append((s, "self", float(A.attention_js_protocol(rep, rep))))
            for kind in (DecayKind.EUCLIDEAN, DecayKind.MANHATTAN):
                stack = head_decay_stack(grid, DecaySpec(kind, 0.5), tuple(gammas))
                rows.append((s, kind.value, float(A.attention_js_protocol(rep, stack))))
        write_csv(run.path("js.csv"), ["stage", "candidate", "js"], rows)
        for r in rows:
            print(f"js stage={r[0]} candidate={r[1]} value={fmt(r[2])}")
    if "entropy" in outputs:
        rows = [(s, layer, head, float(v)) for s, rep in stages for layer, head, v in A.entropy_table(rep)]
        write_csv(run.path("entropy.csv"), ["stage", "layer", "head", "entropy"], rows)
        print(f"entropy rows={len(rows)}")
    if "rollout" in outputs:
        for s, rep in stages:
            grid = rep.layers[0].grid
            roll = A.attention_rollout(rep)
            centre = grid.index(grid.width // 2, grid.height // 2)
            run.path(f"rollout_stage{s}.pgm").write_text(A.heatmap_pgm(roll[centre], grid.height, grid.width),
                                                         encoding="utf-8")
            print(f"rollout stage={s} token={centre} max_row_sum_error={fmt(np.abs(roll.sum(axis=1) - 1).max())}")
    return run.finish(EXIT_OK)


def cmd_bench(args):
    from evtlab.bench import format_results, run_benchmarks

    run = Run(args)
    results = run_benchmarks(repeat=args.repeat, seed=args.seed)
    text = format_results(results)
    print(text, end="")
    run.path("bench.txt").write_text(text, encoding="utf-8")
    return run.finish(EXIT_OK)


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("--paper-defaults", action="store_true",
                        help="use the published group sizes (98/49), gamma base 3 and FFN ratio 3")

    parser = _Parser(prog="evtlab", description="Decayed-attention vision transformer toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("decay", parents=[common], help="dump decay matrices as CSV")
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--kind", default="euclidean")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--heads", type=int, default=None, help="one matrix per head from the gamma schedule")
    p.add_argument("--gamma-base", type=int, default=3)
    p.add_argument("--p", type=float, default=2.0, help="Minkowski order")
    p.add_argument("--rbf-scale", type=float, default=1.0)
    p.set_defaults(func=cmd_decay)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    p.add_argument("--scope", choices=["attn", "block", "model"], required=True)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("rf", parents=[common], help="receptive-field bounds and brute-force reach")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--plan", default="contiguous,dilated")
    p.add_argument("--w", type=int, default=None, help="tokens per group (default k)")
    p.add_argument("--g", type=int, default=None, help="number of groups (default ceil(n/k))")
    p.add_argument("--L", type=int, default=None, help="layers (default plan length)")
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("flops", parents=[common], help="parameter and FLOP accounting")
    p.add_argument("--variant", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--res", type=int, default=224)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("train", parents=[common], help="toy training on the quadrant-blob task")
    p.add_argument("--config", default=None)
    p.add_argument("--decay", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--optim", default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--compare", default=None, help="comma-separated decay kinds to compare")
    p.add_argument("--seeds", type=int, default=5, help="seeds per kind in comparison mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", parents=[common], help="attention analysis of saved weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--config", default=None, help="default: config.ini next to the weights")
    p.add_argument("--input-seed", type=int, default=0)
    p.add_argument("--outputs", default="js,entropy,rollout")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", parents=[common], help="compiled vs pure-Python kernel timings")
    p.add_argument("--repeat", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"evtlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"evtlab: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
