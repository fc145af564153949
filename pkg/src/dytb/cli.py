"""Command-line front end: kernel generation, validation, corona inspection,
transform-norm search, the main experiment, the identity battery, and report
re-rendering.  Exit codes: 0 success, 1 validation failure, 2 config error.

Outputs are deterministic: identical (config, seed) produce byte-identical
files.  Every output embeds the tool version and the resolved configuration
as leading comment lines.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .accretive import ACCRETIVE_KINDS, AccretiveSystem
from .corona import (
    ConfigError,
    TbConfig,
    build_corona,
    carleson_constant,
    choose_delta,
    conjugate,
    forest_to_json_dict,
    packing_ratio,
)
from .grid import GridSpec
from .kernels import KERNEL_KINDS, generate_kernel, load_kernel, save_kernel, validate_size
from .twisted import make_context
from .verify import (
    DENSE_CAP,
    ExperimentConfig,
    VerifierReport,
    adversarial_transform_search,
    identity_suite,
    main_theorem_experiment,
    operator_norm,
    testing_constant,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2

PLOT_KINDS = ("ratio-hist", "ratio-vs-seed", "packing-vs-delta")


def _system_params(kind: str, amp: float, s: float) -> dict:
    if kind == "random":
        return {"amp": amp}
    if kind == "two-value":
        return {"s": s}
    return {}


def _resolved(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys}


def _header_lines(config: dict) -> list[str]:
    return [
        f"# dytb {__version__}",
        "# config: " + json.dumps(config, sort_keys=True),
    ]


# -- subcommands -----------------------------------------------------------------


def cmd_gen_kernel(args) -> int:
    spec = GridSpec(args.dim, args.depth)
    kernel = generate_kernel(args.kind, spec, seed=args.seed, scale=args.scale)
    save_kernel(kernel, args.out)
    print(f"wrote {args.out}: kind={args.kind} dim={args.dim} depth={args.depth} "
          f"entries={len(kernel)}")
    return EXIT_OK


def cmd_validate(args) -> int:
    kernel = load_kernel(args.kernel, check_size=False)
    if not validate_size(kernel):
        print(f"{args.kernel}: size condition VIOLATED")
        return EXIT_VALIDATION
    method = args.norm_method
    if method == "auto":
        method = "dense-svd" if kernel.spec.n_cells <= DENSE_CAP else "power"
    norm = operator_norm(kernel, method)
    print(f"{args.kernel}: size condition ok; entries={len(kernel)}; "
          f"operator norm ({method}) = {norm!r}")
    return EXIT_OK


def _build_systems(args, spec):
    params = _system_params(args.accretive_kind, args.amp, args.s)
    sys1 = AccretiveSystem(spec, args.accretive_kind, args.p1, args.A,
                           seed=args.seed * 2 + 1, params=params)
    sys2 = AccretiveSystem(spec, args.accretive_kind, args.p2, args.A,
                           seed=args.seed * 2 + 2, params=params)
    return sys1, sys2


def cmd_corona(args) -> int:
    spec = GridSpec(args.dim, args.depth)
    if args.kernel:
        kernel = load_kernel(args.kernel)
    else:
        kernel = generate_kernel(args.kernel_kind, spec, seed=args.kernel_seed,
                                 scale=args.kernel_scale)
    sys1, sys2 = _build_systems(args, spec)
    tloc = max(
        testing_constant(kernel, sys1, conjugate(args.p2), "direct"),
        testing_constant(kernel, sys2, conjugate(args.p1), "adjoint"),
    )
    root = spec.root()
    if args.delta == "auto":
        cfg = TbConfig(args.p1, args.p2, 0.5, args.A, tloc, args.tau_target)
        search = choose_delta(root, sys1, sys2, kernel, cfg)
        if not search.ok:
            print(f"delta search FAILED (floor reached); trace={search.trace}")
            return EXIT_VALIDATION
        forest, delta = search.forest, search.delta
        print(f"chosen delta = {delta!r} after {len(search.trace)} attempts")
    else:
        delta = float(args.delta)
        cfg = TbConfig(args.p1, args.p2, delta, args.A, tloc, args.tau_target)
        forest = build_corona(root, sys1, sys2, kernel, cfg)
    print(f"Tloc = {tloc!r}")
    for j in (1, 2):
        members = forest.members(j)
        print(f"S_{j}: {len(members)} members; packing ratio = "
              f"{packing_ratio(forest, j)!r}; Carleson constant = "
              f"{carleson_constant(members, root)!r}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(forest_to_json_dict(forest), fh, indent=1, sort_keys=True)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_transform_norm(args) -> int:
    spec = GridSpec(args.dim, args.depth)
    params = _system_params(args.accretive_kind, args.amp, args.s)
    system = AccretiveSystem(spec, args.accretive_kind, args.p, args.A,
                             seed=args.seed, params=params)
    ctx = make_context(system, spec.root(), args.delta)
    result = adversarial_transform_search(
        ctx, args.p, n_restarts=args.restarts, max_passes=args.passes, seed=args.seed
    )
    print(f"worst transform ratio = {result.ratio!r} "
          f"(|Q family| = {len(ctx.q_cubes())}, restarts = {result.restarts})")
    return EXIT_OK


def cmd_identities(args) -> int:
    residuals = identity_suite(
        args.dim, args.depth, args.seed,
        p1=args.p1, p2=args.p2,
        kernel_kind=args.kernel_kind, kernel_scale=args.kernel_scale,
        accretive_kind=args.accretive_kind, amp=args.amp, A=args.A,
    )
    width = max(len(k) for k in residuals)
    for name, value in residuals.items():
        print(f"{name:<{width}}  {value!r}")
    return EXIT_OK


def cmd_tb_experiment(args) -> int:
    keys = ("dim", "depth", "trials", "p1", "p2", "seed", "kernel_kind",
            "kernel_scale", "accretive_kind", "amp", "A", "tau_target")
    config = _resolved(args, keys)
    exp = ExperimentConfig(
        dim=args.dim, depth=args.depth, trials=args.trials, p1=args.p1, p2=args.p2,
        seed=args.seed, kernel_kind=args.kernel_kind, kernel_scale=args.kernel_scale,
        accretive_kind=args.accretive_kind, amp=args.amp, A=args.A,
        tau_target=args.tau_target,
    )
    reports = main_theorem_experiment(exp)
    out = Path(args.out)
    write_report_csv(out, config, reports)
    write_report_json(out.with_suffix(".json"), config, reports)
    ok = [r for r in reports if r.ok]
    tail = f"max ratio = {max(r.ratio for r in ok)!r}" if ok else "no usable trials"
    print(f"wrote {out} and {out.with_suffix('.json')}: {len(reports)} trials, "
          f"{len(reports) - len(ok)} flagged; {tail}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.infile)
    if path.suffix == ".json":
        with open(path) as fh:
            data = json.load(fh)
        config, rows = data["config"], data["reports"]
    else:
        config, rows = read_report_csv(path)
    if args.out:
        summary = {"version": __version__, "config": config, **summarize(rows)}
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(summarize(rows), indent=1, sort_keys=True))
    if args.plot:
        if args.plot not in PLOT_KINDS:
            print(f"unknown plot kind {args.plot!r}; expected one of {PLOT_KINDS}")
            return EXIT_CONFIG
        if not args.plot_out:
            print("--plot requires --plot-out")
            return EXIT_CONFIG
        emit_plot_data(rows, config, args.plot, args.plot_out)
        print(f"wrote {args.plot_out}")
    return EXIT_OK


# -- report persistence ------------------------------------------------------------


def write_report_csv(path, config: dict, reports: list[VerifierReport]) -> None:
    with open(path, "w", newline="") as fh:
        for line in _header_lines(config):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(VerifierReport.CSV_FIELDS)
        for r in reports:
            writer.writerow(r.csv_row())


def write_report_json(path, config: dict, reports: list[VerifierReport]) -> None:
    payload = {
        "version": __version__,
        "config": config,
        "reports": [r.to_json_dict() for r in reports],
        **summarize([r.to_json_dict() for r in reports]),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def read_report_csv(path):
    config = {}
    rows = []
    with open(path, newline="") as fh:
        header = None
        for line in fh:
            if line.startswith("#"):
                text = line.lstrip("#").strip()
                if text.startswith("config:"):
                    config = json.loads(text[len("config:"):])
                continue
            if header is None:
                header = next(csv.reader([line]))
                continue
            rec = dict(zip(header, next(csv.reader([line]))))
            rows.append({
                "trial": int(rec["trial"]),
                "seed": int(rec["seed"]),
                "ok": rec["ok"] == "1",
                "operator_norm": float(rec["operator_norm"]),
                "tloc": float(rec["tloc"]),
                "ratio": float(rec["ratio"]),
                "delta": float(rec["delta"]) if rec["delta"] else None,
            })
    return config, rows


def summarize(rows: list[dict]) -> dict:
    ok = [r for r in rows if r.get("ok")]
    ratios = sorted(r["ratio"] for r in ok)

    def quantile(q: float) -> float | None:
        if not ratios:
            return None
        pos = q * (len(ratios) - 1)
        lo = math.floor(pos)
        hi = math.ceil(pos)
        return ratios[lo] + (ratios[hi] - ratios[lo]) * (pos - lo)

    return {
        "n_trials": len(rows),
        "n_ok": len(ok),
        "n_flagged": len(rows) - len(ok),
        "ratio_max": ratios[-1] if ratios else None,
        "ratio_mean": sum(ratios) / len(ratios) if ratios else None,
        "ratio_median": quantile(0.5),
        "ratio_q90": quantile(0.9),
    }


def emit_plot_data(rows: list[dict], config: dict, kind: str, out_path) -> None:
    """Plain (x, y) CSV series for external plotting tools."""
    if kind not in PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}")
    with open(out_path, "w", newline="") as fh:
        for line in _header_lines(config):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        if kind == "ratio-vs-seed":
            writer.writerow(["trial", "seed", "ratio"])
            for r in rows:
                writer.writerow([r["trial"], r["seed"], repr(r["ratio"])])
        elif kind == "ratio-hist":
            writer.writerow(["bin_lo", "bin_hi", "count"])
            ratios = [r["ratio"] for r in rows if r.get("ok")]
            if ratios:
                edges = np.linspace(0.0, max(ratios) * (1 + 1e-9), 21)
                counts, _ = np.histogram(ratios, bins=edges)
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        else:  # packing-vs-delta, needs traces (JSON reports only)
            writer.writerow(["trial", "delta", "packing_s1", "packing_s2"])
            missing = [r for r in rows if "delta_trace" not in r]
            if missing:
                raise ConfigError(
                    "packing-vs-delta needs the JSON report (the CSV does not "
                    "carry the delta traces)"
                )
            for r in rows:
                for delta, t1, t2 in r["delta_trace"]:
                    writer.writerow([r["trial"], repr(delta), repr(t1), repr(t2)])


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dytb",
        description="dyadic singular-operator laboratory",
    )
    parser.add_argument("--version", action="version", version=f"dytb {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, depth=6):
        p.add_argument("--dim", type=int, default=1, choices=(1, 2))
        p.add_argument("--depth", type=int, default=depth)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None,
                       help="JSON file of defaults for this subcommand")

    p = sub.add_parser("gen-kernel", help="generate a kernel file")
    add_common(p)
    p.add_argument("--kind", choices=KERNEL_KINDS, default="random")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_kernel)

    p = sub.add_parser("validate", help="re-check a kernel file and report its norm")
    p.add_argument("--kernel", required=True)
    p.add_argument("--norm-method", choices=("auto", "dense-svd", "power"), default="auto")
    p.add_argument("--config", type=str, default=None)
    p.set_defaults(func=cmd_validate)

    def add_tb_options(p):
        p.add_argument("--p1", type=float, default=2.0)
        p.add_argument("--p2", type=float, default=2.0)
        p.add_argument("--A", type=float, default=1.5)
        p.add_argument("--accretive-kind", choices=ACCRETIVE_KINDS, default="random")
        p.add_argument("--amp", type=float, default=0.4)
        p.add_argument("--s", type=float, default=0.5)
        p.add_argument("--tau-target", type=float, default=0.9)

    p = sub.add_parser("corona", help="build the stopping families and measure them")
    add_common(p)
    add_tb_options(p)
    p.add_argument("--kernel", default=None, help="kernel file (overrides --kernel-kind)")
    p.add_argument("--kernel-kind", choices=KERNEL_KINDS, default="random")
    p.add_argument("--kernel-seed", type=int, default=0)
    p.add_argument("--kernel-scale", type=float, default=1.0)
    p.add_argument("--delta", default="auto", help='stopping parameter or "auto"')
    p.add_argument("--out", default=None, help="write the forest as JSON")
    p.set_defaults(func=cmd_corona)

    p = sub.add_parser("transform-norm", help="adversarial twisted-transform search")
    add_common(p)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--A", type=float, default=1.5)
    p.add_argument("--accretive-kind", choices=ACCRETIVE_KINDS, default="random")
    p.add_argument("--amp", type=float, default=0.4)
    p.add_argument("--s", type=float, default=0.5)
    p.add_argument("--delta", type=float, default=0.25)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--passes", type=int, default=50)
    p.set_defaults(func=cmd_transform_norm)

    p = sub.add_parser("identities", help="run every exact-identity checker once")
    add_common(p, depth=5)
    p.add_argument("--p1", type=float, default=2.0)
    p.add_argument("--p2", type=float, default=2.0)
    p.add_argument("--A", type=float, default=None)
    p.add_argument("--amp", type=float, default=None)
    p.add_argument("--kernel-kind", choices=KERNEL_KINDS, default="random")
    p.add_argument("--kernel-scale", type=float, default=1.0)
    p.add_argument("--accretive-kind", choices=ACCRETIVE_KINDS, default="random")
    p.set_defaults(func=cmd_identities)

    p = sub.add_parser("tb-experiment", help="run the seeded ratio experiment")
    add_common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--p1", type=float, default=2.0)
    p.add_argument("--p2", type=float, default=2.0)
    p.add_argument("--A", type=float, default=None)
    p.add_argument("--amp", type=float, default=None)
    p.add_argument("--kernel-kind", choices=KERNEL_KINDS, default="random")
    p.add_argument("--kernel-scale", type=float, default=1.0)
    p.add_argument("--accretive-kind", choices=ACCRETIVE_KINDS, default="random")
    p.add_argument("--tau-target", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tb_experiment)

    p = sub.add_parser("report", help="re-render a report CSV/JSON into a summary")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--plot", default=None, help=f"one of {PLOT_KINDS}")
    p.add_argument("--plot-out", default=None)
    p.add_argument("--config", type=str, default=None)
    p.set_defaults(func=cmd_report)

    return parser


def _merge_config_file(args, argv) -> None:
    """Apply a JSON config file beneath explicit flags; unknown keys rejected
    with a line-referenced message on malformed JSON."""
    if getattr(args, "config", None) is None:
        return
    try:
        with open(args.config) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.config}:{e.lineno}:{e.colno}: {e.msg}") from e
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{args.config}: config must be a JSON object")
    explicit = {
        a[2:].split("=", 1)[0].replace("-", "_") for a in argv if a.startswith("--")
    }
    known = {k for k in vars(args) if k not in ("func", "command", "config")}
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ConfigError(f"{args.config}: unknown config key {key!r}")
        if dest not in explicit:
            setattr(args, dest, value)


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        code = e.code if isinstance(e.code, int) else EXIT_CONFIG
        return code
    try:
        _merge_config_file(args, argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
