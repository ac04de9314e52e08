"""Command-line front end: validate, optimize, sweep, simulate, evaluate.

Every command writes CSV files plus a ``manifest.txt`` sidecar into ``--out``
and is deterministic given ``--seed``.

Exit codes: 0 success, 2 invalid input, 3 optimization failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .allocation import check_feasible, derive_forwarding, read_allocation, write_allocation
from .delay import DELAY_HEADER, DelayReport, UnreachableSourceError, average_delay
from .optimizer import OptimizationError, SpsaConfig, optimize, write_trace
from .records import fmt, sha256_text, write_csv, write_manifest
from .simulator import SimConfig, run, write_empirical
from .topology import (
    Topology,
    TopologyError,
    TopologyValidationError,
    fixture_text,
    parse_topology,
    validate,
    FIXTURES,
)

EXIT_OK, EXIT_INVALID, EXIT_OPT, EXIT_IO = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class SweepSpec:
    start: float
    stop: float
    step: float
    group: str | None = None
    modes: tuple[str, ...] = ("inter", "intra")

    def __post_init__(self) -> None:
        if not self.step > 0:
            raise ValueError("sweep step must be positive")
        if self.start > self.stop:
            raise ValueError("sweep start must not exceed stop")
        if self.start <= 0:
            raise ValueError("capacities must be positive")
        for m in self.modes:
            if m not in ("inter", "intra"):
                raise ValueError(f"unknown mode {m!r}")

    @classmethod
    def parse(cls, text: str, group: str | None = None, modes=("inter", "intra")) -> "SweepSpec":
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"expected start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        return cls(start, stop, step, group, tuple(modes))

    def values(self) -> list[float]:
        n = int(math.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return [round(self.start + i * self.step, 12) for i in range(n)]


# --- helpers -------------------------------------------------------------------


def _source_text(spec: str) -> str:
    p = Path(spec)
    if p.exists():
        return p.read_text(encoding="utf-8")
    if spec in FIXTURES:
        return fixture_text(spec)
    raise CliError(f"cannot read topology {spec!r}: no such file or fixture", EXIT_IO)


def _load(args) -> Topology:
    text = _source_text(args.topology)
    try:
        topo = parse_topology(text, name=Path(args.topology).stem, check=False)
    except TopologyError as e:
        raise CliError(f"cannot parse topology: {e}", EXIT_INVALID) from e
    topo = _overrides(topo, args)
    bad = validate(topo)
    if bad:
        raise CliError("invalid topology:\n  " + "\n  ".join(bad), EXIT_INVALID)
    return topo


def _overrides(topo: Topology, args) -> Topology:
    for g in getattr(args, "drop_group", None) or []:
        topo = topo.drop_group(g)
    if getattr(args, "capacity", None) is not None:
        topo = topo.with_capacity(args.capacity, group=args.group)
    if getattr(args, "loss", None) is not None:
        topo = topo.with_loss(args.loss)
    if getattr(args, "symbols", None) is not None:
        topo = topo.with_symbols(args.symbols)
    if getattr(args, "source_rate", None) is not None:
        topo = topo.with_source_rate(args.source_rate)
    return topo


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {out}: {e}", EXIT_IO) from e
    return out


def _manifest(out: Path, args, topo: Topology, extra: dict | None = None) -> None:
    skip = {"func"}
    flags = " ".join(
        f"{k}={v}" for k, v in sorted(vars(args).items()) if k not in skip and v is not None
    )
    entries = {
        "command": args.command,
        "flags": flags,
        "seed": args.seed,
        "topology": args.topology,
        "topology_sha256": sha256_text(_source_text(args.topology)),
        "effective_topology_digest": topo.digest(),
        "version": __version__,
    }
    entries.update(extra or {})
    write_manifest(out / "manifest.txt", entries)


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _spsa(args) -> SpsaConfig:
    try:
        return SpsaConfig(
            iterations=args.iterations,
            restarts=args.restarts,
            a=args.a,
            c=args.c,
            penalty=args.penalty,
            seed=args.seed,
        )
    except ValueError as e:
        raise CliError(f"bad optimizer settings: {e}", EXIT_INVALID) from e


def _write_delay(path: Path, report: DelayReport) -> None:
    write_csv(path, DELAY_HEADER, report.rows())


def _optimize(topo: Topology, cfg: SpsaConfig, mode: str):
    try:
        res = optimize(topo, cfg, mode)
    except (OptimizationError, UnreachableSourceError) as e:
        raise CliError(f"optimization failed: {e}", EXIT_OPT) from e
    bad = check_feasible(topo, res.allocation)
    if bad:
        raise CliError("optimizer returned an infeasible allocation", EXIT_OPT)
    return res


# --- commands ------------------------------------------------------------------


def cmd_validate(args) -> int:
    text = _source_text(args.topology)
    try:
        topo = parse_topology(text, name=Path(args.topology).stem, check=False)
    except TopologyError as e:
        print(f"parse error: {e}")
        return EXIT_INVALID
    bad = validate(topo)
    if bad:
        for b in bad:
            print(b)
        return EXIT_INVALID
    print("ok")
    return EXIT_OK


def cmd_optimize(args) -> int:
    topo = _load(args)
    out = _out_dir(args)
    res = _optimize(topo, _spsa(args), args.mode)
    write_allocation(out / "allocation.csv", res.allocation)
    _write_delay(out / "delay.csv", res.report)
    write_trace(out / "trace.csv", res.trace)
    _manifest(out, args, topo)
    _say(args, f"{args.mode}: mean delay {res.report.average:.6g} s, mixed share {res.allocation.mixed_share():.3g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _load(args)
    try:
        spec = SweepSpec.parse(args.range, args.sweep_group, args.modes.split(","))
    except ValueError as e:
        raise CliError(str(e), EXIT_INVALID) from e
    cfg = _spsa(args)
    out = _out_dir(args)
    clients = base.clients
    rows = []
    for cap in spec.values():
        topo = base.with_capacity(cap, group=spec.group)
        for mode in spec.modes:
            res = _optimize(topo, cfg, mode)
            tag = f"c{fmt(float(cap))}_{mode}"
            _write_delay(out / f"delay_{tag}.csv", res.report)
            write_allocation(out / f"allocation_{tag}.csv", res.allocation)
            d = res.report.as_dict()
            rows.append([cap, mode, res.report.average] + [d[c] for c in clients] + [res.allocation.mixed_share()])
            _say(args, f"capacity {fmt(float(cap))} {mode}: {res.report.average:.6g} s")
    header = ["capacity", "mode", "avg_delay_s"] + [f"D_{c}" for c in clients] + ["mixed_share"]
    write_csv(out / "summary.csv", header, rows)
    _manifest(out, args, base)
    return EXIT_OK


def _read_alloc(args, topo: Topology):
    try:
        alloc = read_allocation(args.allocation, topo)
    except OSError as e:
        raise CliError(f"cannot read allocation: {e}", EXIT_IO) from e
    except (ValueError, KeyError) as e:
        raise CliError(f"bad allocation file: {e}", EXIT_INVALID) from e
    bad = check_feasible(topo, alloc)
    if bad:
        raise CliError("allocation violates constraints:\n  " + "\n  ".join(map(str, bad)), EXIT_INVALID)
    return alloc


def cmd_evaluate(args) -> int:
    topo = _load(args)
    alloc = _read_alloc(args, topo)
    out = _out_dir(args)
    try:
        report = average_delay(topo, alloc, mode=args.method)
    except UnreachableSourceError as e:
        raise CliError(str(e), EXIT_INVALID) from e
    _write_delay(out / "delay.csv", report)
    _manifest(out, args, topo)
    for c, s, d in report.rows():
        _say(args, f"{c} {s} {d:.6g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    topo = _load(args)
    alloc = _read_alloc(args, topo)
    out = _out_dir(args)
    try:
        cfg = SimConfig(seed=args.seed, replications=args.replications, duration=args.duration)
    except ValueError as e:
        raise CliError(f"bad simulation settings: {e}", EXIT_INVALID) from e
    rep = run(topo, derive_forwarding(alloc), cfg)
    write_empirical(out / "empirical.csv", rep)
    try:
        analytic = average_delay(topo, alloc).as_dict()
    except UnreachableSourceError:
        analytic = {}
    _manifest(out, args, topo, {"event_digest": rep.digest()})
    for c, s, m, h, k, n in rep.rows():
        a = analytic.get(c)
        gap = (m - a) / a if a and not math.isnan(m) else float("nan")
        _say(args, f"{c} {s}: empirical {m:.6g} +- {h:.3g} s, analytic {a if a is not None else float('nan'):.6g} s, gap {gap:+.2%}, censored {k}/{n}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress console output")

    topo_flags = argparse.ArgumentParser(add_help=False)
    topo_flags.add_argument("topology", help="YAML file or fixture name (" + ", ".join(FIXTURES) + ")")
    topo_flags.add_argument("--capacity", type=float, help="override link capacity (packets/s)")
    topo_flags.add_argument("--group", help="restrict --capacity to one link group")
    topo_flags.add_argument("--loss", type=float, help="override loss probability on every link")
    topo_flags.add_argument("--symbols", type=int, help="override symbols per source")
    topo_flags.add_argument("--source-rate", type=float, help="override source emission rate")
    topo_flags.add_argument("--drop-group", action="append", help="remove a link group (repeatable)")

    spsa = argparse.ArgumentParser(add_help=False)
    d = SpsaConfig()
    spsa.add_argument("--iterations", type=int, default=d.iterations)
    spsa.add_argument("--restarts", type=int, default=d.restarts)
    spsa.add_argument("--a", type=float, default=None, help="SPSA gain numerator (default: calibrated)")
    spsa.add_argument("--c", type=float, default=None, help="SPSA perturbation size in packets/s")
    spsa.add_argument("--penalty", type=float, default=d.penalty)

    p = argparse.ArgumentParser(prog="internc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", parents=[common], help="check a topology file")
    s.add_argument("topology")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("optimize", parents=[common, topo_flags, spsa], help="optimize rate allocation")
    s.add_argument("--mode", choices=("inter", "intra"), default="inter")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("sweep", parents=[common, topo_flags, spsa], help="capacity sweep")
    s.add_argument("--range", default="1:5:1", help="capacities start:stop:step (inclusive)")
    s.add_argument("--sweep-group", default=None, help="link group whose capacity is swept (default: all)")
    s.add_argument("--modes", default="inter,intra")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("simulate", parents=[common, topo_flags], help="simulate an allocation")
    s.add_argument("allocation", help="allocation CSV")
    s.add_argument("--replications", type=int, default=500)
    s.add_argument("--duration", type=float, default=1000.0, help="simulated seconds before censoring")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", parents=[common, topo_flags], help="analytic delay of an allocation")
    s.add_argument("allocation", help="allocation CSV")
    s.add_argument("--method", choices=("closed_form", "truncated_sum"), default="closed_form")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except TopologyValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
