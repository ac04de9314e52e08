"""Irregular topology: bottleneck sweep with and without the dashed links.

Prints intra delay with/without dashed links, inter delay with them, and the
share of mixed-type rate in the inter allocation.
"""

import argparse
from pathlib import Path

from internc.optimizer import SpsaConfig, optimize
from internc.records import write_csv
from internc.topology import load_topology


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--caps", type=float, nargs="+", default=[5, 10, 15, 20, 25, 30])
    ap.add_argument("--loss", type=float, default=0.05)
    ap.add_argument("--iterations", type=int, default=1500)
    ap.add_argument("--restarts", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    cfg = SpsaConfig(iterations=args.iterations, restarts=args.restarts, seed=args.seed)
    base = load_topology("irregular").with_loss(args.loss)
    plain = base.drop_group("dashed")
    rows = []
    print(f"{'cap':>5} {'intra':>9} {'intra-':>9} {'inter':>9} {'gain':>7} {'mixed':>6}")
    for c in args.caps:
        t = base.with_capacity(c, "bottleneck")
        intra = optimize(t, cfg, "intra").report.average
        intra_plain = optimize(plain.with_capacity(c, "bottleneck"), cfg, "intra").report.average
        inter = optimize(t, cfg, "inter")
        gain = 1 - inter.report.average / intra
        share = inter.allocation.mixed_share()
        rows.append((c, intra, intra_plain, inter.report.average, gain, share))
        print(f"{c:5g} {intra:9.4f} {intra_plain:9.4f} {inter.report.average:9.4f} {gain:7.1%} {share:6.3f}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ("capacity", "intra_s", "intra_no_dashed_s", "inter_s", "gain", "mixed_share")
    write_csv(out / "irregular_sweep.csv", header, rows)


if __name__ == "__main__":
    main()
