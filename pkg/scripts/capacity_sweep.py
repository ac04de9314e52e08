"""Inter vs intra optimized delay over a capacity range on topology1 / topology2.

    python scripts/capacity_sweep.py topology1 --caps 1 2 3 4 5
"""

import argparse
from pathlib import Path

from internc.optimizer import SpsaConfig, optimize
from internc.records import write_csv
from internc.topology import load_topology


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("topology", choices=["topology1", "topology2"])
    ap.add_argument("--caps", type=float, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--loss", type=float, default=0.05)
    ap.add_argument("--iterations", type=int, default=1500)
    ap.add_argument("--restarts", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    cfg = SpsaConfig(iterations=args.iterations, restarts=args.restarts, seed=args.seed)
    base = load_topology(args.topology).with_loss(args.loss)
    rows = []
    print(f"{'cap':>5} {'inter':>9} {'intra':>9} {'gain':>7} {'mixed':>6}")
    for c in args.caps:
        topo = base.with_capacity(c, "numbered")
        inter = optimize(topo, cfg, "inter")
        intra = optimize(topo, cfg, "intra")
        gain = 1 - inter.report.average / intra.report.average
        share = inter.allocation.mixed_share()
        rows.append((c, inter.report.average, intra.report.average, gain, share))
        print(f"{c:5g} {inter.report.average:9.4f} {intra.report.average:9.4f} {gain:7.1%} {share:6.3f}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"{args.topology}_sweep.csv", ("capacity", "inter_s", "intra_s", "gain", "mixed_share"), rows)


if __name__ == "__main__":
    main()
