"""Desk-scale trend comparison over several seeds.

Trains no-context, CA and DA-guided CA models per seed and prints the
three WERR comparisons.  Results go to a JSON file for later inspection.

    python3 scripts/run_trend.py --seeds 0 1 2 --out runs/trend.json
"""

import argparse
import json
import logging
import time
from pathlib import Path

from da_bias.experiments import desk_trend_config, trend_run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("runs/trend.json"))
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    t0 = time.time()
    results = []
    for seed in args.seeds:
        r = trend_run(desk_trend_config(seed))
        results.append(r)
        sel, byp = r.selection_vs_bypass
        da, ca = r.da_vs_ca
        print(f"seed {seed} ({r.seconds:.0f}s): CA WERR {r.ca_gain:+.2f}%  "
              f"non-default DA-CA {da:+.2f}% vs CA {ca:+.2f}%  "
              f"selection {sel:+.2f}% vs bypass {byp:+.2f}%", flush=True)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(
        {"seconds": time.time() - t0,
         "runs": [{"seed": r.seed, "wer": r.wer, "seconds": r.seconds} for r in results]},
        indent=2, sort_keys=True) + "\n")
    print(f"total {time.time() - t0:.0f}s -> {args.out}")


if __name__ == "__main__":
    main()
