"""Union size and bytes per round as the client group grows.

    python scripts/sweep_group_size.py [--sizes 5,10,25,50] [--rounds 2] [--plain]
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from fednewsrec.cli import RunConfig, build_dataset, load_run_config, setup_experiment
from fednewsrec.fedcore import run_round

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="5,10,25,50")
    ap.add_argument("--rounds", type=int, default=2)
    ap.add_argument("--plain", action="store_true", help="skip secure aggregation")
    args = ap.parse_args()

    values = load_run_config(ROOT / "configs" / "synthetic.cfg")
    values["synthetic_spec"] = str(ROOT / "configs" / "synthetic_world.spec")
    base = RunConfig(**values)
    dataset = build_dataset(base)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["group_size", "union_size", "client_bytes", "total_bytes"])
    for S in (int(s) for s in args.sizes.split(",")):
        cfg = base.replace(
            rounds=args.rounds,
            group_size=S,
            secagg_n=S,
            secagg_t=max(1, S // 2),
            secure_aggregation=not args.plain,
        )
        exp, clients = setup_experiment(cfg, dataset)
        fed = cfg.fed_config()
        reps = [run_round(exp.server, clients, fed, exp.bus) for _ in range(cfg.rounds)]
        out.writerow(
            [
                S,
                np.mean([r.union_size for r in reps]),
                round(float(np.mean([r.cost.mean_client_bytes for r in reps]))),
                round(float(np.mean([r.cost.total_bytes for r in reps]))),
            ]
        )


if __name__ == "__main__":
    main()
