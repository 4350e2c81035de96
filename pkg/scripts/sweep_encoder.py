"""Per-client bytes of both modes while the news encoder grows.

    python scripts/sweep_encoder.py [--scales 1,2,4,8] [--group 10] [--out runs/encoder_sweep]
"""

import argparse
from pathlib import Path

from fednewsrec.cli import RunConfig, compare_modes, load_run_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scales", default="1,2,4,8")
    ap.add_argument("--group", type=int, default=10)
    ap.add_argument("--token-dim", type=int, default=64)
    ap.add_argument("--out", default="runs/encoder_sweep")
    args = ap.parse_args()

    values = load_run_config(ROOT / "configs" / "synthetic.cfg")
    values.update(
        synthetic_spec=str(ROOT / "configs" / "synthetic_world.spec"),
        rounds=1,
        token_dim=args.token_dim,
        group_size=args.group,
        secagg_n=args.group,
        secagg_t=max(1, args.group // 2),
        secure_aggregation=True,
        output_dir=args.out,
    )
    rows = compare_modes(RunConfig(**values), tuple(int(s) for s in args.scales.split(",")))
    print(f"{'scale':>5} {'mode':<12} {'encoder params':>14} {'client bytes':>13}")
    for r in rows:
        print(f"{r['scale']:>5} {r['mode']:<12} {r['news_encoder_params']:>14} {r['client_bytes']:>13.0f}")
    print(f"table written to {args.out}/compare.csv")


if __name__ == "__main__":
    main()
