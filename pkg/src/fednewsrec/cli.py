"""Experiment runner.

``fednewsrec run`` trains for a fixed number of rounds and writes

* ``metrics.csv``  round, loss, auc, mrr, ndcg5, ndcg10 (metrics on eval rounds),
* ``costs.csv``    the byte ledger (round, party, direction, phase, bytes),
* ``summary.json`` final metrics, byte totals, parameter counts and timings,
* ``checkpoint.bin`` the final server state.

``fednewsrec compare-modes`` sweeps the news-encoder width and reports
per-client bytes of the efficient protocol against the whole-model baseline.

Options come from a flat ``key = value`` file (``--config``) overridden by
command-line flags of the same names. ``FEDNEWSREC_OUTPUT_DIR`` overrides the
output directory. Exit codes: 0 success, 2 configuration error, 3 runtime
failure (a checkpoint is written before exiting).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset, SyntheticSpec, adressa_to_mind, gen_synthetic, load_mind, load_synthetic_spec
from .errors import ConfigError
from .fedcore import (
    MODES,
    FedConfig,
    ModelConfig,
    OptimizerConfig,
    RoundReport,
    ServerState,
    build_clients,
    run_round,
    save_checkpoint,
)
from .metrics import EvalResult, evaluate
from .netsim import SERVER, Bus, FaultPlan
from .secagg import SecAggConfig

log = logging.getLogger("fednewsrec")

OUTPUT_ENV = "FEDNEWSREC_OUTPUT_DIR"
METRIC_COLUMNS = ("round", "loss", "auc", "mrr", "ndcg5", "ndcg10")

__all__ = ["RunConfig", "EvalResult", "evaluate", "run_experiment", "compare_modes", "main"]


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    synthetic_spec: str = ""
    mind_behaviors: str = ""
    mind_news: str = ""
    max_history: int = 50
    val_fraction: float = 0.2
    rounds: int = 200
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-8
    group_size: int = 50
    K: int = 4
    strict_plus_sign: bool = False
    news_dim: int = 400
    token_dim: int = 64
    n_heads: int = 4
    attn_dim: int = 200
    pooling: str = "mean"
    secure_aggregation: bool = True
    secagg_n: int = 50
    secagg_t: int = 25
    frac_bits: int = 24
    prg: str = "mt19937"
    mode: str = "efficient"
    eval_every: int = 10
    eval_split: str = "valid"
    drop_rate: float = 0.0
    output_dir: str = "runs/latest"
    seed: int = 0

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if self.dataset not in ("synthetic", "mind"):
            bad("dataset", "must be 'synthetic' or 'mind'")
        if self.dataset == "mind":
            for name in ("mind_behaviors", "mind_news"):
                paths = _split_paths(getattr(self, name))
                if not paths:
                    bad(name, "required for the mind dataset")
                for p in paths:
                    if not Path(p).exists():
                        bad(name, f"no such file {p}")
        if self.synthetic_spec and not Path(self.synthetic_spec).exists():
            bad("synthetic_spec", f"no such file {self.synthetic_spec}")
        if self.rounds < 0:
            bad("rounds", "must be >= 0")
        if self.eval_every < 1:
            bad("eval_every", "must be >= 1")
        if self.eval_split not in ("valid", "test"):
            bad("eval_split", "must be 'valid' or 'test'")
        if self.mode not in MODES:
            bad("mode", f"must be one of {MODES}")
        if not 0.0 <= self.drop_rate < 1.0:
            bad("drop_rate", "must lie in [0, 1)")
        if not 0.0 <= self.val_fraction <= 1.0:
            bad("val_fraction", "must lie in [0, 1]")
        # the nested configs carry their own range checks
        try:
            self.fed_config()
            self.model_config()
        except (ConfigError, ValueError, RuntimeError) as exc:
            raise ConfigError(str(exc)) from None

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            self.lr, self.beta1, self.beta2, self.tau, self.group_size, self.K, self.strict_plus_sign
        )

    def fed_config(self) -> FedConfig:
        sa = SecAggConfig(n=self.secagg_n, t=self.secagg_t, frac_bits=self.frac_bits, prg=self.prg)
        return FedConfig(self.optimizer(), sa, self.secure_aggregation, self.mode, self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.news_dim, self.token_dim, self.n_heads, self.attn_dim, self.pooling)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _split_paths(value: str) -> list[str]:
    return [p.strip() for p in value.split(",") if p.strip()]


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    try:
        if kind in (bool, "bool"):
            return _parse_bool(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw.strip()


def load_run_config(path) -> dict:
    """Read a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


# ---------------------------------------------------------------------------
# experiment


def build_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "mind":
        return load_mind(
            _split_paths(cfg.mind_behaviors),
            _split_paths(cfg.mind_news),
            max_history=cfg.max_history,
            val_fraction=cfg.val_fraction,
            seed=cfg.seed,
        )
    spec = load_synthetic_spec(cfg.synthetic_spec) if cfg.synthetic_spec else SyntheticSpec()
    return gen_synthetic(spec).dataset


@dataclass
class Experiment:
    """Live objects of one run, kept so callers can inspect final state."""

    config: RunConfig
    dataset: Dataset
    server: ServerState
    bus: Bus
    reports: list[RoundReport] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return repr(float(x))


def setup_experiment(cfg: RunConfig, dataset: Dataset | None = None) -> tuple[Experiment, dict]:
    cfg.validate()
    dataset = dataset or build_dataset(cfg)
    server = ServerState.init(dataset.corpus, cfg.model_config(), cfg.seed)
    clients = build_clients(dataset.users, cfg.K, cfg.seed)
    plan = FaultPlan.random(clients, cfg.rounds, cfg.drop_rate, cfg.seed) if cfg.drop_rate else FaultPlan()
    bus = Bus(plan)
    bus.register(SERVER)
    for p in clients:
        bus.register(p)
    return Experiment(cfg, dataset, server, bus), clients


def run_experiment(cfg: RunConfig, dataset: Dataset | None = None, write: bool = True) -> Experiment:
    """Train for ``cfg.rounds`` rounds, evaluating every ``eval_every`` rounds
    (and always at round 0 and the last round)."""
    exp, clients = setup_experiment(cfg, dataset)
    out = Path(cfg.output_dir)
    eval_set = exp.dataset.eval_set(cfg.eval_split)
    fed = cfg.fed_config()
    started = time.perf_counter()

    def record(round_index, loss, do_eval):
        row = {"round": round_index, "loss": loss}
        if do_eval:
            row.update(evaluate(exp.server.user_model, exp.server.news_table, eval_set).as_row())
        exp.metrics.append(row)

    try:
        record(0, None, True)
        for t in range(1, cfg.rounds + 1):
            rep = run_round(exp.server, clients, fed, exp.bus)
            exp.reports.append(rep)
            if rep.skipped:
                log.info("round %d skipped: %s", t, rep.reason)
            record(t, rep.loss, t % cfg.eval_every == 0 or t == cfg.rounds)
    except Exception:
        if write:
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out / "checkpoint.bin", exp.server)
        raise
    if write:
        write_outputs(exp, out, time.perf_counter() - started)
    return exp


def write_outputs(exp: Experiment, out: Path, seconds: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in exp.metrics:
            w.writerow([row["round"]] + [_fmt(row.get(c)) for c in METRIC_COLUMNS[1:]])
    exp.bus.ledger.export_csv(out / "costs.csv")
    save_checkpoint(out / "checkpoint.bin", exp.server)

    reports = [r for r in exp.reports if not r.skipped]
    client_secs = [s for r in reports for s in r.cost.client_seconds.values()]
    final = exp.metrics[-1]
    summary = {
        "config": dataclasses.asdict(exp.config),
        "final": {k: final.get(k) for k in METRIC_COLUMNS[2:]},
        "rounds_run": len(exp.reports),
        "rounds_skipped": sum(r.skipped for r in exp.reports),
        "mean_union_size": float(np.mean([r.union_size for r in reports])) if reports else 0.0,
        "mean_client_bytes_per_round": float(np.mean([r.cost.mean_client_bytes for r in reports])) if reports else 0.0,
        "user_model_params": exp.server.user_model.size,
        "news_encoder_params": exp.server.news_encoder.size,
        "ledger": exp.bus.ledger.summary(),
        "timing": {
            "wall_seconds": seconds,
            "mean_client_seconds": float(np.mean(client_secs)) if client_secs else 0.0,
            "mean_server_seconds": float(np.mean([r.cost.server_seconds for r in reports])) if reports else 0.0,
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# efficient vs whole-model cost comparison

COMPARE_COLUMNS = (
    "scale",
    "mode",
    "token_dim",
    "news_encoder_params",
    "user_model_params",
    "client_bytes",
    "client_up",
    "client_down",
    "server_bytes",
)


def compare_modes(cfg: RunConfig, scales=(1, 2, 4, 8), dataset: Dataset | None = None, write: bool = True):
    """Run both modes for each news-encoder width ``token_dim * scale``.

    Returns rows of mean per-client bytes per round; each row also carries
    the exact per-client byte map under ``"per_client"`` for invariance
    checks. Timings go to ``compare.json`` only.
    """
    cfg.validate()
    dataset = dataset or build_dataset(cfg)
    rows, timing = [], []
    for scale in scales:
        for mode in MODES:
            sub = cfg.replace(mode=mode, token_dim=cfg.token_dim * scale, eval_every=max(cfg.rounds, 1))
            exp, clients = setup_experiment(sub, dataset)
            fed = sub.fed_config()
            reports = [run_round(exp.server, clients, fed, exp.bus) for _ in range(sub.rounds)]
            per_client = [r.cost.client_bytes for r in reports]
            done = [r for r in reports if not r.skipped]
            rows.append(
                {
                    "scale": scale,
                    "mode": mode,
                    "token_dim": sub.token_dim,
                    "news_encoder_params": exp.server.news_encoder.size,
                    "user_model_params": exp.server.user_model.size,
                    "client_bytes": float(np.mean([r.cost.mean_client_bytes for r in done])) if done else 0.0,
                    "client_up": float(np.mean([np.mean(list(r.cost.client_up.values())) for r in done])) if done else 0.0,
                    "client_down": float(np.mean([np.mean(list(r.cost.client_down.values())) for r in done]))
                    if done
                    else 0.0,
                    "server_bytes": float(np.mean([r.cost.total_bytes for r in done])) if done else 0.0,
                    "per_client": per_client,
                }
            )
            timing.append(
                {
                    "scale": scale,
                    "mode": mode,
                    "client_seconds": float(
                        np.mean([s for r in done for s in r.cost.client_seconds.values()] or [0.0])
                    ),
                    "server_seconds": float(np.mean([r.cost.server_seconds for r in done] or [0.0])),
                }
            )
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COMPARE_COLUMNS)
            for r in rows:
                w.writerow([r[c] for c in COMPARE_COLUMNS])
        (out / "compare.json").write_text(json.dumps(timing, indent=2))
    return rows


# ---------------------------------------------------------------------------
# command line


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value configuration file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in (bool, "bool"):
            parser.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            parser.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = load_run_config(args.config) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v if isinstance(v, bool) else _convert(f.name, v)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        values["output_dir"] = env
    return RunConfig(**values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fednewsrec", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train and evaluate")
    _add_config_flags(run)
    cmp_ = sub.add_parser("compare-modes", help="efficient vs whole-model cost sweep")
    _add_config_flags(cmp_)
    cmp_.add_argument("--scales", default="1,2,4,8", help="comma-separated token_dim multipliers")
    conv = sub.add_parser("convert-adressa", help="click log (user, item, time, title) to MIND files")
    conv.add_argument("clicks")
    conv.add_argument("out_dir")
    conv.add_argument("--negatives", type=int, default=20)
    conv.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "convert-adressa":
            b, n = adressa_to_mind(args.clicks, args.out_dir, args.negatives, args.seed)
            print(f"wrote {b} and {n}")
            return 0
        cfg = resolve_config(args)
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            exp = run_experiment(cfg)
            final = exp.metrics[-1]
            print(
                f"round {final['round']}: auc={final.get('auc', float('nan')):.4f} "
                f"mrr={final.get('mrr', float('nan')):.4f} -> {cfg.output_dir}"
            )
        else:
            scales = tuple(int(s) for s in args.scales.split(","))
            for r in compare_modes(cfg, scales):
                print(
                    f"x{r['scale']:<2} {r['mode']:<12} encoder={r['news_encoder_params']:>9} "
                    f"client_bytes={r['client_bytes']:.0f}"
                )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure after a checkpoint was written
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
