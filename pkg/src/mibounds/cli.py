"""Command-line entry point: ``mibounds <subcommand> --config FILE``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import energy_training as et
from . import harness as h
from .models import model_from_config
from .variational import load_checkpoint, save_checkpoint


def _load(args) -> dict:
    if not args.config:
        raise h.ConfigError("--config is required")
    try:
        data = yaml.safe_load(Path(args.config).read_text()) or {}
    except yaml.YAMLError as exc:
        raise h.ConfigError(f"{args.config}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise h.ConfigError(f"{args.config}: top level must be a mapping")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.workers is not None:
        data["workers"] = args.workers
    overrides = {k: getattr(args, k, None) for k in ("K", "T", "schedule", "kernel")}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides and args.command == "estimate":
        data["estimators"] = [{**e, **overrides} if isinstance(e, dict) else e
                              for e in data.get("estimators") or []]
    elif overrides and args.command == "sweep" and "sweep" in data:
        if "K" in overrides:
            overrides["K"] = overrides["K"][0]  # a sweep varies T at one K
        data["sweep"] = {**data["sweep"], **overrides}
    return data


def _json_path(csv_path: str) -> str:
    return str(Path(csv_path).with_suffix(".json"))


def cmd_estimate(args) -> int:
    cfg = h.parse_config(_load(args))
    out = dict(cfg.output)
    if args.out:
        out = {"csv": args.out, "json": _json_path(args.out)}
    report = h.run_experiment(cfg, out=out)
    if not out.get("csv"):
        sys.stdout.write(report.csv_text())
    failures = []
    if args.check:
        for r in report.rows:
            if r.status == "FAILED":
                failures.append(f"row {r.row_id} ({r.estimator}) failed: {r.reason}")
            if r.reference_mi is None:
                continue
            if r.lower is not None and not r.lower.approximate and \
                    r.lower.value - 3 * r.lower.std_error > r.reference_mi:
                failures.append(f"row {r.row_id} ({r.estimator}) lower bound exceeds reference MI")
            if r.upper is not None and not r.upper.approximate and \
                    r.upper.value + 3 * r.upper.std_error < r.reference_mi:
                failures.append(f"row {r.row_id} ({r.estimator}) upper bound below reference MI")
    return _finish(failures)


def cmd_sweep(args) -> int:
    data = _load(args)
    failures = []
    if "decompose" in data:
        rows = h.decompose_report(data, out=args.out)
        for r in rows:
            if not r["cap_ok"]:
                failures.append(f"{r['estimator']} K={r['K']}: contrastive term "
                                f"{r['contrastive_term']:.4f} exceeds log K = {r['logK']:.4f}")
        cols = h.DECOMP_COLUMNS
    else:
        rows = h.sweep_gap_vs_T(data, out=args.out)
        Ts = [r["T"] for r in rows]
        if any(b <= a for a, b in zip(Ts, Ts[1:])):
            failures.append("T values must be strictly increasing")
        for r in rows:
            if not r["gap"] > 0:
                failures.append(f"T={r['T']}: non-positive gap {r['gap']!r}")
        if len(rows) >= 2 and all(r["gap"] > 0 for r in rows):
            print(f"# log-log slope of gap vs T: {h.loglog_slope(Ts, [r['gap'] for r in rows]):.4f}")
        cols = h.GAP_COLUMNS
    if not args.out:
        sys.stdout.write(h.rows_to_csv(cols, [[h._fmt(r[c]) for c in cols] for r in rows]))
    return _finish(failures)


def cmd_train_critic(args) -> int:
    data = _load(args)
    cfg = h.parse_config({k: v for k, v in data.items() if k not in ("critic",)} | {"estimators": []})
    model = model_from_config(cfg.model)
    q = h.build_proposal(model, cfg.proposal, cfg.seed)
    spec = dict(data.get("critic") or {})
    train = dict(spec.pop("train", None) or {"objective": "giwae"})
    if args.objective:
        train["objective"] = args.objective
    critic = h.build_critic(model, q, spec, cfg.seed)
    state = h.train_critic(model, q, critic, train, cfg.seed, int(train.get("K", 1)))
    out = args.out or "critic.json"
    save_checkpoint(out, critic, extra={"objective": state.objective, "steps": state.step,
                                        "mcmc": state.mcmc, "counters": state.counters})
    tail = state.smoothed_losses(50)
    print(json.dumps({"checkpoint": out, "steps": state.step,
                      "final_smoothed_loss": tail[-1] if len(tail) else None}))
    return 0


def cmd_eval_ibal(args) -> int:
    data = _load(args)
    cfg = h.parse_config({k: v for k, v in data.items() if k not in ("critic", "ibal")} | {"estimators": []})
    model = model_from_config(cfg.model)
    q = h.build_proposal(model, cfg.proposal, cfg.seed)
    ckpt = args.critic or (data.get("critic") or {}).get("checkpoint")
    critic = load_checkpoint(ckpt) if ckpt else h.build_critic(model, q, data.get("critic"), cfg.seed)
    ib = dict(data.get("ibal") or {})
    T = args.T if args.T is not None else int(ib.get("T", 100))
    K = args.K if args.K is not None else int(ib.get("K", 1))
    mode = args.mode or ib.get("mode", "both")
    schedule = ib.get("schedule", "linear")
    energy = et.EnergyPosterior(q, critic)
    kernel, _ = h.build_kernel(model, energy.path(T, schedule), ib, cfg.seed)
    row = h.Row(0, "ibal", K, T, cfg.n, cfg.seed)
    row.reference_mi = h.bs.analytic_reference(model)
    if mode in ("upper", "both"):
        row.upper = et.eval_ibal_ais(model, energy, T, K, cfg.n, cfg.seed, et.UPPER, kernel, schedule)
    if mode in ("approx-lower", "approx_lower", "both"):
        row.lower = et.eval_ibal_ais(model, energy, T, K, cfg.n, cfg.seed, et.APPROX_LOWER, kernel,
                                     schedule)
    row.tight = h._tight(row, cfg.tight_threshold)
    text = h.rows_to_csv(h.CSV_COLUMNS, [row.csv_record()])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_selftest(args) -> int:
    checks = h.selftest(instances=args.instances, seed=args.seed or 0, n=args.n)
    failures = []
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
        if not ok:
            failures.append(name)
    print(f"{len(checks) - len(failures)}/{len(checks)} checks passed")
    return _finish(failures, quiet=True)


def _finish(failures, quiet=False) -> int:
    if failures and not quiet:
        for f in failures:
            print(f"ASSERTION FAILED: {f}", file=sys.stderr)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mibounds", description="Mutual information bound estimators.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--workers", type=int, help="worker threads for sweep rows")
        sp.add_argument("--out", help="output file (CSV, or checkpoint for train-critic)")

    def chain_flags(sp):
        sp.add_argument("--K", type=int, nargs="+", help="override K for every estimator")
        sp.add_argument("--T", type=int, nargs="+", help="override T for every estimator")
        sp.add_argument("--schedule", choices=("linear", "sigmoid"), help="annealing schedule")
        sp.add_argument("--kernel", choices=("hmc", "perfect", "metropolis"), help="transition kernel")

    sp = sub.add_parser("estimate", help="run every (estimator, K, T) row of a config")
    common(sp)
    chain_flags(sp)
    sp.add_argument("--check", action="store_true",
                    help="exit nonzero if a row fails or a bound lands on the wrong side of the reference MI")
    sp.set_defaults(fn=cmd_estimate)
    sp = sub.add_parser("sweep", help="sandwich gap vs T, or a decomposition table")
    common(sp)
    chain_flags(sp)
    sp.set_defaults(fn=cmd_sweep)
    sp = sub.add_parser("train-critic", help="train a critic and write a checkpoint")
    common(sp)
    sp.add_argument("--objective", choices=("giwae", "infonce", "mine-dv", "mine-f", "ba", "mine-ais"),
                    help="override the training objective in the config")
    sp.set_defaults(fn=cmd_train_critic)
    sp = sub.add_parser("eval-ibal", help="AIS evaluation of the IBAL for a critic")
    common(sp)
    sp.add_argument("--critic", help="critic checkpoint")
    sp.add_argument("--mode", choices=("upper", "approx-lower", "both"), help="which side to report")
    sp.add_argument("--T", type=int, help="number of annealing distributions")
    sp.add_argument("--K", type=int, help="number of chains")
    sp.set_defaults(fn=cmd_eval_ibal)
    sp = sub.add_parser("selftest", help="enumeration oracle checks on random discrete models")
    common(sp)
    sp.add_argument("--instances", type=int, default=5)
    sp.add_argument("--n", type=int, default=20000)
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.fn(args))
    except h.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
