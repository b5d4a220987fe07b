"""Experiment orchestration: configs, seeded row execution, CSV and JSON reports."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import ais_engine as ae
from . import bounds_static as bs
from . import energy_training as et
from . import multisample_ais as ms
from ._numerics import as_rng
from .models import (MODEL_KINDS, Capability, DiscreteJoint, JointModel, UnsupportedCapabilityError,
                     model_from_config)
from .results import BoundEstimate, SandwichBounds
from .variational import (ConditionalGaussian, Critic, PriorProposal, TableCritic, TableProposal,
                          constant_critic, load_checkpoint, optimal_critic)

CSV_HEADER_COMMENT = "# mibounds-csv v1; units=nats"
CSV_COLUMNS = ("row_id", "estimator", "K", "T", "n", "seed", "status", "lower_mi", "lower_se",
               "lower_ci_lo", "lower_ci_hi", "upper_mi", "upper_se", "upper_ci_lo", "upper_ci_hi",
               "stochastic", "approximate", "reference_mi", "tight", "reason")
GAP_COLUMNS = ("T", "K", "variant", "lower", "upper", "gap", "gap_se", "predicted_gap")
DECOMP_COLUMNS = ("estimator", "K", "ba_term", "contrastive_term", "total", "logK", "ba_se",
                  "contrastive_se", "total_se", "cap_ok")

KNOWN_ESTIMATORS = ("ba_lower", "ba_upper", "iwae_lower", "iwae_upper", "s_infonce",
                    "s_infonce_upper", "giwae", "infonce", "riwae", "ais", "im_ais", "ir_ais",
                    "cr_ais", "bdmc", "mine_dv", "mine_f", "ibal")


class ConfigError(ValueError):
    """The experiment configuration is malformed."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    model: dict
    estimators: list
    n: int = 1000
    seed: int = 0
    workers: int = 1
    tight_threshold: float = 2.0
    proposal: dict = field(default_factory=lambda: {"kind": "prior"})
    output: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model": self.model, "estimators": self.estimators, "n": self.n, "seed": self.seed,
                "workers": self.workers, "tight_threshold": self.tight_threshold,
                "proposal": self.proposal, "output": self.output, **self.extra}


_TOP_KEYS = {"model", "estimators", "n", "seed", "workers", "tight_threshold", "proposal", "output",
             "sweep", "bridge", "decompose", "critic", "ibal"}


def _require_int(d, key, where, minimum=1):
    v = d.get(key)
    if v is None:
        return
    vals = v if isinstance(v, list) else [v]
    for item in vals:
        if item == "auto":
            continue
        if not isinstance(item, int) or isinstance(item, bool) or item < minimum:
            raise ConfigError(f"{where}: '{key}' must be an integer >= {minimum} (or a list of them), got {v!r}")


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a config mapping; errors name the offending key."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}; allowed: {sorted(_TOP_KEYS)}")
    if "model" not in data:
        raise ConfigError("missing 'model' section (e.g. model: {kind: linear_gaussian, latent_dim: 10, obs_dim: 100, seed: 0})")
    if not isinstance(data["model"], dict) or "kind" not in data["model"]:
        raise ConfigError("'model' must be a mapping with a 'kind' key")
    if data["model"]["kind"] not in MODEL_KINDS:
        raise ConfigError(f"model.kind {data['model']['kind']!r} unknown; expected one of {', '.join(MODEL_KINDS)}")
    ests = data.get("estimators", [])
    if not isinstance(ests, list):
        raise ConfigError("'estimators' must be a list")
    for i, e in enumerate(ests):
        where = f"estimators[{i}]"
        if not isinstance(e, dict) or "id" not in e:
            raise ConfigError(f"{where} must be a mapping with an 'id' key")
        if e["id"] == "giwae_upper":
            raise ConfigError(f"{where}: {bs.GIWAE_UPPER_MESSAGE}")
        if e["id"] not in KNOWN_ESTIMATORS:
            raise ConfigError(f"{where}: unknown estimator id {e['id']!r}; known: {', '.join(KNOWN_ESTIMATORS)}")
        _require_int(e, "K", where)
        _require_int(e, "T", where)
        if e.get("schedule", "linear") not in ("linear", "sigmoid"):
            raise ConfigError(f"{where}: schedule must be 'linear' or 'sigmoid'")
        if e.get("kernel", "hmc") not in ("hmc", "perfect", "metropolis"):
            raise ConfigError(f"{where}: kernel must be hmc, perfect or metropolis")
    for key in ("n", "seed", "workers"):
        _require_int(data, key, "config", minimum=0 if key == "seed" else 1)
    thr = data.get("tight_threshold", 2.0)
    if not isinstance(thr, (int, float)) or thr <= 0:
        raise ConfigError("'tight_threshold' must be a positive number")
    extra = {k: data[k] for k in ("sweep", "bridge", "decompose", "critic", "ibal") if k in data}
    return ExperimentConfig(model=dict(data["model"]), estimators=list(ests), n=int(data.get("n", 1000)),
                            seed=int(data.get("seed", 0)), workers=int(data.get("workers", 1)),
                            tight_threshold=float(thr),
                            proposal=dict(data.get("proposal") or {"kind": "prior"}),
                            output=dict(data.get("output") or {}), extra=extra)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return parse_config(data or {})


def row_seed(master: int, index: int) -> int:
    """Seed for one row, derived from the master seed and the row index only."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# building blocks from config
# ---------------------------------------------------------------------------

def build_proposal(model: JointModel, spec: dict | None, seed: int):
    spec = dict(spec or {"kind": "prior"})
    kind = spec.get("kind", "prior")
    if kind == "prior":
        return PriorProposal(model)
    if kind == "table":
        if not isinstance(model, DiscreteJoint):
            raise ConfigError("table proposals need a discrete model")
        src = spec.get("source", "random")
        if src == "prior":
            return TableProposal.prior(model)
        if src == "posterior":
            return TableProposal.posterior(model)
        return TableProposal.random(model.nx, model.nz, spec.get("seed", seed))
    if kind == "conditional_gaussian":
        q = ConditionalGaussian(model.obs_dim, model.latent_dim, spec.get("encoder", "affine"),
                                spec.get("hidden", 64), seed=spec.get("seed", seed))
        fit = spec.get("fit")
        if fit:
            et.train_bound("ba", model, q, None, 1, int(fit.get("steps", 1000)),
                           int(fit.get("batch", 64)), fit.get("seed", seed), lr=float(fit.get("lr", 1e-2)))
        return q
    raise ConfigError(f"unknown proposal kind {kind!r}; expected prior, table or conditional_gaussian")


def build_critic(model: JointModel, q, spec: dict | None, seed: int, K: int = 1):
    spec = dict(spec or {"kind": "mlp"})
    if "checkpoint" in spec:
        return load_checkpoint(spec["checkpoint"])
    kind = spec.get("kind", "mlp")
    if kind == "constant":
        if model.discrete:
            return TableCritic.constant(model.nx, model.nz, spec.get("c", 0.0))
        return Critic.constant(model.obs_dim, model.latent_dim, spec.get("c", 0.0),
                               tuple(spec.get("hidden", (256, 256))))
    if kind == "optimal":
        return optimal_critic(model, q)
    if kind == "table":
        if not model.discrete:
            raise ConfigError("table critics need a discrete model")
        crit = TableCritic.random(model.nx, model.nz, spec.get("seed", seed), spec.get("scale", 1.0))
    elif kind == "mlp":
        if model.discrete:
            raise ConfigError("use a table critic for discrete models")
        crit = Critic(model.obs_dim, model.latent_dim, tuple(spec.get("hidden", (256, 256))),
                      seed=spec.get("seed", seed))
    else:
        raise ConfigError(f"unknown critic kind {kind!r}")
    if spec.get("train"):
        train_critic(model, q, crit, spec["train"], seed, K)
    return crit


def train_critic(model: JointModel, q, critic, train: dict, seed: int, K: int = 1) -> et.TrainState:
    """Train ``critic`` in place from a ``train`` config section."""
    objective = str(train.get("objective", "giwae")).replace("-", "_")
    tseed = train.get("seed", seed)
    steps, lr = int(train.get("steps", 1000)), float(train.get("lr", 1e-4))
    if objective == "mine_ais":
        return et.train_mine_ais(model, q, critic, steps, int(train.get("batch", 32)), train.get("mcmc"),
                                 tseed, lr=lr)
    if objective not in et.OBJECTIVES:
        raise ConfigError(f"unknown training objective {objective!r}; known: {', '.join(et.OBJECTIVES)}, mine_ais")
    return et.train_bound(objective, model, q, critic, int(train.get("K", K)), steps,
                          int(train.get("batch", 64)), tseed, lr=lr,
                          schedule=train.get("schedule", "joint"), train_q=False)


def build_kernel(model, path, spec: dict, seed: int, x_warm=None):
    name = spec.get("kernel", "metropolis" if model.discrete else "hmc")
    kernel = ae.kernel_from_name(name, model.discrete, spec.get("step_size", 0.05),
                                 spec.get("leapfrog", 20))
    adapt = spec.get("adapt", name == "hmc")
    diag = {}
    if name == "hmc" and adapt and path.T > 1:
        if x_warm is None:
            x_warm, _ = model.sample_joint(int(spec.get("warmup_batch", 32)), seed)
        res = ae.adapt_step_size(kernel, path, x_warm, warmup_iters=int(spec.get("warmup", 2)),
                                 seed=seed)
        kernel = res.kernel
        diag = {"adapted_accept": res.mean_accept, "accept_in_band": res.in_band}
    return kernel, diag


# ---------------------------------------------------------------------------
# rows
# ---------------------------------------------------------------------------

@dataclass
class Row:
    row_id: int
    estimator: str
    K: int | None
    T: int | None
    n: int
    seed: int
    status: str = "OK"
    lower: BoundEstimate | None = None
    upper: BoundEstimate | None = None
    reference_mi: float | None = None
    tight: bool | None = None
    reason: str = ""
    diagnostics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def csv_record(self) -> list[str]:
        def f(v):
            if v is None:
                return ""
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, float):
                return repr(v)
            return str(v)

        lo, hi = self.lower, self.upper
        any_b = lo or hi
        return [f(self.row_id), self.estimator, f(self.K), f(self.T), f(self.n), f(self.seed), self.status,
                f(lo.value if lo else None), f(lo.std_error if lo else None),
                f(lo.ci95[0] if lo else None), f(lo.ci95[1] if lo else None),
                f(hi.value if hi else None), f(hi.std_error if hi else None),
                f(hi.ci95[0] if hi else None), f(hi.ci95[1] if hi else None),
                f(any_b.stochastic if any_b else None),
                f(bool((lo and lo.approximate) or (hi and hi.approximate)) if any_b else None),
                f(self.reference_mi), f(self.tight), self.reason]


def expand_rows(cfg: ExperimentConfig) -> list[dict]:
    """One entry per (estimator, K, T); "auto" K uses the worker count."""
    rows = []
    for spec in cfg.estimators:
        Ks = spec.get("K", 1)
        Ts = spec.get("T", 1)
        Ks = Ks if isinstance(Ks, list) else [Ks]
        Ts = Ts if isinstance(Ts, list) else [Ts]
        for K, T in itertools.product(Ks, Ts):
            if K == "auto":
                K = max(1, cfg.workers)
            if T == "auto":
                budget = int(spec.get("budget", 1000))
                T = max(1, budget // K)
            rows.append({**spec, "K": int(K), "T": int(T)})
    return rows


def _paired_mi(model, est: BoundEstimate, n: int, seed: int) -> float | None:
    """Control-variate estimate: analytic MI + mean(draw - [log p(x|z) - log p(x)]).

    Every estimator draws its outer (x, z) pairs first from the seed, so the
    pairs are regenerated here without rerunning the estimator.
    """
    if est is None or est.draws is None or est.draws.size != n:
        return None
    if not (model.has(Capability.ANALYTIC_MI) and hasattr(model, "log_evidence")):
        return None
    try:
        x, z = model.sample_joint(n, seed)
        cv = model.log_likelihood(x, z) - model.log_evidence(x)
    except NotImplementedError:
        return None
    return float(model.analytic_mi() + np.mean(est.draws - cv))


def run_row(model: JointModel, cfg: ExperimentConfig, spec: dict, index: int) -> Row:
    est = spec["id"]
    K, T = int(spec.get("K", 1)), int(spec.get("T", 1))
    n = int(spec.get("n", cfg.n))
    seed = row_seed(cfg.seed, index)
    row = Row(index, est, K, T, n, seed)
    try:
        row.reference_mi = bs.analytic_reference(model)
    except NotImplementedError:
        row.reference_mi = None
    t0 = time.perf_counter()
    try:
        q = build_proposal(model, spec.get("proposal", cfg.proposal), seed)
        lo, hi, diag = _dispatch(model, q, spec, K, T, n, seed)
        row.lower, row.upper = lo, hi
        row.diagnostics.update(diag)
        for side, b in (("lower", lo), ("upper", hi)):
            p = _paired_mi(model, b, n, seed)
            if p is not None:
                row.diagnostics[f"paired_{side}_mi"] = p
        row.tight = _tight(row, cfg.tight_threshold)
    except UnsupportedCapabilityError as exc:
        row.status, row.reason = "SKIPPED", str(exc)
    except (ValueError, RuntimeError, NotImplementedError, ArithmeticError) as exc:
        row.status, row.reason = "FAILED", f"{type(exc).__name__}: {exc}"
    row.wall_time = time.perf_counter() - t0
    return row


def _tight(row: Row, threshold: float) -> bool | None:
    vals = [b.value for b in (row.lower, row.upper) if b is not None]
    if not vals:
        return None
    if row.reference_mi is not None:
        return all(abs(v - row.reference_mi) < threshold for v in vals)
    if row.lower is not None and row.upper is not None:
        return (row.upper.value - row.lower.value) < threshold
    return None


def _sandwich_sides(s: SandwichBounds):
    return s.lower_mi, s.upper_mi


def _dispatch(model, q, spec, K, T, n, seed):
    est = spec["id"]
    diag: dict[str, Any] = {}
    if est == "ba_lower":
        return bs.ba_lower(model, q, n, seed), None, diag
    if est == "ba_upper":
        return None, bs.ba_upper(model, q, n, seed), diag
    if est == "iwae_lower":
        b, dec = bs.iwae_lower_mi(model, q, K, n, seed)
        diag.update(ba_term=dec.ba_term, contrastive_term=dec.contrastive_term)
        return b, None, diag
    if est == "iwae_upper":
        return None, bs.iwae_upper_mi(model, q, K, n, seed), diag
    if est == "s_infonce":
        b, dec = bs.s_infonce(model, K, n, seed)
        diag.update(ba_term=dec.ba_term, contrastive_term=dec.contrastive_term)
        return b, None, diag
    if est == "s_infonce_upper":
        return None, bs.s_infonce_upper(model, K, n, seed), diag
    if est in ("giwae", "infonce"):
        qq = PriorProposal(model) if est == "infonce" else q
        critic = build_critic(model, qq, spec.get("critic"), seed, K)
        fn = bs.infonce if est == "infonce" else None
        b, dec = fn(model, critic, K, n, seed) if fn else bs.giwae_lower(model, qq, critic, K, n, seed)
        diag.update(ba_term=dec.ba_term, contrastive_term=dec.contrastive_term)
        return b, None, diag
    if est == "riwae":
        return (*_sandwich_sides(bs.riwae_bounds(model, q, K, n, seed)), diag)
    if est in ("mine_dv", "mine_f"):
        critic = build_critic(model, q, spec.get("critic"), seed, K)
        fn = et.mine_dv if est == "mine_dv" else et.mine_f
        return fn(model, q, critic, n, seed), None, diag
    path = ae.AnnealedPath.for_model(model, q, T, spec.get("schedule", "linear"))
    if est == "ibal":
        critic = build_critic(model, q, spec.get("critic"), seed, K)
        energy = et.EnergyPosterior(q, critic)
        epath = energy.path(T, spec.get("schedule", "linear"))
        kernel, kd = build_kernel(model, epath, spec, seed)
        diag.update(kd)
        hi = et.eval_ibal_ais(model, energy, T, K, n, seed, et.UPPER, kernel, spec.get("schedule", "linear"))
        lo = et.eval_ibal_ais(model, energy, T, K, n, seed, et.APPROX_LOWER, kernel,
                              spec.get("schedule", "linear"))
        diag.update(upper_diag=hi.diagnostics, lower_diag=lo.diagnostics)
        return lo, hi, diag
    kernel, kd = build_kernel(model, path, spec, seed)
    diag.update(kd)
    if est == "ais":
        s = ms.ais_bounds(model, path, kernel, T, n, seed)
    elif est == "bdmc":
        s = ms.bdmc(model, path, kernel, K, T, n, seed)
    else:
        s = ms.ESTIMATORS[est](model, path, kernel, K, T, n, seed)
    diag["chains"] = s.diagnostics
    return (*_sandwich_sides(s), diag)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    rows: list
    environment: dict

    def csv_text(self) -> str:
        return rows_to_csv(CSV_COLUMNS, [r.csv_record() for r in self.rows])

    def to_json(self) -> dict:
        def b(est):
            if est is None:
                return None
            return {"value": est.value, "std_error": est.std_error, "ci95": list(est.ci95),
                    "direction": est.direction.value, "stochastic": est.stochastic,
                    "approximate": est.approximate, "n_outer": est.n_outer,
                    "diagnostics": _jsonable(est.diagnostics)}

        rows = [{"row_id": r.row_id, "estimator": r.estimator, "K": r.K, "T": r.T, "n": r.n,
                 "seed": r.seed, "status": r.status, "reason": r.reason, "lower_mi": b(r.lower),
                 "upper_mi": b(r.upper), "reference_mi": r.reference_mi, "tight": r.tight,
                 "diagnostics": _jsonable(r.diagnostics), "wall_time_s": r.wall_time}
                for r in self.rows]
        return {"schema": "mibounds-report v1", "units": "nats", "config": self.config, "rows": rows,
                "environment": self.environment}

    @property
    def any_failed(self) -> bool:
        return any(r.status == "FAILED" for r in self.rows)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def rows_to_csv(columns, records) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER_COMMENT + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow(rec)
    return buf.getvalue()


def read_csv(path_or_text) -> list[dict]:
    text = Path(path_or_text).read_text() if not str(path_or_text).startswith("#") else str(path_or_text)
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def environment() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "platform": platform.platform()}


def run_experiment(config, workers: int | None = None, out=None) -> RunReport:
    """Run every (estimator, K, T) row; rows fail or skip independently.

    Each row's seed depends only on the master seed and the row index, so the
    output does not depend on the worker count or scheduling order.
    """
    cfg = config if isinstance(config, ExperimentConfig) else parse_config(config)
    if workers is not None:
        cfg.workers = int(workers)
    try:
        model = model_from_config(cfg.model)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    specs = expand_rows(cfg)
    if cfg.workers > 1 and len(specs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(lambda a: run_row(model, cfg, a[1], a[0]), enumerate(specs)))
    else:
        rows = [run_row(model, cfg, s, i) for i, s in enumerate(specs)]
    report = RunReport(cfg.to_dict(), rows, environment())
    write_outputs(report, out or cfg.output)
    return report


def write_outputs(report: RunReport, out) -> None:
    if not out:
        return
    if isinstance(out, (str, Path)):
        out = {"csv": str(out)}
    if out.get("csv"):
        Path(out["csv"]).parent.mkdir(parents=True, exist_ok=True)
        Path(out["csv"]).write_text(report.csv_text())
    if out.get("json"):
        Path(out["json"]).parent.mkdir(parents=True, exist_ok=True)
        Path(out["json"]).write_text(json.dumps(report.to_json(), indent=2))


# ---------------------------------------------------------------------------
# gap-vs-T sweeps and decomposition tables
# ---------------------------------------------------------------------------

def loglog_slope(T, gap) -> float:
    T = np.asarray(T, dtype=float)
    gap = np.asarray(gap, dtype=float)
    return float(np.polyfit(np.log(T), np.log(gap), 1)[0])


def sweep_gap_vs_T(config, out=None) -> list[dict]:
    """Sandwich gap at each T.

    With a ``bridge`` section (Gaussian base and target) the gap comes from
    perfect transitions; otherwise the ``sweep`` section names an AIS variant
    and the gap is upper minus lower log Z on the configured model.
    """
    data = config.to_dict() if isinstance(config, ExperimentConfig) else dict(config)
    sweep = dict(data.get("sweep") or {})
    Ts = sweep.get("T", [10, 100, 1000])
    seed = int(data.get("seed", 0))
    n = int(data.get("n", 1000))
    rows = []
    if "bridge" in data:
        br = data["bridge"]
        base = ae.FixedGaussian(br.get("base_mean", 0.0), br.get("base_std", 1.0))
        tgt = ae.FixedGaussian(br.get("target_mean", 3.0), br.get("target_std", 1.0),
                               br.get("target_log_scale", 0.0))
        x0 = np.zeros(1)
        for i, T in enumerate(Ts):
            path = ae.AnnealedPath(base, tgt, T=int(T), kind=sweep.get("schedule", "linear"))
            g = ae.perfect_transition_gap(path, x0, n, row_seed(seed, i))
            rows.append({"T": int(T), "K": 1, "variant": "ais_perfect", "lower": g.elbo, "upper": g.eubo,
                         "gap": g.gap, "gap_se": g.std_error, "predicted_gap": g.predicted})
    else:
        cfg = parse_config({k: v for k, v in data.items() if k != "sweep"} | {"estimators": []})
        model = model_from_config(cfg.model)
        variant = sweep.get("variant", "bdmc")
        K = int(sweep.get("K", 1))
        for i, T in enumerate(Ts):
            s_seed = row_seed(seed, i)
            q = build_proposal(model, cfg.proposal, s_seed)
            path = ae.AnnealedPath.for_model(model, q, int(T), sweep.get("schedule", "linear"))
            kernel, _ = build_kernel(model, path, sweep, s_seed)
            fn = ms.bdmc if variant == "bdmc" else ms.ESTIMATORS[variant]
            s = fn(model, path, kernel, K, int(T), n, s_seed)
            d = s.upper_logz.draws - s.lower_logz.draws
            rows.append({"T": int(T), "K": K, "variant": variant, "lower": s.lower_logz.value,
                         "upper": s.upper_logz.value, "gap": float(np.mean(d)),
                         "gap_se": float(np.std(d, ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0,
                         "predicted_gap": None})
    if out:
        Path(out).write_text(rows_to_csv(GAP_COLUMNS, [[_fmt(r[c]) for c in GAP_COLUMNS] for r in rows]))
    return rows


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def decompose_report(config, out=None) -> list[dict]:
    """BA term and contrastive term of IWAE-style lower bounds, one row per (estimator, K)."""
    data = config.to_dict() if isinstance(config, ExperimentConfig) else dict(config)
    dec_cfg = dict(data.get("decompose") or {})
    cfg = parse_config({k: v for k, v in data.items() if k != "decompose"} | {"estimators": []})
    model = model_from_config(cfg.model)
    rows = []
    i = 0
    for est in dec_cfg.get("estimators", ["iwae_lower", "s_infonce"]):
        for K in dec_cfg.get("K", [1, 10, 100]):
            seed = row_seed(cfg.seed, i)
            i += 1
            q = build_proposal(model, cfg.proposal, seed)
            if est == "iwae_lower":
                _, d = bs.iwae_lower_mi(model, q, int(K), cfg.n, seed)
            elif est == "s_infonce":
                _, d = bs.s_infonce(model, int(K), cfg.n, seed)
            elif est in ("giwae", "infonce"):
                qq = PriorProposal(model) if est == "infonce" else q
                critic = build_critic(model, qq, dec_cfg.get("critic"), seed, int(K))
                _, d = bs.giwae_lower(model, qq, critic, int(K), cfg.n, seed)
            else:
                raise ConfigError(f"no decomposition for estimator {est!r}")
            logk = float(np.log(int(K)))
            rows.append({"estimator": est, "K": int(K), "ba_term": d.ba_term,
                         "contrastive_term": d.contrastive_term, "total": d.total, "logK": logk,
                         "ba_se": d.ba_se, "contrastive_se": d.contrastive_se, "total_se": d.total_se,
                         "cap_ok": bool(d.contrastive_term <= logk + 3.0 * d.contrastive_se)})
    if out:
        Path(out).write_text(rows_to_csv(DECOMP_COLUMNS, [[_fmt(r[c]) if not isinstance(r[c], bool)
                                                            else ("true" if r[c] else "false")
                                                            for c in DECOMP_COLUMNS] for r in rows]))
    return rows


# ---------------------------------------------------------------------------
# self-test: enumeration oracles against identities and Monte Carlo
# ---------------------------------------------------------------------------

def selftest(instances: int = 5, seed: int = 0, n: int = 20000) -> list[tuple[str, bool, str]]:
    """Deterministic identities to 1e-10 and MC-vs-enumeration agreement to 4 sigma."""
    from . import enumeration as en

    checks: list[tuple[str, bool, str]] = []

    def add(name, ok, detail=""):
        checks.append((name, bool(ok), detail))

    rng = as_rng(seed)
    for i in range(instances):
        nx, nz = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        s = int(rng.integers(1 << 30))
        m = DiscreteJoint.random(nx, nz, s)
        q = TableProposal.random(nx, nz, s + 1)
        c = TableCritic.random(nx, nz, s + 2)
        tag = f"[{i}:{nx}x{nz}]"
        add(f"mi routes {tag}", abs(m.analytic_mi() - m.mutual_information()) < 1e-12)
        for K in (1, 2, 3):
            opt = TableCritic(en.optimal_critic_table(m, q, shift=rng.normal(size=nx)))
            add(f"giwae@T*=iwae K={K} {tag}", abs(en.giwae(m, q, opt, K)[0] - en.iwae_lower(m, q, K)[0]) < 1e-10)
            gap = en.iwae_lower(m, q, K)[0] - en.giwae(m, q, c, K)[0]
            add(f"index-KL identity K={K} {tag}", abs(gap - en.index_kl(m, q, c, K)) < 1e-10)
            const = TableCritic.constant(nx, nz, 0.7)
            add(f"constant critic=BA K={K} {tag}", abs(en.giwae(m, q, const, K)[0] - en.ba_lower(m, q)) < 1e-10)
        f, dv, ib, mi = en.mine_f(m, q, c), en.mine_dv(m, q, c), en.ibal(m, q, c), m.analytic_mi()
        add(f"ladder {tag}", f <= dv + 1e-12 and dv <= ib + 1e-12 and ib <= mi + 1e-12)
        add(f"marginal-KL identity {tag}", abs(ib - dv - en.marginal_kl(m, q, c)) < 1e-10)
        add(f"posterior-KL cap {tag}", ib - en.ba_lower(m, q) <= en.posterior_kl(m, q) + 1e-12)
        for name, mc, ex in (
            ("ba_lower", bs.ba_lower(m, q, n, s), en.ba_lower(m, q)),
            ("iwae_lower K=3", bs.iwae_lower_mi(m, q, 3, n, s)[0], en.iwae_lower(m, q, 3)[0]),
            ("iwae_upper K=3", bs.iwae_upper_mi(m, q, 3, n, s), en.iwae_upper(m, q, 3)),
            ("giwae K=2", bs.giwae_lower(m, q, c, 2, n, s)[0], en.giwae(m, q, c, 2)[0]),
        ):
            z = (mc.value - ex) / max(mc.std_error, 1e-300)
            add(f"MC vs enumeration {name} {tag}", abs(z) < 4.0, f"z={z:+.2f}")
    return checks
