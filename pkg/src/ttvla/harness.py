"""Seeded multi-trial evaluation, ablations, theory runs and result files."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import baselines, checkpoint, envsim
from .adapt import AdvantageConfig, TTVLAAdapter, UpdateConfig, run_episode, verify_theory
from .numkit import ConfigError, ParamStore, Rng
from .policy import AdapterMask, apply_adapter
from .progress import EstimatorSpec

log = logging.getLogger(__name__)

METHODS = ("frozen", "ttvla", "gae-ppo", "tlm", "ttrl")
DEFAULT_CHECKPOINT = "checkpoints/bc.ckpt"
DEFAULT_LR = 5e-4


@dataclass
class ExperimentConfig:
    suite: str = "execution"
    variant: Optional[str] = None
    method: str = "ttvla"
    trials: int = 80
    seeds: tuple = (0, 1, 2)
    horizon: int = envsim.DEFAULT_HORIZON
    # update
    k: int = 8
    epsilon: float = 0.2
    lr: float = DEFAULT_LR
    epochs: int = 1
    c1: Optional[float] = None  # None -> 0 for value-free methods, 0.5 for gae-ppo
    c2: float = 0.0
    weight_decay: float = 0.0
    # advantage; None -> the method's preset
    gamma: Optional[float] = None
    lam: Optional[float] = None
    truncation: Optional[int] = None
    value_mode: Optional[str] = None
    # baselines
    tlm_coefficient: float = 0.1
    tlm_threshold: float = 0.0
    vote_group: int = 8
    # misc
    adapter: str = "full"
    estimator: str = "oracle"
    init_progress: str = "baseline"
    restore: str = "episode"
    checkpoint: str = DEFAULT_CHECKPOINT
    auto_pretrain: bool = False
    pretrain_seed: int = 0
    pretrain_episodes: int = 600
    out: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.restore not in ("episode", "never"):
            raise ConfigError("restore must be 'episode' or 'never'")
        if self.trials < 1 or not self.seeds:
            raise ConfigError("need at least one trial and one seed")
        envsim.ShiftSpec.make(self.suite, self.variant)
        AdapterMask.parse(self.adapter)
        EstimatorSpec.parse(self.estimator)

    @property
    def shift(self) -> envsim.ShiftSpec:
        return envsim.ShiftSpec.make(self.suite, self.variant)

    def update_config(self) -> UpdateConfig:
        c1 = self.c1 if self.c1 is not None else (0.5 if self.method == "gae-ppo" else 0.0)
        return UpdateConfig(
            epsilon=self.epsilon,
            k=self.k,
            lr=self.lr,
            epochs=self.epochs,
            c1=c1,
            c2=self.c2,
            weight_decay=self.weight_decay,
        )

    def advantage_config(self) -> AdvantageConfig:
        base = AdvantageConfig.gae_baseline() if self.method == "gae-ppo" else AdvantageConfig.ttvla()
        over = {
            "gamma": self.gamma,
            "lam": self.lam,
            "truncation": self.truncation,
            "value_mode": self.value_mode,
        }
        return replace(base, **{k: v for k, v in over.items() if v is not None})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def load_config_file(path) -> dict:
    """JSON object whose keys mirror the CLI flags (``lambda`` and ``lam`` both accepted)."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    data = {k.replace("-", "_"): v for k, v in data.items()}
    if "lambda" in data:
        data["lam"] = data.pop("lambda")
    return data


# --------------------------------------------------------------------------
# checkpoints


def obtain_checkpoint(cfg: ExperimentConfig) -> ParamStore:
    path = Path(cfg.checkpoint)
    if path.exists():
        params, _ = checkpoint.load(path)
        return params
    if not cfg.auto_pretrain:
        raise FileNotFoundError(
            f"no pretrained checkpoint at {path}; run `ttvla pretrain` or enable auto_pretrain"
        )
    params = pretrain(cfg.pretrain_episodes, cfg.pretrain_seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, params)
    return params


def pretrain(n_episodes: int = 600, seed: int = 0) -> ParamStore:
    return baselines.pretrain_bc(n_episodes, Rng(seed))


def save_checkpoint(path, params: ParamStore) -> None:
    checkpoint.save(
        path,
        params,
        checkpoint.CheckpointMeta(
            history=(params.shape("layer0.weight")[0] - envsim.N_INSTRUCTIONS) // envsim.D_OBS,
            d_obs=envsim.D_OBS,
            n_instructions=envsim.N_INSTRUCTIONS,
        ),
    )


# --------------------------------------------------------------------------
# trials


def make_adapter(cfg: ExperimentConfig, rng: Rng):
    ucfg = cfg.update_config()
    if cfg.method == "frozen":
        return None
    if cfg.method == "ttvla":
        return TTVLAAdapter(ucfg, cfg.advantage_config())
    if cfg.method == "gae-ppo":
        return baselines.GAEPPOAdapter(ucfg, cfg.advantage_config(), rng)
    if cfg.method == "tlm":
        tlm = baselines.TlmConfig(cfg.tlm_coefficient, cfg.tlm_threshold, cfg.k)
        return baselines.TLMAdapter(tlm, cfg.lr)
    return baselines.TTRLAdapter(ucfg, cfg.vote_group)


def history_of(params: ParamStore) -> int:
    return (params.shape("layer0.weight")[0] - envsim.N_INSTRUCTIONS) // envsim.D_OBS


def run_seed(cfg: ExperimentConfig, seed: int, base: ParamStore) -> list[dict]:
    """All trials of one seed. Trial i of seed s replays the same episode stream for every method."""
    seed_rng = Rng(seed)
    mask = AdapterMask.parse(cfg.adapter)
    start = apply_adapter(base, mask, seed_rng.spawn("adapter-init"))
    snap = start.snapshot()
    params = start
    estimator = EstimatorSpec.parse(cfg.estimator)
    adapt = cfg.method != "frozen"
    adapter = make_adapter(cfg, seed_rng.spawn("method"))
    history = history_of(base)
    records = []
    for trial in range(cfg.trials):
        if cfg.restore == "episode":
            params.restore(snap)
            if adapter is not None:
                adapter.reset()
        ep_cfg = envsim.EpisodeConfig(horizon=cfg.horizon, seed=seed * 100003 + trial, shift=cfg.shift)
        rep = run_episode(
            ep_cfg,
            params,
            cfg.update_config(),
            cfg.advantage_config(),
            estimator,
            adapt,
            seed_rng.spawn("trial", trial),
            adapter=adapter,
            history=history,
            init_progress=cfg.init_progress,
        )
        if adapt is False and params.digest() != start.digest():
            raise RuntimeError("frozen evaluation mutated the checkpoint")
        records.append(
            {
                "method": cfg.method,
                "suite": cfg.suite,
                "variant": cfg.shift.variant,
                "seed": seed,
                "trial": trial,
                **rep.to_record(),
            }
        )
    return records


def _run_seed_job(args):
    cfg_dict, seed, blob = args
    params, _ = checkpoint.loads(blob)
    return run_seed(ExperimentConfig.from_dict(cfg_dict), seed, params)


def run_trials(cfg: ExperimentConfig, base: ParamStore) -> list[dict]:
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        blob = checkpoint.dumps(
            base, checkpoint.CheckpointMeta(history_of(base), envsim.D_OBS, envsim.N_INSTRUCTIONS)
        )
        jobs = [(cfg.to_dict(), s, blob) for s in cfg.seeds]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(_run_seed_job, jobs))
    else:
        parts = [run_seed(cfg, s, base) for s in cfg.seeds]
    out = [r for part in parts for r in part]
    out.sort(key=lambda r: (r["method"], r["suite"], r["variant"], r["seed"], r["trial"]))
    return out


# --------------------------------------------------------------------------
# aggregation


@dataclass
class ResultRow:
    method: str
    suite: str
    variant: str
    episodes: int
    seed_rates: tuple
    seed_std: float
    mean: float
    delta: Optional[float] = None
    relative_gain: Optional[float] = None

    def key(self):
        return (self.suite, self.variant, self.method)


def aggregate(records: Sequence[dict], label: Optional[str] = None) -> ResultRow:
    if not records:
        raise ConfigError("no trial records to aggregate")
    by_seed: dict[int, list[int]] = {}
    for r in records:
        by_seed.setdefault(r["seed"], []).append(int(r["success"]))
    rates = tuple(sum(v) / len(v) for _, v in sorted(by_seed.items()))
    total = sum(len(v) for v in by_seed.values())
    wins = sum(sum(v) for v in by_seed.values())
    r0 = records[0]
    return ResultRow(
        method=label or r0["method"],
        suite=r0["suite"],
        variant=r0["variant"],
        episodes=total,
        seed_rates=rates,
        seed_std=statistics.stdev(rates) if len(rates) > 1 else 0.0,
        mean=wins / total,
    )


def attach_delta(row: ResultRow, frozen: ResultRow) -> ResultRow:
    row.delta = row.mean - frozen.mean
    row.relative_gain = None if frozen.mean == 0 else row.delta / frozen.mean
    return row


@dataclass
class ExperimentResult:
    rows: list
    records: list = field(default_factory=list)


def run_experiment(cfg: ExperimentConfig, base: Optional[ParamStore] = None) -> ExperimentResult:
    """Frozen arm plus ``cfg.method`` on identical episode streams."""
    base = base if base is not None else obtain_checkpoint(cfg)
    frozen_records = run_trials(replace(cfg, method="frozen"), base)
    frozen = attach_delta(aggregate(frozen_records), aggregate(frozen_records))
    rows, records = [frozen], list(frozen_records)
    if cfg.method != "frozen":
        recs = run_trials(cfg, base)
        rows.append(attach_delta(aggregate(recs), frozen))
        records += recs
    result = ExperimentResult(rows, records)
    if cfg.out:
        write_outputs(cfg, result)
    return result


ABLATIONS = ("reward-design", "update-interval")
INTERVALS = (1, 4, 8, 16)


def ablation_arms(kind: str, cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    if kind == "update-interval":
        return [(f"ttvla:k={k}", replace(cfg, method="ttvla", k=k)) for k in INTERVALS]
    if kind == "reward-design":
        return [
            ("ttvla:one-step", replace(cfg, method="ttvla")),
            ("gae-ppo:gae", replace(cfg, method="gae-ppo")),
        ]
    raise ConfigError(f"unknown ablation {kind!r}; choose from {ABLATIONS}")


def run_ablation(
    kind: str,
    cfg: ExperimentConfig,
    suites: Optional[Sequence[str]] = None,
    base: Optional[ParamStore] = None,
) -> ExperimentResult:
    """One row per arm and suite; deltas are against a frozen run whose raw
    records are kept alongside the arms' records."""
    base = base if base is not None else obtain_checkpoint(cfg)
    rows, records = [], []
    for suite in suites or (cfg.suite,):
        scfg = replace(cfg, suite=suite, variant=cfg.variant if suite == cfg.suite else None, out=None)
        frozen_records = run_trials(replace(scfg, method="frozen"), base)
        frozen = aggregate(frozen_records)
        records += frozen_records
        for label, arm in ablation_arms(kind, scfg):
            recs = run_trials(arm, base)
            for r in recs:
                r["arm"] = label
            rows.append(attach_delta(aggregate(recs, label), frozen))
            records += recs
    result = ExperimentResult(rows, records)
    if cfg.out:
        write_outputs(cfg, result)
    return result


# --------------------------------------------------------------------------
# theory


@dataclass
class TheorySummary:
    n_traces: int
    n_checks: int
    violations: list
    max_abs_delta_gamma1: float
    max_abs_adv_gamma1: float
    max_bias_residual: float
    failing_traces: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_record(self) -> dict:
        return asdict(self)


THEORY_GAMMAS = (0.0, 0.5, 0.9, 0.99, 1.0)
THEORY_LAMBDAS = (0.0, 0.5, 0.95, 1.0)


def random_trace(rng: Rng, length: int, kind: str) -> np.ndarray:
    """Progress traces in [0, 1]: drifting-upward or oscillating."""
    if kind == "monotone":
        steps = rng.uniform(-0.02, 0.06, size=length - 1)
        trace = np.concatenate([[rng.uniform(0, 0.3)], steps]).cumsum()
    elif kind == "oscillating":
        base = rng.uniform(0.2, 0.8)
        amp = rng.uniform(0.05, 0.2)
        trace = base + amp * np.sin(np.arange(length) * rng.uniform(0.5, 3.0)) + rng.normal(0, 0.05, size=length)
    else:
        trace = rng.uniform(size=length)
    return np.clip(trace, 0.0, 1.0)


def run_theory_suite(
    n_traces: int,
    rng: Rng,
    gammas=THEORY_GAMMAS,
    lams=THEORY_LAMBDAS,
    max_len: int = 200,
    report_path=None,
) -> TheorySummary:
    kinds = ("monotone", "oscillating", "uniform")
    n_checks, violations, failing = 0, [], []
    d1 = a1 = corr = 0.0
    reports = []
    for i in range(n_traces):
        trace = random_trace(rng, rng.integers(2, max_len + 1), kinds[i % len(kinds)])
        rep = verify_theory(trace, gammas, lams)
        n_checks += len(rep.results)
        d1 = max(d1, rep.max_abs(1.0))
        a1 = max(a1, rep.max_abs(1.0, what="advantages"))
        corr = max([corr] + [r.residual for r in rep.results])
        if not rep.ok:
            violations += [dict(v, trace_index=i) for v in rep.violations]
            failing.append(trace.tolist())
        if report_path is not None:
            reports.append(rep)
    summary = TheorySummary(n_traces, n_checks, violations, d1, a1, corr, failing)
    if report_path is not None:
        with open(report_path, "w") as fh:
            fh.write(json.dumps({"summary": summary.to_record()}) + "\n")
            for rep in reports:
                for rec in rep.to_records():
                    fh.write(json.dumps(rec) + "\n")
    return summary


# --------------------------------------------------------------------------
# output


COLUMNS = ("method", "suite", "variant", "episodes", "seed_rates", "seed_std", "mean", "delta", "relative_gain")


def _fmt(x) -> str:
    if x is None:
        return "—"
    return f"{x:.4f}"


def row_cells(row: ResultRow) -> list[str]:
    return [
        row.method,
        row.suite,
        row.variant,
        str(row.episodes),
        ";".join(_fmt(r) for r in row.seed_rates),
        _fmt(row.seed_std),
        _fmt(row.mean),
        _fmt(row.delta),
        _fmt(row.relative_gain),
    ]


def sorted_rows(rows: Sequence[ResultRow]) -> list[ResultRow]:
    return sorted(rows, key=ResultRow.key)


def export_results(rows: Sequence[ResultRow], path, fmt: str = "csv") -> Path:
    """Write rows with a fixed column order and 4-decimal floats."""
    path = Path(path)
    rows = sorted_rows(rows)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow(row_cells(row))
        text = buf.getvalue()
    elif fmt in ("jsonl", "structured-text"):
        text = "".join(json.dumps(dict(zip(COLUMNS, row_cells(row)))) + "\n" for row in rows)
    else:
        raise ConfigError(f"unknown export format {fmt!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def _parse(x: str):
    return None if x == "—" else float(x)


def import_results(path) -> list[ResultRow]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        if path.suffix == ".csv":
            cells = list(csv.reader(fh))[1:]
        else:
            cells = [[json.loads(line)[c] for c in COLUMNS] for line in fh if line.strip()]
    rows = []
    for c in cells:
        rows.append(
            ResultRow(
                method=c[0],
                suite=c[1],
                variant=c[2],
                episodes=int(c[3]),
                seed_rates=tuple(float(x) for x in c[4].split(";")) if c[4] else (),
                seed_std=float(c[5]),
                mean=float(c[6]),
                delta=_parse(c[7]),
                relative_gain=_parse(c[8]),
            )
        )
    return rows


def write_outputs(cfg: ExperimentConfig, result: ExperimentResult) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "trials.jsonl", "w") as fh:
        for rec in result.records:
            rec = {k: v for k, v in rec.items() if k != "wall_time"}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    export_results(result.rows, out / "results.csv", "csv")
    export_results(result.rows, out / "results.jsonl", "jsonl")


def format_table(rows: Sequence[ResultRow]) -> str:
    lines = ["  ".join(f"{c:>14}" for c in COLUMNS)]
    for row in sorted_rows(rows):
        lines.append("  ".join(f"{c:>14}" for c in row_cells(row)))
    return "\n".join(lines)


def recompute_delta(records: Sequence[dict], method: str, suite: str) -> float:
    """mean(method) - mean(frozen) straight from raw trial records."""

    def mean(m):
        xs = [r["success"] for r in records if r.get("arm", r["method"]) == m and r["suite"] == suite]
        return math.fsum(xs) / len(xs)

    return mean(method) - mean("frozen")
