"""Random hyperparameter search over architectures and training settings.

Each *architecture* draw fixes ``(s, v, d, d_k, d_v)``; each of its ensemble
members then draws the remaining hyperparameters. Members of one ensemble
advance in lockstep between validation events so they share one
early-stopping clock.
"""
import csv
import json
import math
import multiprocessing
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .bema import BemaSpec
from .rng import child_seed, stream
from .training import RunRecord, Trainer, TrainRunConfig, best_tvd, finalize

# Sampler constants; ranges are for the uniform variable before transforms.
SAMPLER_RANGES = {
    "s_log2": (0.0, 4.0),
    "v_extra_log2": (0.0, 4.0),
    "d_multiplier": (1.0, 4.0),
    "norm_eps_log10": (-10.0, -4.0),
    "one_minus_beta1_log10": (-2.0, 0.0),
    "one_minus_beta2_log10": (-8.0, -1.0),
    "weight_decay_log10": (-6.0, 0.0),
    "adam_eps_log10": (-12.0, -8.0),
    "max_grad_norm_log10": (-2.0, 2.0),
    "peak_lr_log10": (-5.0, -1.0),
    "warmup_log10": (-2.0, 6.0),
    "end_multiplier_log10": (-4.0, 0.0),
    "dropout": (-0.5, 0.5),
    "bema_power": (0.0, 1.0),
    "ema_lag_log10": (0.0, 10.0),
    "ema_power": (0.0, 1.0),
}

FULL_SCALE_ARCHITECTURES = 260
FULL_SCALE_MEMBERS = 1000


@dataclass(frozen=True)
class ArchSample:
    s: int
    v: int
    d: int
    d_k: int
    d_v: int


@dataclass(frozen=True)
class HyperSample:
    s: int
    v: int
    d: int
    d_k: int
    d_v: int
    norm_eps: float
    beta1: float
    beta2: float
    weight_decay: float
    adam_eps: float
    max_grad_norm: float
    peak_lr: float
    warmup_steps: int
    end_multiplier: float
    p_embed: float
    p_resid: float
    bema_power: float
    ema_lag: float
    ema_power: float
    seed: int

    @property
    def gap(self) -> int:
        return self.v - 1 - self.s

    @property
    def embed_multiplier(self) -> float:
        return self.d / (self.v - 1)

    @property
    def value_coefficient(self) -> float:
        if self.d == self.v - 1:
            return 0.0
        return (self.d_v - self.v + 1) / (self.d - self.v + 1)

    def to_run_config(self, **budget) -> TrainRunConfig:
        return TrainRunConfig(
            v=self.v, s=self.s, d=self.d, d_k=self.d_k, d_v=self.d_v, norm_eps=self.norm_eps,
            beta1=self.beta1, beta2=self.beta2, weight_decay=self.weight_decay,
            adam_eps=self.adam_eps, max_grad_norm=self.max_grad_norm, peak_lr=self.peak_lr,
            warmup_steps=self.warmup_steps, end_multiplier=self.end_multiplier,
            p_embed=self.p_embed, p_resid=self.p_resid,
            bema=[BemaSpec(self.ema_lag, self.ema_power, self.bema_power)],
            seed=self.seed, **budget,
        )


def _u(rng, key, table):
    lo, hi = table[key]
    return rng.uniform(lo, hi)


def sample_arch(rng: np.random.Generator, table=SAMPLER_RANGES) -> ArchSample:
    s = 1 + math.floor(2 ** _u(rng, "s_log2", table))
    v = s + math.floor(2 ** _u(rng, "v_extra_log2", table))
    d = math.floor((v - 1) * _u(rng, "d_multiplier", table))
    d_k = max(1, math.floor(rng.uniform(1, d)))
    d_v = min(d, math.floor(rng.uniform(v - 1, d)))
    return ArchSample(s, v, d, d_k, d_v)


def sample_member(rng: np.random.Generator, arch: ArchSample, seed: int = 0, table=SAMPLER_RANGES) -> HyperSample:
    def log10u(key):
        return 10.0 ** _u(rng, key, table)

    return HyperSample(
        **asdict(arch),
        norm_eps=log10u("norm_eps_log10"),
        beta1=1.0 - log10u("one_minus_beta1_log10"),
        beta2=1.0 - log10u("one_minus_beta2_log10"),
        weight_decay=log10u("weight_decay_log10"),
        adam_eps=log10u("adam_eps_log10"),
        max_grad_norm=log10u("max_grad_norm_log10"),
        peak_lr=log10u("peak_lr_log10"),
        warmup_steps=math.floor(log10u("warmup_log10")),
        end_multiplier=log10u("end_multiplier_log10"),
        p_embed=max(0.0, _u(rng, "dropout", table)),
        p_resid=max(0.0, _u(rng, "dropout", table)),
        bema_power=_u(rng, "bema_power", table),
        ema_lag=log10u("ema_lag_log10"),
        ema_power=_u(rng, "ema_power", table),
        seed=seed,
    )


def sample_hypers(rng: np.random.Generator, seed: int = 0, table=SAMPLER_RANGES) -> HyperSample:
    return sample_member(rng, sample_arch(rng, table), seed, table)


@dataclass
class SweepConfig:
    seed: int = 0
    architectures: int = 8
    members: int = 32
    max_steps: int = 200_000
    val_interval: int = 10_000
    patience: int = 1_000_000
    batch_size: int = 128
    val_size: int = 1024
    jobs: int = 1
    sampler: dict = field(default_factory=lambda: {k: list(v) for k, v in SAMPLER_RANGES.items()})

    @classmethod
    def from_dict(cls, data: dict) -> "SweepConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown sweep config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.sampler = {**{k: list(v) for k, v in SAMPLER_RANGES.items()}, **cfg.sampler}
        return cfg

    def budget(self) -> dict:
        return {
            "max_steps": self.max_steps, "val_interval": self.val_interval, "patience": self.patience,
            "batch_size": self.batch_size, "val_size": self.val_size,
        }


def ensemble_samples(cfg: SweepConfig, arch_index: int) -> list[HyperSample]:
    table = {k: tuple(v) for k, v in cfg.sampler.items()}
    arch = sample_arch(stream(cfg.seed, "arch", arch_index), table)
    return [
        sample_member(stream(cfg.seed, f"member/{arch_index}", m), arch,
                      child_seed(cfg.seed, f"run/{arch_index}", m), table)
        for m in range(cfg.members)
    ]


def run_ensemble(cfg: SweepConfig, arch_index: int) -> list[RunRecord]:
    """Train one ensemble in lockstep; stop everyone once no member has
    improved its validation TVD for ``patience`` steps."""
    samples = ensemble_samples(cfg, arch_index)
    trainers = [Trainer(s.to_run_config(**cfg.budget())) for s in samples]
    histories = [[t.validate()] for t in trainers]
    best = min(best_tvd(h[-1]) for h in histories)
    best_step, step = 0, 0
    while step < cfg.max_steps:
        step = min(step + cfg.val_interval, cfg.max_steps)
        running = [i for i, t in enumerate(trainers) if not t.diverged]
        if not running:
            break
        for i in running:
            trainers[i].advance(step - trainers[i].step_count)
            if not trainers[i].diverged:
                histories[i].append(trainers[i].validate())
        current = [best_tvd(histories[i][-1]) for i in running if not trainers[i].diverged]
        if current and min(current) < best:
            best, best_step = min(current), step
        elif step - best_step >= cfg.patience:
            break
    records = []
    for m, (s, t, h) in enumerate(zip(samples, trainers, histories)):
        records.append(finalize(t, h, extra={
            "arch": arch_index, "member": m, "hypers": asdict(s), "gap": s.gap,
            "embed_multiplier": s.embed_multiplier, "value_coefficient": s.value_coefficient,
        }))
    return records


def _ensemble_worker(args):
    cfg, arch_index = args
    return arch_index, [r.to_json() for r in run_ensemble(cfg, arch_index)]


def load_records(path) -> list[RunRecord]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path) as fh:
        return [RunRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def run_search(cfg: SweepConfig, out_dir) -> list[RunRecord]:
    """Run (or resume) a sweep into ``out_dir``.

    ``records.jsonl`` is appended one ensemble at a time; ensembles already
    complete on disk are skipped. ``manifest.json`` pins the configuration.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    resolved = asdict(cfg)
    resolved.pop("jobs")  # parallelism does not change results
    manifest = {"version": __version__, "command": "search", "seed": cfg.seed, "config": resolved}
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("config") != resolved:
            raise ValueError(f"{manifest_path} was written for a different configuration")
    else:
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    records_path = out / "records.jsonl"
    done = defaultdict(int)
    for rec in load_records(records_path):
        done[rec.extra["arch"]] += 1
    todo = [a for a in range(cfg.architectures) if done[a] < cfg.members]
    # drop partial ensembles so the file only holds complete ones
    if any(0 < done[a] < cfg.members for a in todo):
        keep = [r for r in load_records(records_path) if done[r.extra["arch"]] >= cfg.members]
        with open(records_path, "w") as fh:
            fh.writelines(r.to_json() + "\n" for r in keep)

    jobs = max(1, min(cfg.jobs, len(todo))) if todo else 1
    tasks = [(cfg, a) for a in todo]
    with open(records_path, "a") as fh:
        if jobs == 1:
            results = map(_ensemble_worker, tasks)
        else:
            pool = multiprocessing.get_context("spawn").Pool(jobs)
            results = pool.imap(_ensemble_worker, tasks)
        for _, lines in results:
            fh.writelines(line + "\n" for line in lines)
            fh.flush()
            os.fsync(fh.fileno())
        if jobs > 1:
            pool.close()
            pool.join()
    records = load_records(records_path)
    rows, notes = summarize(records)
    write_summary(out / "summary.csv", rows)
    return records


# -- summaries -------------------------------------------------------------

QUANTILES = (0.001, 0.01, 0.1)


def _group_value(rec: RunRecord, key: str):
    val = rec.extra[key]
    return round(val, 1) if isinstance(val, float) else val


def _top_mean(values: list[float], q: float) -> float:
    k = max(1, math.ceil(q * len(values)))
    return float(np.mean(sorted(values)[:k]))


def _qname(q: float) -> str:
    return f"top{q * 100:g}pct"


def summarize(records: list[RunRecord], group_keys=("gap",)) -> tuple[list[dict], list[str]]:
    """Best value and top-quantile means of every metric, per group, for
    training and BEMA parameters; also mean dropout rates of the top runs."""
    if not records:
        raise ValueError("no records to summarize")
    groups = defaultdict(list)
    for rec in records:
        groups[tuple(_group_value(rec, k) for k in group_keys)].append(rec)
    rows, notes = [], []
    for key in sorted(groups):
        recs = groups[key]
        row = dict(zip(group_keys, key))
        row["n"] = len(recs)
        for pset in ("train", "bema"):
            usable = [r for r in recs if r.best.get(pset)]
            if not usable:
                notes.append(f"group {key}: no {pset} metrics")
                continue
            for metric in ("tvd", "itp", "itr"):
                vals = [r.best[pset][metric] for r in usable]
                row[f"{pset}_{metric}_best"] = min(vals)
                for q in QUANTILES:
                    row[f"{pset}_{metric}_{_qname(q)}"] = _top_mean(vals, q)
            ranked = sorted(usable, key=lambda r: r.best[pset]["tvd"])
            for q in QUANTILES:
                top = ranked[:max(1, math.ceil(q * len(ranked)))]
                for rate in ("p_embed", "p_resid"):
                    row[f"{pset}_{_qname(q)}_{rate}"] = float(np.mean([r.config[rate] for r in top]))
        rows.append(row)
    return rows, notes


def write_summary(path, rows: list[dict]) -> None:
    columns = []
    for row in rows:
        columns.extend(c for c in row if c not in columns)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
