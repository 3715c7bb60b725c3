"""Single runs and multi-run sweeps that write CSV/JSON results to disk.

Layout under the output directory::

    run:          epochs.csv  summary.json  run.log
    sweeps:       <arm>/seed_<k>/{epochs.csv, summary.json, run.log}  table.csv
    noise-sweep:  sigma_<s>/<arm>/seed_<k>/...                         table.csv

Everything except run.log is a pure function of (config, seeds).
"""
from __future__ import annotations

import csv
import datetime
import functools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from flaggnn.augment import StrategyConfig
from flaggnn.config import config_echo, dump_config
from flaggnn.data import NodeDataset, load_node_dataset
from flaggnn.errors import ConfigError
from flaggnn.train import TrainConfig, train

EPOCH_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc", "test_acc")
SUMMARY_FIELDS = ("strategy", "M", "alpha_l", "alpha_u", "epsilon", "norm", "seed", "epochs",
                  "epochs_run", "free_budget", "noise_sigma", "selected", "final", "counters", "config")
TABLE_COLUMNS = ("arm", "strategy", "M", "epochs_run", "n_seeds", "test_mean", "test_std",
                 "val_mean", "val_std", "forwards", "backwards", "param_updates")
KINDS = ("single", "sweep-seeds", "compare-strategies", "free-budget", "noise-sweep")


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    config: TrainConfig
    out_dir: Path
    seeds: tuple = (0,)
    sigmas: tuple = ()
    jobs: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if any(s < 0 for s in self.sigmas):
            raise ConfigError("sigma values must be >= 0")
        if self.kind == "noise-sweep" and not self.sigmas:
            raise ConfigError("noise-sweep needs at least one sigma")
        if not self.seeds:
            raise ConfigError("empty seed set")


# --------------------------------------------------------------------------- single runs

@functools.lru_cache(maxsize=4)
def _cached_dataset(data_spec) -> NodeDataset:
    return load_node_dataset(data_spec)


def _dataset_for(cfg: TrainConfig) -> NodeDataset:
    # noise is applied inside train(), so the cache key ignores it
    return _cached_dataset(replace(cfg.data, noise_sigma=0.0))


def write_epochs_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EPOCH_COLUMNS)
        for r in records:
            w.writerow([r.epoch] + [f"{getattr(r, c):.6g}" for c in EPOCH_COLUMNS[1:]])


def read_epochs_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


def summarize(cfg: TrainConfig, history) -> dict:
    st = cfg.strategy
    return {
        "strategy": st.kind, "M": st.M, "alpha_l": st.alpha_l, "alpha_u": st.alpha_u,
        "epsilon": st.epsilon, "norm": st.norm_mode, "seed": cfg.seed, "epochs": cfg.epochs,
        "epochs_run": history.epochs_run, "free_budget": cfg.free_budget,
        "noise_sigma": cfg.data.noise_sigma,
        "selected": asdict(history.selected),
        "final": asdict(history.records[-1]),
        "counters": asdict(history.counters),
        "config": config_echo(cfg),
    }


def run_single(cfg: TrainConfig, out_dir, data: NodeDataset | None = None) -> dict:
    """Train once and write epochs.csv, summary.json and run.log into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc)
    history = train(cfg, data if data is not None else _dataset_for(cfg))
    write_epochs_csv(out / "epochs.csv", history.records)
    summary = summarize(cfg, history)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    finished = datetime.datetime.now(datetime.timezone.utc)
    (out / "run.log").write_text(
        f"started {started.isoformat()}\nfinished {finished.isoformat()}\n\n{dump_config(cfg)}")
    return summary


def _run_task(task):
    cfg, out_dir = task
    return run_single(cfg, out_dir)


def _run_all(tasks, jobs: int) -> list[dict]:
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_task, tasks))
    return [_run_task(t) for t in tasks]


# --------------------------------------------------------------------------- aggregation

def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def aggregate(arm: str, summaries: list[dict]) -> dict:
    """One table row: mean and (population) std over seeds of the selected epoch."""
    test_mean, test_std = _mean_std([s["selected"]["test_acc"] for s in summaries])
    val_mean, val_std = _mean_std([s["selected"]["val_acc"] for s in summaries])
    first = summaries[0]
    row = {"arm": arm, "strategy": first["strategy"], "M": first["M"],
           "epochs_run": first["epochs_run"], "n_seeds": len(summaries),
           "test_mean": test_mean, "test_std": test_std, "val_mean": val_mean, "val_std": val_std}
    for c in ("forwards", "backwards", "param_updates"):
        row[c] = _mean_std([s["counters"][c] for s in summaries])[0]
    return row


def write_table(path, rows: list[dict], columns=TABLE_COLUMNS) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_table(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def _sweep(arms: dict[str, TrainConfig], seeds, out: Path, jobs: int, prefix: Path = Path()):
    tasks, owners = [], []
    for arm, cfg in arms.items():
        for seed in seeds:
            tasks.append((replace(cfg, seed=seed), out / prefix / arm / f"seed_{seed}"))
            owners.append(arm)
    results = _run_all(tasks, jobs)
    return [aggregate(arm, [r for r, o in zip(results, owners) if o == arm]) for arm in arms]


# --------------------------------------------------------------------------- experiments

def sweep_seeds(spec: ExperimentSpec) -> list[dict]:
    arm = spec.config.strategy.kind
    rows = _sweep({arm: spec.config}, spec.seeds, spec.out_dir, spec.jobs)
    write_table(spec.out_dir / "table.csv", rows)
    return rows


def comparison_arms(cfg: TrainConfig) -> dict[str, TrainConfig]:
    """clean, pgd(8), free(8), freelb(3), flag(3) sharing the base step sizes.

    The pgd/free budget defaults to FLAG's implicit l-inf reach, (3+1)*max(alpha),
    unless the base config sets epsilon. Free runs with the N/M epoch budget.
    """
    st = cfg.strategy
    eps = st.epsilon if st.epsilon is not None else 4 * max(st.alpha_l, st.alpha_u)
    arms = {
        "clean": StrategyConfig("clean", 1, st.alpha_l, st.alpha_u),
        "pgd": StrategyConfig("pgd", 8, st.alpha_l, st.alpha_u, epsilon=eps, norm_mode="sign"),
        "free": StrategyConfig("free", 8, st.alpha_l, st.alpha_u, epsilon=eps, norm_mode="sign"),
        "freelb": StrategyConfig("freelb", 3, st.alpha_l, st.alpha_l, norm_mode="l2"),
        "flag": StrategyConfig("flag", 3, st.alpha_l, st.alpha_u, norm_mode="sign"),
    }
    return {name: replace(cfg, strategy=s, free_budget=(name == "free")) for name, s in arms.items()}


def compare_strategies(spec: ExperimentSpec) -> list[dict]:
    rows = _sweep(comparison_arms(spec.config), spec.seeds, spec.out_dir, spec.jobs)
    write_table(spec.out_dir / "table.csv", rows)
    return rows


def free_budget_arms(cfg: TrainConfig) -> dict[str, TrainConfig]:
    st = cfg.strategy
    flag = StrategyConfig("flag", st.M, st.alpha_l, st.alpha_u, norm_mode=st.norm_mode)
    return {
        "clean": replace(cfg, strategy=StrategyConfig("clean", st.M, st.alpha_l, st.alpha_u),
                         free_budget=False),
        "flag": replace(cfg, strategy=flag, free_budget=False),
        "flag_free": replace(cfg, strategy=flag, free_budget=True),
    }


def free_budget(spec: ExperimentSpec) -> list[dict]:
    rows = _sweep(free_budget_arms(spec.config), spec.seeds, spec.out_dir, spec.jobs)
    write_table(spec.out_dir / "table.csv", rows)
    return rows


NOISE_COLUMNS = ("sigma",) + TABLE_COLUMNS


def noise_arms(cfg: TrainConfig, sigma: float) -> dict[str, TrainConfig]:
    st = cfg.strategy
    data = replace(cfg.data, noise_sigma=sigma)
    return {
        "clean": replace(cfg, data=data, strategy=StrategyConfig("clean", 1, st.alpha_l)),
        "fgsm": replace(cfg, data=data, strategy=StrategyConfig("fgsm", 1, st.alpha_l, norm_mode="sign")),
    }


def noise_sweep(spec: ExperimentSpec) -> list[dict]:
    rows = []
    for sigma in spec.sigmas:
        for row in _sweep(noise_arms(spec.config, sigma), spec.seeds, spec.out_dir, spec.jobs,
                          prefix=Path(f"sigma_{sigma:g}")):
            rows.append({"sigma": sigma, **row})
    write_table(spec.out_dir / "table.csv", rows, NOISE_COLUMNS)
    return rows


def noise_gaps(rows: list[dict]) -> dict[float, float]:
    """sigma -> fgsm test_mean minus clean test_mean."""
    by = {(float(r["sigma"]), r["arm"]): float(r["test_mean"]) for r in rows}
    sigmas = sorted({s for s, _ in by})
    return {s: by[(s, "fgsm")] - by[(s, "clean")] for s in sigmas}


def run_experiment(spec: ExperimentSpec):
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    if spec.kind == "single":
        return run_single(replace(spec.config, seed=spec.seeds[0]), spec.out_dir)
    return {"sweep-seeds": sweep_seeds, "compare-strategies": compare_strategies,
            "free-budget": free_budget, "noise-sweep": noise_sweep}[spec.kind](spec)


def seeds_from_range(text: str) -> tuple:
    """'0..9' -> (0, ..., 9); '3' -> (3,); '1,4,5' -> (1, 4, 5)."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return tuple(range(lo, hi + 1))
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"--seeds: expected a..b or a comma list, got {text!r}") from None


def sigmas_from_list(text: str) -> tuple:
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"--sigmas: expected comma-separated numbers, got {text!r}") from None
    if any(v < 0 or not math.isfinite(v) for v in vals):
        raise ConfigError("--sigmas: values must be finite and >= 0")
    return vals
