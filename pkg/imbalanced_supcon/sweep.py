"""
Parameter sweeps over RunConfigs and the metric/probe correlation report.
"""
import itertools
import logging
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import kendalltau, linregress

from imbalanced_supcon.config import RunConfig, default_workers
from imbalanced_supcon.errors import InsufficientData, InvalidConfig
from imbalanced_supcon.failure_notifier import RunFailureNotifier
from imbalanced_supcon.trainer import train, write_run
from imbalanced_supcon.utils import ResultsIO

logger = logging.getLogger(__name__)

AXIS_KEYS = {
    "imbalance": "data.imbalance",
    "temperature": "loss.tau",
    "batch-size": "optimizer.batch_size",
    "supervision-fraction": "loss.theta_maj",
    "loss-kind": "loss.kind",
}
METRIC_COLUMNS = ("sad", "saa", "cad", "cac", "gpu")
SUMMARY_COLUMNS = METRIC_COLUMNS + ("probe_metric",)
MIN_CORRELATION_ROWS = 8

DEFAULT_GRID = {
    "loss-kind": ("supcon", "sup-minority", "sup-prototypes"),
    "imbalance": (0.5, 0.1, 0.05, 0.01),
}
DEFAULT_SEEDS = (0, 1, 2)


def parse_axis_value(axis: str, value: Any) -> Any:
    """Coerce a (possibly textual) axis value to the config field's type"""
    if axis not in AXIS_KEYS:
        raise InvalidConfig(f"unknown sweep axis '{axis}', expected one of {sorted(AXIS_KEYS)}")
    try:
        if axis == "loss-kind":
            return str(value)
        if axis == "batch-size":
            return int(value)
        return float(value)
    except (TypeError, ValueError):
        raise InvalidConfig(f"invalid value '{value}' for sweep axis '{axis}'")


def axis_config(base: RunConfig, axis: str, value: Any) -> RunConfig:
    """Copy of base with one axis set; supervision-fraction switches to partial supervision"""
    config = base.with_value(AXIS_KEYS[axis], parse_axis_value(axis, value))
    if axis == "supervision-fraction":
        config = config.with_value("loss.kind", "partial-supervision")
    return config


@dataclass
class SweepTask:
    config: RunConfig
    point: Dict[str, Any]
    seed: int

    @property
    def run_id(self) -> str:
        return self.config.run_id


@dataclass
class SweepResult:
    csv_path: Path
    summary_path: Path
    completed: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    failed: List[str] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


def sweep_row(record: Dict[str, Any]) -> Dict[str, Any]:
    """Sweep CSV row from a record dict (RunRecord.to_dict() or a stored record.json)"""
    config = record["config"]
    metrics = record["metrics"]
    row = {
        "run_id": record["run_id"],
        "loss": config["loss"]["kind"],
        "imbalance": config["data"]["imbalance"],
        "tau": config["loss"]["tau"],
        "batch_size": config["optimizer"]["batch_size"],
        "theta_maj": config["loss"]["theta_maj"],
        "seed": config["seeds"]["data"],
        "probe_metric": record["probe"]["balanced_accuracy"],
    }
    row.update({name: metrics[name] for name in METRIC_COLUMNS})
    return row


def _run_task(config_dict: Dict[str, Any]) -> Dict[str, Any]:
    """Pool worker: train, persist, and return the sweep row or the error"""
    config = RunConfig.from_dict(config_dict)
    try:
        record = train(config)
        write_run(record, config.out_dir)
        return {"ok": True, "row": sweep_row(record.to_dict())}
    except Exception as e:
        return {"ok": False, "error": e}


def build_tasks(base: RunConfig, axes: Dict[str, Sequence[Any]], seeds: Sequence[int],
                out_dir: Union[str, Path]) -> List[SweepTask]:
    """Cartesian product of axis values times seeds; every config is validated up front"""
    if not axes:
        raise InvalidConfig("a sweep needs at least one axis")
    if not seeds:
        raise InvalidConfig("a sweep needs at least one seed")
    names = list(axes)
    tasks = []
    for combo in itertools.product(*(axes[name] for name in names)):
        config = base
        for name, value in zip(names, combo):
            config = axis_config(config, name, value)
        point = {name: parse_axis_value(name, value) for name, value in zip(names, combo)}
        for seed in seeds:
            seeded = config.with_seed(int(seed))
            seeded.out_dir = str(out_dir)
            tasks.append(SweepTask(config=seeded.validate(), point=point, seed=int(seed)))
    return tasks


def summarize(tasks: Sequence[SweepTask], rows: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """mean and std (population) of every metric and the probe metric per axis point"""
    by_id = {row["run_id"]: row for row in rows}
    groups: Dict[tuple, Dict[str, Any]] = {}
    for task in tasks:
        key = tuple(sorted(task.point.items()))
        group = groups.setdefault(key, {"point": dict(task.point), "rows": []})
        if task.run_id in by_id:
            group["rows"].append(by_id[task.run_id])

    summary = []
    for group in groups.values():
        entry = {"point": group["point"], "n_runs": len(group["rows"])}
        for column in SUMMARY_COLUMNS:
            values = np.array([r[column] for r in group["rows"]], dtype=np.float64)
            values = values[np.isfinite(values)]
            entry[column] = ({"mean": float(values.mean()), "std": float(values.std())}
                             if values.size else {"mean": None, "std": None})
        summary.append(entry)
    return {"axes": list(tasks[0].point) if tasks else [], "groups": summary}


def sweep_grid(base: RunConfig, axes: Dict[str, Sequence[Any]], seeds: Sequence[int] = DEFAULT_SEEDS,
               out_dir: Optional[Union[str, Path]] = None,
               workers: Optional[int] = None) -> SweepResult:
    """
    Run every (axis point, seed) configuration and collect the results.

    Runs whose record.json already exists are skipped (their CSV row is
    restored if missing), so an interrupted sweep resumes where it stopped.
    A failed run is recorded in failures.jsonl and the sweep moves on.

    Args:
        base: Configuration every run starts from
        axes: Axis name -> values, see AXIS_KEYS
        seeds: Seeds applied to all four seed slots of each run
        out_dir: Sweep directory (default base.out_dir)
        workers: Process count (default SUPCON_WORKERS)

    Returns:
        SweepResult with sweep.csv and summary.json paths
    """
    out_dir = Path(out_dir if out_dir is not None else base.out_dir)
    workers = workers if workers is not None else default_workers()
    tasks = build_tasks(base, axes, seeds, out_dir)
    csv_path = out_dir / "sweep.csv"
    result = SweepResult(csv_path=csv_path, summary_path=out_dir / "summary.json")

    recorded = ({row["run_id"] for row in ResultsIO.read_sweep_rows(csv_path)}
                if csv_path.exists() else set())
    pending = []
    for task in tasks:
        record_path = out_dir / task.run_id / "record.json"
        if not record_path.exists():
            pending.append(task)
            continue
        if task.run_id not in recorded:
            ResultsIO.append_sweep_rows(csv_path, [sweep_row(ResultsIO.load_json(record_path))])
            recorded.add(task.run_id)
        result.skipped.append(task.run_id)
    logger.info("sweep of %d runs: %d done, %d to run on %d worker(s)",
                len(tasks), len(result.skipped), len(pending), workers)

    notifier = RunFailureNotifier(out_dir)
    payloads = [task.config.to_dict() for task in pending]
    if workers > 1 and len(pending) > 1:
        with multiprocessing.Pool(processes=min(workers, len(pending))) as pool:
            outcomes = pool.imap(_run_task, payloads)
            _collect(pending, outcomes, csv_path, notifier, result)
    else:
        _collect(pending, map(_run_task, payloads), csv_path, notifier, result)

    rows = ResultsIO.read_sweep_rows(csv_path) if csv_path.exists() else []
    result.summary = summarize(tasks, rows)
    ResultsIO.save_json(result.summary, result.summary_path)
    return result


def _collect(tasks, outcomes, csv_path: Path, notifier: RunFailureNotifier, result: SweepResult):
    for task, outcome in zip(tasks, outcomes):
        if outcome["ok"]:
            ResultsIO.append_sweep_rows(csv_path, [outcome["row"]])
            result.completed.append(task.run_id)
            logger.info("run %s done (%s, seed %d)", task.run_id, task.point, task.seed)
        else:
            notifier.notify_run_failure(task.run_id, outcome["error"],
                                        details={"point": task.point, "seed": task.seed})
            result.failed.append(task.run_id)


def sweep(base: RunConfig, axis: str, values: Sequence[Any], seeds: Sequence[int] = DEFAULT_SEEDS,
          out_dir: Optional[Union[str, Path]] = None, workers: Optional[int] = None) -> SweepResult:
    """Single-axis sweep"""
    return sweep_grid(base, {axis: list(values)}, seeds, out_dir, workers)


def _fit_scores(x: np.ndarray, y: np.ndarray) -> Dict[str, float]:
    # a constant column carries no linear or rank signal
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return {"r2": 0.0, "kendall_tau": 0.0}
    r2 = float(linregress(x, y).rvalue ** 2)
    tau = float(kendalltau(x, y)[0])
    return {"r2": r2, "kendall_tau": tau if np.isfinite(tau) else 0.0}


def correlate(csv_path: Union[str, Path], out_path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Least-squares R^2 and Kendall tau of each metric against the probe metric.

    Rows with a missing metric or probe value are dropped per metric.

    Raises:
        InsufficientData: if fewer than 8 usable rows remain
    """
    csv_path = Path(csv_path)
    rows = ResultsIO.read_sweep_rows(csv_path)
    probe = np.array([r["probe_metric"] for r in rows], dtype=np.float64)
    report: Dict[str, Any] = {"n_rows": len(rows), "metrics": {}}
    for metric in METRIC_COLUMNS:
        x = np.array([r[metric] for r in rows], dtype=np.float64)
        usable = np.isfinite(x) & np.isfinite(probe)
        n = int(usable.sum())
        if n < MIN_CORRELATION_ROWS:
            raise InsufficientData(
                f"correlation needs {MIN_CORRELATION_ROWS} rows with {metric} and probe_metric, got {n}"
            )
        report["metrics"][metric] = {**_fit_scores(x[usable], probe[usable]), "n_rows": n}
    ResultsIO.save_json(report, out_path if out_path else csv_path.parent / "correlation.json")
    return report
