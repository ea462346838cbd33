import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from imbalanced_supcon.errors import InvalidConfig

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["run_id", "loss", "imbalance", "tau", "batch_size", "theta_maj", "seed",
                 "sad", "saa", "cad", "cac", "gpu", "probe_metric"]


class ResultsIO:
    """JSON and CSV persistence for run artifacts"""

    @staticmethod
    def save_json(data: Any, file_path: Union[str, Path], backup: bool = False) -> Path:
        """Write sorted, indented JSON with LF endings; optionally keep the old file as .backup"""
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        if backup and file_path.exists():
            backup_path = file_path.with_name(file_path.name + ".backup")
            file_path.replace(backup_path)
            logger.info("Backup created: %s", backup_path)
        with open(file_path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
        return file_path

    @staticmethod
    def load_json(file_path: Union[str, Path]) -> Any:
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                return json.load(f)
        except FileNotFoundError:
            raise InvalidConfig(f"file not found: {file_path}")
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"error parsing JSON in {file_path}: {e}")

    @staticmethod
    def write_embeddings_csv(file_path: Union[str, Path], z: np.ndarray, sample_ids: Sequence[int],
                             labels: Sequence[int]) -> Path:
        """`view_id,sample_id,label,z0..z{d-1}` with round-trip float text"""
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        header = ["view_id", "sample_id", "label"] + [f"z{j}" for j in range(z.shape[1])]
        with open(file_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for view_id in range(z.shape[0]):
                writer.writerow([view_id, int(sample_ids[view_id]), int(labels[view_id])]
                                + [repr(float(v)) for v in z[view_id]])
        return file_path

    @staticmethod
    def read_embeddings_csv(file_path: Union[str, Path]) -> Dict[str, np.ndarray]:
        """
        Read an embeddings file and rebuild the partner map.

        Every sample id must appear on exactly two rows; those two views are
        each other's partner.

        Returns:
            dict with z, sample_ids, labels and partner arrays in view_id order
        """
        try:
            with open(file_path, "r", newline="", encoding="utf-8") as f:
                reader = csv.reader(f)
                header = next(reader, None)
                rows = [row for row in reader if row]
        except FileNotFoundError:
            raise InvalidConfig(f"embeddings file not found: {file_path}")
        if not header or header[:3] != ["view_id", "sample_id", "label"]:
            raise InvalidConfig(f"{file_path}: expected header view_id,sample_id,label,z0..")
        rows.sort(key=lambda row: int(row[0]))
        sample_ids = np.array([int(r[1]) for r in rows], dtype=np.int64)
        labels = np.array([int(r[2]) for r in rows], dtype=np.int64)
        z = np.array([[float(v) for v in r[3:]] for r in rows], dtype=np.float64)

        partner = np.full(sample_ids.size, -1, dtype=np.int64)
        seen: Dict[int, List[int]] = {}
        for view, sample in enumerate(sample_ids):
            seen.setdefault(int(sample), []).append(view)
        for sample, views in seen.items():
            if len(views) != 2:
                raise InvalidConfig(f"{file_path}: sample {sample} has {len(views)} views, expected 2")
            partner[views[0]], partner[views[1]] = views[1], views[0]
        return {"z": z, "sample_ids": sample_ids, "labels": labels, "partner": partner}

    @staticmethod
    def append_sweep_rows(file_path: Union[str, Path], rows: List[Dict[str, Any]]) -> Path:
        """Append rows, writing the header first when the file is new"""
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        is_new = not file_path.exists()
        with open(file_path, "a", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, lineterminator="\n",
                                    extrasaction="ignore")
            if is_new:
                writer.writeheader()
            for row in rows:
                writer.writerow({k: _csv_value(row.get(k)) for k in SWEEP_COLUMNS})
        return file_path

    @staticmethod
    def read_sweep_rows(file_path: Union[str, Path]) -> List[Dict[str, Any]]:
        try:
            with open(file_path, "r", newline="", encoding="utf-8") as f:
                return [_parse_sweep_row(row) for row in csv.DictReader(f)]
        except FileNotFoundError:
            raise InvalidConfig(f"sweep file not found: {file_path}")


def _csv_value(value: Optional[Any]) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _parse_sweep_row(row: Dict[str, str]) -> Dict[str, Any]:
    parsed: Dict[str, Any] = {"run_id": row.get("run_id", ""), "loss": row.get("loss", "")}
    for key in SWEEP_COLUMNS[2:]:
        text = row.get(key, "")
        parsed[key] = float(text) if text not in ("", None) else math.nan
    return parsed
