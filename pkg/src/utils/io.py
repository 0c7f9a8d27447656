"""
Output writers: CSV tables (pandas), JSON summaries and belief heat-map grids
"""
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from src.utils.logger import get_logger

logger = get_logger(__name__)

STEP_COLUMNS = [
    "step", "time", "robot_id", "x", "y", "theta", "true_x", "true_y", "v", "omega",
    "mode", "role", "tracks", "belief_mass", "belief_components",
]
PLAN_COLUMNS = ["step", "robot_id", "t", "x", "y", "theta", "v", "omega"]


def _default(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def dumps(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=_default)


def atomic_output_dir(target: Path) -> Path:
    """Staging directory next to `target`; promote with promote_output_dir."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))


def promote_output_dir(staging: Path, target: Path) -> Path:
    target = Path(target)
    if target.exists():
        if any(target.iterdir()):
            raise FileExistsError(f"output directory {target} is not empty")
        target.rmdir()
    os.replace(staging, target)
    return target


class RunWriter:
    """Writes the fixed set of run artifacts under one directory"""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def write_json(self, name: str, payload: Any) -> Path:
        path = self.output_dir / name
        path.write_text(dumps(payload) + "\n")
        return path

    def write_table(self, name: str, rows: Iterable[dict], columns: Optional[List[str]] = None) -> Path:
        path = self.output_dir / name
        rows = list(rows)
        df = pd.DataFrame(rows, columns=columns) if columns else pd.DataFrame(rows)
        df.to_csv(path, index=False)
        return path

    def write_jsonl(self, name: str, records: Iterable[Dict[str, Any]]) -> Path:
        path = self.output_dir / name
        with path.open("w") as handle:
            for record in records:
                handle.write(json.dumps(record, sort_keys=True, default=_default) + "\n")
        return path

    def write_heatmap(self, index: int, snapshot: Dict[str, Any]) -> Path:
        """Dense grid, row-major (rows = y), preceded by a commented header line."""
        path = self.output_dir / f"heatmap_{index:04d}.csv"
        xmin, xmax, ymin, ymax = snapshot["bounds"]
        header = (f"# step={snapshot['step']} time={snapshot['time']:.3f} "
                  f"bounds={xmin},{xmax},{ymin},{ymax} resolution={snapshot['resolution']}\n")
        grid = pd.DataFrame(np.asarray(snapshot["grid"]))
        with path.open("w") as handle:
            handle.write(header)
            grid.to_csv(handle, index=False, header=False, float_format="%.6e")
        return path

    def write_run(self, log, n_objects: int) -> Dict[str, Path]:
        paths = {
            "steps": self.write_table("steps.csv", log.steps, STEP_COLUMNS),
            "records": self.write_jsonl("steps.jsonl", (r.model_dump(mode="json") for r in log.records)),
            "plans": self.write_table("plans.csv", log.plans, PLAN_COLUMNS),
            "summary": self.write_json("summary.json", log.summary(n_objects)),
        }
        for index, snapshot in enumerate(log.heatmaps):
            self.write_heatmap(index, snapshot)
        logger.info("Run outputs written", directory=str(self.output_dir), heatmaps=len(log.heatmaps))
        return paths

    def write_study(self, report, tag: str) -> Dict[str, Path]:
        return {
            "norms": self.write_table(f"norms_{tag}.csv", [{"norm": n} for n in report.norms], ["norm"]),
            "summary": self.write_json(f"study_{tag}.json", report.summary()),
        }
