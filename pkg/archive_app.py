"""Listing and housekeeping for archived simulation runs."""

from __future__ import annotations

import json
import logging
import shutil
from datetime import datetime
from pathlib import Path

import pandas as pd

from domain_app import ConfigError

log = logging.getLogger(__name__)

REPORT_FILE = "report.json"
ARCHIVE_COLUMNS = ["run", "files", "size", "modified", "subsidy_rate", "roi", "source"]


def human_size(n_bytes: int) -> str:
    if n_bytes < 1024:
        return f"{n_bytes} bytes"
    for unit, scale in (("KB", 1024), ("MB", 1024**2), ("GB", 1024**3)):
        if n_bytes < scale * 1024 or unit == "GB":
            return f"{n_bytes / scale:.2f} {unit}"


def _run_dirs(root: Path):
    if (root / REPORT_FILE).is_file():
        yield root
    for child in sorted(root.iterdir()):
        if child.is_dir() and (child / REPORT_FILE).is_file():
            yield child


def list_runs(root) -> pd.DataFrame:
    """One row per archived run under root, newest first."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"report directory not found: {root}")
    rows = []
    for run in _run_dirs(root):
        files = [p for p in run.iterdir() if p.is_file()]
        try:
            summary = json.loads((run / REPORT_FILE).read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            log.warning("unreadable report in %s", run)
            summary = {}
        mtime = max(p.stat().st_mtime for p in files)
        rows.append(
            {
                "run": run.name if run != root else ".",
                "files": len(files),
                "size": human_size(sum(p.stat().st_size for p in files)),
                "modified": datetime.fromtimestamp(mtime).strftime("%Y-%m-%d %H:%M:%S"),
                "subsidy_rate": summary.get("subsidy_rate"),
                "roi": summary.get("roi"),
                "source": summary.get("source"),
                "_mtime": mtime,
            }
        )
    if not rows:
        return pd.DataFrame(columns=ARCHIVE_COLUMNS)
    frame = pd.DataFrame(rows).sort_values("_mtime", ascending=False, kind="stable")
    return frame[ARCHIVE_COLUMNS].reset_index(drop=True)


def run_path(root, run: str) -> Path:
    root = Path(root).resolve()
    path = (root / run).resolve()
    if path != root and root not in path.parents:
        raise ConfigError(f"run {run!r} is outside {root}")
    if not (path / REPORT_FILE).is_file():
        raise ConfigError(f"no archived run {run!r} in {root}")
    return path


def run_files(root, run: str) -> list[Path]:
    return sorted(p for p in run_path(root, run).iterdir() if p.is_file())


def delete_run(root, run: str) -> Path:
    path = run_path(root, run)
    if path == Path(root).resolve():
        raise ConfigError("refusing to delete the report directory itself")
    shutil.rmtree(path)
    log.info("deleted archived run %s", path)
    return path
