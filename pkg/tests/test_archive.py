import json
import os

import pandas as pd
import pytest

from archive_app import ARCHIVE_COLUMNS, delete_run, human_size, list_runs, run_files, run_path
from domain_app import ConfigError


def make_run(root, name, rate=0.05, roi=1.1, mtime=None):
    run = root / name
    run.mkdir(parents=True)
    (run / "report.json").write_text(json.dumps({"subsidy_rate": rate, "roi": roi, "source": "oracle"}))
    (run / "trajectory.csv").write_text("day,spend\n0,1.0\n")
    if mtime is not None:
        for p in run.iterdir():
            os.utime(p, (mtime, mtime))
    return run


@pytest.mark.parametrize(
    "n_bytes, text",
    [(0, "0 bytes"), (1023, "1023 bytes"), (1024, "1.00 KB"), (1536, "1.50 KB"), (5 * 1024**2, "5.00 MB"), (3 * 1024**4, "3072.00 GB")],
)
def test_human_size(n_bytes, text):
    assert human_size(n_bytes) == text


def test_list_runs_newest_first(tmp_path):
    make_run(tmp_path, "run_old", rate=0.04, mtime=1_000_000)
    make_run(tmp_path, "run_new", rate=0.06, roi=None, mtime=2_000_000)
    (tmp_path / "notes").mkdir()
    runs = list_runs(tmp_path)
    assert list(runs.columns) == ARCHIVE_COLUMNS
    assert list(runs["run"]) == ["run_new", "run_old"]
    assert list(runs["files"]) == [2, 2]
    assert runs.loc[1, "subsidy_rate"] == 0.04
    assert pd.isna(runs.loc[0, "roi"])


def test_report_in_root_itself(tmp_path):
    (tmp_path / "report.json").write_text(json.dumps({"source": "model"}))
    runs = list_runs(tmp_path)
    assert list(runs["run"]) == ["."]
    assert run_files(tmp_path, ".") == [tmp_path.resolve() / "report.json"]
    with pytest.raises(ConfigError):
        delete_run(tmp_path, ".")


def test_unreadable_report(tmp_path):
    run = tmp_path / "run_bad"
    run.mkdir()
    (run / "report.json").write_text("{")
    runs = list_runs(tmp_path)
    assert pd.isna(runs.loc[0, "source"])


def test_empty_and_missing(tmp_path):
    assert list_runs(tmp_path).empty
    with pytest.raises(ConfigError):
        list_runs(tmp_path / "nope")


def test_run_path_guards(tmp_path):
    make_run(tmp_path / "reports", "run_a")
    make_run(tmp_path, "outside")
    with pytest.raises(ConfigError):
        run_path(tmp_path / "reports", "../outside")
    with pytest.raises(ConfigError):
        run_path(tmp_path / "reports", "run_b")


def test_delete_run(tmp_path):
    make_run(tmp_path, "run_a")
    make_run(tmp_path, "run_b")
    delete_run(tmp_path, "run_a")
    assert not (tmp_path / "run_a").exists()
    assert list(list_runs(tmp_path)["run"]) == ["run_b"]
