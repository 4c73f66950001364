import runpy
from pathlib import Path

import pytest

DEMOS = sorted((Path(__file__).resolve().parents[1] / "demos").glob("*.py"))


@pytest.mark.parametrize("path", DEMOS, ids=[p.stem for p in DEMOS])
def test_demo_runs(path, monkeypatch, capsys):
    monkeypatch.setenv("DEMO_EPISODES", "1")
    monkeypatch.setenv("DEMO_EVAL_EPISODES", "1")
    runpy.run_path(str(path), run_name="__main__")
    assert capsys.readouterr().out
