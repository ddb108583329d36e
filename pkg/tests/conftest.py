"""Shared fixtures: a full CLI pipeline run on the default synthetic corpus.

The run is expensive (a few minutes on one core) so it happens at most once
per session and only when a test asks for it.
"""

import json
import os
import time

import pytest

from geoalign.cli import main

ACCEPTANCE_LINES = []


def run_pipeline(root, seed: int = 0, n: int = 640) -> dict:
    """synth -> filter -> hardneg -> train I -> eval -> train II -> eval, via the CLI."""
    p = {k: os.path.join(root, k) for k in ("raw", "filtered", "data", "s1", "s2", "e1", "e2")}
    s = str(seed)
    steps = [
        ["synth", "--n", str(n), "--seed", s, "--out", p["raw"]],
        ["filter", "--in", p["raw"], "--out", p["filtered"]],
        ["hardneg", "--in", p["filtered"], "--out", p["data"], "--q", "4", "--seed", s],
        ["train", "--stage", "StageI", "--preset", "toy", "--data", p["data"], "--seed", s, "--out", p["s1"]],
        ["eval", "--ckpt", os.path.join(p["s1"], "checkpoint.gacp"), "--data", p["data"], "--out", p["e1"]],
        ["train", "--stage", "StageII", "--preset", "toy", "--data", p["data"], "--seed", s,
         "--init", os.path.join(p["s1"], "checkpoint.gacp"), "--out", p["s2"]],
        ["eval", "--ckpt", os.path.join(p["s2"], "checkpoint.gacp"), "--data", p["data"], "--out", p["e2"]],
    ]
    t0 = time.perf_counter()
    for argv in steps:
        rc = main(argv)
        assert rc == 0, f"{argv[0]} exited {rc}"
    p["seconds"] = time.perf_counter() - t0
    with open(os.path.join(p["e1"], "eval.json")) as fh:
        p["eval1"] = json.load(fh)
    with open(os.path.join(p["e2"], "eval.json")) as fh:
        p["eval2"] = json.load(fh)
    return p


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    return run_pipeline(str(tmp_path_factory.mktemp("pipeline_a")))


@pytest.fixture
def acceptance():
    """``record(number, title, checks, detail)`` logs one PASS/FAIL line and returns the verdict."""

    def record(number: int, title: str, checks: dict, detail: str = "") -> bool:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" | {detail}"
        if failed:
            line += f" | failed: {', '.join(failed)}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
